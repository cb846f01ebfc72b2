"""Defended inference: score tokens, select the anomalous set, transform it,
and finish the forward pass.

The per-token transform streams are keyed by (seed, image index, token
index), so the flagged set and the final logits are reproducible across
runs, evaluation orders, and thread counts. With the defense disabled the
output is bit-identical to the undefended path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attack import Placement
from .detector import ReferenceProfile, score_tokens, select_anomalous
from .errors import ConfigError, ProfileError, ValidationError
from .model import (
    ModelConfig,
    ModelWeights,
    Prediction,
    advance_tokens,
    forward_from_tokens,
    prediction_from_logits,
    tokenize,
    TokenSequence,
)
from .rng import token_stream
from .transforms import TransformPlan, TransformPriors, apply_composite, sample_transform_plan

AUTO_MEDIAN = "auto_median"


@dataclass(frozen=True)
class DefenseConfig:
    """Defense hyper-parameters; K and K_max default from the token count.

    radius may be the string "auto_median", resolved at use time from the
    profile's recorded median clean-token norm.
    """

    k: int | None = None
    k_max: int | None = None
    alpha: float = 0.05
    temperature: float = 1.0
    layer: int = 0
    radius: float | str = AUTO_MEDIAN
    norm_order: float = 2
    gamma: float = 0.5
    b_scale: float = 0.0
    softmax_temperature: float = 1.0
    seed: int = 0
    enabled: bool = True

    def resolved_k(self, num_tokens: int) -> tuple[int, int]:
        """(K, K_max) with defaults K = max(2, 1% of tokens), K_max = 2K."""
        k = self.k if self.k is not None else max(2, round(0.01 * num_tokens))
        k_max = self.k_max if self.k_max is not None else max(k, 2 * k)
        if not (0 <= k <= k_max <= num_tokens):
            raise ConfigError(f"need 0 <= K ({k}) <= K_max ({k_max}) <= N ({num_tokens})")
        return k, k_max

    def priors(self, profile: ReferenceProfile | None = None) -> TransformPriors:
        radius = self.radius
        if radius == AUTO_MEDIAN:
            if profile is None or profile.median_token_norm is None:
                raise ConfigError(
                    "radius 'auto_median' needs a profile with a recorded median token norm"
                )
            radius = profile.median_token_norm
        norm_order = math.inf if self.norm_order in ("inf", math.inf) else self.norm_order
        priors = TransformPriors(
            radius=float(radius),
            norm_order=norm_order,
            gamma=self.gamma,
            b_scale=self.b_scale,
            softmax_temperature=self.softmax_temperature,
        )
        priors.validate()
        return priors

    def check_against_profile(self, profile: ReferenceProfile) -> None:
        if abs(self.temperature - profile.temperature) > 1e-9:
            raise ConfigError(
                f"config temperature {self.temperature} != profile temperature {profile.temperature}"
            )
        if self.layer != profile.layer:
            raise ConfigError(f"config layer {self.layer} != profile layer {profile.layer}")


def config_from_json(text: str) -> DefenseConfig:
    """Parse the defense config JSON document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    priors = raw.get("priors", {})
    if not isinstance(priors, dict):
        raise ConfigError("config priors must be a JSON object")
    known = {"K", "K_max", "alpha", "temperature", "layer", "priors", "seed", "enabled"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    norm_order = priors.get("norm_order", 2)
    if norm_order == "inf":
        norm_order = math.inf
    try:
        return DefenseConfig(
            k=int(raw["K"]) if "K" in raw else None,
            k_max=int(raw["K_max"]) if "K_max" in raw else None,
            alpha=float(raw.get("alpha", 0.05)),
            temperature=float(raw.get("temperature", 1.0)),
            layer=int(raw.get("layer", 0)),
            radius=(
                priors.get("r", AUTO_MEDIAN)
                if priors.get("r", AUTO_MEDIAN) == AUTO_MEDIAN
                else float(priors["r"])
            ),
            norm_order=norm_order,
            gamma=float(priors.get("gamma", 0.5)),
            b_scale=float(priors.get("b_scale", 0.0)),
            softmax_temperature=float(priors.get("softmax_T", 1.0)),
            seed=int(raw.get("seed", 0)),
            enabled=bool(raw.get("enabled", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def config_to_json(config: DefenseConfig) -> str:
    doc = {
        "K": config.k,
        "K_max": config.k_max,
        "alpha": config.alpha,
        "temperature": config.temperature,
        "layer": config.layer,
        "priors": {
            "r": config.radius,
            "norm_order": "inf" if config.norm_order == math.inf else config.norm_order,
            "gamma": config.gamma,
            "b_scale": config.b_scale,
            "softmax_T": config.softmax_temperature,
        },
        "seed": config.seed,
        "enabled": config.enabled,
    }
    doc = {k: v for k, v in doc.items() if v is not None}
    return json.dumps(doc, indent=2, sort_keys=True)


@dataclass
class DefenseDiagnostics:
    scores: np.ndarray
    flagged: list[int]
    plans: dict[int, TransformPlan] = field(default_factory=dict)
    tokens_before: np.ndarray | None = None
    tokens_after: np.ndarray | None = None


def defend_predict(
    image,
    model: ModelWeights,
    profile: ReferenceProfile,
    config: DefenseConfig,
    image_index: int = 0,
) -> tuple[Prediction, DefenseDiagnostics]:
    """Run the full defended pass on one image.

    tokenize -> advance to the detection layer -> score -> select -> apply a
    sampled composite transform to each flagged token (identity elsewhere)
    -> finish the forward pass. Disabled configs bypass everything after
    tokenization and match the undefended prediction bit for bit.
    """
    if profile.model_checksum != model.fingerprint():
        raise ProfileError("profile was calibrated against a different model")
    if profile.tau is None:
        raise ValidationError("profile has no calibrated threshold")
    if not config.enabled:
        logits = forward_from_tokens(tokenize(image, model), model)
        pred = prediction_from_logits(logits, model.config.num_classes)
        seq = advance_tokens(tokenize(image, model), model, profile.layer)
        scores = score_tokens(seq, profile)
        return pred, DefenseDiagnostics(scores=scores, flagged=[])
    config.check_against_profile(profile)

    seq = advance_tokens(tokenize(image, model), model, profile.layer)
    scores = score_tokens(seq, profile)
    k, k_max = config.resolved_k(model.config.num_tokens)
    flagged = select_anomalous(scores, profile.tau, k, k_max)
    priors = config.priors(profile)

    tokens = seq.tokens.copy()
    plans: dict[int, TransformPlan] = {}
    for t in flagged:
        stream = token_stream(config.seed, image_index, t)
        plan = sample_transform_plan(stream, priors, model.config.embed_dim)
        plans[t] = plan
        tokens[t] = apply_composite(tokens[t].astype(np.float64), plan).astype(np.float32)

    defended = TokenSequence(tokens=tokens, cls=seq.cls, layer_index=seq.layer_index)
    logits = forward_from_tokens(defended, model)
    pred = prediction_from_logits(logits, model.config.num_classes)
    return pred, DefenseDiagnostics(
        scores=scores,
        flagged=flagged,
        plans=plans,
        tokens_before=seq.tokens,
        tokens_after=tokens,
    )


def patch_token_coverage(
    flagged, placements: list[Placement], config: ModelConfig
) -> float:
    """Fraction of total patch-pixel area lying under flagged token cells."""
    total = sum(pl.size * pl.size for pl in placements)
    if total == 0:
        return 0.0
    cell = config.patch_size
    grid = config.grid
    flag_set = set(int(t) for t in flagged)
    covered = 0
    for pl in placements:
        r0, r1 = pl.row // cell, (pl.row + pl.size - 1) // cell
        c0, c1 = pl.col // cell, (pl.col + pl.size - 1) // cell
        for gr in range(r0, min(r1, grid - 1) + 1):
            for gc in range(c0, min(c1, grid - 1) + 1):
                if gr * grid + gc not in flag_set:
                    continue
                rows = min(pl.row + pl.size, (gr + 1) * cell) - max(pl.row, gr * cell)
                cols = min(pl.col + pl.size, (gc + 1) * cell) - max(pl.col, gc * cell)
                covered += rows * cols
    return covered / total
