"""Token segregation: reference calibration, anomaly scoring, selection.

Each patch-token position t keeps a clean reference distribution q_t (the
mean over clean images of the temperature-softmax of the token embedding).
A token's anomaly score is sqrt(JSD) between its own softmax image and
q_t; a threshold tau calibrated on held-out clean scores fixes the target
false-alarm rate. The CLS token is never scored and never transformed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import strv
from .divergence import SQRT_LN2, check_simplex_rows, jsd_score_rows, softmax_rows
from .errors import FormatError, ProfileError, ValidationError
from .model import ModelWeights, TokenSequence, advance_tokens, tokenize


@dataclass(frozen=True)
class ReferenceProfile:
    q: np.ndarray  # (N, d) float64, rows on the simplex
    tau: float | None
    temperature: float
    layer: int
    alpha: float
    calibration_count: int
    model_checksum: int
    # Calibration-pool summaries consumed elsewhere: the adaptive-attack
    # score cap and the default L2 radius for the projection transform.
    max_calibration_score: float | None = None
    median_token_norm: float | None = None

    def validate(self) -> None:
        check_simplex_rows(self.q, "q")
        if self.tau is not None and not (0.0 <= self.tau <= SQRT_LN2 + 1e-9):
            raise ValidationError(f"tau must lie in [0, sqrt(ln 2)], got {self.tau}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must be in (0, 1)")
        if self.calibration_count < 1:
            raise ValidationError("calibration_count must be >= 1")


def _tokens_at_layer(image, model: ModelWeights, layer: int) -> TokenSequence:
    return advance_tokens(tokenize(image, model), model, layer)


def calibrate_reference(
    clean_images,
    model: ModelWeights,
    temperature: float = 1.0,
    layer: int = 0,
    alpha: float = 0.05,
) -> ReferenceProfile:
    """Average per-position softmax distributions over a clean image set.

    Returns a profile with q calibrated and tau unset; the pool summaries
    (median token norm, max score) are filled in by calibrate_threshold.
    """
    images = list(clean_images)
    if not images:
        raise ValidationError("calibration needs at least one clean image")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    cfg = model.config
    total = np.zeros((cfg.num_tokens, cfg.embed_dim), dtype=np.float64)
    for image in images:
        seq = _tokens_at_layer(image, model, layer)
        total += softmax_rows(seq.tokens, temperature)
    q = total / len(images)
    q /= q.sum(axis=1, keepdims=True)  # kill accumulated rounding drift
    return ReferenceProfile(
        q=q,
        tau=None,
        temperature=float(temperature),
        layer=int(layer),
        alpha=float(alpha),
        calibration_count=len(images),
        model_checksum=model.fingerprint(),
    )


def ordered_quantile_rank(n: int, alpha: float) -> int:
    """1-based rank of the empirical (1-alpha)-quantile: ceil((1-alpha)*n).

    The product is nudged down by a relative 1e-9 before the ceiling so an
    IEEE result one ulp above the exact integer does not overshoot the rank.
    """
    x = (1.0 - alpha) * n
    return max(1, min(n, math.ceil(x - 1e-9 * max(1.0, abs(x)))))


def threshold_from_scores(scores, alpha: float) -> float:
    """tau = the ceil((1-alpha)*n)-th smallest of n pooled scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValidationError("cannot calibrate a threshold from zero scores")
    if not (0.0 < alpha < 1.0):
        raise ValidationError("alpha must be in (0, 1)")
    rank = ordered_quantile_rank(s.size, alpha)
    return float(np.partition(s, rank - 1)[rank - 1])


def calibrate_threshold(
    profile: ReferenceProfile,
    clean_images,
    model: ModelWeights,
    alpha: float | None = None,
) -> ReferenceProfile:
    """Set tau to the empirical (1-alpha)-quantile of pooled clean scores.

    All per-token scores over the held-out images are pooled (M*N values)
    and tau is the ceil((1-alpha)*M*N)-th smallest, so the flag rate on the
    pool is at most alpha by construction.
    """
    alpha = profile.alpha if alpha is None else float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ValidationError("alpha must be in (0, 1)")
    images = list(clean_images)
    if not images:
        raise ValidationError("threshold calibration needs at least one image")
    pooled = []
    norms = []
    for image in images:
        seq = _tokens_at_layer(image, model, profile.layer)
        pooled.append(score_tokens(seq, profile))
        norms.append(np.linalg.norm(seq.tokens.astype(np.float64), axis=1))
    scores = np.concatenate(pooled)
    tau = threshold_from_scores(scores, alpha)
    return replace(
        profile,
        tau=tau,
        alpha=alpha,
        max_calibration_score=float(scores.max()),
        median_token_norm=float(np.median(np.concatenate(norms))),
    )


def score_tokens(seq: TokenSequence, profile: ReferenceProfile) -> np.ndarray:
    """sqrt(JSD) anomaly score per patch token: one O(N*d) pass."""
    if seq.layer_index != profile.layer:
        raise ValidationError(
            f"sequence at layer {seq.layer_index}, profile calibrated at layer {profile.layer}"
        )
    if seq.tokens.shape != profile.q.shape:
        raise ValidationError(
            f"token matrix {seq.tokens.shape} does not match profile {profile.q.shape}"
        )
    p = softmax_rows(seq.tokens, profile.temperature)
    return jsd_score_rows(p, profile.q, validate=False)


def select_anomalous(scores, tau: float, k: int, k_max: int) -> list[int]:
    """Flag tokens above tau, then enforce the minimum/maximum count.

    The above-threshold set is extended with the next-highest scorers up to
    k elements, or truncated to the k_max highest. Ties break toward the
    lower token index; the result is ordered by descending score.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValidationError("scores must be a vector")
    n = s.size
    if not (0 <= k <= k_max <= n):
        raise ValidationError(f"need 0 <= K ({k}) <= K_max ({k_max}) <= N ({n})")
    order = np.lexsort((np.arange(n), -s))  # descending score, low index first
    above = int((s > tau).sum())
    take = min(max(above, k), k_max)
    return [int(i) for i in order[:take]]


PROFILE_KIND = "reference_profile"


def save_profile(path, profile: ReferenceProfile) -> None:
    profile.validate()
    if profile.tau is None:
        raise ValidationError("profile has no calibrated threshold to save")
    meta = {
        "kind": PROFILE_KIND,
        "alpha": profile.alpha,
        "layer": profile.layer,
        "calibration_count": profile.calibration_count,
        "model_checksum": profile.model_checksum,
    }
    if profile.max_calibration_score is not None:
        meta["max_calibration_score"] = profile.max_calibration_score
    if profile.median_token_norm is not None:
        meta["median_token_norm"] = profile.median_token_norm
    tensors = {
        "q": profile.q.astype(np.float32),
        "tau": np.array([profile.tau], dtype=np.float32),
        "temperature": np.array([profile.temperature], dtype=np.float32),
    }
    strv.write(path, tensors, meta)


def load_profile(path, model: ModelWeights | None = None) -> ReferenceProfile:
    """Read a profile container; verifies the model checksum when given."""
    tensors, meta = strv.read(path)
    for name in ("q", "tau", "temperature"):
        if name not in tensors:
            raise FormatError(f"profile container missing tensor {name}")
    # rows were exact in float64 but live as float32 on disk; undo the
    # storage rounding before the strict simplex check
    q_raw = tensors["q"].astype(np.float64)
    sums = q_raw.sum(axis=1, keepdims=True)
    if np.any(q_raw < -1e-7) or np.any(np.abs(sums - 1.0) > 1e-4):
        raise FormatError("profile q rows are not storage-rounded probability vectors")
    q_raw = np.clip(q_raw, 0.0, None) / np.clip(q_raw, 0.0, None).sum(axis=1, keepdims=True)
    try:
        profile = ReferenceProfile(
            q=check_simplex_rows(q_raw, "q"),
            tau=float(tensors["tau"][0]),
            temperature=float(tensors["temperature"][0]),
            layer=int(meta["layer"]),
            alpha=float(meta["alpha"]),
            calibration_count=int(meta["calibration_count"]),
            model_checksum=int(meta["model_checksum"]),
            max_calibration_score=(
                float(meta["max_calibration_score"]) if "max_calibration_score" in meta else None
            ),
            median_token_norm=(
                float(meta["median_token_norm"]) if "median_token_norm" in meta else None
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"profile metadata malformed: {exc}") from exc
    profile.validate()
    if model is not None and profile.model_checksum != model.fingerprint():
        raise ProfileError(
            "profile was calibrated against a different model "
            f"(checksum {profile.model_checksum} != {model.fingerprint()})"
        )
    return profile


def clean_flag_rate(images, model: ModelWeights, profile: ReferenceProfile) -> float:
    """Fraction of clean tokens scoring above tau, pooled over images."""
    if profile.tau is None:
        raise ValidationError("profile has no calibrated threshold")
    flags = 0
    total = 0
    for image in images:
        seq = _tokens_at_layer(image, model, profile.layer)
        s = score_tokens(seq, profile)
        flags += int((s > profile.tau).sum())
        total += s.size
    if total == 0:
        raise ValidationError("no images given")
    return flags / total
