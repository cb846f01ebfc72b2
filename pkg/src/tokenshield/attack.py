"""Desk-scale adversarial patch generation and placement.

The patch is optimized against the expectation over random (image,
placement) draws of a classification objective, using a gradient-free
SPSA sign-ascent: both probes of a two-point simultaneous-perturbation
estimate are evaluated on the same draws, and the iterate moves along
sign(gradient estimate) with projection back into [0,1]. Placement uses
axis-aligned square masks, nearest-neighbor resize, and rotations by
multiples of 90 degrees so masks stay exactly binary and runs are
bit-reproducible.

The adaptive variant additionally rejects any step whose patch-overlapping
tokens exceed a sqrt(JSD) score cap, retrying with a halved step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import strv
from .detector import ReferenceProfile, score_tokens
from .errors import (
    ConstraintError,
    FormatError,
    NumericError,
    PlacementError,
    ValidationError,
)
from .model import ModelConfig, ModelWeights, advance_tokens, forward_from_tokens, tokenize
from .rng import PURPOSE_ATTACK, PURPOSE_MONITOR, Stream, derive_key

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class Placement:
    """One square patch footprint: top-left corner, side length in pixels
    after scaling, and a rotation from ROTATIONS."""

    row: int
    col: int
    size: int
    rotation: int = 0
    scale: float = 1.0

    def validate(self) -> None:
        if self.size < 1:
            raise PlacementError("placement size must be >= 1")
        if self.rotation not in ROTATIONS:
            raise PlacementError(f"rotation must be one of {ROTATIONS}")
        if self.row < 0 or self.col < 0:
            raise PlacementError("placement corner must be non-negative")

    def overlaps(self, other: "Placement") -> bool:
        return not (
            self.row + self.size <= other.row
            or other.row + other.size <= self.row
            or self.col + self.size <= other.col
            or other.col + other.size <= self.col
        )


@dataclass(frozen=True)
class PatchSpec:
    """Patch pixel block in [0,1] plus how many copies are placed at once."""

    pixels: np.ndarray  # (3, k, k) float32
    count: int = 1

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    def validate(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[0] != 3 or px.shape[1] != px.shape[2]:
            raise ValidationError(f"patch pixels must be (3, k, k), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValidationError("patch pixels must lie in [0, 1]")
        if self.count < 1:
            raise ValidationError("patch count must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for the SPSA ascent. target_label None means untargeted
    (ascend negative true-class log-probability)."""

    steps: int
    step_size: float = 0.05
    eot_samples: int = 16
    perturbation_scale: float = 0.1
    target_label: int | None = None
    jsd_cap: float | None = None
    cap_retries: int = 8

    def validate(self) -> None:
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.eot_samples < 1:
            raise ValidationError("eot_samples must be >= 1")
        if self.step_size <= 0 or self.perturbation_scale <= 0:
            raise ValidationError("step_size and perturbation_scale must be positive")
        if self.jsd_cap is not None and self.jsd_cap < 0:
            raise ValidationError("jsd_cap must be non-negative")


def _nearest_resize(pixels: np.ndarray, out_size: int) -> np.ndarray:
    k = pixels.shape[-1]
    if out_size == k:
        return pixels
    idx = (np.arange(out_size) * k) // out_size
    return pixels[:, idx][:, :, idx]


def render_patch(patch: PatchSpec, placement: Placement) -> np.ndarray:
    """Pixel block actually painted for a placement: resize then rotate."""
    block = _nearest_resize(patch.pixels, placement.size)
    return np.rot90(block, placement.rotation // 90, axes=(1, 2))


def place_patch(image, patch: PatchSpec, placements: list[Placement]) -> np.ndarray:
    """Paste the patch at each placement; pixels outside the masks are
    bit-identical to the input. Placements must be in-bounds and disjoint."""
    patch.validate()
    img = np.array(image, dtype=np.float32, copy=True)
    if img.ndim != 3:
        raise ValidationError("image must be (C, H, W)")
    height, width = img.shape[1], img.shape[2]
    for i, pl in enumerate(placements):
        pl.validate()
        if pl.row + pl.size > height or pl.col + pl.size > width:
            raise PlacementError(
                f"placement {i} at ({pl.row}, {pl.col}) size {pl.size} leaves the {height}x{width} image"
            )
        for j, other in enumerate(placements[:i]):
            if pl.overlaps(other):
                raise PlacementError(f"placements {j} and {i} overlap")
    for pl in placements:
        img[:, pl.row : pl.row + pl.size, pl.col : pl.col + pl.size] = render_patch(patch, pl)
    return img


def sample_placement(
    stream: Stream,
    image_size: int,
    patch_size: int,
    count: int = 1,
    scale: float = 1.0,
    max_retries: int = 1000,
) -> list[Placement]:
    """Uniform translations over the valid grid, rotation uniform over the
    four right angles; multi-patch draws are rejection-sampled to
    disjointness within the retry budget."""
    size = max(1, round(patch_size * scale))
    if size > image_size:
        raise PlacementError(f"patch of size {size} cannot fit a {image_size}px image")
    if count < 1:
        raise ValidationError("count must be >= 1")
    span = image_size - size + 1
    for _ in range(max_retries):
        placements = [
            Placement(
                row=stream.randbelow(span),
                col=stream.randbelow(span),
                size=size,
                rotation=ROTATIONS[stream.randbelow(4)],
                scale=scale,
            )
            for _ in range(count)
        ]
        ok = all(
            not placements[i].overlaps(placements[j])
            for i in range(count)
            for j in range(i)
        )
        if ok:
            return placements
    raise PlacementError(f"could not place {count} disjoint {size}px patches in {max_retries} tries")


def tokens_overlapping(placements: list[Placement], config: ModelConfig) -> list[int]:
    """Token indices whose grid cell intersects any placement footprint."""
    cell = config.patch_size
    grid = config.grid
    hit: set[int] = set()
    for pl in placements:
        r0, r1 = pl.row // cell, (pl.row + pl.size - 1) // cell
        c0, c1 = pl.col // cell, (pl.col + pl.size - 1) // cell
        for gr in range(r0, min(r1, grid - 1) + 1):
            for gc in range(c0, min(c1, grid - 1) + 1):
                hit.add(gr * grid + gc)
    return sorted(hit)


@dataclass
class AttackResult:
    patch: PatchSpec
    objective: float
    initial_objective: float
    steps_taken: int
    rejected_steps: int = 0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    ll = np.asarray(logits, dtype=np.float64)
    ll = ll - ll.max()
    return ll - math.log(np.exp(ll).sum())


class _EotObjective:
    """EOT objective estimator over fixed (image, placement) draws."""

    def __init__(self, model: ModelWeights, images: list[np.ndarray], labels: list[int], cfg: AttackConfig):
        self.model = model
        self.images = images
        self.labels = labels
        self.cfg = cfg

    def draw(self, stream: Stream, patch_size: int, count: int, scale: float) -> tuple[int, list[Placement]]:
        i = stream.randbelow(len(self.images))
        pls = sample_placement(stream, self.model.config.image_size, patch_size, count, scale)
        return i, pls

    def value(self, patch: PatchSpec, draws) -> float:
        total = 0.0
        for i, placements in draws:
            x = place_patch(self.images[i], patch, placements)
            logits = forward_from_tokens(tokenize(x, self.model), self.model)
            logp = _log_softmax(logits)
            if self.cfg.target_label is not None:
                term = logp[self.cfg.target_label]
            else:
                term = -logp[self.labels[i]]
            if not math.isfinite(term):
                raise NumericError("attack objective is non-finite")
            total += float(term)
        return total / len(draws)


def _max_overlap_score(
    patch: PatchSpec,
    draws,
    images: list[np.ndarray],
    model: ModelWeights,
    profile: ReferenceProfile,
) -> float:
    worst = 0.0
    for i, placements in draws:
        x = place_patch(images[i], patch, placements)
        seq = advance_tokens(tokenize(x, model), model, profile.layer)
        scores = score_tokens(seq, profile)
        overlap = tokens_overlapping(placements, model.config)
        if overlap:
            worst = max(worst, float(scores[overlap].max()))
    return worst


def optimize_patch(
    model: ModelWeights,
    images: list,
    labels: list[int],
    cfg: AttackConfig,
    seed: int,
    patch_size: int,
    count: int = 1,
    scale: float = 1.0,
    profile: ReferenceProfile | None = None,
) -> AttackResult:
    """SPSA sign-ascent on the EOT objective from a mid-gray start.

    Per step, one Rademacher direction perturbs every patch pixel; the two
    probe evaluations share the step's draws. Iterates are tracked on a
    fixed monitor draw set sampled up front, and the best-scoring iterate
    (the start included) is returned. When cfg.jsd_cap is set, a profile is
    required and steps whose patch-overlapping tokens score above the cap
    are rejected, retrying with halved steps up to cfg.cap_retries times.
    """
    cfg.validate()
    if not images:
        raise ValidationError("attack needs at least one image")
    if cfg.target_label is None and len(labels) != len(images):
        raise ValidationError("untargeted attack needs one label per image")
    if cfg.jsd_cap is not None and profile is None:
        raise ValidationError("score-capped attack needs a calibrated profile")
    images = [np.asarray(im, dtype=np.float32) for im in images]

    objective = _EotObjective(model, images, list(labels), cfg)
    attack_rng = Stream(derive_key(seed, PURPOSE_ATTACK))
    monitor_rng = Stream(derive_key(seed, PURPOSE_MONITOR))
    monitor_draws = [
        objective.draw(monitor_rng, patch_size, count, scale) for _ in range(cfg.eot_samples)
    ]

    patch = PatchSpec(np.full((3, patch_size, patch_size), 0.5, dtype=np.float32), count=count)
    if cfg.jsd_cap is not None:
        start_worst = _max_overlap_score(patch, monitor_draws, images, model, profile)
        if start_worst > cfg.jsd_cap:
            raise ConstraintError(
                f"initial patch already scores {start_worst:.4f} > cap {cfg.jsd_cap:.4f}"
            )

    best = patch
    best_obj = initial_obj = objective.value(patch, monitor_draws)
    rejected = 0

    for _ in range(cfg.steps):
        draws = [objective.draw(attack_rng, patch_size, count, scale) for _ in range(cfg.eot_samples)]
        delta = attack_rng.rademacher(patch.pixels.size).reshape(patch.pixels.shape)
        c = cfg.perturbation_scale
        plus = np.clip(patch.pixels + c * delta, 0.0, 1.0).astype(np.float32)
        minus = np.clip(patch.pixels - c * delta, 0.0, 1.0).astype(np.float32)
        gap = objective.value(PatchSpec(plus, count), draws) - objective.value(
            PatchSpec(minus, count), draws
        )
        direction = float(np.sign(gap))
        if direction != 0.0:
            step = cfg.step_size
            accepted = None
            for _retry in range(cfg.cap_retries + 1):
                cand_px = np.clip(
                    patch.pixels + step * direction * delta, 0.0, 1.0
                ).astype(np.float32)
                candidate = PatchSpec(cand_px, count)
                if cfg.jsd_cap is None or (
                    _max_overlap_score(candidate, draws, images, model, profile) <= cfg.jsd_cap
                ):
                    accepted = candidate
                    break
                step *= 0.5
            if accepted is not None:
                patch = accepted
            else:
                rejected += 1
        obj = objective.value(patch, monitor_draws)
        if obj > best_obj:
            best, best_obj = patch, obj

    return AttackResult(
        patch=best,
        objective=best_obj,
        initial_objective=initial_obj,
        steps_taken=cfg.steps,
        rejected_steps=rejected,
    )


def optimize_patch_adaptive(
    model: ModelWeights,
    images: list,
    labels: list[int],
    cfg: AttackConfig,
    profile: ReferenceProfile,
    seed: int,
    patch_size: int,
    count: int = 1,
    scale: float = 1.0,
) -> AttackResult:
    """Score-capped ascent: cfg.jsd_cap falls back to the profile's maximum
    clean calibration score when unset."""
    cap = cfg.jsd_cap
    if cap is None:
        if profile.max_calibration_score is None:
            raise ValidationError("profile records no calibration score cap")
        cap = profile.max_calibration_score
    capped = AttackConfig(
        steps=cfg.steps,
        step_size=cfg.step_size,
        eot_samples=cfg.eot_samples,
        perturbation_scale=cfg.perturbation_scale,
        target_label=cfg.target_label,
        jsd_cap=cap,
        cap_retries=cfg.cap_retries,
    )
    return optimize_patch(
        model, images, labels, capped, seed, patch_size, count=count, scale=scale, profile=profile
    )


PATCH_KIND = "adversarial_patch"


def save_patch(path, result_or_patch, metadata: dict | None = None) -> None:
    patch = result_or_patch.patch if isinstance(result_or_patch, AttackResult) else result_or_patch
    patch.validate()
    meta = {"kind": PATCH_KIND, "count": patch.count}
    meta.update(metadata or {})
    strv.write(path, {"patch": patch.pixels}, meta)


def load_patch(path) -> tuple[PatchSpec, dict]:
    tensors, meta = strv.read(path)
    if "patch" not in tensors:
        raise FormatError("patch container missing the patch tensor")
    patch = PatchSpec(tensors["patch"], count=int(meta.get("count", 1)))
    patch.validate()
    return patch, meta
