"""Randomized token transformations applied to flagged tokens.

Three primitives are available: Lp-ball projection (caps channel energy),
a diagonal affine contraction with Lipschitz constant strictly below 1,
and a temperature-softmax mapping onto the probability simplex. For each
flagged token a plan is sampled: a uniformly random non-empty subset of
the three, a uniformly random application order, and parameters drawn
from the configured priors. All randomness lives in plan sampling;
applying a plan is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import softmax_temp
from .errors import ValidationError
from .rng import Stream

PROJECT = 1
CONTRACT = 2
SIMPLEX = 3

_NORM_ORDERS = (1, 2, math.inf)

# L2-ball membership slack: rescaling z by r/||z|| can land one ulp outside
# the ball, so points this close to the surface count as interior. Keeps
# double projection bit-identical to single projection.
_L2_EDGE = 4 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class TransformPriors:
    """Designer-chosen parameter priors for the three transforms.

    radius and norm_order parameterize the projection; gamma bounds the
    contraction's diagonal entries; b_scale is the std of the recentering
    offset; softmax_temperature feeds the simplex transform.
    """

    radius: float
    norm_order: float = 2
    gamma: float = 0.5
    b_scale: float = 0.0
    softmax_temperature: float = 1.0

    def validate(self) -> None:
        if not (isinstance(self.radius, (int, float)) and self.radius > 0 and math.isfinite(self.radius)):
            raise ValidationError("radius must be a positive finite real")
        if self.norm_order not in _NORM_ORDERS:
            raise ValidationError(f"norm_order must be one of 1, 2, inf, got {self.norm_order}")
        if not (0.0 < self.gamma < 1.0):
            raise ValidationError("gamma must lie strictly inside (0, 1)")
        if self.b_scale < 0:
            raise ValidationError("b_scale must be non-negative")
        if self.softmax_temperature <= 0:
            raise ValidationError("softmax temperature must be positive")


@dataclass(frozen=True)
class TransformPlan:
    """A sampled composite: which transforms, in what order, with what
    parameters. `order` lists transform ids in application order."""

    order: tuple[int, ...]
    radius: float
    norm_order: float
    gamma: float
    diag_a: np.ndarray
    offset_b: np.ndarray
    softmax_temperature: float

    def validate(self) -> None:
        if not self.order:
            raise ValidationError("plan must apply at least one transform")
        if sorted(set(self.order)) != sorted(self.order) or not set(self.order) <= {PROJECT, CONTRACT, SIMPLEX}:
            raise ValidationError(f"plan order {self.order} is not a permutation of a subset of {{1,2,3}}")
        if np.max(np.abs(self.diag_a)) > self.gamma:
            raise ValidationError("contraction diagonal exceeds gamma")


def _check_vector(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError("token must be a vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("token has non-finite entries")
    return arr


def project_lp(z, radius: float, norm_order: float = 2) -> np.ndarray:
    """Euclidean projection onto the Lp ball of the given radius.

    p=2 rescales, p=inf clamps coordinatewise, and p=1 soft-thresholds at
    the pivot found by the sorted-partial-sum rule. Interior points are
    returned unchanged.
    """
    if radius <= 0:
        raise ValidationError("projection radius must be positive")
    if norm_order not in _NORM_ORDERS:
        raise ValidationError(f"norm_order must be one of 1, 2, inf, got {norm_order}")
    v = _check_vector(z)
    if norm_order == 2:
        norm = float(np.linalg.norm(v))
        if norm <= radius * (1.0 + _L2_EDGE):
            return v.copy()
        return v * (radius / norm)
    if norm_order == math.inf:
        return np.clip(v, -radius, radius)
    # p = 1: exact soft-thresholding (sorted partial sums locate the pivot)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    cumulative = np.cumsum(u) - radius
    k = np.arange(1, v.size + 1)
    pivot = int(np.max(np.nonzero(u > cumulative / k)[0]))
    theta = cumulative[pivot] / (pivot + 1)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def affine_contract(z, diag_a, offset_b, gamma: float) -> np.ndarray:
    """Elementwise z -> diag(a)*z + b with every |a_i| <= gamma < 1."""
    if not (0.0 < gamma < 1.0):
        raise ValidationError("gamma must lie strictly inside (0, 1)")
    v = _check_vector(z)
    a = np.asarray(diag_a, dtype=np.float64)
    b = np.asarray(offset_b, dtype=np.float64)
    if a.shape != v.shape or b.shape != v.shape:
        raise ValidationError("diag_a and offset_b must match the token dimension")
    if np.max(np.abs(a)) > gamma:
        raise ValidationError("contraction diagonal entry exceeds gamma")
    return a * v + b


def simplex_transform(z, temperature: float) -> np.ndarray:
    """Temperature softmax onto the simplex; tempers channel spikes."""
    return softmax_temp(_check_vector(z), temperature)


def sample_transform_plan(stream: Stream, priors: TransformPriors, dim: int) -> TransformPlan:
    """Draw a composite plan from the priors.

    The subset is uniform over the 7 non-empty subsets of {1,2,3}, the
    order is a uniform permutation (Fisher-Yates over the sorted subset),
    the contraction diagonal is iid Uniform[-gamma, gamma], and the offset
    is iid Normal(0, b_scale^2). Radius, norm order, and softmax
    temperature are taken from the priors as point values.
    """
    priors.validate()
    if dim < 1:
        raise ValidationError("token dimension must be >= 1")
    mask = stream.randbelow(7) + 1
    subset = [t for bit, t in ((1, PROJECT), (2, CONTRACT), (4, SIMPLEX)) if mask & bit]
    order = tuple(stream.shuffled(subset))
    diag_a = stream.uniforms(dim, -priors.gamma, priors.gamma)
    offset_b = stream.normals(dim, std=priors.b_scale) if priors.b_scale > 0 else np.zeros(dim)
    return TransformPlan(
        order=order,
        radius=priors.radius,
        norm_order=priors.norm_order,
        gamma=priors.gamma,
        diag_a=diag_a,
        offset_b=offset_b,
        softmax_temperature=priors.softmax_temperature,
    )


def apply_composite(z, plan: TransformPlan) -> np.ndarray:
    """Apply the plan's transforms in order. Deterministic given the plan."""
    plan.validate()
    v = _check_vector(z)
    for t in plan.order:
        if t == PROJECT:
            v = project_lp(v, plan.radius, plan.norm_order)
        elif t == CONTRACT:
            v = affine_contract(v, plan.diag_a, plan.offset_b, plan.gamma)
        else:
            v = simplex_transform(v, plan.softmax_temperature)
    if not np.all(np.isfinite(v)):
        raise ValidationError("composite transform produced non-finite values")
    return v
