"""Information-theoretic primitives: temperature softmax, Shannon entropy,
KL divergence, Jensen-Shannon divergence and its square-root score.

All divergences use natural logarithms, so JSD lives in [0, ln 2] and the
score in [0, sqrt(ln 2)]. Arithmetic is float64 throughout regardless of
input dtype; 0*ln(0) is handled by explicit masking, never by relying on
floating-point conventions.

Scalar entry points take one distribution per call. The *_rows variants
operate on (n, d) stacks and are the production path for per-token scoring;
they compute the same quantities row-wise.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ValidationError

LN2 = math.log(2.0)
SQRT_LN2 = math.sqrt(math.log(2.0))

# Simplex membership tolerances: sums may drift by accumulated rounding,
# entries only by sign-flip noise.
SUM_TOL = 1e-9
ENTRY_TOL = -1e-12

# Rounding absorbed when clamping JSD into [0, ln 2].
_CLAMP_TOL = 1e-12


def _as_rows(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be a vector or a stack of vectors")
    return arr


def check_simplex_rows(values, name: str = "p") -> np.ndarray:
    """Validate rows as probability vectors and renormalize rounding drift.

    Rows whose entries are >= -1e-12 and whose sums are within 1e-9 of 1 are
    accepted: negatives are zeroed and the row rescaled to sum exactly to 1.
    Anything further off is rejected.
    """
    p = _as_rows(values, name)
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} contains non-finite entries")
    if np.any(p < ENTRY_TOL):
        raise ValidationError(f"{name} has negative entries beyond tolerance")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > SUM_TOL):
        raise ValidationError(f"{name} rows do not sum to 1 within tolerance")
    p = np.where(p < 0.0, 0.0, p)
    return p / p.sum(axis=1, keepdims=True)


def softmax_rows(z, temperature: float) -> np.ndarray:
    """Row-wise softmax(z / T), stabilized by subtracting each row max.

    The max is subtracted before the division so that exactly-representable
    constant shifts of z cancel bit-for-bit.
    """
    if not (isinstance(temperature, (int, float)) and math.isfinite(temperature)) or temperature <= 0:
        raise ValidationError("temperature must be a positive finite real")
    zz = _as_rows(z, "z")
    if not np.all(np.isfinite(zz)):
        raise ValidationError("z contains non-finite entries")
    shifted = zz - zz.max(axis=1, keepdims=True)
    e = np.exp(shifted / float(temperature))
    return e / e.sum(axis=1, keepdims=True)


def softmax_temp(z, temperature: float) -> np.ndarray:
    """Map one embedding onto the probability simplex via softmax(z / T)."""
    return softmax_rows(np.asarray(z, dtype=np.float64)[np.newaxis, :], temperature)[0]


def entropy_rows(p, validate: bool = True) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with 0*ln(0) := 0."""
    pp = check_simplex_rows(p) if validate else _as_rows(p, "p")
    # explicit zero branch: masked entries never reach log at all
    safe = np.where(pp > 0.0, pp, 1.0)
    plogp = np.where(pp > 0.0, pp * np.log(safe), 0.0)
    return -plogp.sum(axis=1)


def shannon_entropy(p) -> float:
    """Shannon entropy H(p) in nats; 0 <= H(p) <= ln(d)."""
    return float(entropy_rows(np.asarray(p, dtype=np.float64)[np.newaxis, :])[0])


def kl_rows(p, q, validate: bool = True) -> np.ndarray:
    """Row-wise KL(p || q) in nats.

    Terms with p_i = 0 contribute nothing; a row with p_i > 0 where q_i = 0
    yields +inf.
    """
    if validate:
        pp = check_simplex_rows(p, "p")
        qq = check_simplex_rows(q, "q")
    else:
        pp, qq = _as_rows(p, "p"), _as_rows(q, "q")
    if pp.shape != qq.shape:
        raise ValidationError("p and q must have matching shapes")
    out = np.zeros(pp.shape[0], dtype=np.float64)
    support = pp > 0.0
    disjoint = support & (qq <= 0.0)
    bad = disjoint.any(axis=1)
    out[bad] = np.inf
    ok = ~bad
    if ok.any():
        terms = np.zeros_like(pp[ok])
        m = support[ok]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(m, pp[ok] / np.where(qq[ok] > 0, qq[ok], 1.0), 1.0)
        terms[m] = pp[ok][m] * np.log(ratio[m])
        out[ok] = terms.sum(axis=1)
    return out


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p puts mass where q has none."""
    return float(
        kl_rows(
            np.asarray(p, dtype=np.float64)[np.newaxis, :],
            np.asarray(q, dtype=np.float64)[np.newaxis, :],
        )[0]
    )


def jsd_rows(p, q, validate: bool = True) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence via the entropy form.

    JSD(p, q) = H((p+q)/2) - H(p)/2 - H(q)/2, clamped into [0, ln 2] to
    absorb rounding of at most 1e-12.
    """
    if validate:
        pp = check_simplex_rows(p, "p")
        qq = check_simplex_rows(q, "q")
    else:
        pp, qq = _as_rows(p, "p"), _as_rows(q, "q")
    if pp.shape != qq.shape:
        raise ValidationError("p and q must have matching shapes")
    mid = 0.5 * (pp + qq)
    val = (
        entropy_rows(mid, validate=False)
        - 0.5 * entropy_rows(pp, validate=False)
        - 0.5 * entropy_rows(qq, validate=False)
    )
    if np.any(val < -_CLAMP_TOL) or np.any(val > LN2 + _CLAMP_TOL):
        raise NumericError("jsd left [0, ln 2] by more than rounding tolerance")
    return np.clip(val, 0.0, LN2)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats, in [0, ln 2]."""
    return float(
        jsd_rows(
            np.asarray(p, dtype=np.float64)[np.newaxis, :],
            np.asarray(q, dtype=np.float64)[np.newaxis, :],
        )[0]
    )


def jsd_score_rows(p, q, validate: bool = True) -> np.ndarray:
    """Row-wise sqrt(JSD), the anomaly score; a metric on distributions."""
    return np.sqrt(jsd_rows(p, q, validate=validate))


def jsd_score(p, q) -> float:
    """sqrt(JSD(p, q)), in [0, sqrt(ln 2)]."""
    return math.sqrt(jsd(p, q))
