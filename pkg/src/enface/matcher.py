"""Distribution-aware polynomial l2 normalization and encrypted matching.

The inverse square root 1/sqrt(t) is approximated on the calibration
interval by the degree-2 interpolant p(t) through three control points
t = mean + {-1, 0, +1} * std of the squared-norm distribution.  Matching is
Score(y1, y2) = ||y1^ - y2^||^2 compared against a threshold T: the match
value is the encrypted signed scalar Score - T, and the decision (negative
means match; an exact zero is a no-match) is taken client-side after
decryption.

Level ledger: squared norm 1, polynomial 2, normalize-multiply 1, score 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ckks import (
    Ciphertext,
    KeySet,
    encode,
    he_add,
    he_mul,
    he_rotate,
    he_sub,
    mod_switch_to,
)
from .errors import DegenerateInputError, DepthExhaustedError, FingerprintError


@dataclass(frozen=True)
class L2PolyCoeffs:
    beta2: float
    beta1: float
    beta0: float
    control_points: tuple[float, float, float]
    mean: float
    std: float
    fallback: str | None = None  # set when the degenerate-calibration rules fired

    def __call__(self, t):
        return self.beta2 * np.square(t) + self.beta1 * np.asarray(t) + self.beta0

    def to_json(self) -> dict:
        return {
            "beta2": self.beta2, "beta1": self.beta1, "beta0": self.beta0,
            "control_points": list(self.control_points),
            "mean": self.mean, "std": self.std, "fallback": self.fallback,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "L2PolyCoeffs":
        return cls(obj["beta2"], obj["beta1"], obj["beta0"],
                   tuple(obj["control_points"]), obj["mean"], obj["std"],
                   obj.get("fallback"))


@dataclass(frozen=True)
class MatchThreshold:
    T: float
    note: str = ""


def fit_l2_poly(calibration_norms) -> L2PolyCoeffs:
    """Interpolate 1/sqrt(t) at mean + {-1,0,+1}*std of the squared norms.

    Degenerate inputs fall back deterministically: zero spread fits at
    {0.9, 1.0, 1.1}*mean; a non-positive left endpoint shrinks t1 to
    0.1*mean.  Both are recorded on the returned coefficients."""
    norms = np.asarray(list(calibration_norms), dtype=np.float64)
    if norms.size < 2:
        raise DegenerateInputError("need at least 2 calibration norms")
    if np.any(norms <= 0):
        raise DegenerateInputError("squared norms must be positive")
    mean = float(norms.mean())
    std = float(norms.std())
    fallback = None
    if std <= 1e-12 * mean:
        pts = (0.9 * mean, mean, 1.1 * mean)
        fallback = "degenerate-std"
    elif mean - std <= 0:
        pts = (0.1 * mean, mean, mean + std)
        fallback = "shifted-t1"
    else:
        pts = (mean - std, mean, mean + std)
    t = np.array(pts)
    targets = 1.0 / np.sqrt(t)
    v = np.vander(t, 3)  # columns t^2, t, 1
    beta = np.linalg.solve(v, targets)
    coeffs = L2PolyCoeffs(float(beta[0]), float(beta[1]), float(beta[2]),
                          tuple(float(x) for x in pts), mean, std, fallback)
    resid = np.max(np.abs(coeffs(t) - targets))
    if resid > 1e-9:
        raise DegenerateInputError(f"interpolation residual {resid} > 1e-9")
    return coeffs


def _const_pt(value: float, level: int, params, scale: float):
    return encode(np.full(params.slot_count, value), level, params, scale)


def _block_sum(ct: Ciphertext, dim: int, keys: KeySet) -> Ciphertext:
    """Rotate-and-sum so every slot holds the sum over its dim-block.

    Requires the slot vector to be dim-periodic (repeated-packed feature)."""
    step = 1
    out = ct
    while step < dim:
        out = he_add(out, he_rotate(out, step, keys), keys.params)
        step *= 2
    return out


def he_squared_norm(feat, keys: KeySet) -> Ciphertext:
    """Every slot of the result holds sum_i y_i^2; consumes 1 level."""
    ct = feat.ct
    if ct.level < 1:
        raise DepthExhaustedError("he_squared_norm")
    sq = he_mul(ct, ct, keys)
    return _block_sum(sq, feat.dim, keys)


def he_l2_normalize(feat, coeffs: L2PolyCoeffs, keys: KeySet):
    """y * p(||y||^2) ~ y/||y||; consumes 4 levels (1 norm + 2 poly + 1 mul)."""
    params = keys.params
    ct = feat.ct
    if ct.level < 4:
        raise DepthExhaustedError("he_l2_normalize")
    t = he_squared_norm(feat, keys)
    # p(t) = t*(beta2*t + beta1) + beta0, depth 2
    q = float(params.modulus_chain[t.level])
    v = he_mul(t, _const_pt(coeffs.beta2, t.level, params, q), params=params)
    v = he_add(v, _const_pt(coeffs.beta1, v.level, params, v.scale), params)
    w = he_mul(mod_switch_to(t, v.level, params), v, keys)
    w = he_add(w, _const_pt(coeffs.beta0, w.level, params, w.scale), params)
    y = mod_switch_to(ct, w.level, params)
    out = he_mul(y, w, keys)
    return replace(feat, ct=out)


def _scale_by_int(ct: Ciphertext, k: int, params) -> Ciphertext:
    """Multiply the message by a small integer; free (no level, same scale)."""
    qs = np.array(params.modulus_chain[: ct.level + 1],
                  dtype=np.uint64)[:, None]
    kk = np.uint64(k % (1 << 62))
    if k < 0:
        c0 = (qs - ct.c0 % qs * np.uint64(-k) % qs) % qs
        c1 = (qs - ct.c1 % qs * np.uint64(-k) % qs) % qs
    else:
        c0 = ct.c0 * kk % qs
        c1 = ct.c1 * kk % qs
    return Ciphertext(c0.astype(np.uint64), c1.astype(np.uint64),
                      ct.level, ct.scale)


def he_score(f1, f2, keys: KeySet) -> Ciphertext:
    """Score = 2 - 2<y1^, y2^> (= ||y1^ - y2^||^2 for unit features),
    broadcast to every slot; one ct-ct multiply, consumes 1 level."""
    if f1.fingerprint != f2.fingerprint:
        raise FingerprintError("features come from different models")
    if f1.ct.level < 1:
        raise DepthExhaustedError("he_score")
    prod = he_mul(f1.ct, f2.ct, keys)
    dot = _block_sum(prod, f1.dim, keys)
    neg2 = _scale_by_int(dot, -2, keys.params)
    return he_add(neg2, _const_pt(2.0, neg2.level, keys.params, neg2.scale),
                  keys.params)


def he_match(score_ct: Ciphertext, threshold: float, params) -> Ciphertext:
    """score - T; the sign carries the decision (negative = match)."""
    t = threshold.T if isinstance(threshold, MatchThreshold) else float(threshold)
    return he_sub(score_ct, _const_pt(t, score_ct.level, params, score_ct.scale),
                  params)


def decide(match_value: float) -> bool:
    """Decision rule: match iff the decrypted match value is negative.

    An exact zero is a no-match (the score must be strictly below T)."""
    return match_value < 0


def calibrate_threshold(genuine_scores, impostor_scores) -> MatchThreshold:
    """Pick T maximizing accuracy (genuine < T, impostor >= T) over the
    calibration scores; ties resolve to the midpoint of the optimal
    interval, found by an exhaustive sweep over candidate cuts."""
    g = np.sort(np.asarray(list(genuine_scores), dtype=np.float64))
    i = np.sort(np.asarray(list(impostor_scores), dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise DegenerateInputError("calibration score lists must be nonempty")
    values = np.unique(np.concatenate([g, i]))
    span = values[-1] - values[0] or 1.0
    edges = np.concatenate([[values[0] - span], values, [values[-1] + span]])
    best_acc = -1.0
    best_lo = best_hi = edges[0]
    # candidate cuts live strictly between consecutive distinct scores (or
    # exactly at a score: T == score counts that score as no-match)
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        t_probe = (lo + hi) / 2
        acc = (np.count_nonzero(g < t_probe) + np.count_nonzero(i >= t_probe)) / (
            g.size + i.size
        )
        if acc > best_acc:
            best_acc = acc
            best_lo, best_hi = lo, hi
    t = (best_lo + best_hi) / 2
    note = f"sweep accuracy {best_acc:.4f} on {g.size}+{i.size} calibration scores"
    return MatchThreshold(float(t), note)
