"""Cleartext reference pipeline and encrypted-vs-clear fault isolation.

Every encrypted stage has a cleartext twin here operating on logical C×H×W
tensors (slot layouts are an encryption detail and never appear).  The
oracle also proves, per forward pass, that the fused per-patch linear form
and the reference concatenated-matrix form of the feature fusion agree; a
disagreement means the compiled column permutation is wrong.

``diff_encrypted`` compares decrypted stage outputs against the oracle's
stages and names the first stage whose deviation exceeds tolerance, which
localizes a fault to a single layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, EnfaceError
from .matcher import L2PolyCoeffs


class OracleError(EnfaceError):
    """The cleartext model is internally inconsistent."""


FUSION_TOL = 1e-6


# ---------------------------------------------------------------------------
# cleartext layer primitives


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Direct 2-D convolution with half padding, (C_in,H,W) -> (C_out,H',W')."""
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("cijuv,ocuv->oij", win, w) + b[:, None, None]


def batchnorm(x, gamma, beta, mean, var, eps: float = 1e-5):
    inv = gamma / np.sqrt(var + eps)
    return (x - mean[:, None, None]) * inv[:, None, None] + beta[:, None, None]


def quad_act(x, a, b, c):
    """Per-channel a*x^2 + b*x + c (pass a=1 for the fused monic form)."""
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (x.shape[0],))
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return (a[:, None, None] * x + b[:, None, None]) * x + c[:, None, None]


def avgpool_quadrants(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average each of the four (H/2, W/2) quadrants per channel.

    Returns (quadrant_major, channel_major): index q*C + c vs c*4 + q,
    with q = 2*(row half) + (col half)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise OracleError(f"odd spatial dims {h}x{w} cannot be quadrant-pooled")
    q = x.reshape(c, 2, h // 2, 2, w // 2).mean(axis=(2, 4))  # (C, 2, 2)
    channel_major = q.reshape(c, 4)
    quadrant_major = channel_major.T  # (4, C)
    return quadrant_major.ravel(), channel_major.ravel()


# ---------------------------------------------------------------------------
# reference forward pass over a compiled model


@dataclass
class OracleReport:
    """Cleartext stage outputs plus the fusion-form consistency check."""

    stages: dict[str, np.ndarray] = field(default_factory=dict)
    feature: np.ndarray | None = None
    fusion_gap: float = 0.0

    def stage_names(self) -> list[str]:
        return list(self.stages)


def _patch_forward(x: np.ndarray, pcnn, report: OracleReport, tag: str) -> np.ndarray:
    """Run one compiled (folded) per-patch network in cleartext.

    Returns the pooled vector in quadrant-major order (the encrypted
    pooling order); the channel-major twin is recorded for the fusion
    check."""
    x = conv2d(x, pcnn.stem.weights, pcnn.stem.bias, pcnn.stem.stride)
    report.stages[f"{tag}/stem"] = x
    for j, blk in enumerate(pcnn.blocks):
        main = conv2d(x, blk.conv1.weights, blk.conv1.bias, blk.conv1.stride)
        main = quad_act(main, 1.0, blk.act1.b, blk.act1.c)
        main = conv2d(main, blk.conv2.weights, blk.conv2.bias, blk.conv2.stride)
        main = quad_act(main, 1.0, blk.act2.b, blk.act2.c)
        short = conv2d(x, blk.shortcut.weights, blk.shortcut.bias, blk.shortcut.stride)
        x = main + short
        report.stages[f"{tag}/block{j}"] = x
    pooled_q, pooled_c = avgpool_quadrants(x)
    report.stages[f"{tag}/pool"] = pooled_q
    report.stages[f"{tag}/pool-channel-major"] = pooled_c
    return pooled_q


def oracle_forward(image: np.ndarray, model) -> OracleReport:
    """Cleartext twin of the encrypted feature extraction.

    ``image`` is C×H×W in [0, 1]; normalization, patch split, per-patch
    networks and the feature fusion all mirror the compiled model.  The
    fused per-patch form and the reference concatenated form of the fusion
    are cross-checked to FUSION_TOL on every call."""
    report = OracleReport()
    x = (np.asarray(image, dtype=np.float64)
         - model.image_mean[:, None, None]) / model.image_std[:, None, None]
    patches = split_patches(x, model.patch_size)
    if len(patches) != len(model.patches):
        raise OracleError(
            f"image yields {len(patches)} patches, model has {len(model.patches)}"
        )
    fused = None
    concat_cm = []
    for p, (patch, pcnn) in enumerate(zip(patches, model.patches)):
        pooled_q = _patch_forward(patch, pcnn, report, f"patch{p}")
        concat_cm.append(report.stages[f"patch{p}/pool-channel-major"])
        y = pcnn.linear.matrix @ pooled_q + pcnn.linear.bias
        report.stages[f"patch{p}/feature"] = y
        fused = y if fused is None else fused + y
    # reference form: un-permuted fusion matrix on channel-major pooled concat
    reference = model.fusion_matrix @ np.concatenate(concat_cm) + model.fusion_bias
    gap = float(np.max(np.abs(fused - reference)))
    if gap > FUSION_TOL:
        raise OracleError(
            f"fused and reference fusion forms disagree by {gap:.3e} (> {FUSION_TOL})"
        )
    report.fusion_gap = gap
    report.feature = fused
    report.stages["feature"] = fused
    return report


def split_patches(x: np.ndarray, patch_size: int) -> list[np.ndarray]:
    """Cut C×H×W into square patches, row-major over the patch grid."""
    c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise OracleError(f"image {h}x{w} not divisible by patch size {patch_size}")
    out = []
    for i in range(0, h, patch_size):
        for j in range(0, w, patch_size):
            out.append(x[:, i:i + patch_size, j:j + patch_size].copy())
    return out


# ---------------------------------------------------------------------------
# cleartext matching


@dataclass
class MatchReport:
    squared_norms: tuple[float, float]
    normalized: tuple[np.ndarray, np.ndarray]
    score: float
    match_value: float
    is_match: bool


def oracle_match(img1, img2, model, use_poly_norm: bool = True) -> MatchReport:
    """Cleartext verification decision between two images.

    With ``use_poly_norm`` the polynomial inverse-sqrt approximation is used
    (the exact twin of the encrypted matcher); otherwise exact 1/sqrt."""
    ys = []
    ts = []
    for img in (img1, img2):
        y = oracle_forward(img, model).feature
        t = float(y @ y)
        if use_poly_norm:
            if model.l2_poly is None:
                raise OracleError("model carries no l2 polynomial calibration")
            y = y * model.l2_poly(t)
        else:
            if t == 0.0:
                raise DegenerateInputError("zero-norm feature cannot be normalized")
            y = y / np.sqrt(t)
        ys.append(y)
        ts.append(t)
    # 2 - 2<y1^, y2^>: equals ||y1^ - y2^||^2 for exactly unit features and
    # is the exact cleartext twin of the encrypted score
    score = 2.0 - 2.0 * float(ys[0] @ ys[1])
    if model.threshold is None:
        raise OracleError("model carries no calibrated threshold")
    value = score - model.threshold.T
    return MatchReport(
        squared_norms=(ts[0], ts[1]),
        normalized=(ys[0], ys[1]),
        score=score,
        match_value=value,
        is_match=value < 0,
    )


# ---------------------------------------------------------------------------
# fault isolation


@dataclass
class StageDiff:
    stage: str
    max_abs: float
    tolerance: float
    ok: bool


@dataclass
class DiffReport:
    rows: list[StageDiff]
    first_fault: str | None

    def to_json(self) -> str:
        return json.dumps({
            "first_fault": self.first_fault,
            "stages": [
                {"stage": r.stage, "max_abs": r.max_abs,
                 "tolerance": r.tolerance, "ok": r.ok}
                for r in self.rows
            ],
        }, indent=2)

    def __str__(self) -> str:
        width = max((len(r.stage) for r in self.rows), default=5)
        lines = [f"{'stage':<{width}}  {'max |Δ|':>12}  {'tol':>9}  status"]
        for r in self.rows:
            lines.append(
                f"{r.stage:<{width}}  {r.max_abs:>12.3e}  {r.tolerance:>9.0e}  "
                + ("ok" if r.ok else "FAULT")
            )
        if self.first_fault:
            lines.append(f"first fault: {self.first_fault}")
        return "\n".join(lines)


def diff_encrypted(report: OracleReport, decrypted: dict[str, np.ndarray],
                   tolerance: float = 1e-2,
                   per_stage: dict[str, float] | None = None) -> DiffReport:
    """Compare decrypted stage outputs against the oracle, in stage order.

    ``decrypted`` maps stage names (a subset of the report's) to arrays.
    The first stage exceeding its tolerance is flagged as the fault site."""
    unknown = set(decrypted) - set(report.stages)
    if unknown:
        raise OracleError(f"stages not in the oracle ledger: {sorted(unknown)}")
    if not decrypted:
        raise OracleError("empty encrypted run: no stages to compare")
    rows = []
    first = None
    for name in report.stages:
        if name not in decrypted:
            continue
        ref = np.asarray(report.stages[name], dtype=np.float64)
        got = np.asarray(decrypted[name], dtype=np.float64)
        if ref.shape != got.shape:
            got = got.reshape(ref.shape)
        tol = (per_stage or {}).get(name, tolerance)
        err = float(np.max(np.abs(ref - got)))
        ok = err <= tol
        if not ok and first is None:
            first = name
        rows.append(StageDiff(name, err, tol, ok))
    return DiffReport(rows, first)
