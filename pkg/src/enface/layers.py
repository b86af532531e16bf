"""Homomorphic neural-network layers with exact level costs.

Level ledger (enforced at runtime on every evaluation):

    convolution      2   (rotation-diagonal multiply + cleanup mask)
    quadratic act    1   (fused monic form: t*(t + b') + c')
    quadratic act    2   (unfused ax^2 + bx + c reference form)
    residual add     0
    avgpool (2,2)    1   (rotate-sum tree + one compaction-mask multiply)
    linear (square)  2   (diagonal method + cleanup mask)

The fused activation assumes its leading coefficient was folded into the
preceding convolution (weights and bias scaled by sqrt(a), requiring a > 0),
leaving the monic polynomial x^2 + b'x + c' with b' = b/sqrt(a), c' = c.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ckks import Ciphertext, KeySet, encode, he_add, he_mul, mod_switch_to
from .errors import CompileError, DepthExhaustedError, LayoutError
from .linmap import LinOp, replicate, replication_steps, run_linop
from .packing import TensorLayout, feature_layout, to_slots


@dataclass
class PackedTensor:
    ct: Ciphertext
    layout: TensorLayout


# ---------------------------------------------------------------------------
# layer specifications


@dataclass
class ConvSpec:
    weights: np.ndarray  # (C_out, C_in, k, k), batch norm already folded in
    bias: np.ndarray  # (C_out,)
    stride: int
    in_layout: TensorLayout
    out_layout: TensorLayout
    _program: LinOp | None = field(default=None, repr=False)

    def __post_init__(self):
        co, ci, k, k2 = self.weights.shape
        if k != k2 or k % 2 == 0:
            raise CompileError(f"kernel must be odd square, got {k}x{k2}")
        if self.stride not in (1, 2):
            raise CompileError(f"unsupported stride {self.stride}")
        if ci != self.in_layout.shape[0] or co != self.out_layout.shape[0]:
            raise CompileError("conv channel counts do not match layouts")
        if not np.all(np.isfinite(self.weights)) or not np.all(np.isfinite(self.bias)):
            raise CompileError("conv weights must be finite")
        if self.in_layout.plane_slots != self.out_layout.plane_slots:
            raise CompileError("conv layouts disagree on physical grid size")

    @property
    def program(self) -> LinOp:
        if self._program is None:
            self._program = _compile_conv(self)
        return self._program


@dataclass
class QuadActSpec:
    """Per-channel quadratic activation.

    Fused form (fused=True): x^2 + b'x + c', depth 1; the leading
    coefficient lives in the preceding convolution.  Unfused reference form
    (fused=False): a x^2 + b x + c evaluated as x*(a x + b) + c, depth 2."""

    b: np.ndarray  # per-channel
    c: np.ndarray
    a: np.ndarray | None = None  # only for the unfused reference form
    fused: bool = True

    def __post_init__(self):
        if not self.fused and self.a is None:
            raise CompileError("unfused activation requires leading coefficients")
        for arr in (self.b, self.c) + (() if self.a is None else (self.a,)):
            if not np.all(np.isfinite(arr)):
                raise CompileError("activation coefficients must be finite")


@dataclass
class LinearSpec:
    matrix: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    _program: LinOp | None = field(default=None, repr=False)
    _slots: int = 0

    def __post_init__(self):
        d_out, d_in = self.matrix.shape
        if d_out != d_in:
            raise CompileError(
                "non-square linear layer: decompose it through the fusion map "
                "(square d x d blocks) before compiling"
            )
        if not np.all(np.isfinite(self.matrix)) or not np.all(np.isfinite(self.bias)):
            raise CompileError("linear weights must be finite")

    def program(self, slot_count: int) -> LinOp:
        if self._program is None or self._slots != slot_count:
            self._program = _compile_linear(self, slot_count)
            self._slots = slot_count
        return self._program


# ---------------------------------------------------------------------------
# program compilers


def _group_taps(op: LinOp, giant, first, second, out_idx, in_idx, w):
    """Bucket tap arrays by (giant, first, second) and add them to `op`."""
    n = op.n_slots
    key = ((giant % n).astype(np.int64) * n + first % n) * n + second % n
    order = np.argsort(key, kind="stable")
    key = key[order]
    bounds = np.flatnonzero(np.diff(key)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [key.size]))
    for a, b in zip(starts, ends):
        sel = order[a:b]
        k = int(key[a])
        g, rem = divmod(k, n * n)
        f, s = divmod(rem, n)
        op.add_taps(g, f, s, out_idx[sel], in_idx[sel], w[sel])


def _compile_conv(spec: ConvSpec) -> LinOp:
    li, lo = spec.in_layout, spec.out_layout
    n = li.slot_count
    c_out, h_out, w_out = lo.shape
    c_in, h_in, w_in = li.shape
    k = spec.weights.shape[2]
    pad = k // 2
    stride = spec.stride
    plane = li.plane_slots
    wp = li.row_stride
    if wp != lo.row_stride:
        raise CompileError("conv layouts disagree on row stride")

    co, i, j, ci, di, dj = np.meshgrid(
        np.arange(c_out), np.arange(h_out), np.arange(w_out),
        np.arange(c_in), np.arange(k), np.arange(k),
        indexing="ij", sparse=True,
    )
    ii = stride * i + di - pad
    jj = stride * j + dj - pad
    valid = (ii >= 0) & (ii < h_in) & (jj >= 0) & (jj < w_in)
    valid = np.broadcast_to(valid, (c_out, h_out, w_out, c_in, k, k))

    def flat(x):
        return np.broadcast_to(x, valid.shape)[valid].astype(np.int64)

    co_f, i_f, j_f = flat(co), flat(i), flat(j)
    ci_f, ii_f, jj_f = flat(ci), flat(ii), flat(jj)
    di_f, dj_f = flat(di), flat(dj)
    w = spec.weights[co_f, ci_f, di_f, dj_f]

    out_idx = lo.slot_map(0)[co_f, i_f, j_f].astype(np.int64)
    in_idx = li.slot_map(0)[ci_f, ii_f, jj_f].astype(np.int64)
    cp_in = ci_f // (li.gaps[0] * li.gaps[1])
    cp_out = co_f // (lo.gaps[0] * lo.gaps[1])
    giant = (cp_in - cp_out) * plane
    rem = in_idx - out_idx - giant
    dcol = (in_idx % wp) - (out_idx % wp)
    drow = rem - dcol
    if np.any(drow % wp):
        raise CompileError("conv offset factorization failed")

    op = LinOp(n)
    _group_taps(op, giant, dcol, drow, out_idx, in_idx, w)
    return op


def _compile_linear(spec: LinearSpec, slot_count: int) -> LinOp:
    d = spec.matrix.shape[0]
    layout = feature_layout(d, slot_count)
    if layout.copies < 2:
        raise CompileError("linear layer needs a replicated feature (M >= 2)")
    t = 1 << max(1, (d.bit_length() - 1) // 2)  # baby-step block size
    f_out, f_in = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    f_out = f_out.ravel()
    f_in = f_in.ravel()
    r = (f_in - f_out) % d
    in_idx = f_out + r  # reads into copy 1 when wrapping: copies are identical
    w = spec.matrix[f_out, f_in]
    op = LinOp(slot_count)
    _group_taps(op, r - r % t, r % t, np.zeros_like(r), f_out, in_idx, w)
    return op


_pool_cache: dict[TensorLayout, LinOp] = {}


def _compile_pool(layout: TensorLayout) -> LinOp:
    if layout in _pool_cache:
        return _pool_cache[layout]
    c, h, w = layout.shape
    kh, kw = layout.gaps
    h2, w2 = h // 2, w // 2
    n = layout.slot_count
    plane = layout.plane_slots
    cs, qi, qj = np.meshgrid(np.arange(c), np.arange(2), np.arange(2), indexing="ij")
    cs, qi, qj = cs.ravel(), qi.ravel(), qj.ravel()
    out_idx = (2 * qi + qj) * c + cs
    in_idx = layout.slot_map(0)[cs, qi * h2, qj * w2].astype(np.int64)
    cp = cs // (kh * kw)
    giant = cp * (plane - kh * kw)
    first = in_idx - out_idx - giant
    weight = np.full(cs.shape, 1.0 / (h2 * w2))
    op = LinOp(n)
    _group_taps(op, giant, first, np.zeros_like(first), out_idx, in_idx, weight)
    _pool_cache[layout] = op
    return op


# ---------------------------------------------------------------------------
# encrypted layer evaluation (batched internally; singles are wrappers)


def _channel_slots(values: np.ndarray, layout: TensorLayout) -> np.ndarray:
    """Broadcast a per-channel vector over the layout (all copies)."""
    c, h, w = layout.shape
    t = np.broadcast_to(np.asarray(values, dtype=np.float64)[:, None, None], (c, h, w))
    return to_slots(t, layout)


def _support_mask(layout: TensorLayout, copies: bool = False) -> np.ndarray:
    vec = np.zeros(layout.slot_count)
    base = layout.slot_map(0).ravel()
    reps = layout.copies if copies else 1
    for m in range(reps):
        vec[base + m * layout.footprint] = 1.0
    return vec


def _check_depth(level_in: int, level_out: int, expected: int, name: str):
    if level_in - level_out != expected:
        raise CompileError(
            f"{name} consumed {level_in - level_out} levels, ledger says {expected}"
        )


def he_conv_many(xs: list[PackedTensor], spec: ConvSpec, keys: KeySet) -> list[PackedTensor]:
    params = keys.params
    for x in xs:
        if x.layout != spec.in_layout:
            raise LayoutError("input layout does not match conv spec")
    level_in = xs[0].ct.level
    if level_in < 2:
        raise DepthExhaustedError("he_conv")
    outs = run_linop(spec.program, [x.ct for x in xs], keys, params.scale)
    lo = spec.out_layout
    cleanup = encode(_support_mask(lo), outs[0].level, params,
                     scale=float(params.modulus_chain[outs[0].level]))
    bias_pt = None
    results = []
    for ct in outs:
        ct = he_mul(ct, cleanup, params=params)
        if lo.copies > 1:
            ct = replicate(ct, lo.footprint, lo.copies, keys)
        if bias_pt is None:
            bias_pt = encode(_channel_slots(spec.bias, lo), ct.level, params, ct.scale)
        ct = he_add(ct, bias_pt, params)
        _check_depth(level_in, ct.level, 2, "he_conv")
        results.append(PackedTensor(ct, lo))
    return results


def he_conv(x: PackedTensor, spec: ConvSpec, keys: KeySet) -> PackedTensor:
    return he_conv_many([x], spec, keys)[0]


def he_quad_act(x: PackedTensor, spec: QuadActSpec, keys: KeySet) -> PackedTensor:
    params = keys.params
    ct = x.ct
    level_in = ct.level
    if spec.fused:
        if level_in < 1:
            raise DepthExhaustedError("he_quad_act")
        b_pt = encode(_channel_slots(spec.b, x.layout), ct.level, params, ct.scale)
        t = he_add(ct, b_pt, params)
        out = he_mul(ct, t, keys, params)
        c_pt = encode(_channel_slots(spec.c, x.layout), out.level, params, out.scale)
        out = he_add(out, c_pt, params)
        _check_depth(level_in, out.level, 1, "he_quad_act")
        return PackedTensor(out, x.layout)
    # unfused reference: x * (a*x + b) + c, depth 2
    if level_in < 2:
        raise DepthExhaustedError("he_quad_act")
    a_pt = encode(_channel_slots(spec.a, x.layout), ct.level, params,
                  float(params.modulus_chain[ct.level]))
    v = he_mul(ct, a_pt, params=params)  # scale preserved, one level
    b_pt = encode(_channel_slots(spec.b, x.layout), v.level, params, v.scale)
    v = he_add(v, b_pt, params)
    out = he_mul(mod_switch_to(ct, v.level, params), v, keys, params)
    c_pt = encode(_channel_slots(spec.c, x.layout), out.level, params, out.scale)
    out = he_add(out, c_pt, params)
    _check_depth(level_in, out.level, 2, "he_quad_act (unfused)")
    return PackedTensor(out, x.layout)


def he_residual_add(a: PackedTensor, b: PackedTensor, params) -> PackedTensor:
    if a.layout != b.layout:
        raise LayoutError("residual operands have different layouts")
    return PackedTensor(he_add(a.ct, b.ct, params), a.layout)


def he_avgpool_2x2_many(xs: list[PackedTensor], keys: KeySet) -> list[PackedTensor]:
    params = keys.params
    layout = xs[0].layout
    c, h, w = layout.shape
    if h % 2 or w % 2:
        raise LayoutError(f"odd spatial dims {h}x{w} cannot be (2,2)-pooled")
    h2, w2 = h // 2, w // 2
    if (h2 & (h2 - 1)) or (w2 & (w2 - 1)):
        raise CompileError("pooling requires power-of-two quadrant dims")
    level_in = xs[0].ct.level
    if level_in < 1:
        raise DepthExhaustedError("he_avgpool_2x2")
    kh, kw = layout.gaps
    summed = []
    for x in xs:
        t = x.ct
        step = kw
        while step < kw * w2:
            t = he_add(t, he_rotate_ct(t, step, keys), params)
            step *= 2
        step = kh * layout.row_stride
        while step < kh * layout.row_stride * h2:
            t = he_add(t, he_rotate_ct(t, step, keys), params)
            step *= 2
        summed.append(t)
    op = _compile_pool(layout)
    outs = run_linop(op, summed, keys, params.scale)
    fl = feature_layout(4 * c, layout.slot_count)
    results = []
    for ct in outs:
        ct = replicate(ct, fl.footprint, fl.copies, keys)
        _check_depth(level_in, ct.level, 1, "he_avgpool_2x2")
        results.append(PackedTensor(ct, fl))
    return results


def he_avgpool_2x2(x: PackedTensor, keys: KeySet) -> PackedTensor:
    return he_avgpool_2x2_many([x], keys)[0]


def he_linear_many(xs: list[PackedTensor], spec: LinearSpec, keys: KeySet) -> list[PackedTensor]:
    params = keys.params
    layout = xs[0].layout
    d = spec.matrix.shape[0]
    if layout.shape != (d, 1, 1):
        raise LayoutError(f"linear expects a flat {d}-feature layout")
    level_in = xs[0].ct.level
    if level_in < 2:
        raise DepthExhaustedError("he_linear")
    outs = run_linop(spec.program(layout.slot_count), [x.ct for x in xs],
                     keys, params.scale)
    vec = np.zeros(layout.slot_count)
    vec[:d] = 1.0
    cleanup = encode(vec, outs[0].level, params,
                     scale=float(params.modulus_chain[outs[0].level]))
    bias_pt = None
    results = []
    for ct in outs:
        ct = he_mul(ct, cleanup, params=params)
        ct = replicate(ct, layout.footprint, layout.copies, keys)
        if bias_pt is None:
            bias_vec = np.tile(spec.bias, layout.copies)
            bias_pt = encode(bias_vec, ct.level, params, ct.scale)
        ct = he_add(ct, bias_pt, params)
        _check_depth(level_in, ct.level, 2, "he_linear")
        results.append(PackedTensor(ct, layout))
    return results


def he_linear(x: PackedTensor, spec: LinearSpec, keys: KeySet) -> PackedTensor:
    return he_linear_many([x], spec, keys)[0]


def he_rotate_ct(ct: Ciphertext, step: int, keys: KeySet) -> Ciphertext:
    from .ckks import he_rotate

    return he_rotate(ct, step, keys)


# ---------------------------------------------------------------------------
# depth ledger


def depth_of(spec) -> int:
    if isinstance(spec, ConvSpec):
        return 2
    if isinstance(spec, QuadActSpec):
        return 1 if spec.fused else 2
    if isinstance(spec, LinearSpec):
        return 2
    if isinstance(spec, str):
        return {"residual": 0, "avgpool": 1}[spec]
    raise CompileError(f"unknown layer spec {type(spec).__name__}")


def analyze_depth(layers: list, budget: int | None = None,
                  names: list[str] | None = None) -> list[tuple[str, int, int]]:
    """Per-layer and cumulative level costs; raises on a blown budget,
    naming the first failing layer."""
    ledger = []
    total = 0
    for idx, spec in enumerate(layers):
        name = names[idx] if names else f"layer{idx}:{type(spec).__name__}"
        cost = depth_of(spec)
        total += cost
        if budget is not None and total > budget:
            raise CompileError(
                f"depth budget exceeded at {name}: cumulative {total} > {budget}"
            )
        ledger.append((name, cost, total))
    return ledger


def required_steps_for_conv(spec: ConvSpec) -> set[int]:
    steps = spec.program.required_steps()
    lo = spec.out_layout
    steps |= set(replication_steps(lo.footprint, lo.copies, lo.slot_count))
    return steps


def required_steps_for_pool(layout: TensorLayout) -> set[int]:
    c = layout.shape[0]
    h2, w2 = layout.shape[1] // 2, layout.shape[2] // 2
    kh, kw = layout.gaps
    steps = _compile_pool(layout).required_steps()
    step = kw
    while step < kw * w2:
        steps.add(step)
        step *= 2
    step = kh * layout.row_stride
    while step < kh * layout.row_stride * h2:
        steps.add(step)
        step *= 2
    fl = feature_layout(4 * c, layout.slot_count)
    steps |= set(replication_steps(fl.footprint, fl.copies, fl.slot_count))
    return steps


def required_steps_for_linear(spec: LinearSpec, slot_count: int) -> set[int]:
    steps = spec.program(slot_count).required_steps()
    fl = feature_layout(spec.matrix.shape[0], slot_count)
    steps |= set(replication_steps(fl.footprint, fl.copies, fl.slot_count))
    return steps
