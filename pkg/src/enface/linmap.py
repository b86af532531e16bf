"""Compiler and executor for slot-linear maps as rotation-diagonal programs.

Any slot-linear operation (convolution, pooling, matrix-vector product) is
expressed as  out[o] = sum_r diag_r[o] * x[(o + r) mod n]  over a set of
rotation offsets r.  Each offset is factored as r = g + f + s (giant step g,
plus a baby rotation composed of a "first" and a "second" step) so that the
whole map runs as

    out = sum_g rot_g( sum_{f,s} mask_{g,f,s} ⊙ rot_s(rot_f(x)) )

with mask_{g,f,s} = roll(diag bucket, g).  Baby rotations are hoisted: the
key-switch decomposition of x (and of each first-stage rotation) is computed
once and re-applied per step.  The factored form keeps the rotation-key set
small: convolutions share column steps (first), row steps (second), and
channel-plane giants across every layer of a model.

One execution consumes exactly one level; masks are encoded at the scale
q_top * target_scale / input_scale so the rescaled output lands exactly on
``target_scale``.  Encoded masks are cached per program (call
``clear_cache`` between batches to bound memory).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ckks import (
    Ciphertext,
    KeySet,
    Plaintext,
    encode,
    get_context,
    he_add,
    he_rotate,
    ks_apply,
    ks_decompose,
    ks_moddown,
    rescale,
)
from .errors import CompileError, DepthExhaustedError, MissingRotationKeyError


@dataclass
class LinOp:
    """A compiled rotation-diagonal program over ``n_slots`` slots."""

    n_slots: int
    # (giant, first, second) -> diagonal bucket indexed by OUTPUT slot
    buckets: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)
    _cache_tag: tuple | None = field(default=None, repr=False)

    def add_taps(self, giant: int, first: int, second: int,
                 out_idx: np.ndarray, in_idx: np.ndarray, w: np.ndarray):
        """Accumulate taps out[o] += w * x[in] with in = o + g + f + s (mod n)."""
        n = self.n_slots
        g = giant % n
        f = first % n
        s = second % n
        if out_idx.size == 0:
            return
        if np.any((out_idx + g + f + s) % n != in_idx % n):
            raise CompileError("tap offsets inconsistent with (giant, first, second)")
        key = (g, f, s)
        bucket = self.buckets.get(key)
        if bucket is None:
            bucket = np.zeros(n, dtype=np.float64)
            self.buckets[key] = bucket
        np.add.at(bucket, out_idx % n, w)

    @property
    def giants(self) -> list[int]:
        return sorted({g for g, _, _ in self.buckets})

    def required_steps(self) -> set[int]:
        steps = set()
        for g, f, s in self.buckets:
            for step in (g, f, s):
                if step:
                    steps.add(step)
        return steps

    def apply_clear(self, vec: np.ndarray) -> np.ndarray:
        """Cleartext reference of the program (for oracle cross-checks)."""
        n = self.n_slots
        out = np.zeros(n, dtype=np.float64)
        for (g, f, s), bucket in self.buckets.items():
            r = (g + f + s) % n
            out += bucket * np.roll(vec, -r)
        return out

    def clear_cache(self):
        self._cache.clear()
        self._cache_tag = None

    def _mask_plaintext(self, key, level, scale, params) -> Plaintext:
        tag = (level, scale)
        if self._cache_tag != tag:
            self.clear_cache()
            self._cache_tag = tag
        pt = self._cache.get(key)
        if pt is None:
            g = key[0]
            pt = encode(np.roll(self.buckets[key], g), level, params, scale)
            self._cache[key] = pt
        return pt


def _rotation_from_digits(ctx, c0, digits, step, keys: KeySet, level, scale):
    """Assemble the full rotation of (c0, c1) by `step` from a hoisted
    decomposition of c1."""
    ring = ctx.ring
    key = keys.rotation.get(step)
    if key is None:
        raise MissingRotationKeyError(f"no rotation key for hoisted step {step}")
    g = ring.galois_element(step)
    perm = ring._perm_for_galois(g)
    a0, a1 = ks_apply(ctx, digits, key, level, perm=perm)
    idx = ctx.active_idx(level)
    out0 = ring.add(ring.automorph(c0, g), ks_moddown(ctx, a0, level), idx)
    return Ciphertext(out0, ks_moddown(ctx, a1, level), level, scale)


def run_linop(op: LinOp, cts: list[Ciphertext], keys: KeySet,
              target_scale: float) -> list[Ciphertext]:
    """Execute a program on a batch of ciphertexts sharing level and scale.

    Batching amortizes mask encoding; consumes exactly one level; every
    output has scale exactly ``target_scale``."""
    params = keys.params
    ctx = get_context(params)
    ring = ctx.ring
    if not cts:
        return []
    level = cts[0].level
    scale = cts[0].scale
    for ct in cts:
        if ct.level != level or ct.scale != scale:
            raise CompileError("batched ciphertexts must share level and scale")
    if level < 1:
        raise DepthExhaustedError("run_linop")
    q_top = params.modulus_chain[level]
    mask_scale = q_top * target_scale / scale

    # organize entries: first -> second -> [(g, key)]
    plan: dict[int, dict[int, list[tuple[int, tuple]]]] = {}
    for key in op.buckets:
        g, f, s = key
        plan.setdefault(f, {}).setdefault(s, []).append((g, key))

    idx = ctx.active_idx(level)
    n_rows = level + 1
    accs = [
        {g: (np.zeros((n_rows, ring.n), dtype=np.uint64),
             np.zeros((n_rows, ring.n), dtype=np.uint64))
         for g in op.giants}
        for _ in cts
    ]

    base_digits = None
    if any(f != 0 for f in plan):
        base_digits = [ks_decompose(ctx, ct.c1, level) for ct in cts]

    for f, seconds in plan.items():
        if f == 0:
            ys = cts
        else:
            ys = [
                _rotation_from_digits(ctx, ct.c0, dg, f, keys, level, scale)
                for ct, dg in zip(cts, base_digits)
            ]
        y_digits = None
        if any(s != 0 for s in seconds):
            y_digits = [ks_decompose(ctx, y.c1, level) for y in ys]
        for s, group in seconds.items():
            if s == 0:
                zs = ys
            else:
                zs = [
                    _rotation_from_digits(ctx, y.c0, dg, s, keys, level, scale)
                    for y, dg in zip(ys, y_digits)
                ]
            for g, key in group:
                pt = op._mask_plaintext(key, level, mask_scale, params)
                for z, acc in zip(zs, accs):
                    a0, a1 = acc[g]
                    ring.mac(a0, z.c0, pt.limbs, idx)
                    ring.mac(a1, z.c1, pt.limbs, idx)

    outs = []
    for acc in accs:
        total = None
        for g in op.giants:
            part = Ciphertext(acc[g][0], acc[g][1], level, scale * mask_scale)
            if g:
                part = he_rotate(part, g, keys)
            total = part if total is None else he_add(total, part, params)
        outs.append(rescale(total, params))
    return outs


def replication_steps(footprint: int, copies: int, n_slots: int) -> list[int]:
    """Left-rotation steps that replicate copy 0 into all M copies."""
    steps = []
    c = 1
    while 2 * c <= copies:
        steps.append((n_slots - c * footprint) % n_slots)
        c *= 2
    for m in range(c, copies):
        steps.append((n_slots - m * footprint) % n_slots)
    return steps


def replicate(ct: Ciphertext, footprint: int, copies: int, keys: KeySet) -> Ciphertext:
    """Fill all M copies from copy 0 by rotate-and-add; zero level cost.

    Doubles the populated prefix while it fits, then places any remaining
    copies one at a time from the base copy."""
    params = keys.params
    n = params.slot_count
    out = ct
    c = 1
    base = ct
    while 2 * c <= copies:
        out = he_add(out, he_rotate(out, (n - c * footprint) % n, keys), params)
        c *= 2
    for m in range(c, copies):
        out = he_add(out, he_rotate(base, (n - m * footprint) % n, keys), params)
    return out
