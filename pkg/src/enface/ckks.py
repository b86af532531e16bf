"""Leveled CKKS: keygen, encoding, encryption, and homomorphic operations.

Ring elements are uint64 arrays of shape (limbs, N) in the evaluation
domain (see `enface.rns`).  Key switching is the hybrid RNS method: the
scaling chain is split into `dnum` digit groups, each digit is CRT-extended
to the full active basis plus the special primes, multiplied against the
switching key, and the accumulated pair is divided by the special modulus
product.  The decomposition of a ciphertext is exposed separately
(`ks_decompose`) so rotations of one ciphertext can share it (hoisting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import backend
from .errors import (
    CapacityError,
    DepthExhaustedError,
    LevelError,
    MissingRotationKeyError,
    ParameterError,
    ScaleMismatchError,
)
from .params import CkksContext, CkksParams

SCALE_RTOL = 2.0**-30

_context_cache: dict[CkksParams, CkksContext] = {}


def get_context(params: CkksParams) -> CkksContext:
    ctx = _context_cache.get(params)
    if ctx is None:
        ctx = CkksContext(params)
        _context_cache[params] = ctx
    return ctx


# ---------------------------------------------------------------------------
# containers


@dataclass
class Plaintext:
    limbs: np.ndarray  # (level+1, N) eval domain, chain moduli only
    level: int
    scale: float


@dataclass
class Ciphertext:
    c0: np.ndarray
    c1: np.ndarray
    level: int
    scale: float

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.c0.copy(), self.c1.copy(), self.level, self.scale)


@dataclass
class PublicKey:
    c0: np.ndarray  # full chain
    c1: np.ndarray


@dataclass
class KSKey:
    """Hybrid switching key: per digit a pair over (chain + special) moduli."""

    digits: list  # list of (b, a) uint64 arrays, shape (num_chain+num_special, N)


@dataclass
class SecretKey:
    coeffs: np.ndarray  # signed ternary, int64 (n,)
    evals: np.ndarray  # (num_chain + num_special, N)


@dataclass
class KeySet:
    params: CkksParams
    secret: SecretKey
    public: PublicKey
    relin: KSKey
    rotation: dict[int, KSKey] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# encode / decode


@lru_cache(maxsize=8)
def _embedding_tables(n_ring: int):
    n = n_ring // 2
    idx = np.empty(n, dtype=np.int64)
    e = 1
    for j in range(n):
        idx[j] = (e - 1) // 2
        e = (e * 5) % (2 * n_ring)
    conj_idx = n_ring - 1 - idx
    k = np.arange(n_ring)
    psi = np.exp(1j * np.pi * k / n_ring)
    return idx, conj_idx, psi


def encode(values, level: int, params: CkksParams, scale: float | None = None) -> Plaintext:
    """Pack up to N/2 real/complex values into a plaintext at `level`."""
    ctx = get_context(params)
    limbs = _encode_limbs(values, level, params, scale or params.scale, with_specials=False)
    return Plaintext(limbs, level, scale or params.scale)


def _encode_limbs(values, level, params, scale, with_specials):
    ctx = get_context(params)
    n_ring = params.ring_degree
    n = n_ring // 2
    v = np.asarray(values, dtype=np.complex128).ravel()
    if v.size > n:
        raise CapacityError(f"{v.size} values exceed {n} slots")
    if not (0 <= level <= params.max_level):
        raise LevelError(f"level {level} outside [0, {params.max_level}]")
    full = np.zeros(n, dtype=np.complex128)
    full[: v.size] = v
    idx, conj_idx, psi = _embedding_tables(n_ring)
    A = np.zeros(n_ring, dtype=np.complex128)
    A[idx] = full
    A[conj_idx] = np.conj(full)
    t = np.fft.fft(A) / n_ring
    coeffs = np.real(t * np.conj(psi)) * scale
    mod_idx = ctx.active_idx(level) + (ctx.special_idx if with_specials else [])
    limbs = np.empty((len(mod_idx), n_ring), dtype=np.uint64)
    if np.max(np.abs(coeffs)) < 2**62:
        ci = np.rint(coeffs).astype(np.int64)
        for row, mi in enumerate(mod_idx):
            limbs[row] = np.mod(ci, ctx.ring.primes[mi]).astype(np.uint64)
    else:
        ci = np.array([int(round(x)) for x in coeffs], dtype=object)
        for row, mi in enumerate(mod_idx):
            limbs[row] = (ci % ctx.ring.primes[mi]).astype(np.uint64)
    ctx.ring.ntt(limbs, mod_idx)
    return limbs


def decode(pt: Plaintext, params: CkksParams) -> np.ndarray:
    """Inverse of encode; returns N/2 reals (copy 0 of the embedding)."""
    ctx = get_context(params)
    n_ring = params.ring_degree
    coeffs = _lift_signed_coeffs(ctx, pt.limbs, pt.level)
    idx, _, psi = _embedding_tables(n_ring)
    t = coeffs.astype(np.float64) * psi
    A = np.fft.ifft(t) * n_ring
    return np.real(A[idx]) / pt.scale


def _lift_signed_coeffs(ctx: CkksContext, limbs: np.ndarray, level: int) -> np.ndarray:
    """Centered coefficient lift from the first one or two RNS limbs.

    Message-plus-noise magnitudes stay far below q0*q1 (~2^100) for every
    decodable plaintext, so two limbs suffice.
    """
    work = limbs[: min(2, level + 1)].copy()
    mod_idx = ctx.chain_idx[: work.shape[0]]
    ctx.ring.intt(work, mod_idx)
    q0 = ctx.ring.primes[0]
    if work.shape[0] == 1:
        x = work[0].astype(np.int64)
        q = q0
        x[x > q // 2] -= q
        return x.astype(object)
    q1 = ctx.ring.primes[1]
    Q = q0 * q1
    inv_q0 = pow(q0, -1, q1)
    a = work[0].astype(object)
    b = work[1].astype(object)
    # x = a + q0 * ((b - a) * inv_q0 mod q1)
    x = a + q0 * ((b - a) * inv_q0 % q1)
    x[x > Q // 2] -= Q
    return x


# ---------------------------------------------------------------------------
# key generation


def keygen(params: CkksParams, rotation_steps: set[int] | None = None,
           rng_seed: int = 0) -> KeySet:
    """Deterministic key generation from an explicit seed.

    Rotation keys are generated for exactly the requested steps; rotations
    by other amounts compose from present power-of-two steps.
    """
    ctx = get_context(params)
    ring = ctx.ring
    rotation_steps = set(rotation_steps or ())
    n_slots = params.slot_count
    for r in rotation_steps:
        if not (1 <= r < n_slots):
            raise ParameterError(f"rotation step {r} outside [1, N/2)")
    rng = np.random.default_rng(rng_seed)
    all_idx = ctx.chain_idx + ctx.special_idx

    s_coeff = ring.sample_ternary_coeffs(rng, params.secret_hamming_weight)
    s_eval = ring.from_signed_coeffs(s_coeff, all_idx)

    a = ring.sample_uniform(rng, ctx.chain_idx)
    e = ring.sample_gaussian_eval(rng, params.noise_stddev, ctx.chain_idx)
    pk0 = ring.sub(e, ring.mul(a, s_eval[: ctx.num_chain], ctx.chain_idx), ctx.chain_idx)
    public = PublicKey(pk0, a)

    s_sq = ring.mul(s_eval, s_eval, all_idx)
    relin = _gen_kskey(ctx, s_sq, s_eval, rng)

    rotation = {}
    for r in sorted(rotation_steps):
        g = ring.galois_element(r)
        target = ring.automorph(s_eval, g)
        rotation[r] = _gen_kskey(ctx, target, s_eval, rng)

    return KeySet(params, SecretKey(s_coeff, s_eval), public, relin, rotation)


def _gen_kskey(ctx: CkksContext, target_eval: np.ndarray, s_eval: np.ndarray,
               rng: np.random.Generator) -> KSKey:
    ring = ctx.ring
    all_idx = ctx.chain_idx + ctx.special_idx
    digits = []
    for j in range(len(ctx.digit_groups)):
        a = ring.sample_uniform(rng, all_idx)
        e = ring.sample_gaussian_eval(rng, ctx.params.noise_stddev, all_idx)
        b = ring.sub(e, ring.mul(a, s_eval, all_idx), all_idx)
        factors = ctx.key_factor[j]
        scaled = ring.mul_scalars(target_eval, factors, all_idx)
        b = ring.add(b, scaled, all_idx)
        digits.append((b, a))
    return KSKey(digits)


# ---------------------------------------------------------------------------
# encrypt / decrypt


def encrypt(pt: Plaintext, pk: PublicKey, params: CkksParams, rng=None) -> Ciphertext:
    """Standard RLWE encryption with a fresh ephemeral ternary mask."""
    ctx = get_context(params)
    ring = ctx.ring
    rng = np.random.default_rng(rng)
    lvl = pt.level
    idx = ctx.active_idx(lvl)
    v = ring.from_signed_coeffs(ring.sample_dense_ternary_coeffs(rng), idx)
    e0 = ring.sample_gaussian_eval(rng, params.noise_stddev, idx)
    e1 = ring.sample_gaussian_eval(rng, params.noise_stddev, idx)
    rows = slice(0, lvl + 1)
    c0 = ring.add(ring.add(ring.mul(v, pk.c0[rows], idx), e0, idx), pt.limbs, idx)
    c1 = ring.add(ring.mul(v, pk.c1[rows], idx), e1, idx)
    return Ciphertext(c0, c1, lvl, pt.scale)


def decrypt(ct: Ciphertext, sk: SecretKey, params: CkksParams) -> Plaintext:
    ctx = get_context(params)
    idx = ctx.active_idx(ct.level)
    m = ctx.ring.add(ct.c0, ctx.ring.mul(ct.c1, sk.evals[: ct.level + 1], idx), idx)
    return Plaintext(m, ct.level, ct.scale)


def decrypt_to_values(ct: Ciphertext, sk: SecretKey, params: CkksParams) -> np.ndarray:
    return decode(decrypt(ct, sk, params), params)


# ---------------------------------------------------------------------------
# key switching (with hoisting support)


def ks_decompose(ctx: CkksContext, d2: np.ndarray, level: int) -> list:
    """Digit-decompose and CRT-extend a ring element for key switching.

    Returns [(digit_index, ext)] with ext of shape (level+1+specials, N) in
    the evaluation domain.  This is the per-ciphertext (hoistable) half of a
    key switch.
    """
    ring = ctx.ring
    tables = ctx.level_tables(level)
    coeff = d2.copy()
    ctx.ring.intt(coeff, ctx.active_idx(level))
    n_rows = level + 1 + ctx.num_special
    out = []
    for g in tables["groups"]:
        act = g["idx"]
        ys = np.empty((len(act), ctx.ring.n), dtype=np.uint64)
        for k, i in enumerate(act):
            q = ring.primes[i]
            backend.arr_mulmod_scalar(ys[k], coeff[i], g["inv"][k] % q, q)
        ext = np.empty((n_rows, ctx.ring.n), dtype=np.uint64)
        targets = ctx.active_idx(level) + ctx.special_idx
        for row, mi in enumerate(targets):
            if mi in act:
                ext[row] = d2[mi]
            else:
                q = ring.primes[mi]
                scal = np.array(g["ext_scalars"][row], dtype=np.uint64)
                backend.weighted_sum_mod(ext[row], ys, scal, q)
                m = ring.moduli[mi]
                backend.ntt_forward(ext[row], m.psi_pows, m.w_pows, m.bitrev, q)
        out.append((g["digit"], ext))
    return out


def ks_apply(ctx: CkksContext, digits: list, key: KSKey, level: int,
             perm: np.ndarray | None = None,
             acc: tuple[np.ndarray, np.ndarray] | None = None):
    """Accumulate sum_j ext_j (optionally slot-permuted) * key_j into an
    extended-basis pair.  Returns (acc0, acc1)."""
    ring = ctx.ring
    targets = ctx.active_idx(level) + ctx.special_idx
    n_rows = len(targets)
    if acc is None:
        acc = (
            np.zeros((n_rows, ring.n), dtype=np.uint64),
            np.zeros((n_rows, ring.n), dtype=np.uint64),
        )
    acc0, acc1 = acc
    for j, ext in digits:
        b, a = key.digits[j]
        for row, mi in enumerate(targets):
            q = ring.primes[mi]
            if perm is None:
                backend.arr_mac(acc0[row], ext[row], b[mi], q)
                backend.arr_mac(acc1[row], ext[row], a[mi], q)
            else:
                backend.arr_mac_perm(acc0[row], ext[row], perm, b[mi], q)
                backend.arr_mac_perm(acc1[row], ext[row], perm, a[mi], q)
    return acc0, acc1


def ks_moddown(ctx: CkksContext, part: np.ndarray, level: int) -> np.ndarray:
    """Divide an extended-basis element by the special modulus product."""
    ring = ctx.ring
    n_chain = level + 1
    spec = part[n_chain:].copy()
    ctx.ring.intt(spec, ctx.special_idx)
    k = ctx.num_special
    ys = np.empty((k, ring.n), dtype=np.uint64)
    for j in range(k):
        p = ctx.params.special_moduli[j]
        backend.arr_mulmod_scalar(ys[j], spec[j], ctx.P_over_p_inv[j] % p, p)
    out = np.empty((n_chain, ring.n), dtype=np.uint64)
    rem = np.empty(ring.n, dtype=np.uint64)
    for i in range(n_chain):
        q = ring.primes[i]
        scal = np.array([ctx.P_over_p[j] % q for j in range(k)], dtype=np.uint64)
        backend.weighted_sum_mod(rem, ys, scal, q)
        m = ring.moduli[i]
        backend.ntt_forward(rem, m.psi_pows, m.w_pows, m.bitrev, q)
        backend.arr_submod(out[i], part[i], rem, q)
        backend.arr_mulmod_scalar(out[i], out[i], ctx.P_inv_mod_q[i], q)
    return out


def _keyswitch(ctx: CkksContext, d2: np.ndarray, key: KSKey, level: int,
               perm: np.ndarray | None = None):
    digits = ks_decompose(ctx, d2, level)
    acc0, acc1 = ks_apply(ctx, digits, key, level, perm=perm)
    return ks_moddown(ctx, acc0, level), ks_moddown(ctx, acc1, level)


# ---------------------------------------------------------------------------
# homomorphic operations


def _check_scales(sa: float, sb: float):
    if abs(sa - sb) > SCALE_RTOL * max(abs(sa), abs(sb)):
        raise ScaleMismatchError(f"scales {sa} and {sb} differ beyond 2^-30")


def mod_switch_to(ct: Ciphertext, level: int, params: CkksParams) -> Ciphertext:
    """Lower a ciphertext's level without changing its scale."""
    if level > ct.level:
        raise LevelError(f"cannot mod-switch up ({ct.level} -> {level})")
    if level < 0:
        raise DepthExhaustedError("mod_switch_to")
    rows = slice(0, level + 1)
    return Ciphertext(ct.c0[rows].copy(), ct.c1[rows].copy(), level, ct.scale)


def level_of(ct: Ciphertext) -> int:
    return ct.level


def rescale(ct: Ciphertext, params: CkksParams) -> Ciphertext:
    """Divide by the top active prime: scale /= q_top, level -= 1."""
    if ct.level == 0:
        raise DepthExhaustedError("rescale")
    ctx = get_context(params)
    ring = ctx.ring
    lvl = ct.level
    q_top = ring.primes[lvl]
    inv = ctx.level_tables(lvl)["rescale_inv"]
    out_parts = []
    for part in (ct.c0, ct.c1):
        top = part[lvl].copy()
        m = ring.moduli[lvl]
        backend.ntt_inverse(top, m.ipsi_pows, m.iw_pows, m.bitrev, q_top)
        signed = top.astype(np.int64)
        signed[signed > q_top // 2] -= q_top
        out = np.empty((lvl, ring.n), dtype=np.uint64)
        corr = np.empty(ring.n, dtype=np.uint64)
        for i in range(lvl):
            q = ring.primes[i]
            np.copyto(corr, np.mod(signed, q).astype(np.uint64))
            mi = ring.moduli[i]
            backend.ntt_forward(corr, mi.psi_pows, mi.w_pows, mi.bitrev, q)
            backend.arr_submod(out[i], part[i], corr, q)
            backend.arr_mulmod_scalar(out[i], out[i], inv[i], q)
        out_parts.append(out)
    return Ciphertext(out_parts[0], out_parts[1], lvl - 1, ct.scale / q_top)


def _align_levels(a: Ciphertext, b: Ciphertext, params: CkksParams):
    if a.level > b.level:
        a = mod_switch_to(a, b.level, params)
    elif b.level > a.level:
        b = mod_switch_to(b, a.level, params)
    return a, b


def he_add(a: Ciphertext, b, params: CkksParams) -> Ciphertext:
    """Elementwise sum; levels auto-aligned downward; zero level cost."""
    ctx = get_context(params)
    if isinstance(b, Plaintext):
        if b.level < a.level:
            a = mod_switch_to(a, b.level, params)
        _check_scales(a.scale, b.scale)
        idx = ctx.active_idx(a.level)
        rows = slice(0, a.level + 1)
        c0 = ctx.ring.add(a.c0, b.limbs[rows], idx)
        return Ciphertext(c0, a.c1.copy(), a.level, a.scale)
    a, b = _align_levels(a, b, params)
    _check_scales(a.scale, b.scale)
    idx = ctx.active_idx(a.level)
    return Ciphertext(
        ctx.ring.add(a.c0, b.c0, idx),
        ctx.ring.add(a.c1, b.c1, idx),
        a.level,
        a.scale,
    )


def he_sub(a: Ciphertext, b, params: CkksParams) -> Ciphertext:
    ctx = get_context(params)
    if isinstance(b, Plaintext):
        if b.level < a.level:
            a = mod_switch_to(a, b.level, params)
        _check_scales(a.scale, b.scale)
        idx = ctx.active_idx(a.level)
        rows = slice(0, a.level + 1)
        c0 = ctx.ring.sub(a.c0, b.limbs[rows], idx)
        return Ciphertext(c0, a.c1.copy(), a.level, a.scale)
    a, b = _align_levels(a, b, params)
    _check_scales(a.scale, b.scale)
    idx = ctx.active_idx(a.level)
    return Ciphertext(
        ctx.ring.sub(a.c0, b.c0, idx),
        ctx.ring.sub(a.c1, b.c1, idx),
        a.level,
        a.scale,
    )


def he_mul(a: Ciphertext, b, keys: KeySet | None = None, params: CkksParams | None = None,
           do_rescale: bool = True) -> Ciphertext:
    """Elementwise product; rescales afterwards, consuming one level.

    Ciphertext-ciphertext multiplication relinearizes with keys.relin.
    """
    if params is None:
        if keys is None:
            raise ValueError("he_mul needs params (or keys carrying them)")
        params = keys.params
    ctx = get_context(params)
    ring = ctx.ring
    if a.level == 0:
        raise DepthExhaustedError("he_mul")
    if isinstance(b, Plaintext):
        if b.level != a.level:
            if b.level < a.level:
                a = mod_switch_to(a, b.level, params)
            else:
                raise LevelError("plaintext level above ciphertext level")
        idx = ctx.active_idx(a.level)
        rows = slice(0, a.level + 1)
        out = Ciphertext(
            ring.mul(a.c0, b.limbs[rows], idx),
            ring.mul(a.c1, b.limbs[rows], idx),
            a.level,
            a.scale * b.scale,
        )
        return rescale(out, params) if do_rescale else out
    if keys is None:
        raise ValueError("ciphertext-ciphertext multiplication requires keys")
    a, b = _align_levels(a, b, params)
    if a.level == 0:
        raise DepthExhaustedError("he_mul")
    idx = ctx.active_idx(a.level)
    d0 = ring.mul(a.c0, b.c0, idx)
    d1 = ring.add(ring.mul(a.c0, b.c1, idx), ring.mul(a.c1, b.c0, idx), idx)
    d2 = ring.mul(a.c1, b.c1, idx)
    u0, u1 = _keyswitch(ctx, d2, keys.relin, a.level)
    out = Ciphertext(
        ring.add(d0, u0, idx),
        ring.add(d1, u1, idx),
        a.level,
        a.scale * b.scale,
    )
    return rescale(out, params) if do_rescale else out


def _rotation_plan(r: int, keys: KeySet, n_slots: int) -> list[int]:
    r %= n_slots
    if r == 0:
        return []
    if r in keys.rotation:
        return [r]
    plan = []
    bit = 1
    rem = r
    while rem:
        if rem & 1:
            if bit not in keys.rotation:
                raise MissingRotationKeyError(
                    f"no rotation key for step {r} (missing component {bit})"
                )
            plan.append(bit)
        rem >>= 1
        bit <<= 1
    return plan


def he_rotate(ct: Ciphertext, r: int, keys: KeySet) -> Ciphertext:
    """Cyclic left slot rotation by r; zero level cost."""
    params = keys.params
    ctx = get_context(params)
    ring = ctx.ring
    plan = _rotation_plan(r, keys, params.slot_count)
    out = ct
    for step in plan:
        g = ring.galois_element(step)
        perm = ring._perm_for_galois(g)
        u0, u1 = _keyswitch(ctx, out.c1, keys.rotation[step], out.level, perm=perm)
        idx = ctx.active_idx(out.level)
        c0 = ring.add(ring.automorph(out.c0, g), u0, idx)
        out = Ciphertext(c0, u1, out.level, out.scale)
    if out is ct:
        out = ct.copy()
    return out
