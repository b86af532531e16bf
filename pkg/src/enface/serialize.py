"""CKX1 binary serialization for ciphertexts, key sets, and parameters.

Layout (all little-endian):

    magic   4 bytes  b"CKX1"
    version u16      currently 1
    kind    u8       1=params 2=ciphertext 3=keyset 4=secret-key

Params payload:
    N u32 | scale f64 | hamming u32 | sigma f64 | dnum u16
    chain_count u16, chain primes u64[] | special_count u16, specials u64[]

Ciphertext payload:
    params-free header: N u32 | level u32 | scale f64
    prime_count u16, active chain primes u64[]
    c0 limbs u64[(level+1)*N] | c1 limbs u64[(level+1)*N]

KeySet payload (public half only; the secret key is serialized separately
and never travels in a key set):
    params payload
    pk c0,c1: u64[(L+1)*N] each
    relin KSKey | rot_count u16, then per key: step u32 + KSKey
    KSKey: digit_count u16, per digit b,a: u64[(chain+special)*N] each

Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .ckks import Ciphertext, KeySet, KSKey, PublicKey, SecretKey, get_context
from .errors import EnfaceError
from .params import CkksParams

MAGIC = b"CKX1"
VERSION = 1

KIND_PARAMS = 1
KIND_CIPHERTEXT = 2
KIND_KEYSET = 3
KIND_SECRET_KEY = 4


class SerializationError(EnfaceError):
    pass


def _w_arr(buf: io.BytesIO, arr: np.ndarray):
    buf.write(np.ascontiguousarray(arr, dtype="<u8").tobytes())


def _r_arr(buf: io.BytesIO, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = buf.read(count * 8)
    if len(raw) != count * 8:
        raise SerializationError("truncated payload")
    return np.frombuffer(raw, dtype="<u8").reshape(shape).astype(np.uint64)


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<HB", VERSION, kind)


def _check_header(buf: io.BytesIO, kind: int):
    magic = buf.read(4)
    if magic != MAGIC:
        raise SerializationError(f"bad magic {magic!r}")
    version, k = struct.unpack("<HB", buf.read(3))
    if version != VERSION:
        raise SerializationError(f"unsupported version {version}")
    if k != kind:
        raise SerializationError(f"expected kind {kind}, got {k}")


def _w_params(buf: io.BytesIO, p: CkksParams):
    buf.write(struct.pack("<IdIdH", p.ring_degree, p.scale,
                          p.secret_hamming_weight, p.noise_stddev, p.dnum))
    buf.write(struct.pack("<H", len(p.modulus_chain)))
    for q in p.modulus_chain:
        buf.write(struct.pack("<Q", q))
    buf.write(struct.pack("<H", len(p.special_moduli)))
    for q in p.special_moduli:
        buf.write(struct.pack("<Q", q))


def _r_params(buf: io.BytesIO) -> CkksParams:
    n, scale, h, sigma, dnum = struct.unpack("<IdIdH", buf.read(26))
    (nc,) = struct.unpack("<H", buf.read(2))
    chain = struct.unpack(f"<{nc}Q", buf.read(8 * nc))
    (ns,) = struct.unpack("<H", buf.read(2))
    specials = struct.unpack(f"<{ns}Q", buf.read(8 * ns))
    return CkksParams(
        ring_degree=n, modulus_chain=chain, special_moduli=specials,
        scale=scale, secret_hamming_weight=h, noise_stddev=sigma, dnum=dnum,
    )


def dump_params(p: CkksParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(KIND_PARAMS))
    _w_params(buf, p)
    return buf.getvalue()


def load_params(data: bytes) -> CkksParams:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_PARAMS)
    return _r_params(buf)


def dump_ciphertext(ct: Ciphertext, params: CkksParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(KIND_CIPHERTEXT))
    n = params.ring_degree
    buf.write(struct.pack("<IId", n, ct.level, ct.scale))
    primes = params.modulus_chain[: ct.level + 1]
    buf.write(struct.pack("<H", len(primes)))
    for q in primes:
        buf.write(struct.pack("<Q", q))
    _w_arr(buf, ct.c0)
    _w_arr(buf, ct.c1)
    return buf.getvalue()


def load_ciphertext(data: bytes, params: CkksParams) -> Ciphertext:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_CIPHERTEXT)
    n, level, scale = struct.unpack("<IId", buf.read(16))
    if n != params.ring_degree:
        raise SerializationError("ring degree mismatch")
    (nc,) = struct.unpack("<H", buf.read(2))
    primes = struct.unpack(f"<{nc}Q", buf.read(8 * nc))
    if primes != params.modulus_chain[: level + 1]:
        raise SerializationError("modulus chain mismatch")
    c0 = _r_arr(buf, (level + 1, n))
    c1 = _r_arr(buf, (level + 1, n))
    return Ciphertext(c0, c1, level, scale)


def _w_kskey(buf: io.BytesIO, k: KSKey):
    buf.write(struct.pack("<H", len(k.digits)))
    for b, a in k.digits:
        _w_arr(buf, b)
        _w_arr(buf, a)


def _r_kskey(buf: io.BytesIO, rows: int, n: int) -> KSKey:
    (nd,) = struct.unpack("<H", buf.read(2))
    digits = []
    for _ in range(nd):
        b = _r_arr(buf, (rows, n))
        a = _r_arr(buf, (rows, n))
        digits.append((b, a))
    return KSKey(digits)


def dump_keyset(keys: KeySet, include_rotation: bool = True) -> bytes:
    """Serialize the evaluation material: params, pk, relin, rotation keys.

    The secret key is intentionally excluded; use dump_secret_key."""
    p = keys.params
    buf = io.BytesIO()
    buf.write(_header(KIND_KEYSET))
    _w_params(buf, p)
    _w_arr(buf, keys.public.c0)
    _w_arr(buf, keys.public.c1)
    _w_kskey(buf, keys.relin)
    rot = keys.rotation if include_rotation else {}
    buf.write(struct.pack("<H", len(rot)))
    for step in sorted(rot):
        buf.write(struct.pack("<I", step))
        _w_kskey(buf, rot[step])
    return buf.getvalue()


def load_keyset(data: bytes) -> KeySet:
    """Load evaluation keys; the secret slot is None."""
    buf = io.BytesIO(data)
    _check_header(buf, KIND_KEYSET)
    p = _r_params(buf)
    n = p.ring_degree
    n_chain = len(p.modulus_chain)
    rows = n_chain + len(p.special_moduli)
    pk = PublicKey(_r_arr(buf, (n_chain, n)), _r_arr(buf, (n_chain, n)))
    relin = _r_kskey(buf, rows, n)
    (nr,) = struct.unpack("<H", buf.read(2))
    rotation = {}
    for _ in range(nr):
        (step,) = struct.unpack("<I", buf.read(4))
        rotation[step] = _r_kskey(buf, rows, n)
    return KeySet(p, None, pk, relin, rotation)


def dump_secret_key(sk: SecretKey, params: CkksParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(KIND_SECRET_KEY))
    _w_params(buf, params)
    buf.write(np.ascontiguousarray(sk.coeffs, dtype="<i8").tobytes())
    return buf.getvalue()


def load_secret_key(data: bytes) -> tuple[SecretKey, CkksParams]:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_SECRET_KEY)
    p = _r_params(buf)
    raw = buf.read(p.ring_degree * 8)
    coeffs = np.frombuffer(raw, dtype="<i8").astype(np.int64)
    ctx = get_context(p)
    evals = ctx.ring.from_signed_coeffs(
        coeffs, ctx.chain_idx + ctx.special_idx)
    return SecretKey(coeffs, evals), p
