"""Scheme-level tests: keygen, encode/decode, encrypt/decrypt, and the
homomorphic operations with their noise bounds and level accounting."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enface.ckks import (
    decode,
    decrypt,
    decrypt_to_values,
    encode,
    encrypt,
    he_add,
    he_mul,
    he_rotate,
    he_sub,
    keygen,
    mod_switch_to,
    rescale,
)
from enface.errors import (
    CapacityError,
    MissingRotationKeyError,
    ParameterError,
    ScaleMismatchError,
)
from enface.params import CkksParams
from enface.serialize import dump_keyset


def rand_vec(rng, n, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, n)


# ---------------------------------------------------------------------------
# keygen


def test_keygen_deterministic(small_params):
    a = keygen(small_params, {1, 2, 4}, rng_seed=99)
    b = keygen(small_params, {1, 2, 4}, rng_seed=99)
    assert dump_keyset(a) == dump_keyset(b)


def test_keygen_seed_changes_keys(small_params):
    a = keygen(small_params, {1}, rng_seed=1)
    b = keygen(small_params, {1}, rng_seed=2)
    assert dump_keyset(a) != dump_keyset(b)


def test_missing_rotation_key(small_params):
    keys = keygen(small_params, {1, 2, 4}, rng_seed=0)
    pt = encode(np.ones(small_params.slot_count), small_params.max_level,
                small_params)
    ct = encrypt(pt, keys.public, small_params)
    with pytest.raises(MissingRotationKeyError):
        he_rotate(ct, 8, keys)


def test_secret_hamming_weight(small_params):
    keys = keygen(small_params, set(), rng_seed=5)
    nz = np.count_nonzero(keys.secret.coeffs)
    assert nz == small_params.secret_hamming_weight
    assert set(np.unique(keys.secret.coeffs)) <= {-1, 0, 1}


def test_invalid_params_rejected():
    with pytest.raises(ParameterError):
        CkksParams(ring_degree=1000, modulus_chain=(12289,), special_moduli=(40961,),
                   scale=2.0**20)
    with pytest.raises(ParameterError):
        # 7 is prime but not 1 mod 2N
        CkksParams(ring_degree=8, modulus_chain=(7,), special_moduli=(97,),
                   scale=2.0**2)


# ---------------------------------------------------------------------------
# encode / decode


def test_encode_zero_roundtrip(small_params):
    pt = encode(np.zeros(16), small_params.max_level, small_params)
    out = decode(pt, small_params)
    assert np.max(np.abs(out)) <= 2.0**-30


def test_encode_roundtrip_bound(small_params):
    rng = np.random.default_rng(0)
    v = rand_vec(rng, 256)
    pt = encode(v, small_params.max_level, small_params)
    out = decode(pt, small_params)[:256].real
    assert np.max(np.abs(out - v)) <= 2.0**-20


def test_encode_capacity_error(small_params):
    with pytest.raises(CapacityError):
        encode(np.zeros(small_params.slot_count + 1), 0, small_params)


def test_unfilled_slots_zero(small_params):
    pt = encode(np.ones(4), small_params.max_level, small_params)
    out = decode(pt, small_params)
    assert np.max(np.abs(out[4:])) <= 2.0**-20


def test_decode_of_rotation_is_shift(small_params, small_keys):
    rng = np.random.default_rng(1)
    v = rand_vec(rng, small_params.slot_count)
    pt = encode(v, small_params.max_level, small_params)
    ct = encrypt(pt, small_keys.public, small_params)
    out = decrypt_to_values(he_rotate(ct, 4, small_keys), small_keys.secret,
                            small_params).real
    assert np.max(np.abs(out - np.roll(v, -4))) <= 2.0**-17


# ---------------------------------------------------------------------------
# encrypt / decrypt


def test_encrypt_zero(small_params, small_keys):
    pt = encode(np.zeros(small_params.slot_count), small_params.max_level,
                small_params)
    ct = encrypt(pt, small_keys.public, small_params)
    out = decrypt_to_values(ct, small_keys.secret, small_params)
    assert np.max(np.abs(out)) <= 2.0**-18


def test_encrypt_statistical_bound(small_params, small_keys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        v = rand_vec(rng, small_params.slot_count)
        pt = encode(v, small_params.max_level, small_params)
        ct = encrypt(pt, small_keys.public, small_params)
        out = decrypt_to_values(ct, small_keys.secret, small_params).real
        worst = max(worst, float(np.max(np.abs(out - v))))
    assert worst <= 2.0**-18


def test_encrypt_fresh_randomness(small_params, small_keys):
    pt = encode(np.ones(8), small_params.max_level, small_params)
    a = encrypt(pt, small_keys.public, small_params)
    b = encrypt(pt, small_keys.public, small_params)
    assert not np.array_equal(a.c1, b.c1)


def test_decrypt_wrong_key_garbage(small_params, small_keys):
    other = keygen(small_params, set(), rng_seed=777)
    v = np.full(small_params.slot_count, 0.25)
    pt = encode(v, small_params.max_level, small_params)
    ct = encrypt(pt, small_keys.public, small_params)
    out = decrypt_to_values(ct, other.secret, small_params).real
    assert np.max(np.abs(out - v)) > 1.0  # error >> noise bound


# ---------------------------------------------------------------------------
# homomorphic ops


def _enc(v, params, keys, level=None):
    pt = encode(v, params.max_level if level is None else level, params)
    return encrypt(pt, keys.public, params)


def test_he_add_sub(small_params, small_keys):
    rng = np.random.default_rng(3)
    a = rand_vec(rng, small_params.slot_count)
    b = rand_vec(rng, small_params.slot_count)
    ca, cb = _enc(a, small_params, small_keys), _enc(b, small_params, small_keys)
    s = decrypt_to_values(he_add(ca, cb, small_params), small_keys.secret,
                          small_params).real
    d = decrypt_to_values(he_sub(ca, cb, small_params), small_keys.secret,
                          small_params).real
    assert np.max(np.abs(s - (a + b))) <= 2.0**-17
    assert np.max(np.abs(d - (a - b))) <= 2.0**-17


def test_he_add_plaintext(small_params, small_keys):
    rng = np.random.default_rng(4)
    a = rand_vec(rng, small_params.slot_count)
    b = rand_vec(rng, small_params.slot_count)
    ca = _enc(a, small_params, small_keys)
    pb = encode(b, ca.level, small_params, ca.scale)
    out = decrypt_to_values(he_add(ca, pb, small_params), small_keys.secret,
                            small_params).real
    assert np.max(np.abs(out - (a + b))) <= 2.0**-17


def test_he_mul_ct_ct(small_params, small_keys):
    rng = np.random.default_rng(5)
    a = rand_vec(rng, small_params.slot_count)
    b = rand_vec(rng, small_params.slot_count)
    ca, cb = _enc(a, small_params, small_keys), _enc(b, small_params, small_keys)
    out_ct = he_mul(ca, cb, small_keys)
    assert out_ct.level == ca.level - 1  # exactly one level
    out = decrypt_to_values(out_ct, small_keys.secret, small_params).real
    assert np.max(np.abs(out - a * b)) <= 2.0**-15


def test_he_mul_plaintext(small_params, small_keys):
    rng = np.random.default_rng(6)
    a = rand_vec(rng, small_params.slot_count)
    b = rand_vec(rng, small_params.slot_count)
    ca = _enc(a, small_params, small_keys)
    pb = encode(b, ca.level, small_params, small_params.scale)
    out_ct = he_mul(ca, pb, params=small_params)
    assert out_ct.level == ca.level - 1
    out = decrypt_to_values(out_ct, small_keys.secret, small_params).real
    assert np.max(np.abs(out - a * b)) <= 2.0**-15


def test_he_rotate_roundtrip(small_params, small_keys):
    rng = np.random.default_rng(7)
    v = rand_vec(rng, small_params.slot_count)
    ct = _enc(v, small_params, small_keys)
    for r in (1, 2, 7, 100, small_params.slot_count - 1):
        out = decrypt_to_values(he_rotate(ct, r, small_keys),
                                small_keys.secret, small_params).real
        assert np.max(np.abs(out - np.roll(v, -r))) <= 2.0**-17, r
    zero = he_rotate(ct, 0, small_keys)
    assert np.array_equal(zero.c0, ct.c0) and np.array_equal(zero.c1, ct.c1)


def test_rotation_composition(small_params, small_keys):
    rng = np.random.default_rng(8)
    v = rand_vec(rng, small_params.slot_count)
    ct = _enc(v, small_params, small_keys)
    a = he_rotate(he_rotate(ct, 2, small_keys), 5, small_keys)
    b = he_rotate(ct, 7, small_keys)
    da = decrypt_to_values(a, small_keys.secret, small_params).real
    db = decrypt_to_values(b, small_keys.secret, small_params).real
    assert np.max(np.abs(da - db)) <= 2.0**-16


def test_rescale_and_mod_switch(small_params, small_keys):
    v = np.full(small_params.slot_count, 0.5)
    ct = _enc(v, small_params, small_keys)
    low = mod_switch_to(ct, 3, small_params)
    assert low.level == 3 and low.scale == ct.scale
    out = decrypt_to_values(low, small_keys.secret, small_params).real
    assert np.max(np.abs(out - v)) <= 2.0**-17
    # rescale drops one level and divides the scale by the dropped prime
    big = encode(v, ct.level, small_params,
                 small_params.scale * small_params.modulus_chain[ct.level])
    ct2 = encrypt(big, small_keys.public, small_params)
    r = rescale(ct2, small_params)
    assert r.level == ct.level - 1
    assert abs(r.scale - small_params.scale) / small_params.scale <= 2.0**-30
    out = decrypt_to_values(r, small_keys.secret, small_params).real
    assert np.max(np.abs(out - v)) <= 2.0**-15


def test_scale_mismatch_rejected(small_params, small_keys):
    v = np.ones(small_params.slot_count)
    a = _enc(v, small_params, small_keys)
    pt = encode(v, a.level, small_params, a.scale * 1.5)
    with pytest.raises(ScaleMismatchError):
        he_add(a, pt, small_params)


def test_depth_chain_mul(small_params, small_keys):
    """Repeated squaring down the chain stays within growing noise bounds."""
    v = np.full(small_params.slot_count, 0.9)
    ct = _enc(v, small_params, small_keys)
    expect = v.copy()
    for _ in range(3):
        ct = he_mul(ct, ct, small_keys)
        expect = expect * expect
        out = decrypt_to_values(ct, small_keys.secret, small_params).real
        assert np.max(np.abs(out - expect)) <= 2.0**-12


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**11 // 2 - 1),
       st.integers(min_value=0, max_value=2**11 // 2 - 1))
def test_rotation_additivity_clear(r1, r2):
    """decode(rot a ∘ rot b) == roll by a+b — pure slot-index property."""
    n = 2**11 // 2
    v = np.arange(n, dtype=np.float64)
    assert np.array_equal(np.roll(np.roll(v, -r1), -r2),
                          np.roll(v, -((r1 + r2) % n)))
