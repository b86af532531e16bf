"""Tensor layout tests: the slot map is a bijection, the replication count
follows the footprint formula, multiplexing conserves the occupied slot set,
and pack/unpack round-trips (including through encryption)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enface.ckks import decrypt_to_values, encrypt, he_rotate
from enface.errors import LayoutError
from enface.packing import (
    TensorLayout,
    conv_output_layout,
    feature_layout,
    from_slots,
    multiplex_layout,
    pack,
    to_slots,
    unpack,
)


def test_copies_formula_example():
    # 3x8x8 tensor in a 4096-slot ring: M = floor(4096 / 192) = 21
    layout = TensorLayout((3, 8, 8), (1, 1), 4096)
    assert layout.footprint == 192
    assert layout.copies == 21


def test_slot_map_bijection():
    layout = TensorLayout((8, 4, 4), (2, 2), 1024)
    seen = set()
    for m in range(layout.copies):
        idx = layout.slot_map(m).ravel()
        assert len(set(idx.tolist())) == layout.footprint
        assert seen.isdisjoint(idx.tolist())
        seen.update(idx.tolist())
    assert max(seen) < 1024


@settings(max_examples=40, deadline=None)
@given(
    c_factor=st.integers(1, 4),
    h=st.sampled_from([2, 4, 8]),
    w=st.sampled_from([2, 4, 8]),
    gaps=st.sampled_from([(1, 1), (2, 2), (4, 4), (2, 4)]),
)
def test_slot_map_bijection_property(c_factor, h, w, gaps):
    c = c_factor * gaps[0] * gaps[1]
    if c * h * w > 1024:
        return
    layout = TensorLayout((c, h, w), gaps, 1024)
    idx = layout.slot_map(0).ravel()
    assert len(np.unique(idx)) == layout.footprint
    # copy m is copy 0 shifted by m * footprint
    for m in range(1, min(layout.copies, 3)):
        assert np.array_equal(layout.slot_map(m), idx.reshape(layout.shape)
                              + m * layout.footprint)


def test_multiplex_conserves_slots():
    parent = TensorLayout((4, 8, 8), (1, 1), 1024)
    child = multiplex_layout(parent, 2)
    assert child.shape == (16, 4, 4)
    assert child.gaps == (2, 2)
    assert child.footprint == parent.footprint
    assert set(child.slot_map(0).ravel().tolist()) == \
        set(parent.slot_map(0).ravel().tolist())


def test_multiplex_stride1_identity():
    parent = TensorLayout((4, 8, 8), (1, 1), 1024)
    assert multiplex_layout(parent, 1) is parent


def test_conv_output_layout_strides():
    inp = TensorLayout((3, 16, 16), (1, 1), 1024)
    s1 = conv_output_layout(inp, 4, 1)
    assert s1.shape == (4, 16, 16) and s1.gaps == (1, 1)
    s2 = conv_output_layout(inp, 8, 2)
    assert s2.shape == (8, 8, 8) and s2.gaps == (2, 2)
    assert s2.plane_slots == inp.plane_slots


def test_layout_validation():
    with pytest.raises(LayoutError):
        TensorLayout((3, 4, 4), (2, 2), 1024)  # channels not divisible by gaps
    with pytest.raises(LayoutError):
        TensorLayout((64, 8, 8), (1, 1), 1024)  # footprint too big
    with pytest.raises(LayoutError):
        multiplex_layout(TensorLayout((1, 3, 3), (1, 1), 64), 2)  # odd dims


def test_to_from_slots_roundtrip():
    rng = np.random.default_rng(0)
    layout = TensorLayout((8, 4, 4), (2, 2), 1024)
    t = rng.normal(size=layout.shape)
    vec = to_slots(t, layout)
    for m in range(layout.copies):
        assert np.array_equal(from_slots(vec, layout, m), t)
    assert np.array_equal(unpack(vec, layout, check_copies=0.0), t)


def test_unpack_copy_deviation_flagged():
    layout = TensorLayout((2, 2, 2), (1, 1), 64)
    vec = to_slots(np.ones(layout.shape), layout)
    vec[layout.footprint] += 0.5  # corrupt copy 1
    with pytest.raises(LayoutError):
        unpack(vec, layout, check_copies=1e-6)


def test_pack_encrypt_roundtrip(small_params, small_keys):
    rng = np.random.default_rng(1)
    layout = TensorLayout((8, 8, 8), (2, 2), small_params.slot_count)
    t = rng.uniform(-1, 1, layout.shape)
    pt = pack(t, layout, small_params.max_level, small_params)
    ct = encrypt(pt, small_keys.public, small_params)
    vec = decrypt_to_values(ct, small_keys.secret, small_params).real
    out = unpack(vec, layout, check_copies=2.0**-15)
    assert np.max(np.abs(out - t)) <= 2.0**-17


def test_rotation_moves_channel_plane(small_params, small_keys):
    """Rotating by one parent-plane stride shifts the channel axis."""
    rng = np.random.default_rng(2)
    layout = TensorLayout((4, 8, 8), (1, 1), small_params.slot_count)
    t = rng.uniform(-1, 1, layout.shape)
    ct = encrypt(pack(t, layout, small_params.max_level, small_params),
                 small_keys.public, small_params)
    rot = he_rotate(ct, layout.plane_slots, small_keys)
    vec = decrypt_to_values(rot, small_keys.secret, small_params).real
    out = from_slots(vec, layout, 0)
    assert np.max(np.abs(out[:3] - t[1:])) <= 2.0**-16


def test_feature_layout_replication():
    fl = feature_layout(64, 1024)
    assert fl.shape == (64, 1, 1)
    assert fl.copies == 16
    assert np.array_equal(fl.slot_map(0).ravel(), np.arange(64))


def test_layout_json_roundtrip():
    layout = TensorLayout((8, 4, 4), (2, 2), 1024)
    back = TensorLayout.from_json(layout.to_json())
    assert back == layout
    bad = layout.to_json()
    bad["version"] = 99
    with pytest.raises(LayoutError):
        TensorLayout.from_json(bad)
