"""Normalization-polynomial fitting, encrypted norm/normalize/score, and
threshold calibration."""

from __future__ import annotations

import numpy as np
import pytest

from enface.ckks import decrypt_to_values, encode, encrypt
from enface.errors import DegenerateInputError, FingerprintError
from enface.matcher import (
    L2PolyCoeffs,
    MatchThreshold,
    calibrate_threshold,
    decide,
    fit_l2_poly,
    he_l2_normalize,
    he_match,
    he_score,
    he_squared_norm,
)
from enface.model import EncryptedFeature

DIM = 16


def _feat(v, params, keys, fp="fp"):
    """Encrypt a DIM-periodic repeated-packed feature vector."""
    v = np.asarray(v, dtype=np.float64)
    vec = np.tile(v, params.slot_count // DIM)
    pt = encode(vec, params.max_level, params)
    return EncryptedFeature(encrypt(pt, keys.public, params), DIM, fp)


def _dec(ct, params, keys):
    return decrypt_to_values(ct, keys.secret, params).real


# ---------------------------------------------------------------------------
# polynomial fitting


def test_fit_l2_poly_derived_values():
    # norms {0.5, 1.5}: mean 1, std 0.5, control points (0.5, 1, 1.5)
    coeffs = fit_l2_poly([0.5, 1.5])
    assert coeffs.fallback is None
    assert coeffs.control_points == (0.5, 1.0, 1.5)
    assert abs(coeffs(0.5) - np.sqrt(2.0)) <= 1e-12
    assert abs(coeffs(1.0) - 1.0) <= 1e-12
    assert abs(coeffs(1.5) - 1.0 / np.sqrt(1.5)) <= 1e-12


def test_fit_l2_poly_tracks_interpolant_between_points():
    # a realistic calibration spread (std/mean = 0.05) meets the 2^-10 grid
    # bound; a very wide bracket degrades gracefully rather than blowing up
    coeffs = fit_l2_poly([0.95, 1.05])
    grid = np.linspace(0.95, 1.05, 1001)
    assert np.max(np.abs(coeffs(grid) - 1.0 / np.sqrt(grid))) <= 2.0**-10
    wide = fit_l2_poly([0.5, 1.5])
    grid = np.linspace(0.5, 1.5, 1001)
    assert np.max(np.abs(wide(grid) - 1.0 / np.sqrt(grid))) <= 0.05


def test_fit_l2_poly_degenerate_std_fallback():
    coeffs = fit_l2_poly([2.0, 2.0, 2.0])
    assert coeffs.fallback == "degenerate-std"
    assert coeffs.control_points == (1.8, 2.0, 2.2)
    assert abs(coeffs(2.0) - 1.0 / np.sqrt(2.0)) <= 1e-12


def test_fit_l2_poly_shifted_t1_fallback():
    norms = [0.1, 0.1, 0.1, 10.0]  # std > mean
    coeffs = fit_l2_poly(norms)
    assert coeffs.fallback == "shifted-t1"
    assert coeffs.control_points[0] == pytest.approx(0.1 * np.mean(norms))
    assert coeffs.control_points[0] > 0


def test_fit_l2_poly_rejects_bad_inputs():
    with pytest.raises(DegenerateInputError):
        fit_l2_poly([1.0])
    with pytest.raises(DegenerateInputError):
        fit_l2_poly([1.0, 0.0])
    with pytest.raises(DegenerateInputError):
        fit_l2_poly([1.0, -2.0])


def test_l2_poly_json_roundtrip():
    coeffs = fit_l2_poly([0.5, 1.5])
    back = L2PolyCoeffs.from_json(coeffs.to_json())
    assert back == coeffs


# ---------------------------------------------------------------------------
# encrypted norm and normalization


def test_he_squared_norm_basis(small_params, small_keys):
    e0 = np.zeros(DIM)
    e0[0] = 1.0
    out = _dec(he_squared_norm(_feat(e0, small_params, small_keys), small_keys),
               small_params, small_keys)
    assert np.max(np.abs(out - 1.0)) <= 2.0**-12


def test_he_squared_norm_zero(small_params, small_keys):
    out = _dec(he_squared_norm(_feat(np.zeros(DIM), small_params, small_keys),
                               small_keys), small_params, small_keys)
    assert np.max(np.abs(out)) <= 2.0**-12


def test_he_squared_norm_random(small_params, small_keys):
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, DIM)
    f = _feat(v, small_params, small_keys)
    out_ct = he_squared_norm(f, small_keys)
    assert f.ct.level - out_ct.level == 1
    out = _dec(out_ct, small_params, small_keys)
    assert np.max(np.abs(out - float(v @ v))) <= 2.0**-12


def test_he_l2_normalize(small_params, small_keys):
    rng = np.random.default_rng(1)
    v = rng.uniform(-1, 1, DIM)
    t = float(v @ v)
    coeffs = fit_l2_poly([0.9 * t, 1.1 * t])  # mean exactly t
    f = _feat(v, small_params, small_keys)
    out = he_l2_normalize(f, coeffs, small_keys)
    assert f.ct.level - out.ct.level == 4
    got = _dec(out.ct, small_params, small_keys)[:DIM]
    assert np.max(np.abs(got - v / np.sqrt(t))) <= 2.0**-8
    assert abs(float(got @ got) - 1.0) <= 2.0**-7


def test_he_l2_normalize_scaled_input(small_params, small_keys):
    """Scaling the raw feature inside the calibration bracket still lands
    near the unit sphere."""
    rng = np.random.default_rng(2)
    v = rng.uniform(-1, 1, DIM)
    t = float(v @ v)
    coeffs = fit_l2_poly([0.8 * t, 1.2 * t])
    for s in (0.95, 1.05):
        f = _feat(v * s, small_params, small_keys)
        got = _dec(he_l2_normalize(f, coeffs, small_keys).ct,
                   small_params, small_keys)[:DIM]
        assert abs(float(got @ got) - 1.0) <= 2.0**-8


# ---------------------------------------------------------------------------
# encrypted score and match


def _unit(i):
    e = np.zeros(DIM)
    e[i] = 1.0
    return e


def test_he_score_identical_units(small_params, small_keys):
    f = _feat(_unit(0), small_params, small_keys)
    g = _feat(_unit(0), small_params, small_keys)
    out = _dec(he_score(f, g, small_keys), small_params, small_keys)
    assert abs(out[0]) <= 2.0**-12


def test_he_score_orthogonal_and_antipodal(small_params, small_keys):
    f = _feat(_unit(0), small_params, small_keys)
    g = _feat(_unit(1), small_params, small_keys)
    out = _dec(he_score(f, g, small_keys), small_params, small_keys)
    assert abs(out[0] - 2.0) <= 2.0**-12
    h = _feat(-_unit(0), small_params, small_keys)
    out = _dec(he_score(f, h, small_keys), small_params, small_keys)
    assert abs(out[0] - 4.0) <= 2.0**-12


def test_he_score_level_cost(small_params, small_keys):
    f = _feat(_unit(0), small_params, small_keys)
    g = _feat(_unit(1), small_params, small_keys)
    assert f.ct.level - he_score(f, g, small_keys).level == 1


def test_he_score_fingerprint_mismatch(small_params, small_keys):
    f = _feat(_unit(0), small_params, small_keys, fp="a")
    g = _feat(_unit(0), small_params, small_keys, fp="b")
    with pytest.raises(FingerprintError):
        he_score(f, g, small_keys)


def test_he_match_sign(small_params, small_keys):
    f = _feat(_unit(0), small_params, small_keys)
    g = _feat(_unit(1), small_params, small_keys)
    score = he_score(f, g, small_keys)  # == 2
    for thr, expect in ((2.5, -0.5), (MatchThreshold(1.5), 0.5)):
        out = _dec(he_match(score, thr, small_params), small_params, small_keys)
        assert abs(out[0] - expect) <= 2.0**-11


def test_decide_rule():
    assert decide(-0.1) is True
    assert decide(0.0) is False  # tie resolves to no-match
    assert decide(0.1) is False


# ---------------------------------------------------------------------------
# threshold calibration


def _accuracy(t, g, i):
    g = np.asarray(g)
    i = np.asarray(i)
    return (np.count_nonzero(g < t) + np.count_nonzero(i >= t)) / (g.size + i.size)


def _brute_best(g, i):
    values = np.unique(np.concatenate([g, i]))
    span = values[-1] - values[0] or 1.0
    probes = np.concatenate([
        [values[0] - span / 2, values[-1] + span / 2],
        (values[:-1] + values[1:]) / 2,
        values,
    ])
    return max(_accuracy(t, g, i) for t in probes)


def test_calibrate_threshold_separated():
    thr = calibrate_threshold([0.1, 0.2], [0.8, 0.9])
    assert thr.T == pytest.approx(0.5)
    assert _accuracy(thr.T, [0.1, 0.2], [0.8, 0.9]) == 1.0


def test_calibrate_threshold_identical_lists():
    g = [0.3, 0.5, 0.7]
    thr = calibrate_threshold(g, g)
    assert _accuracy(thr.T, g, g) == pytest.approx(_brute_best(np.array(g),
                                                              np.array(g)))


def test_calibrate_threshold_overlapping_gaussians():
    rng = np.random.default_rng(7)
    g = rng.normal(0.4, 0.15, 200)
    i = rng.normal(1.0, 0.2, 200)
    thr = calibrate_threshold(g, i)
    assert _accuracy(thr.T, g, i) == pytest.approx(_brute_best(g, i))
    assert 0.4 < thr.T < 1.0
    assert "accuracy" in thr.note


def test_calibrate_threshold_shift_equivariance():
    rng = np.random.default_rng(8)
    g = rng.normal(0.0, 1.0, 50)
    i = rng.normal(1.0, 1.0, 50)
    base = calibrate_threshold(g, i)
    shifted = calibrate_threshold(g + 3.0, i + 3.0)
    assert shifted.T == pytest.approx(base.T + 3.0)


def test_calibrate_threshold_empty_rejected():
    with pytest.raises(DegenerateInputError):
        calibrate_threshold([], [1.0])
    with pytest.raises(DegenerateInputError):
        calibrate_threshold([1.0], [])
