"""Cleartext oracle: fusion-form identity, reference matching, and
encrypted-vs-clear fault isolation."""

from __future__ import annotations

import json

import numpy as np
import pytest

from enface.errors import DegenerateInputError
from enface.model import compile_model, synthetic_image, write_container
from enface.oracle import (
    OracleError,
    avgpool_quadrants,
    conv2d,
    diff_encrypted,
    oracle_forward,
    oracle_match,
    quad_act,
)


# ---------------------------------------------------------------------------
# fusion permutation identity (pure numpy)


def test_fusion_permutation_identity_many():
    """For any fusion matrix A and any pooled maps, applying the per-patch
    column-permuted slices to quadrant-major pooling equals applying the raw
    matrix to channel-major pooling: 100 random instances."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.choice([4, 8, 16]))
        n_p = int(rng.choice([1, 4, 9]))
        d = 4 * c
        h = int(rng.choice([4, 8]))
        a_full = rng.normal(size=(d, n_p * d))
        bias = rng.normal(size=d)
        cols = np.arange(d)
        col_cm = (cols % c) * 4 + cols // c
        maps = [rng.normal(size=(c, h, h)) for _ in range(n_p)]
        fused = bias.copy()
        concat_cm = []
        for p, x in enumerate(maps):
            pooled_q, pooled_c = avgpool_quadrants(x)
            concat_cm.append(pooled_c)
            fused += a_full[:, p * d:(p + 1) * d][:, col_cm] @ pooled_q
        reference = a_full @ np.concatenate(concat_cm) + bias
        assert np.max(np.abs(fused - reference)) <= 1e-6


def test_avgpool_quadrants_orders():
    x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    q, c = avgpool_quadrants(x)
    # channel 0 quadrant means
    means = [x[0, :2, :2].mean(), x[0, :2, 2:].mean(),
             x[0, 2:, :2].mean(), x[0, 2:, 2:].mean()]
    assert np.allclose(c[:4], means)  # channel-major: c*4 + q
    assert np.allclose(q[::2], means)  # quadrant-major: q*C + c
    with pytest.raises(OracleError):
        avgpool_quadrants(np.zeros((1, 3, 4)))


def test_conv2d_and_quad_act_basics():
    x = np.ones((1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 2.0
    out = conv2d(x, w, np.array([0.5]), 1)
    assert np.allclose(out, 2.5)
    assert np.allclose(quad_act(np.full((1, 2, 2), 3.0), 1.0, [1.0], [2.0]),
                       3 * (3 + 1) + 2)


# ---------------------------------------------------------------------------
# reference matching


def test_oracle_forward_runs_fusion_check(toy_model, toy_run):
    report = toy_run.reports[0]
    assert report.fusion_gap <= 1e-6
    assert report.feature is not None
    assert f"patch{toy_model.n_patches - 1}/feature" in report.stages


def test_oracle_match_same_image(toy_model):
    rng = np.random.default_rng(11)
    img = synthetic_image(rng, toy_model.image_shape)
    rep = oracle_match(img, img, toy_model)
    assert rep.score == pytest.approx(
        2.0 - 2.0 * float(rep.normalized[0] @ rep.normalized[1]))
    assert rep.is_match
    assert rep.match_value < 0


def test_oracle_match_exact_norm(toy_model):
    rng = np.random.default_rng(12)
    img = synthetic_image(rng, toy_model.image_shape)
    rep = oracle_match(img, img, toy_model, use_poly_norm=False)
    assert abs(rep.score) <= 1e-9  # exactly unit features
    assert rep.is_match


def _zero_model(bias_zero=True):
    c_out, d, n_p = 4, 16, 4
    rng = np.random.default_rng(3)
    tensors = {"fusion.A": np.zeros((d, n_p * d)),
               "fusion.b": np.zeros(d) if bias_zero else rng.normal(size=d)}
    for p in range(n_p):
        pre = f"p{p}."
        tensors[pre + "stem.conv.w"] = np.zeros((c_out, 3, 3, 3))
        tensors[pre + "stem.conv.b"] = np.zeros(c_out)
        tensors[pre + "stem.bn.gamma"] = np.ones(c_out)
        tensors[pre + "stem.bn.beta"] = np.zeros(c_out)
        tensors[pre + "stem.bn.mean"] = np.zeros(c_out)
        tensors[pre + "stem.bn.var"] = np.ones(c_out)
    blob = write_container(
        tensors,
        image={"channels": 3, "height": 32, "width": 32,
               "mean": [0.5] * 3, "std": [0.5] * 3},
        patch_size=16,
        arch={"stem": {"c_out": c_out, "kernel": 3, "stride": 2}, "blocks": [],
              "feature_dim": d, "bn_eps": 1e-5},
        ckks={"ring_degree": 2048, "max_level": 10, "scale_bits": 40, "dnum": 3},
    )
    return compile_model(blob)


def test_oracle_match_zero_feature_degenerate():
    model = _zero_model(bias_zero=True)
    img = np.full(model.image_shape, 0.5)
    with pytest.raises(DegenerateInputError):
        oracle_match(img, img, model, use_poly_norm=False)


def test_oracle_match_requires_calibration():
    model = _zero_model(bias_zero=False)
    img = np.full(model.image_shape, 0.25)
    with pytest.raises(OracleError):
        oracle_match(img, img, model)  # no l2 polynomial in the container


# ---------------------------------------------------------------------------
# fault isolation


def test_diff_identical_run_is_clean(toy_model):
    rng = np.random.default_rng(13)
    img = synthetic_image(rng, toy_model.image_shape)
    report = oracle_forward(img, toy_model)
    decrypted = {k: v.copy() for k, v in report.stages.items()
                 if not k.endswith("channel-major")}
    diff = diff_encrypted(report, decrypted)
    assert diff.first_fault is None
    assert all(r.ok for r in diff.rows)


def test_diff_flags_first_corrupted_stage(toy_model):
    rng = np.random.default_rng(14)
    img = synthetic_image(rng, toy_model.image_shape)
    report = oracle_forward(img, toy_model)
    decrypted = {k: v.copy() for k, v in report.stages.items()
                 if not k.endswith("channel-major")}
    decrypted["patch1/stem"] = decrypted["patch1/stem"] + 0.5
    decrypted["patch1/pool"] = decrypted["patch1/pool"] + 0.5
    diff = diff_encrypted(report, decrypted, tolerance=1e-3)
    assert diff.first_fault == "patch1/stem"
    bad = {r.stage for r in diff.rows if not r.ok}
    assert bad == {"patch1/stem", "patch1/pool"}


def test_diff_per_stage_tolerance(toy_model):
    rng = np.random.default_rng(15)
    img = synthetic_image(rng, toy_model.image_shape)
    report = oracle_forward(img, toy_model)
    decrypted = {"patch0/stem": report.stages["patch0/stem"] + 1e-4}
    assert diff_encrypted(report, decrypted).first_fault is None
    strict = diff_encrypted(report, decrypted,
                            per_stage={"patch0/stem": 1e-6})
    assert strict.first_fault == "patch0/stem"


def test_diff_rejects_bad_inputs(toy_model):
    rng = np.random.default_rng(16)
    img = synthetic_image(rng, toy_model.image_shape)
    report = oracle_forward(img, toy_model)
    with pytest.raises(OracleError):
        diff_encrypted(report, {"not-a-stage": np.zeros(3)})
    with pytest.raises(OracleError):
        diff_encrypted(report, {})


def test_diff_report_emission(toy_model):
    rng = np.random.default_rng(17)
    img = synthetic_image(rng, toy_model.image_shape)
    report = oracle_forward(img, toy_model)
    diff = diff_encrypted(report, {"feature": report.feature + 1.0},
                          tolerance=1e-3)
    text = str(diff)
    assert "FAULT" in text and "first fault: feature" in text
    parsed = json.loads(diff.to_json())
    assert parsed["first_fault"] == "feature"
    assert parsed["stages"][0]["stage"] == "feature"
    assert parsed["stages"][0]["ok"] is False
