"""Shared fixtures: small parameter sets, a toy 4-patch model, and one
session-wide encrypted evaluation that several test modules inspect."""

from __future__ import annotations

import numpy as np
import pytest

from enface.ckks import keygen
from enface.model import (
    compile_model,
    encrypt_image,
    eval_model_many,
    random_container,
    synthetic_image,
)
from enface.oracle import oracle_forward
from enface.params import CkksParams


def pow2_steps(n_slots: int) -> set[int]:
    return {1 << k for k in range(n_slots.bit_length() - 1)}


@pytest.fixture(scope="session")
def small_params() -> CkksParams:
    return CkksParams.build(ring_degree=2**11, max_level=8, scale_bits=40, dnum=3)


@pytest.fixture(scope="session")
def small_keys(small_params):
    steps = pow2_steps(small_params.slot_count) | {3, 5, 7, 100}
    return keygen(small_params, steps, rng_seed=1234)


TOY_CKKS = {"ring_degree": 2048, "max_level": 16, "scale_bits": 40, "dnum": 3}


@pytest.fixture(scope="session")
def toy_container() -> bytes:
    return random_container(
        seed=1, n_patches=4, patch_size=16, stem={"c_out": 8, "stride": 2},
        blocks=((16, 2),), ckks=TOY_CKKS, n_calibration=8,
    )


@pytest.fixture(scope="session")
def toy_model(toy_container):
    return compile_model(toy_container)


@pytest.fixture(scope="session")
def toy_keys(toy_model):
    return keygen(toy_model.params, toy_model.required_rotation_steps(),
                  rng_seed=7)


class ToyRun:
    """One batched encrypted evaluation of two images, with stage traces."""

    def __init__(self, model, keys):
        rng = np.random.default_rng(42)
        self.model = model
        self.keys = keys
        img1 = synthetic_image(rng, model.image_shape)
        img2 = np.clip(img1 + rng.normal(0, 0.03, img1.shape), 0, 1)
        self.images = [img1, img2]
        self.reports = [oracle_forward(im, model) for im in self.images]
        self.patch_cts = [encrypt_image(im, model, keys) for im in self.images]
        self.trace: dict = {}
        self.features = eval_model_many(self.patch_cts, model, keys, self.trace)


@pytest.fixture(scope="session")
def toy_run(toy_model, toy_keys) -> ToyRun:
    return ToyRun(toy_model, toy_keys)
