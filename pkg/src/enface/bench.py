"""Benchmarks: compiled-vs-Python kernel comparison and patch scaling.

Two questions the benchmarks answer:

  * how much the compiled extension buys over the pure-Python fallback on
    the hot ring kernels (NTT, modular multiply-accumulate), and
  * how evaluation wall time scales with the patch count when per-patch
    networks are dispatched to a worker pool (the design target is that a
    16-patch model costs <= 1.5x a 4-patch model of identical per-patch
    architecture, given enough workers).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .ckks import he_add, keygen
from .model import (
    EncryptedFeature,
    compile_model,
    encrypt_image,
    eval_pcnn_many,
    random_container,
    synthetic_image,
)


def _time(fn, reps: int) -> float:
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_kernels(n: int = 2**13, reps: int = 10) -> dict:
    """Per-op seconds for both kernel backends plus the speedup factor."""
    from .backend import pykernels

    try:
        from .backend import _kernels as compiled
    except ImportError:
        compiled = None

    from .rns import find_ntt_primes, RingContext

    prime = find_ntt_primes(59, 1, n)[0]
    ring = RingContext(n, [prime])
    m = ring.moduli[0]
    rng = np.random.default_rng(0)
    a = rng.integers(0, m.q, n, dtype=np.uint64)
    b = rng.integers(0, m.q, n, dtype=np.uint64)
    acc = np.zeros(n, dtype=np.uint64)
    out = np.zeros(n, dtype=np.uint64)
    perm = rng.permutation(n).astype(np.uint32)

    cases = {
        "ntt_forward": lambda k: k.ntt_forward(a.copy(), m.psi_pows, m.w_pows,
                                               m.bitrev, m.q),
        "arr_mulmod": lambda k: k.arr_mulmod(out, a, b, m.q),
        "arr_mac": lambda k: k.arr_mac(acc, a, b, m.q),
        "arr_mac_perm": lambda k: k.arr_mac_perm(acc, a, perm, b, m.q),
    }
    results = {}
    for name, case in cases.items():
        row = {"python": _time(lambda: case(pykernels), reps)}
        if compiled is not None:
            row["compiled"] = _time(lambda: case(compiled), reps)
            row["speedup"] = row["python"] / row["compiled"]
        results[name] = row
    return results


def _light_container(n_patches: int, seed: int = 11) -> bytes:
    """A small identical-per-patch model (stem, pool, linear; no blocks)."""
    return random_container(
        seed=seed, n_patches=n_patches, patch_size=16,
        stem={"c_out": 8, "stride": 2}, blocks=(),
        ckks={"ring_degree": 2048, "max_level": 10, "scale_bits": 40, "dnum": 3},
        calibrate=False,
    )


def bench_patch_scaling(patch_counts=(4, 16), workers: int = 16,
                        seed: int = 11) -> dict:
    """Wall time of one encrypted forward pass per patch count, with the
    per-patch networks dispatched to ``workers`` threads."""
    results = {}
    for n_p in patch_counts:
        model = compile_model(_light_container(n_p, seed))
        keys = keygen(model.params, model.required_rotation_steps(), rng_seed=1)
        img = synthetic_image(np.random.default_rng(seed), model.image_shape)
        cts = encrypt_image(img, model, keys)

        def run_one(p):
            return eval_pcnn_many([cts[p]], model.patches[p], keys, model)[0]

        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=min(workers, n_p)) as pool:
            outs = list(pool.map(run_one, range(n_p)))
        total = outs[0]
        for ct in outs[1:]:
            total = he_add(total, ct, model.params)
        elapsed = time.perf_counter() - t0
        results[n_p] = {"seconds": elapsed, "workers": min(workers, n_p)}
        _ = EncryptedFeature(total, model.feature_dim, model.fingerprint)
    counts = sorted(results)
    if len(counts) >= 2:
        results["ratio"] = results[counts[-1]]["seconds"] / results[counts[0]]["seconds"]
    return results
