"""Acceptance gate: the eight primary criteria, one test (and one printed
pass/fail line) each, at their stated tolerances.

Criterion 6 needs real hardware parallelism (>= 16 workers making progress
concurrently).  On a single-core host the worker pool serializes and the
measured ratio sits far above the bound; the test asserts the bound anyway
and reports the measured numbers — it is expected to fail honestly there.
"""

from __future__ import annotations

import os
import time

import numpy as np
import pytest

from enface.ckks import (
    decrypt_to_values,
    encode,
    encrypt,
    he_add,
    he_mul,
    he_rotate,
    keygen,
)
from enface.errors import CompileError
from enface.layers import QuadActSpec, analyze_depth
from enface.matcher import he_l2_normalize, he_match, he_score
from enface.model import (
    MATCHER_RESERVE,
    EncryptedFeature,
    compile_model,
    decrypt_feature,
    encrypt_image,
    eval_model_many,
    random_container,
    synthetic_image,
)
from enface.oracle import avgpool_quadrants, oracle_forward
from enface.packing import from_slots, to_slots
from enface.params import CkksParams
from enface.protocol import (
    ERR_FINGERPRINT,
    MSG_ERROR,
    ClientSession,
    LoopbackTransport,
    RecordStore,
    Transcript,
    decode_error,
    decode_request,
    encode_request,
    make_setup_bundle,
    server_setup,
)

REPORT = os.path.join(os.path.dirname(__file__), "..", "acceptance_report.txt")
_initialized = False


def _report(n: int, name: str, ok: bool, detail: str):
    global _initialized
    line = f"CRITERION {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
    mode = "w" if not _initialized else "a"
    _initialized = True
    with open(REPORT, mode) as fh:
        fh.write(line + "\n")
    print("\n" + line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. CKKS homomorphism suite: 100 random trials per op at N=2^13, Delta=2^40;
#    add/rotate <= 2^-17, mul <= 2^-15, runtime < 1 min.


def test_criterion_1_ckks_homomorphism():
    t0 = time.perf_counter()
    params = CkksParams.build(ring_degree=2**13, max_level=3, scale_bits=40,
                              dnum=3)
    rot_steps = (1, 2, 16, 128, 1025)
    keys = keygen(params, set(rot_steps), rng_seed=41)
    rng = np.random.default_rng(6)
    n = params.slot_count
    worst = {"add": 0.0, "rotate": 0.0, "mul": 0.0}
    for trial in range(100):
        a = rng.uniform(-1, 1, n)
        b = rng.uniform(-1, 1, n)
        ca = encrypt(encode(a, params.max_level, params), keys.public, params)
        cb = encrypt(encode(b, params.max_level, params), keys.public, params)
        out = decrypt_to_values(he_add(ca, cb, params), keys.secret, params).real
        worst["add"] = max(worst["add"], float(np.max(np.abs(out - (a + b)))))
        r = rot_steps[trial % len(rot_steps)]
        out = decrypt_to_values(he_rotate(ca, r, keys), keys.secret, params).real
        worst["rotate"] = max(worst["rotate"],
                              float(np.max(np.abs(out - np.roll(a, -r)))))
        out = decrypt_to_values(he_mul(ca, cb, keys), keys.secret, params).real
        worst["mul"] = max(worst["mul"], float(np.max(np.abs(out - a * b))))
    elapsed = time.perf_counter() - t0
    ok = (worst["add"] <= 2.0**-17 and worst["rotate"] <= 2.0**-17
          and worst["mul"] <= 2.0**-15 and elapsed < 60.0)
    _report(1, "ckks homomorphism", ok,
            f"100 trials/op at N=2^13: add {worst['add']:.2e} (<=2^-17), "
            f"rotate {worst['rotate']:.2e} (<=2^-17), "
            f"mul {worst['mul']:.2e} (<=2^-15), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 2. Depth ledger: fused block exactly 6 levels, unfused reference exactly 8;
#    over-budget models fail at compile time.


def test_criterion_2_depth_ledger(toy_model):
    blk = toy_model.patches[0].blocks[0]
    fused = analyze_depth([blk.conv1, blk.act1, blk.conv2, blk.act2,
                           "residual"])[-1][2]
    unf = QuadActSpec(blk.act1.b, blk.act1.c, a=np.ones_like(blk.act1.b),
                      fused=False)
    reference = analyze_depth([blk.conv1, unf, blk.conv2, unf,
                               "residual"])[-1][2]
    compile_failed = False
    where = ""
    try:
        compile_model(random_container(
            seed=1, n_patches=4, patch_size=16, stem={"c_out": 8, "stride": 2},
            blocks=((16, 2),),
            ckks={"ring_degree": 2048, "max_level": 12, "scale_bits": 40,
                  "dnum": 3},
            calibrate=False))
    except CompileError as exc:
        compile_failed = True
        where = str(exc)
    ok = fused == 6 and reference == 8 and compile_failed
    _report(2, "depth ledger", ok,
            f"fused block {fused} levels (=6), reference block {reference} "
            f"levels (=8), over-budget model rejected at compile "
            f"({where[:60]}...)")


# ---------------------------------------------------------------------------
# 3. l2 polynomial: residual <= 1e-9 at control points; max error over
#    [mean-std, mean+std] has log2 <= -10 on a 1e4-point grid.


def test_criterion_3_l2_polynomial(toy_model):
    t0 = time.perf_counter()
    poly = toy_model.l2_poly
    t = np.array(poly.control_points)
    resid = float(np.max(np.abs(poly(t) - 1.0 / np.sqrt(t))))
    grid = np.linspace(poly.mean - poly.std, poly.mean + poly.std, 10000)
    grid_err = float(np.max(np.abs(poly(grid) - 1.0 / np.sqrt(grid))))
    elapsed = time.perf_counter() - t0
    ok = resid <= 1e-9 and np.log2(grid_err) <= -10 and elapsed < 1.0
    _report(3, "l2 polynomial", ok,
            f"control-point residual {resid:.2e} (<=1e-9), grid error "
            f"log2 {np.log2(grid_err):.2f} (<=-10) over "
            f"[{grid[0]:.2f}, {grid[-1]:.2f}], {elapsed:.3f}s (<1s)")


# ---------------------------------------------------------------------------
# 4. Fusion identity: per-patch vs concatenated form <= 1e-6 in cleartext on
#    100 random instances; encrypted fused feature matches the oracle <= 1e-2.


def test_criterion_4_fusion_identity(toy_run):
    rng = np.random.default_rng(40)
    worst_clear = 0.0
    for _ in range(100):
        c = int(rng.choice([4, 8, 16]))
        n_p = int(rng.choice([1, 4, 9]))
        d = 4 * c
        a_full = rng.normal(size=(d, n_p * d))
        bias = rng.normal(size=d)
        cols = np.arange(d)
        col_cm = (cols % c) * 4 + cols // c
        fused = bias.copy()
        concat = []
        for p in range(n_p):
            x = rng.normal(size=(c, 8, 8))
            q, cm = avgpool_quadrants(x)
            concat.append(cm)
            fused += a_full[:, p * d:(p + 1) * d][:, col_cm] @ q
        ref = a_full @ np.concatenate(concat) + bias
        worst_clear = max(worst_clear, float(np.max(np.abs(fused - ref))))
    worst_enc = 0.0
    for feat, report in zip(toy_run.features, toy_run.reports):
        y = decrypt_feature(feat, toy_run.keys).real
        worst_enc = max(worst_enc, float(np.max(np.abs(y - report.feature))))
    ok = worst_clear <= 1e-6 and worst_enc <= 1e-2
    _report(4, "fusion identity", ok,
            f"cleartext forms agree to {worst_clear:.2e} (<=1e-6) on 100 "
            f"instances, encrypted fused feature vs oracle {worst_enc:.2e} "
            f"(<=1e-2)")


# ---------------------------------------------------------------------------
# 5. End-to-end equivalence at N=2^13 with the default seeded 4-patch model:
#    encrypted features within 1e-2 of the oracle on 8 images; encrypted
#    match decisions agree with the oracle on >= 99% of 200 pairs.


@pytest.fixture(scope="module")
def big_setup():
    blob = random_container(seed=5)  # 4 patches, 32px, N=2^13, L=24, d=256
    model = compile_model(blob)
    keys = keygen(model.params, model.required_rotation_steps(), rng_seed=51)
    return model, keys


def test_criterion_5_end_to_end(big_setup):
    t0 = time.perf_counter()
    model, keys = big_setup
    rng = np.random.default_rng(50)
    images = [synthetic_image(rng, model.image_shape) for _ in range(8)]
    reports = [oracle_forward(im, model) for im in images]
    batch = [encrypt_image(im, model, keys) for im in images]
    feats = eval_model_many(batch, model, keys)
    worst = max(
        float(np.max(np.abs(decrypt_feature(f, keys).real - r.feature)))
        for f, r in zip(feats, reports)
    )

    # decision agreement on 200 pairs: oracle features of genuine/impostor
    # image pairs, pushed through the encrypted matcher at the exact level
    # the network hands over (MATCHER_RESERVE)
    rng2 = np.random.default_rng(501)
    genuine_imgs = [np.clip(synthetic_image(np.random.default_rng(5000 + i),
                                            model.image_shape), 0, 1)
                    for i in range(100)]
    base = [oracle_forward(im, model).feature for im in genuine_imgs]
    partner = [oracle_forward(np.clip(im + rng2.normal(0, 0.03, im.shape),
                                      0, 1), model).feature
               for im in genuine_imgs]

    params = model.params
    reps = params.slot_count // model.feature_dim

    def enc_feat(y):
        pt = encode(np.tile(y, reps), MATCHER_RESERVE, params)
        ct = encrypt(pt, keys.public, params)
        return EncryptedFeature(ct, model.feature_dim, model.fingerprint)

    def clear_decide(y1, y2):
        p1 = y1 * model.l2_poly(float(y1 @ y1))
        p2 = y2 * model.l2_poly(float(y2 @ y2))
        return (2.0 - 2.0 * float(p1 @ p2)) - model.threshold.T < 0

    norm_base = [he_l2_normalize(enc_feat(y), model.l2_poly, keys)
                 for y in base]
    norm_partner = [he_l2_normalize(enc_feat(y), model.l2_poly, keys)
                    for y in partner]
    agree = 0
    total = 0
    for i in range(100):
        pairs = [(base[i], partner[i], norm_base[i], norm_partner[i]),
                 (base[i], base[(i + 1) % 100], norm_base[i],
                  norm_base[(i + 1) % 100])]
        for y1, y2, n1, n2 in pairs:
            score = he_score(n1, n2, keys)
            value = float(decrypt_to_values(
                he_match(score, model.threshold, params),
                keys.secret, params)[0].real)
            enc_dec = value < 0
            total += 1
            agree += int(enc_dec == clear_decide(y1, y2))
    agreement = agree / total
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-2 and agreement >= 0.99 and elapsed < 1800
    _report(5, "end-to-end equivalence", ok,
            f"8-image encrypted features vs oracle {worst:.2e} (<=1e-2), "
            f"decision agreement {agreement:.1%} on {total} pairs (>=99%), "
            f"{elapsed:.0f}s (<1800s target)")


# ---------------------------------------------------------------------------
# 6. Scalability: 16-patch toy wall time <= 1.5x 4-patch toy with >= 16
#    workers.  Requires real CPU parallelism; expected to FAIL honestly on a
#    single-core host (the pool serializes).


def test_criterion_6_patch_scaling():
    from enface.bench import bench_patch_scaling

    results = bench_patch_scaling((4, 16), workers=16)
    ratio = results["ratio"]
    cpus = os.cpu_count()
    ok = ratio <= 1.5
    _report(6, "patch scaling", ok,
            f"16-patch / 4-patch wall-time ratio {ratio:.2f} (bound 1.5) "
            f"with 16 workers on {cpus} CPU core(s): "
            f"4p {results[4]['seconds']:.1f}s, 16p {results[16]['seconds']:.1f}s"
            + ("" if ok else
               " - FAILS as expected on a single-core host; the per-patch "
               "evaluations are independent and pool-dispatched, but with "
               f"{cpus} core(s) the workers serialize (see notes ledger)"))


# ---------------------------------------------------------------------------
# 7. Protocol suite: enroll+verify loop over loopback; canary scan; same-image
#    match; fingerprint mismatch rejection.


def test_criterion_7_protocol(toy_model, toy_keys, tmp_path):
    client = ClientSession(toy_keys, toy_model)
    bundle = make_setup_bundle(toy_keys, toy_model.fingerprint)
    store = RecordStore(str(tmp_path / "store.bin"))
    server = server_setup(bundle, toy_model, store)
    transcript = Transcript()
    transport = LoopbackTransport(server, transcript)
    rng = np.random.default_rng(70)
    img = synthetic_image(rng, toy_model.image_shape)

    assert client.enroll(transport, "alice", img) == "alice"
    is_match, value = client.verify(transport, "alice", img)

    payload = client.verify_request("alice", img)
    identity, _, cts = decode_request(payload, toy_model.params)
    bad = encode_request(identity, "0" * 64, cts, toy_model.params)
    resp_type, resp = transport.round_trip(3, bad)
    fp_rejected = (resp_type == MSG_ERROR
                   and decode_error(resp).code == ERR_FINGERPRINT)

    img_leak = (transcript.contains(img.tobytes())
                or transcript.contains(img.astype(np.float32).tobytes()))
    feature = oracle_forward(img, toy_model).feature
    feat_leak = (transcript.contains(feature.tobytes())
                 or transcript.contains(feature.astype(np.float32).tobytes()))
    store.close()
    ok = is_match and value < 0 and fp_rejected and not img_leak and not feat_leak
    _report(7, "protocol suite", ok,
            f"enroll+verify loop ok, same-image match (score-T={value:+.4f}), "
            f"fingerprint mismatch rejected: {fp_rejected}, canary scan clean: "
            f"{not (img_leak or feat_leak)} over {len(transcript.frames)} frames")


# ---------------------------------------------------------------------------
# 8. Packing round trips across every layout in the compiled toy models,
#    including stride-2 multiplexed layouts.


def test_criterion_8_packing_roundtrips(toy_model, big_setup):
    big_model, _ = big_setup
    rng = np.random.default_rng(80)
    layouts = []
    for model in (toy_model, big_model):
        layouts.append(model.input_layout)
        for pcnn in model.patches:
            layouts.append(pcnn.stem.out_layout)
            for blk in pcnn.blocks:
                layouts.extend([blk.conv1.out_layout, blk.conv2.out_layout])
            layouts.append(pcnn.pool_in_layout)
    layouts = list({ly for ly in layouts})
    multiplexed = [ly for ly in layouts if ly.gaps != (1, 1)]
    worst = 0.0
    for ly in layouts:
        t = rng.uniform(-1, 1, ly.shape)
        vec = to_slots(t, ly)
        for m in range(ly.copies):
            worst = max(worst, float(np.max(np.abs(from_slots(vec, ly, m) - t))))
    ok = worst == 0.0 and len(multiplexed) >= 2
    _report(8, "packing round trips", ok,
            f"{len(layouts)} distinct layouts ({len(multiplexed)} stride-2 "
            f"multiplexed) round-trip exactly (max error {worst:.1e})")
