"""Mixture-of-patch-CNNs model: container format, compiler, and evaluator.

An image is split into a grid of non-overlapping P×P patches; each patch is
encrypted separately and pushed through its own shallow CNN (stem conv →
shifted residual blocks → quadrant average pooling → a square linear layer
that already contains this patch's slice of the fusion map).  The global
feature is then just the homomorphic sum of the per-patch outputs.

Model container "CFW1": magic, u32 header length, JSON header (architecture,
tensor directory, layouts, calibration, threshold, ring parameters), then
raw float32 little-endian tensor blobs at 64-byte alignment.  The container
stores *unfused* weights (separate batch-norm parameters, full quadratic
activation coefficients a, b, c, raw fusion matrix); ``compile_model`` does
all folding:

  * batch norm into the adjacent convolution,
  * the activation's leading coefficient a into the preceding convolution
    (weights and bias scaled by sqrt(a), requiring a > 0), leaving the
    depth-1 monic form x^2 + b'x + c',
  * the fusion matrix columns permuted from the trainer's channel-major
    pooled order into the quadrant-major order the encrypted pooling emits.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .ckks import Ciphertext, KeySet, encode, encrypt, decrypt_to_values, he_add, he_mul, mod_switch_to
from .errors import CompileError, FingerprintError, LayoutError
from .layers import (
    ConvSpec,
    LinearSpec,
    PackedTensor,
    QuadActSpec,
    _compile_pool,
    analyze_depth,
    he_avgpool_2x2_many,
    he_conv_many,
    he_linear_many,
    he_quad_act,
    he_residual_add,
    required_steps_for_conv,
    required_steps_for_linear,
    required_steps_for_pool,
)
from .matcher import L2PolyCoeffs, MatchThreshold, calibrate_threshold, fit_l2_poly
from .oracle import (
    avgpool_quadrants,
    batchnorm,
    conv2d,
    oracle_forward,
    quad_act,
    split_patches,
)
from .packing import TensorLayout, conv_output_layout, feature_layout, pack, unpack
from .params import CkksParams

__all__ = [
    "MODEL_MAGIC", "ModelSpec", "PcnnSpec", "BlockSpec", "EncryptedFeature",
    "write_container", "read_container", "compile_model", "split_patches",
    "encrypt_image", "decrypt_feature", "eval_pcnn", "eval_pcnn_many",
    "eval_model", "eval_model_many", "random_container", "synthetic_image",
]

MODEL_MAGIC = b"CFW1"
CONTAINER_VERSION = 1
_ALIGN = 64
# levels reserved past the feature extractor: 4 normalize + 1 score
MATCHER_RESERVE = 5


# ---------------------------------------------------------------------------
# container format


def write_container(tensors: dict[str, np.ndarray], *, image: dict,
                    patch_size: int, arch: dict, ckks: dict,
                    layouts: dict | None = None,
                    calibration: dict | None = None,
                    threshold: dict | None = None) -> bytes:
    """Serialize tensors plus metadata into CFW1 bytes.

    Blobs are float32 little-endian, each aligned to 64 bytes; offsets in
    the tensor directory are relative to the end of the padded header."""
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
        pad = (-offset) % _ALIGN
        blobs.append(b"\0" * pad)
        offset += pad
    header = {
        "version": CONTAINER_VERSION,
        "image": image,
        "patch_size": patch_size,
        "arch": arch,
        "pooling_order": "quadrant-major",
        "ckks": ckks,
        "layouts": layouts,
        "calibration": calibration,
        "threshold": threshold,
        "tensors": entries,
    }
    hj = json.dumps(header, sort_keys=True).encode()
    head = MODEL_MAGIC + struct.pack("<I", len(hj)) + hj
    head += b"\0" * ((-len(head)) % _ALIGN)
    return head + b"".join(blobs)


def read_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MODEL_MAGIC:
        raise CompileError(f"bad model magic {data[:4]!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode())
    if header.get("version") != CONTAINER_VERSION:
        raise CompileError(f"unsupported container version {header.get('version')}")
    base = 8 + hlen + ((-(8 + hlen)) % _ALIGN)
    tensors = {}
    for name, ent in header["tensors"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        raw = data[start:start + 4 * count]
        if len(raw) != 4 * count:
            raise CompileError(f"tensor {name} truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return header, tensors


# ---------------------------------------------------------------------------
# compiled model


@dataclass
class BlockSpec:
    conv1: ConvSpec
    act1: QuadActSpec
    conv2: ConvSpec
    act2: QuadActSpec
    shortcut: ConvSpec


@dataclass
class PcnnSpec:
    stem: ConvSpec
    blocks: list[BlockSpec]
    pool_in_layout: TensorLayout
    linear: LinearSpec
    depth: int
    ledger: list[tuple[str, int, int]]


@dataclass
class ModelSpec:
    params: CkksParams
    image_shape: tuple[int, int, int]
    image_mean: np.ndarray
    image_std: np.ndarray
    patch_size: int
    grid: tuple[int, int]
    input_layout: TensorLayout
    patches: list[PcnnSpec]
    feature_dim: int
    fusion_matrix: np.ndarray  # raw (d, n_p*d), channel-major pooled order
    fusion_bias: np.ndarray
    l2_poly: L2PolyCoeffs | None
    threshold: MatchThreshold | None
    fingerprint: str
    header: dict = field(repr=False, default_factory=dict)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def depth_ledger(self) -> list[tuple[str, int, int]]:
        return self.patches[0].ledger

    def required_rotation_steps(self) -> set[int]:
        """Every rotation step any compiled program or the matcher needs."""
        n = self.params.slot_count
        steps: set[int] = set()
        for pcnn in self.patches:
            steps |= required_steps_for_conv(pcnn.stem)
            for blk in pcnn.blocks:
                for conv in (blk.conv1, blk.conv2, blk.shortcut):
                    steps |= required_steps_for_conv(conv)
            steps |= required_steps_for_pool(pcnn.pool_in_layout)
            steps |= required_steps_for_linear(pcnn.linear, n)
        step = 1
        while step < self.feature_dim:  # matcher rotate-and-sum
            steps.add(step)
            step *= 2
        steps.discard(0)
        return steps


@dataclass
class EncryptedFeature:
    ct: Ciphertext
    dim: int
    fingerprint: str


def _fold_bn(w, b, gamma, beta, mean, var, eps):
    inv = gamma / np.sqrt(var + eps)
    return w * inv[:, None, None, None], (b - mean) * inv + beta


def _fold_act(w, b, a, name: str):
    """Fold the activation's leading coefficient into the preceding conv."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise CompileError(
            f"{name}: activation leading coefficients must be positive to fold "
            "into the preceding convolution (constrain them during training)"
        )
    alpha = np.sqrt(a)
    return w * alpha[:, None, None, None], b * alpha, alpha


def compile_model(data: bytes, params: CkksParams | None = None) -> ModelSpec:
    """Parse a CFW1 container and produce an evaluation-ready model.

    Folds batch norm and activation leading coefficients, permutes the
    fusion columns to the quadrant-major pooling order, validates the depth
    ledger against the modulus chain, and records the container hash as the
    model fingerprint."""
    header, tensors = read_container(data)
    fingerprint = hashlib.sha256(data).hexdigest()
    ck = header["ckks"]
    if params is None:
        params = CkksParams.build(
            ring_degree=ck["ring_degree"], max_level=ck["max_level"],
            scale_bits=ck["scale_bits"], dnum=ck.get("dnum", 3),
        )
    elif (params.ring_degree != ck["ring_degree"]
          or params.max_level != ck["max_level"]):
        raise CompileError("supplied parameters disagree with the container")
    img = header["image"]
    c_img, h, w = img["channels"], img["height"], img["width"]
    p_size = header["patch_size"]
    if h % p_size or w % p_size:
        raise CompileError(f"image {h}x{w} not divisible by patch size {p_size}")
    grid = (h // p_size, w // p_size)
    n_p = grid[0] * grid[1]
    arch = header["arch"]
    d = arch["feature_dim"]
    eps = arch.get("bn_eps", 1e-5)
    block_arch = [(blk["c_out"], blk["stride"]) for blk in arch["blocks"]]
    c_last = block_arch[-1][0] if block_arch else arch["stem"]["c_out"]
    if d != 4 * c_last:
        raise CompileError(
            f"feature dim {d} must be 4x the final channel count {c_last}"
        )

    a_raw = tensors["fusion.A"]
    b_raw = tensors["fusion.b"]
    if a_raw.shape != (d, n_p * d) or b_raw.shape != (d,):
        raise CompileError(f"fusion map has shape {a_raw.shape}, want {(d, n_p * d)}")
    # encrypted pooling emits quadrant-major (q*C + c); the trainer pools
    # channel-major (c*4 + q) — permute each patch slice's columns to match
    cols = np.arange(d)
    col_cm = (cols % c_last) * 4 + cols // c_last

    input_layout = TensorLayout((c_img, p_size, p_size), (1, 1), params.slot_count)
    budget = params.max_level - MATCHER_RESERVE
    patches = []
    for p in range(n_p):
        def t(name, p=p):
            key = f"p{p}.{name}"
            if key not in tensors:
                raise CompileError(f"container missing tensor {key}")
            return tensors[key]

        sw, sb = _fold_bn(t("stem.conv.w"), t("stem.conv.b"), t("stem.bn.gamma"),
                          t("stem.bn.beta"), t("stem.bn.mean"), t("stem.bn.var"), eps)
        stem_arch = arch["stem"]
        cur = conv_output_layout(input_layout, stem_arch["c_out"], stem_arch["stride"])
        stem = ConvSpec(sw, sb, stem_arch["stride"], input_layout, cur)

        layers: list = [stem]
        names = ["stem"]
        blocks = []
        for j, (co, st) in enumerate(block_arch):
            pre = f"block{j}."
            w1, b1 = _fold_bn(t(pre + "conv1.w"), t(pre + "conv1.b"),
                              t(pre + "bn1.gamma"), t(pre + "bn1.beta"),
                              t(pre + "bn1.mean"), t(pre + "bn1.var"), eps)
            w1, b1, al1 = _fold_act(w1, b1, t(pre + "act1.a"), f"p{p}.{pre}act1")
            act1 = QuadActSpec(b=t(pre + "act1.b") / al1, c=t(pre + "act1.c").copy())
            nxt = conv_output_layout(cur, co, st)
            conv1 = ConvSpec(w1, b1, st, cur, nxt)

            w2, b2 = _fold_bn(t(pre + "conv2.w"), t(pre + "conv2.b"),
                              t(pre + "bn2.gamma"), t(pre + "bn2.beta"),
                              t(pre + "bn2.mean"), t(pre + "bn2.var"), eps)
            w2, b2, al2 = _fold_act(w2, b2, t(pre + "act2.a"), f"p{p}.{pre}act2")
            act2 = QuadActSpec(b=t(pre + "act2.b") / al2, c=t(pre + "act2.c").copy())
            conv2 = ConvSpec(w2, b2, 1, nxt, nxt)

            shortcut = ConvSpec(t(pre + "shortcut.w"), t(pre + "shortcut.b"),
                                st, cur, nxt)
            blocks.append(BlockSpec(conv1, act1, conv2, act2, shortcut))
            layers += [conv1, act1, conv2, act2]
            names += [f"block{j}.conv1", f"block{j}.act1",
                      f"block{j}.conv2", f"block{j}.act2"]
            cur = nxt

        a_enc = a_raw[:, p * d:(p + 1) * d][:, col_cm]
        linear = LinearSpec(a_enc, b_raw / n_p)
        layers += ["avgpool", linear]
        names += ["avgpool", "linear"]
        ledger = analyze_depth(layers, budget, names)
        depth = ledger[-1][2]
        patches.append(PcnnSpec(stem, blocks, cur, linear, depth, ledger))

    calib = header.get("calibration")
    thr = header.get("threshold")
    return ModelSpec(
        params=params,
        image_shape=(c_img, h, w),
        image_mean=np.asarray(img["mean"], dtype=np.float64),
        image_std=np.asarray(img["std"], dtype=np.float64),
        patch_size=p_size,
        grid=grid,
        input_layout=input_layout,
        patches=patches,
        feature_dim=d,
        fusion_matrix=a_raw,
        fusion_bias=b_raw,
        l2_poly=L2PolyCoeffs.from_json(calib) if calib else None,
        threshold=MatchThreshold(thr["T"], thr.get("note", "")) if thr else None,
        fingerprint=fingerprint,
        header=header,
    )


# ---------------------------------------------------------------------------
# encryption and evaluation


def encrypt_image(image: np.ndarray, model: ModelSpec, keys: KeySet,
                  rng=None) -> list[Ciphertext]:
    """Normalize, split into patches, and encrypt one ciphertext per patch
    at the top level."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.image_shape:
        raise LayoutError(f"image shape {image.shape} != {model.image_shape}")
    x = (image - model.image_mean[:, None, None]) / model.image_std[:, None, None]
    cts = []
    for patch in split_patches(x, model.patch_size):
        pt = pack(patch, model.input_layout, model.params.max_level, model.params)
        cts.append(encrypt(pt, keys.public, model.params, rng))
    return cts


def decrypt_feature(feat: EncryptedFeature, keys: KeySet,
                    model: ModelSpec | None = None) -> np.ndarray:
    """Client-side decryption of a d-dimensional feature (copy 0)."""
    if model is not None and feat.fingerprint != model.fingerprint:
        raise FingerprintError("feature fingerprint does not match model")
    values = decrypt_to_values(feat.ct, keys.secret, keys.params)
    return values[: feat.dim].copy()


def _trace(trace, name, xs):
    if trace is not None:
        trace.setdefault(name, []).extend(xs)


def eval_pcnn_many(cts: list[Ciphertext], pcnn: PcnnSpec, keys: KeySet,
                   model: ModelSpec, trace: dict | None = None,
                   tag: str = "patch") -> list[Ciphertext]:
    """Evaluate one per-patch network on a batch of patch ciphertexts.

    Batching shares each layer's encoded-mask cache across the whole batch;
    caches are dropped layer by layer to bound peak memory.  The total level
    consumption is checked against the static ledger."""
    params = keys.params
    level_in = cts[0].level
    xs = [PackedTensor(ct, model.input_layout) for ct in cts]
    xs = he_conv_many(xs, pcnn.stem, keys)
    pcnn.stem.program.clear_cache()
    _trace(trace, f"{tag}/stem", xs)
    for j, blk in enumerate(pcnn.blocks):
        ins = xs
        ys = he_conv_many(ins, blk.conv1, keys)
        blk.conv1.program.clear_cache()
        ys = [he_quad_act(y, blk.act1, keys) for y in ys]
        ys = he_conv_many(ys, blk.conv2, keys)
        blk.conv2.program.clear_cache()
        mains = [he_quad_act(y, blk.act2, keys) for y in ys]
        shorts = he_conv_many(ins, blk.shortcut, keys)
        blk.shortcut.program.clear_cache()
        ones_pt = None
        xs = []
        for main, short in zip(mains, shorts):
            # align the shortcut to the main path: drop to one level above,
            # then multiply by ones at scale Delta so level and scale match
            # the activation output exactly
            ct = mod_switch_to(short.ct, main.ct.level + 1, params)
            if ones_pt is None:
                ones_pt = encode(np.ones(params.slot_count), ct.level, params,
                                 params.scale)
            ct = he_mul(ct, ones_pt, params=params)
            xs.append(he_residual_add(main, PackedTensor(ct, main.layout), params))
        _trace(trace, f"{tag}/block{j}", xs)
    pool_layout = xs[0].layout
    xs = he_avgpool_2x2_many(xs, keys)
    _compile_pool(pool_layout).clear_cache()
    _trace(trace, f"{tag}/pool", xs)
    xs = he_linear_many(xs, pcnn.linear, keys)
    pcnn.linear.program(params.slot_count).clear_cache()
    _trace(trace, f"{tag}/feature", xs)
    consumed = level_in - xs[0].ct.level
    if consumed != pcnn.depth:
        raise CompileError(
            f"pcnn consumed {consumed} levels, static ledger says {pcnn.depth}"
        )
    return [x.ct for x in xs]


def eval_pcnn(patch_ct: Ciphertext, pcnn: PcnnSpec, keys: KeySet,
              model: ModelSpec) -> EncryptedFeature:
    ct = eval_pcnn_many([patch_ct], pcnn, keys, model)[0]
    return EncryptedFeature(ct, model.feature_dim, model.fingerprint)


def eval_model_many(batch: list[list[Ciphertext]], model: ModelSpec,
                    keys: KeySet, trace: dict | None = None
                    ) -> list[EncryptedFeature]:
    """Evaluate the full model on a batch of images (lists of patch cts).

    Per-patch networks run patch-major so every layer's mask cache is
    amortized over the whole batch; the fusion is a deterministic
    (patch-index-ordered) homomorphic sum costing zero levels."""
    for cts in batch:
        if len(cts) != model.n_patches:
            raise CompileError(
                f"expected {model.n_patches} patch ciphertexts, got {len(cts)}"
            )
    sums: list[Ciphertext | None] = [None] * len(batch)
    for p, pcnn in enumerate(model.patches):
        outs = eval_pcnn_many([cts[p] for cts in batch], pcnn, keys, model,
                              trace, f"patch{p}")
        for i, ct in enumerate(outs):
            sums[i] = ct if sums[i] is None else he_add(sums[i], ct, keys.params)
    return [EncryptedFeature(ct, model.feature_dim, model.fingerprint)
            for ct in sums]


def eval_model(patch_cts: list[Ciphertext], model: ModelSpec,
               keys: KeySet) -> EncryptedFeature:
    return eval_model_many([patch_cts], model, keys)[0]


# ---------------------------------------------------------------------------
# seeded random-weights generator (trainer-free models for tests)


def synthetic_image(rng: np.random.Generator, shape=(3, 64, 64)) -> np.ndarray:
    """A smooth random image in [0, 1]: low-frequency waves plus blobs."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty(shape)
    for ch in range(c):
        acc = np.zeros((h, w))
        for _ in range(5):
            fy, fx = rng.uniform(0.5, 4.0, 2)
            py, px = rng.uniform(0, 2 * np.pi, 2)
            acc += rng.normal() * np.sin(2 * np.pi * fy * yy + py) \
                * np.sin(2 * np.pi * fx * xx + px)
        for _ in range(3):
            cy, cx = rng.uniform(0, 1, 2)
            s = rng.uniform(0.08, 0.35)
            acc += rng.normal(0, 1.5) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        acc -= acc.min()
        img[ch] = acc / max(acc.max(), 1e-9)
    return img


def _draw_conv(rng, co, ci, k):
    fan_in = ci * k * k
    return {
        "w": rng.normal(0.0, math.sqrt(2.0 / fan_in), (co, ci, k, k)),
        "b": rng.normal(0.0, 0.01, co),
    }


def _draw_bn(rng, c):
    return {
        "gamma": rng.uniform(0.8, 1.2, c),
        "beta": rng.uniform(-0.1, 0.1, c),
        "mean": rng.normal(0.0, 0.05, c),
        "var": rng.uniform(0.5, 1.5, c),
    }


def _draw_act(rng, c):
    return {
        "a": rng.uniform(0.5, 1.5, c),
        "b": rng.uniform(-1.0, 1.0, c),
        "c": rng.uniform(0.0, 1.0, c),
    }


def _bn_batch(z, bn, eps):
    return np.stack([batchnorm(x, bn["gamma"], bn["beta"], bn["mean"],
                               bn["var"], eps) for x in z])


def random_container(seed: int = 0, *, n_patches: int = 4, patch_size: int = 32,
                     image_channels: int = 3, stem: dict | None = None,
                     blocks=((32, 2), (64, 1)), kernel: int = 3,
                     ckks: dict | None = None, calibrate: bool = True,
                     n_calibration: int = 10) -> bytes:
    """A deterministic random-weights model container.

    Weights are He-style N(0, 2/fan_in); activation coefficients follow the
    standard quadratic-surrogate ranges (a in [0.5, 1.5], b in [-1, 1],
    c in [0, 1]).  Layer magnitudes are calibrated in cleartext (scaling
    batch-norm gains / shortcut weights / fusion matrix) so activations keep
    a usable dynamic range, then the squared-norm distribution is measured
    on synthetic images to fit the normalization polynomial and threshold."""
    rng = np.random.default_rng(seed)
    stem = dict(stem or {"c_out": 16, "stride": 2})
    stem.setdefault("kernel", kernel)
    blocks = [tuple(b) for b in blocks]
    grid = math.isqrt(n_patches)
    if grid * grid != n_patches:
        raise CompileError("n_patches must be a perfect square")
    h = w = grid * patch_size
    c_last = blocks[-1][0] if blocks else stem["c_out"]
    d = 4 * c_last
    eps = 1e-5
    ckks = dict(ckks or {"ring_degree": 8192, "max_level": 24,
                         "scale_bits": 40, "dnum": 3})

    mean = [0.5] * image_channels
    std = [0.5] * image_channels

    # sample patches for magnitude calibration, cut from whole images so the
    # per-patch statistics are realistic
    n_samp = 6
    imgs = [synthetic_image(rng, (image_channels, h, w)) for _ in range(n_samp)]
    norm_imgs = [(im - np.array(mean)[:, None, None]) / np.array(std)[:, None, None]
                 for im in imgs]
    sample_patches = [np.stack([split_patches(im, patch_size)[p] for im in norm_imgs])
                      for p in range(n_patches)]

    tensors: dict[str, np.ndarray] = {}
    pooled_cm_all = []
    for p in range(n_patches):
        pre = f"p{p}."
        x = sample_patches[p]
        conv = _draw_conv(rng, stem["c_out"], image_channels, stem["kernel"])
        bn = _draw_bn(rng, stem["c_out"])
        z = np.stack([conv2d(s, conv["w"], conv["b"], stem["stride"]) for s in x])
        zb = _bn_batch(z, bn, eps)
        k = 0.5 / max(zb.std(), 1e-9)
        bn["gamma"] *= k
        bn["beta"] *= k
        x = zb * k
        tensors[pre + "stem.conv.w"] = conv["w"]
        tensors[pre + "stem.conv.b"] = conv["b"]
        for key, val in bn.items():
            tensors[pre + "stem.bn." + key] = val

        c_in = stem["c_out"]
        for j, (co, st) in enumerate(blocks):
            bp = pre + f"block{j}."
            inp = x
            c1 = _draw_conv(rng, co, c_in, kernel)
            bn1 = _draw_bn(rng, co)
            act1 = _draw_act(rng, co)
            z = np.stack([conv2d(s, c1["w"], c1["b"], st) for s in inp])
            zb = _bn_batch(z, bn1, eps)
            k = 0.5 / max(zb.std(), 1e-9)
            bn1["gamma"] *= k
            bn1["beta"] *= k
            y = np.stack([quad_act(s, act1["a"], act1["b"], act1["c"])
                          for s in zb * k])

            c2 = _draw_conv(rng, co, co, kernel)
            bn2 = _draw_bn(rng, co)
            act2 = _draw_act(rng, co)
            z = np.stack([conv2d(s, c2["w"], c2["b"], 1) for s in y])
            zb = _bn_batch(z, bn2, eps)
            k = 0.5 / max(zb.std(), 1e-9)
            bn2["gamma"] *= k
            bn2["beta"] *= k
            main = np.stack([quad_act(s, act2["a"], act2["b"], act2["c"])
                             for s in zb * k])

            sc = _draw_conv(rng, co, c_in, 1)
            zs = np.stack([conv2d(s, sc["w"], sc["b"], st) for s in inp])
            ks = 0.3 / max(zs.std(), 1e-9)
            sc["w"] *= ks
            sc["b"] *= ks
            x = main + zs * ks

            tensors[bp + "conv1.w"] = c1["w"]
            tensors[bp + "conv1.b"] = c1["b"]
            tensors[bp + "conv2.w"] = c2["w"]
            tensors[bp + "conv2.b"] = c2["b"]
            tensors[bp + "shortcut.w"] = sc["w"]
            tensors[bp + "shortcut.b"] = sc["b"]
            for key, val in bn1.items():
                tensors[bp + "bn1." + key] = val
            for key, val in bn2.items():
                tensors[bp + "bn2." + key] = val
            for key, val in act1.items():
                tensors[bp + "act1." + key] = val
            for key, val in act2.items():
                tensors[bp + "act2." + key] = val
            c_in = co

        pooled_cm_all.append(np.stack([avgpool_quadrants(s)[1] for s in x]))

    a_full = rng.normal(0.0, 1.0 / math.sqrt(d), (d, n_patches * d))
    b_full = rng.normal(0.0, 0.05, d)
    concat = np.concatenate(pooled_cm_all, axis=1)  # (n_samp, n_p*d)
    feats = concat @ a_full.T + b_full
    k = 0.5 / max(feats.std(), 1e-9)
    a_full *= k
    b_full *= k
    tensors["fusion.A"] = a_full
    tensors["fusion.b"] = b_full

    image = {"channels": image_channels, "height": h, "width": w,
             "mean": mean, "std": std}
    arch = {
        "stem": {"c_out": stem["c_out"], "kernel": stem["kernel"],
                 "stride": stem["stride"]},
        "blocks": [{"c_out": co, "stride": st, "kernel": kernel}
                   for co, st in blocks],
        "feature_dim": d,
        "kernel": stem["kernel"],
        "bn_eps": eps,
    }
    input_layout = TensorLayout((image_channels, patch_size, patch_size), (1, 1),
                                ckks["ring_degree"] // 2)
    layouts = {"input": input_layout.to_json()}

    def build(calibration, threshold):
        return write_container(tensors, image=image, patch_size=patch_size,
                               arch=arch, ckks=ckks, layouts=layouts,
                               calibration=calibration, threshold=threshold)

    if not calibrate:
        return build(None, None)

    # calibration pass over the cleartext oracle: squared-norm distribution,
    # normalization polynomial, and decision threshold
    model = compile_model(build(None, None))
    cal_imgs = [synthetic_image(rng, model.image_shape)
                for _ in range(n_calibration)]
    feats = [oracle_forward(im, model).feature for im in cal_imgs]
    norms = [float(y @ y) for y in feats]
    poly = fit_l2_poly(norms)

    def poly_feature(im):
        y = oracle_forward(im, model).feature
        return y * poly(float(y @ y))

    genuine, impostor = [], []
    for i, im in enumerate(cal_imgs):
        noisy = np.clip(im + rng.normal(0.0, 0.03, im.shape), 0.0, 1.0)
        y1, y2 = poly_feature(im), poly_feature(noisy)
        genuine.append(2.0 - 2.0 * float(y1 @ y2))
        ya = poly_feature(cal_imgs[(i + 1) % len(cal_imgs)])
        impostor.append(2.0 - 2.0 * float(y1 @ ya))
    thr = calibrate_threshold(genuine, impostor)
    return build(poly.to_json(), {"T": thr.T, "note": thr.note})
