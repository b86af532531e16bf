"""Export a trained network to the CFW1 model container.

The writer here is intentionally independent of the runtime's own
serializer: magic ``CFW1``, a little-endian u32 header length, a JSON
header (sorted keys), then float32 little-endian tensor blobs each
aligned to 64 bytes.  Weights are stored *unfused*: raw conv weights,
raw batch-norm statistics and the activation's collapsed (a, b, c)
coefficients — folding is the runtime compiler's job."""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from enface.matcher import calibrate_threshold, fit_l2_poly

from .model import BN_EPS, IMAGE_MEAN, IMAGE_STD, FaceNet, normalize_images

_MAGIC = b"CFW1"
_ALIGN = 64


def _pack_container(tensors: dict[str, np.ndarray], header_meta: dict) -> bytes:
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        offset += len(raw)
        pad = (-offset) % _ALIGN
        offset += pad
        blobs.append(raw + b"\0" * pad)
    header = dict(header_meta)
    header["tensors"] = entries
    hj = json.dumps(header, sort_keys=True).encode()
    head = _MAGIC + struct.pack("<I", len(hj)) + hj
    head += b"\0" * ((-len(head)) % _ALIGN)
    return head + b"".join(blobs)


def _conv_tensors(prefix: str, conv: torch.nn.Conv2d) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w": conv.weight.detach().numpy(),
        f"{prefix}.b": conv.bias.detach().numpy(),
    }


def _bn_tensors(prefix: str, bn: torch.nn.BatchNorm2d) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.gamma": bn.weight.detach().numpy(),
        f"{prefix}.beta": bn.bias.detach().numpy(),
        f"{prefix}.mean": bn.running_mean.detach().numpy(),
        f"{prefix}.var": bn.running_var.detach().numpy(),
    }


def collect_tensors(model: FaceNet) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for i, net in enumerate(model.patches):
        p = f"p{i}"
        tensors |= _conv_tensors(f"{p}.stem.conv", net.stem_conv)
        tensors |= _bn_tensors(f"{p}.stem.bn", net.stem_bn)
        b = f"{p}.block0"
        tensors |= _conv_tensors(f"{b}.conv1", net.conv1)
        tensors |= _bn_tensors(f"{b}.bn1", net.bn1)
        tensors |= _conv_tensors(f"{b}.conv2", net.conv2)
        tensors |= _bn_tensors(f"{b}.bn2", net.bn2)
        tensors |= _conv_tensors(f"{b}.shortcut", net.shortcut)
        for tag, act in (("act1", net.act1), ("act2", net.act2)):
            a, bb, c = act.collapse()
            tensors[f"{b}.{tag}.a"] = a
            tensors[f"{b}.{tag}.b"] = bb
            tensors[f"{b}.{tag}.c"] = c
    tensors["fusion.A"] = model.fusion.weight.detach().numpy()
    tensors["fusion.b"] = model.fusion.bias.detach().numpy()
    return tensors


def calibrate(model: FaceNet, train_images: np.ndarray,
              genuine_pairs=None, impostor_pairs=None):
    """Norm-polynomial calibration, plus a decision threshold when pairs of
    images (tuples of C,H,W arrays) are supplied."""
    model.eval()
    with torch.no_grad():
        feats = model.features(normalize_images(train_images)).numpy()
    sq_norms = np.sum(feats.astype(np.float64) ** 2, axis=1)
    coeffs = fit_l2_poly(sq_norms)

    threshold = None
    if genuine_pairs and impostor_pairs:
        def score(a, b):
            with torch.no_grad():
                y = model.features(
                    normalize_images(np.stack([a, b]))).numpy().astype(np.float64)
            t = np.sum(y ** 2, axis=1)
            p = coeffs.beta2 * t * t + coeffs.beta1 * t + coeffs.beta0
            yn = y * p[:, None]
            return 2.0 - 2.0 * float(yn[0] @ yn[1])

        genuine = [score(a, b) for a, b in genuine_pairs]
        impostor = [score(a, b) for a, b in impostor_pairs]
        threshold = calibrate_threshold(genuine, impostor)
    return coeffs, threshold


def export_container(model: FaceNet, *, ckks: dict | None = None,
                     calibration=None, threshold=None) -> bytes:
    """Serialize the model (unfused weights) to CFW1 bytes."""
    arch = model.arch
    size = arch["patch_size"] * model.grid
    if ckks is None:
        ckks = {"ring_degree": 8192, "max_level": 16,
                "scale_bits": 40, "dnum": 3}
    header = {
        "version": 1,
        "image": {
            "channels": 3, "height": size, "width": size,
            "mean": [IMAGE_MEAN] * 3, "std": [IMAGE_STD] * 3,
        },
        "patch_size": arch["patch_size"],
        "arch": {
            "feature_dim": model.feature_dim,
            "bn_eps": BN_EPS,
            "stem": {"c_out": arch["c_stem"], "stride": 2},
            "blocks": [{"c_out": arch["c_block"], "stride": 2}],
        },
        "pooling_order": "quadrant-major",
        "ckks": ckks,
        "layouts": None,
        "calibration": calibration.to_json() if calibration else None,
        "threshold": ({"T": threshold.T, "note": threshold.note}
                      if threshold else None),
    }
    return _pack_container(collect_tensors(model), header)
