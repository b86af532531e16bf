"""Slot packing for 3-D tensors: repeated packing plus multiplexed layouts.

A ``TensorLayout`` maps logical tensor coordinates (copy m, channel c, row i,
col j) to ciphertext slots.  Channels are grouped so that ``kh * kw`` child
channels interleave into the spatial grid of one parent plane (the gaps left
by strided convolutions), parent planes are contiguous, and whole-tensor
copies are outermost:

    cp  = c // (kh*kw)            parent plane
    sub = c %  (kh*kw)            sub-position: ri = sub // kw, rj = sub % kw
    slot(m, c, i, j) = m*C*H*W + cp*(H*kh)*(W*kw) + (i*kh + ri)*(W*kw)
                       + (j*kw + rj)

The per-copy footprint is always C*H*W and the replication factor is
M = floor(slots / footprint).  ``multiplex_layout`` reinterprets the same
physical grid after a stride-2 operation: (C, H, W) with gaps (kh, kw)
becomes (4C, H/2, W/2) with gaps (2kh, 2kw), occupying identical slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ckks import Plaintext, encode
from .errors import LayoutError
from .params import CkksParams

LAYOUT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TensorLayout:
    """Immutable map from (copy, channel, row, col) to ciphertext slots."""

    shape: tuple[int, int, int]  # (C, H, W)
    gaps: tuple[int, int]  # (kh, kw) accumulated stride factors
    slot_count: int  # N/2 of the target ring

    def __post_init__(self):
        c, h, w = self.shape
        kh, kw = self.gaps
        if min(c, h, w, kh, kw) < 1:
            raise LayoutError(f"non-positive layout dims {self.shape} {self.gaps}")
        if c % (kh * kw):
            raise LayoutError(f"channels {c} not divisible by gap area {kh * kw}")
        if self.footprint > self.slot_count:
            raise LayoutError(
                f"tensor footprint {self.footprint} exceeds {self.slot_count} slots"
            )

    @property
    def footprint(self) -> int:
        c, h, w = self.shape
        return c * h * w

    @property
    def copies(self) -> int:
        return self.slot_count // self.footprint

    @property
    def parent_planes(self) -> int:
        return self.shape[0] // (self.gaps[0] * self.gaps[1])

    @property
    def plane_slots(self) -> int:
        """Slots per parent plane: (H*kh) * (W*kw)."""
        _, h, w = self.shape
        return h * self.gaps[0] * w * self.gaps[1]

    @property
    def row_stride(self) -> int:
        """Slot distance between adjacent physical rows."""
        return self.shape[2] * self.gaps[1]

    def slot_index(self, m: int, c: int, i: int, j: int) -> int:
        kh, kw = self.gaps
        cp, sub = divmod(c, kh * kw)
        ri, rj = divmod(sub, kw)
        wp = self.row_stride
        return (
            m * self.footprint
            + cp * self.plane_slots
            + (i * kh + ri) * wp
            + (j * kw + rj)
        )

    def slot_map(self, copy: int = 0) -> np.ndarray:
        """Slot index per (c, i, j), shape (C, H, W)."""
        return _slot_map_cached(self, copy)

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "gaps": list(self.gaps),
            "slots": self.slot_count,
            "copies": self.copies,
            "version": LAYOUT_FORMAT_VERSION,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TensorLayout":
        if obj.get("version") != LAYOUT_FORMAT_VERSION:
            raise LayoutError(f"unsupported layout version {obj.get('version')}")
        layout = cls(tuple(obj["shape"]), tuple(obj["gaps"]), obj["slots"])
        if obj.get("copies") not in (None, layout.copies):
            raise LayoutError("layout copy count inconsistent with formula")
        return layout


@lru_cache(maxsize=512)
def _slot_map_cached(layout: TensorLayout, copy: int) -> np.ndarray:
    c, h, w = layout.shape
    kh, kw = layout.gaps
    cs = np.arange(c)[:, None, None]
    is_ = np.arange(h)[None, :, None]
    js = np.arange(w)[None, None, :]
    cp, sub = np.divmod(cs, kh * kw)
    ri, rj = np.divmod(sub, kw)
    return (
        copy * layout.footprint
        + cp * layout.plane_slots
        + (is_ * kh + ri) * layout.row_stride
        + (js * kw + rj)
    )


def feature_layout(dim: int, slot_count: int) -> TensorLayout:
    """Layout of a flat feature vector: contiguous, maximally replicated."""
    return TensorLayout((dim, 1, 1), (1, 1), slot_count)


def multiplex_layout(parent: TensorLayout, stride: int) -> TensorLayout:
    """Layout of the same physical slots after a stride-`stride` operation.

    Stride 2 interleaves four child channels into each parent plane's spatial
    gaps; the occupied slot set (and footprint) is unchanged."""
    if stride == 1:
        return parent
    if stride != 2:
        raise LayoutError(f"unsupported multiplex stride {stride}")
    c, h, w = parent.shape
    if h % 2 or w % 2:
        raise LayoutError(f"odd spatial dims {h}x{w} cannot be halved")
    kh, kw = parent.gaps
    return TensorLayout((4 * c, h // 2, w // 2), (2 * kh, 2 * kw), parent.slot_count)


def conv_output_layout(inp: TensorLayout, c_out: int, stride: int) -> TensorLayout:
    """Layout of a convolution output: channel count changes, and stride-2
    multiplexes the result into the input's spatial gaps."""
    _, h, w = inp.shape
    kh, kw = inp.gaps
    if stride == 1:
        return TensorLayout((c_out, h, w), (kh, kw), inp.slot_count)
    if stride != 2:
        raise LayoutError(f"unsupported conv stride {stride}")
    if h % 2 or w % 2:
        raise LayoutError(f"odd spatial dims {h}x{w} cannot be strided")
    return TensorLayout((c_out, h // 2, w // 2), (2 * kh, 2 * kw), inp.slot_count)


def to_slots(tensor: np.ndarray, layout: TensorLayout) -> np.ndarray:
    """Scatter a C×H×W tensor into a slot vector, all M copies filled."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape != layout.shape:
        raise LayoutError(f"tensor shape {t.shape} != layout shape {layout.shape}")
    vec = np.zeros(layout.slot_count, dtype=np.float64)
    base = layout.slot_map(0).ravel()
    flat = t.ravel()
    for m in range(layout.copies):
        vec[base + m * layout.footprint] = flat
    return vec


def from_slots(vec: np.ndarray, layout: TensorLayout, copy: int = 0) -> np.ndarray:
    """Gather a C×H×W tensor from a slot vector (copy `copy`)."""
    vec = np.asarray(vec)
    if not (0 <= copy < layout.copies):
        raise LayoutError(f"copy {copy} out of range (M={layout.copies})")
    return vec[layout.slot_map(copy)].copy()


def pack(tensor: np.ndarray, layout: TensorLayout, level: int,
         params: CkksParams, scale: float | None = None) -> Plaintext:
    """Encode a tensor into a plaintext with M identical copies."""
    if layout.slot_count != params.slot_count:
        raise LayoutError("layout slot count does not match ring parameters")
    return encode(to_slots(tensor, layout), level, params, scale)


def unpack(values: np.ndarray, layout: TensorLayout,
           check_copies: float | None = None) -> np.ndarray:
    """Read copy 0 of a decoded slot vector back into a C×H×W tensor.

    With ``check_copies`` set, asserts every copy agrees with copy 0 within
    that tolerance (cross-copy consistency after encrypted ops)."""
    out = from_slots(values, layout, 0)
    if check_copies is not None:
        for m in range(1, layout.copies):
            dev = np.max(np.abs(from_slots(values, layout, m) - out))
            if dev > check_copies:
                raise LayoutError(f"copy {m} deviates by {dev} from copy 0")
    return out
