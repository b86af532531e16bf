"""Patch-mixture network with degree-2 Hermite activations.

Architecture mirrors what the runtime container format describes: a
per-patch stem (conv+BN), one residual block (two conv+BN+activation
stages plus a 1x1 projection shortcut), quadrant average pooling in
channel-major order, and a global fusion layer summing per-patch
contributions.  The activation is trained in the Hermite basis
{1, x, (x^2-1)/sqrt(2)} with a softplus-positive leading coefficient so
the exported (a, b, c) triple always satisfies the runtime's a > 0
folding requirement."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

IMAGE_MEAN = 0.5
IMAGE_STD = 0.5
BN_EPS = 1e-5


class Hermite2(nn.Module):
    """Per-channel y = g2*(x^2-1)/sqrt(2) + g1*x + g0 with g2 > 0."""

    def __init__(self, channels: int):
        super().__init__()
        self.rho = nn.Parameter(torch.zeros(channels))  # g2 = softplus(rho)+eps
        self.g1 = nn.Parameter(torch.ones(channels))
        self.g0 = nn.Parameter(torch.zeros(channels))

    def g2(self) -> torch.Tensor:
        return F.softplus(self.rho) + 1e-3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g2 = self.g2()[None, :, None, None]
        g1 = self.g1[None, :, None, None]
        g0 = self.g0[None, :, None, None]
        return g2 * (x * x - 1.0) / math.sqrt(2.0) + g1 * x + g0

    def collapse(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact (a, b, c) with a > 0 such that ax^2+bx+c == forward."""
        with torch.no_grad():
            g2 = self.g2().numpy().astype(np.float64)
            a = g2 / math.sqrt(2.0)
            b = self.g1.numpy().astype(np.float64)
            c = self.g0.numpy().astype(np.float64) - g2 / math.sqrt(2.0)
        return a, b, c


class PatchNet(nn.Module):
    """One per-patch network: stem, one residual block, quadrant pooling."""

    def __init__(self, c_in: int = 3, c_stem: int = 8, c_block: int = 16):
        super().__init__()
        self.stem_conv = nn.Conv2d(c_in, c_stem, 3, stride=2, padding=1)
        self.stem_bn = nn.BatchNorm2d(c_stem, eps=BN_EPS)
        self.conv1 = nn.Conv2d(c_stem, c_block, 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(c_block, eps=BN_EPS)
        self.act1 = Hermite2(c_block)
        self.conv2 = nn.Conv2d(c_block, c_block, 3, stride=1, padding=1)
        self.bn2 = nn.BatchNorm2d(c_block, eps=BN_EPS)
        self.act2 = Hermite2(c_block)
        self.shortcut = nn.Conv2d(c_stem, c_block, 1, stride=2)
        self.out_dim = 4 * c_block

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem_bn(self.stem_conv(x))
        h = self.act1(self.bn1(self.conv1(x)))
        h = self.act2(self.bn2(self.conv2(h)))
        x = h + self.shortcut(x)
        # channel-major quadrant pooling: slot c*4 + q with q = 2*i + j
        pooled = F.adaptive_avg_pool2d(x, 2)  # (B, C, 2, 2)
        return pooled.reshape(x.shape[0], -1)


class FaceNet(nn.Module):
    """Four positional patch networks plus the global fusion layer."""

    def __init__(self, n_patches: int = 4, patch_size: int = 32,
                 c_stem: int = 8, c_block: int = 16):
        super().__init__()
        grid = int(math.isqrt(n_patches))
        assert grid * grid == n_patches
        self.grid = grid
        self.patch_size = patch_size
        self.patches = nn.ModuleList(
            [PatchNet(3, c_stem, c_block) for _ in range(n_patches)])
        self.feature_dim = self.patches[0].out_dim
        self.fusion = nn.Linear(n_patches * self.feature_dim, self.feature_dim)
        self.jigsaw_head = nn.Sequential(
            nn.Linear(self.feature_dim, 32), nn.ReLU(),
            nn.Linear(32, n_patches))
        self.arch = {"c_stem": c_stem, "c_block": c_block,
                     "n_patches": n_patches, "patch_size": patch_size}

    def split(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Row-major non-overlapping patches of a normalized batch."""
        p = self.patch_size
        out = []
        for i in range(self.grid):
            for j in range(self.grid):
                out.append(images[:, :, i * p:(i + 1) * p, j * p:(j + 1) * p])
        return out

    def pooled_per_patch(self, images: torch.Tensor,
                         order: list[int] | None = None) -> list[torch.Tensor]:
        """Per-position pooled vectors; ``order[k]`` is the patch placed at
        position k (for the jigsaw task)."""
        patches = self.split(images)
        if order is not None:
            patches = [patches[k] for k in order]
        return [net(patch) for net, patch in zip(self.patches, patches)]

    def features(self, images: torch.Tensor) -> torch.Tensor:
        pooled = self.pooled_per_patch(images)
        return self.fusion(torch.cat(pooled, dim=1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)


def normalize_images(images: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    return (x - IMAGE_MEAN) / IMAGE_STD


class MarginHead(nn.Module):
    """Additive angular margin classification head."""

    def __init__(self, feature_dim: int, n_identities: int,
                 margin: float = 0.3, scale: float = 16.0):
        super().__init__()
        if not (0.0 < margin < math.pi / 2):
            raise ValueError("margin must lie in (0, pi/2)")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.weight = nn.Parameter(torch.randn(n_identities, feature_dim) * 0.1)
        self.margin = margin
        self.scale = scale

    def forward(self, feats: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = F.normalize(feats) @ F.normalize(self.weight).t()
        cos = cos.clamp(-1 + 1e-7, 1 - 1e-7)
        theta = torch.acos(cos)
        target = torch.cos(theta + self.margin)
        onehot = F.one_hot(labels, self.weight.shape[0]).to(cos.dtype)
        logits = self.scale * (onehot * target + (1 - onehot) * cos)
        return logits

    def accuracy_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return F.normalize(feats) @ F.normalize(self.weight).t()


def forward_reference(model: FaceNet, image: np.ndarray) -> np.ndarray:
    """Deterministic eval-mode feature of one C,H,W image in [0, 1].

    This is the cross-check target for the runtime compiler: an exported
    container evaluated by the runtime's cleartext path must reproduce it."""
    model.eval()
    with torch.no_grad():
        x = normalize_images(image[None])
        return model.features(x)[0].numpy().astype(np.float64)
