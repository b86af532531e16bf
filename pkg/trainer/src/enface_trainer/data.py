"""Seeded parametric face generator.

Each identity is a latent vector controlling skin tone, face geometry, eye
spacing, brow angle and mouth curvature; samples of an identity add small
pose/photometric jitter.  Everything is deterministic in the seed so CI
needs no external data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FaceDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_identities: int

    def __len__(self) -> int:
        return len(self.labels)


def _identity_latent(rng) -> dict:
    return {
        "skin": rng.uniform(0.45, 0.9, 3),
        "bg": rng.uniform(0.05, 0.35, 3),
        "face_w": rng.uniform(0.26, 0.36),
        "face_h": rng.uniform(0.34, 0.46),
        "eye_dx": rng.uniform(0.10, 0.17),
        "eye_y": rng.uniform(-0.12, -0.04),
        "eye_r": rng.uniform(0.025, 0.05),
        "eye_tint": rng.uniform(0.0, 0.35, 3),
        "brow_tilt": rng.uniform(-0.35, 0.35),
        "mouth_y": rng.uniform(0.12, 0.22),
        "mouth_w": rng.uniform(0.10, 0.2),
        "mouth_curve": rng.uniform(-0.4, 0.6),
        "nose_len": rng.uniform(0.06, 0.14),
        "hair": rng.uniform(0.0, 0.4, 3),
        "hair_drop": rng.uniform(0.18, 0.34),
    }


def _render(lat: dict, jit: dict, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, size),
                         np.linspace(-0.5, 0.5, size), indexing="ij")
    yy = yy - jit["dy"]
    xx = xx - jit["dx"]
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = lat["bg"][c] + 0.1 * yy

    def blend(mask, color):
        for c in range(3):
            img[c] = img[c] * (1 - mask) + color[c] * mask

    # hair block above the face
    blend((yy < -lat["hair_drop"]).astype(float), lat["hair"])
    # face ellipse
    face = ((xx / lat["face_w"]) ** 2 + (yy / lat["face_h"]) ** 2 <= 1.0)
    blend(face.astype(float), lat["skin"] * jit["light"])
    # eyes
    eye_color = lat["eye_tint"]
    for sx in (-1, 1):
        ex = sx * lat["eye_dx"]
        ey = lat["eye_y"]
        eye = (((xx - ex) ** 2 + (yy - ey) ** 2) <= lat["eye_r"] ** 2)
        blend(eye.astype(float), eye_color)
        # brow: a thin tilted bar above the eye
        brow = ((np.abs((yy - (ey - 0.07)) - lat["brow_tilt"] * sx * (xx - ex))
                 < 0.012) & (np.abs(xx - ex) < 0.07))
        blend(brow.astype(float), eye_color * 0.5)
    # nose
    nose = ((np.abs(xx) < 0.012) & (yy > lat["eye_y"])
            & (yy < lat["eye_y"] + lat["nose_len"] + 0.12))
    blend(nose.astype(float), lat["skin"] * 0.7)
    # mouth: curved bar
    mouth = (np.abs(yy - lat["mouth_y"]
                    - lat["mouth_curve"] * (xx ** 2) / max(lat["mouth_w"], 1e-3))
             < 0.015) & (np.abs(xx) < lat["mouth_w"])
    blend(mouth.astype(float), np.array([0.55, 0.15, 0.2]))
    return np.clip(img, 0.0, 1.0)


def make_dataset(seed: int, n_identities: int = 40, per_identity: int = 8,
                 size: int = 64) -> FaceDataset:
    rng = np.random.default_rng(seed)
    latents = [_identity_latent(rng) for _ in range(n_identities)]
    images = []
    labels = []
    for ident, lat in enumerate(latents):
        for _ in range(per_identity):
            jit = {
                "dx": rng.uniform(-0.03, 0.03),
                "dy": rng.uniform(-0.03, 0.03),
                "light": rng.uniform(0.9, 1.1),
            }
            img = _render(lat, jit, size)
            img = np.clip(img + rng.normal(0, 0.015, img.shape), 0.0, 1.0)
            images.append(img.astype(np.float32))
            labels.append(ident)
    return FaceDataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                       n_identities)


def split_holdout(ds: FaceDataset, per_identity_holdout: int = 2
                  ) -> tuple[FaceDataset, FaceDataset]:
    """Deterministically hold out the last samples of every identity."""
    train_idx, hold_idx = [], []
    for ident in range(ds.n_identities):
        idx = np.flatnonzero(ds.labels == ident)
        train_idx.extend(idx[:-per_identity_holdout])
        hold_idx.extend(idx[-per_identity_holdout:])
    return (
        FaceDataset(ds.images[train_idx], ds.labels[train_idx], ds.n_identities),
        FaceDataset(ds.images[hold_idx], ds.labels[hold_idx], ds.n_identities),
    )
