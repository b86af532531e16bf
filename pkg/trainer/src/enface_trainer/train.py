"""Training loop: angular-margin identity loss plus a jigsaw auxiliary.

The jigsaw task shuffles the four patches before they reach the
position-specific networks and asks a shared linear head to recover each
patch's original location from its pooled vector; it regularizes the
patch networks toward location-aware features."""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import FaceDataset, make_dataset, split_holdout
from .export import calibrate, export_container
from .model import FaceNet, MarginHead, normalize_images


class TrainingDivergedError(RuntimeError):
    def __init__(self, seed: int, epoch: int, step: int, dump_path: str):
        super().__init__(
            f"loss became non-finite at epoch {epoch} step {step} "
            f"(seed {seed}); model state dumped to {dump_path}")
        self.seed = seed
        self.epoch = epoch
        self.step = step
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    seed: int = 0
    n_identities: int = 40
    per_identity: int = 8
    image_size: int = 64
    patch_size: int = 32
    c_stem: int = 8
    c_block: int = 16
    margin: float = 0.3          # additive angular margin, in (0, pi/2)
    scale: float = 16.0          # logit scale, > 0
    jigsaw_alpha: float = 0.005  # auxiliary loss weight, >= 0
    grad_clip: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 32

    def __post_init__(self):
        if not (0.0 < self.margin < math.pi / 2):
            raise ValueError("margin must lie in (0, pi/2)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.jigsaw_alpha < 0:
            raise ValueError("jigsaw_alpha must be nonnegative")


@dataclass
class TrainResult:
    model: FaceNet
    config: TrainConfig
    train_set: FaceDataset
    holdout: FaceDataset | None
    history: list[dict] = field(default_factory=list)

    @property
    def final_id_accuracy(self) -> float:
        return self.history[-1]["id_acc"]

    @property
    def final_jigsaw_accuracy(self) -> float:
        return self.history[-1]["jigsaw_acc"]


def _jigsaw_loss(model: FaceNet, images: torch.Tensor,
                 gen: torch.Generator) -> tuple[torch.Tensor, float]:
    n_p = len(model.patches)
    order = torch.randperm(n_p, generator=gen).tolist()
    pooled = model.pooled_per_patch(images, order=order)
    head_losses = []      # full-strength head training, backbone detached
    backbone_losses = []  # alpha-weighted nudge into the patch networks
    correct = 0
    total = 0
    for pos, vec in enumerate(pooled):
        target = torch.full((vec.shape[0],), order[pos], dtype=torch.long)
        logits = model.jigsaw_head(vec.detach())
        head_losses.append(F.cross_entropy(logits, target))
        backbone_losses.append(F.cross_entropy(model.jigsaw_head(vec), target))
        correct += int((logits.argmax(1) == target).sum())
        total += vec.shape[0]
    return (torch.stack(head_losses).mean(),
            torch.stack(backbone_losses).mean(), correct / total)


@torch.no_grad()
def evaluate(model: FaceNet, head: MarginHead, ds: FaceDataset,
             seed: int = 0) -> dict:
    model.eval()
    x = normalize_images(ds.images)
    feats = model.features(x)
    pred = head.accuracy_logits(feats).argmax(1).numpy()
    id_acc = float(np.mean(pred == ds.labels))
    gen = torch.Generator().manual_seed(seed)
    correct = 0
    total = 0
    for _ in range(5):
        n_p = len(model.patches)
        order = torch.randperm(n_p, generator=gen).tolist()
        pooled = model.pooled_per_patch(x, order=order)
        for pos, vec in enumerate(pooled):
            hit = (model.jigsaw_head(vec).argmax(1) == order[pos])
            correct += int(hit.sum())
            total += vec.shape[0]
    model.train()
    return {"id_acc": id_acc, "jigsaw_acc": correct / total}


def train(config: TrainConfig, train_set: FaceDataset) -> TrainResult:
    torch.manual_seed(config.seed)
    model = FaceNet(4, config.patch_size, config.c_stem, config.c_block)
    head = MarginHead(model.feature_dim, train_set.n_identities,
                      config.margin, config.scale)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.epochs)
    gen = torch.Generator().manual_seed(config.seed + 1)
    images = torch.from_numpy(train_set.images)
    labels = torch.from_numpy(train_set.labels)
    n = len(train_set)
    history = []

    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        for step in range(0, n, config.batch_size):
            idx = perm[step:step + config.batch_size]
            x = (images[idx] - 0.5) / 0.5
            y = labels[idx]
            feats = model.features(x)
            loss = F.cross_entropy(head(feats, y), y)
            if config.jigsaw_alpha > 0:
                head_loss, backbone_loss, _ = _jigsaw_loss(model, x, gen)
                loss = loss + head_loss + config.jigsaw_alpha * backbone_loss
            if not torch.isfinite(loss):
                dump = tempfile.mktemp(prefix="enface_train_dump_",
                                       suffix=".pt")
                torch.save({"model": model.state_dict(),
                            "head": head.state_dict(),
                            "config": vars(config)}, dump)
                raise TrainingDivergedError(config.seed, epoch,
                                            step // config.batch_size, dump)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
        sched.step()
        history.append({"epoch": epoch, "loss": float(loss.detach()),
                        **evaluate(model, head, train_set, config.seed)})

    model.eval()
    return TrainResult(model, config, train_set, None, history)


def _holdout_pairs(holdout: FaceDataset, rng: np.random.Generator,
                   n_each: int = 40):
    """Deterministic genuine/impostor image pairs from the holdout split."""
    by_id = [np.flatnonzero(holdout.labels == i)
             for i in range(holdout.n_identities)]
    genuine, impostor = [], []
    ids = [i for i in range(holdout.n_identities) if len(by_id[i]) >= 2]
    for k in range(n_each):
        i = ids[k % len(ids)]
        a, b = rng.choice(by_id[i], 2, replace=False)
        genuine.append((holdout.images[a], holdout.images[b]))
        j = ids[(k + 1) % len(ids)]
        impostor.append((holdout.images[by_id[i][0]],
                         holdout.images[by_id[j][0]]))
    return genuine, impostor


def train_and_export(config: TrainConfig) -> tuple[bytes, TrainResult]:
    """Full pipeline: dataset, training, calibration, CFW1 bytes."""
    ds = make_dataset(config.seed, config.n_identities, config.per_identity,
                      config.image_size)
    train_set, holdout = split_holdout(ds)
    result = train(config, train_set)
    result.holdout = holdout
    rng = np.random.default_rng(config.seed + 2)
    genuine, impostor = _holdout_pairs(holdout, rng)
    coeffs, threshold = calibrate(result.model, train_set.images,
                                  genuine, impostor)
    blob = export_container(result.model, calibration=coeffs,
                            threshold=threshold)
    return blob, result
