"""Command line entry point for training and exporting model containers."""

from __future__ import annotations

import argparse
import sys

import torch

from .export import export_container
from .model import FaceNet
from .train import TrainConfig, train_and_export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enface-train")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train on the synthetic dataset and "
                                     "export a CFW1 container")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--identities", type=int, default=40)
    t.add_argument("--jigsaw-alpha", type=float, default=0.005)
    t.add_argument("--ckpt", help="also save a torch checkpoint here")

    e = sub.add_parser("export", help="export a saved checkpoint to CFW1")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "train":
        cfg = TrainConfig(seed=args.seed, epochs=args.epochs,
                          n_identities=args.identities,
                          jigsaw_alpha=args.jigsaw_alpha)
        blob, result = train_and_export(cfg)
        with open(args.out, "wb") as f:
            f.write(blob)
        if args.ckpt:
            torch.save({"model": result.model.state_dict(),
                        "arch": result.model.arch}, args.ckpt)
        last = result.history[-1]
        print(f"trained {cfg.epochs} epochs: id_acc={last['id_acc']:.3f} "
              f"jigsaw_acc={last['jigsaw_acc']:.3f}")
        print(f"wrote {args.out} ({len(blob)} bytes)")
        return 0
    if args.cmd == "export":
        ckpt = torch.load(args.ckpt, weights_only=True)
        arch = ckpt["arch"]
        model = FaceNet(arch["n_patches"], arch["patch_size"],
                        arch["c_stem"], arch["c_block"])
        model.load_state_dict(ckpt["model"])
        model.eval()
        blob = export_container(model)
        with open(args.out, "wb") as f:
            f.write(blob)
        print(f"wrote {args.out} ({len(blob)} bytes)")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
