"""Command-line drivers for both protocol roles.

Verbs: keygen, serve, enroll, verify, fit-l2, bench, export-transcript.

Images are accepted as binary PGM (P5, single channel), PPM (P6, RGB), or
the raw float32 format "CFIM": a 16-byte header {magic "CFIM", C, H, W as
u32 little-endian} followed by C*H*W float32 little-endian values in [0, 1].
"""

from __future__ import annotations

import argparse
import io
import json
import struct
import sys
import threading
from dataclasses import replace

import numpy as np

from . import protocol as proto
from .bench import bench_kernels, bench_patch_scaling
from .errors import EnfaceError
from .matcher import fit_l2_poly
from .model import compile_model
from .serialize import dump_secret_key, load_secret_key

CFIM_MAGIC = b"CFIM"


# ---------------------------------------------------------------------------
# image IO


def load_image(path: str) -> np.ndarray:
    """Read PGM/PPM/CFIM into a C×H×W float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == CFIM_MAGIC:
        c, h, w = struct.unpack("<III", data[4:16])
        count = c * h * w
        body = data[16:16 + 4 * count]
        if len(body) != 4 * count:
            raise EnfaceError(f"truncated CFIM image {path}")
        return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64)
    if data[:2] in (b"P5", b"P6"):
        return _load_pnm(data)
    raise EnfaceError(f"unrecognized image format in {path}")


def _load_pnm(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    magic = stream.read(2)
    channels = 1 if magic == b"P5" else 3

    def token():
        tok = b""
        while True:
            ch = stream.read(1)
            if ch == b"#":  # comment to end of line
                while stream.read(1) not in (b"\n", b""):
                    pass
                continue
            if ch.isspace() or ch == b"":
                if tok:
                    return tok
                continue
            tok += ch

    w, h, maxval = int(token()), int(token()), int(token())
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    arr = np.frombuffer(stream.read(), dtype=dtype, count=count).astype(np.float64)
    img = arr.reshape(h, w, channels).transpose(2, 0, 1)
    return img / maxval


def save_cfim(path: str, image: np.ndarray):
    image = np.asarray(image, dtype="<f4")
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(CFIM_MAGIC + struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(image).tobytes())


# ---------------------------------------------------------------------------
# shared plumbing


def _load_model(path: str):
    with open(path, "rb") as fh:
        return compile_model(fh.read())


def _client_from_args(args) -> proto.ClientSession:
    model = _load_model(args.model)
    with open(args.bundle, "rb") as fh:
        fingerprint, keys = proto.load_setup_bundle(fh.read())
    if fingerprint != model.fingerprint:
        raise EnfaceError("bundle was issued for a different model")
    with open(args.secret, "rb") as fh:
        secret, _ = load_secret_key(fh.read())
    return proto.ClientSession(replace(keys, secret=secret), model)


def _transport(args) -> proto.SocketTransport:
    return proto.SocketTransport(args.host, args.port)


def _append_transcript(path: str | None, transport):
    if path:
        with open(path, "ab") as fh:
            fh.write(transport.transcript.dump())


# ---------------------------------------------------------------------------
# verbs


def cmd_keygen(args):
    model = _load_model(args.model)
    session, bundle = proto.client_setup(model.params, model, seed=args.seed)
    with open(args.secret_out, "wb") as fh:
        fh.write(dump_secret_key(session.keys.secret, model.params))
    with open(args.bundle_out, "wb") as fh:
        fh.write(bundle)
    print(f"secret key -> {args.secret_out}")
    print(f"setup bundle ({len(bundle)} bytes) -> {args.bundle_out}")
    return 0


def cmd_serve(args):
    model = _load_model(args.model)
    with open(args.bundle, "rb") as fh:
        bundle = fh.read()
    store = proto.RecordStore(args.store)
    server = proto.server_setup(bundle, model, store)
    host, _, port = args.listen.partition(":")
    tcp, bound = proto.serve_forever(server, host or "127.0.0.1", int(port or 0))
    print(f"serving on {host or '127.0.0.1'}:{bound}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        tcp.shutdown()
    return 0


def cmd_enroll(args):
    session = _client_from_args(args)
    transport = _transport(args)
    identity = session.enroll(transport, args.id, load_image(args.image))
    _append_transcript(args.transcript, transport)
    print(f"enrolled {identity!r}")
    return 0


def cmd_verify(args):
    session = _client_from_args(args)
    transport = _transport(args)
    is_match, value = session.verify(transport, args.id, load_image(args.image))
    _append_transcript(args.transcript, transport)
    print(f"{'match' if is_match else 'no-match'} (score - T = {value:+.6f})")
    return 0 if is_match else 1


def cmd_fit_l2(args):
    text = open(args.norms).read().strip()
    if text.startswith("["):
        norms = json.loads(text)
    else:
        norms = [float(line) for line in text.splitlines() if line.strip()]
    coeffs = fit_l2_poly(norms)
    print(json.dumps(coeffs.to_json(), indent=2))
    return 0


def cmd_bench(args):
    report = {}
    if args.kernels:
        report["kernels"] = bench_kernels()
    if args.patches:
        report["scaling"] = bench_patch_scaling(tuple(args.patches),
                                                workers=args.workers)
    print(json.dumps(report, indent=2, default=str))
    return 0


def cmd_export_transcript(args):
    with open(args.transcript, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    frames = []
    while buf.tell() < len(data):
        direction = proto._r_str(buf)
        (msg_type,) = struct.unpack("<H", buf.read(2))
        payload = proto._r_blob(buf)
        frames.append({"direction": direction, "type": msg_type,
                       "bytes": len(payload)})
    out = json.dumps({"frames": frames}, indent=2)
    if args.out == "-":
        print(out)
    else:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enface", description="Encrypted face verification toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("keygen", help="generate client keys and a setup bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--secret-out", default="client.sk")
    p.add_argument("--bundle-out", default="setup.bundle")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("serve", help="run the verification server")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.set_defaults(fn=cmd_serve)

    for verb, fn in (("enroll", cmd_enroll), ("verify", cmd_verify)):
        p = sub.add_parser(verb, help=f"{verb} an identity")
        p.add_argument("--model", required=True)
        p.add_argument("--bundle", required=True)
        p.add_argument("--secret", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--id", required=True)
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, required=True)
        p.add_argument("--transcript", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("fit-l2", help="fit the l2 normalization polynomial")
    p.add_argument("--norms", required=True,
                   help="file of squared norms: JSON list or one per line")
    p.set_defaults(fn=cmd_fit_l2)

    p = sub.add_parser("bench", help="run benchmarks")
    p.add_argument("--patches", type=int, nargs="*", default=[],
                   choices=[4, 9, 16])
    p.add_argument("--workers", type=int, default=16)
    p.add_argument("--kernels", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("export-transcript", help="summarize a recorded transcript")
    p.add_argument("--transcript", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_export_transcript)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EnfaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
