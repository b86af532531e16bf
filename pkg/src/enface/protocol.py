"""Client/server enrollment and verification protocol over encrypted features.

Two roles.  The client owns the secret key: it encrypts probe images, and it
is the only party that ever decrypts anything (the final match scalar).  The
server owns the model weights: it evaluates the patch networks, normalizes
and scores encrypted features, and persists encrypted references — without
ever holding key material that could decrypt them.

Transport is length-prefixed binary frames, {u32 length, u16 msg-type,
payload}, over a local TCP socket or an in-process loopback for tests.  A
transcript recorder captures every frame so tests can assert that no
plaintext image or feature bytes ever travel (canary scan).

Persistence is an append-only record file with an in-memory index; the
latest record per identity wins and every enrollment is fsynced.
"""

from __future__ import annotations

import io
import json
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .ckks import KeySet, decrypt_to_values, keygen
from .errors import EnfaceError, FingerprintError, ProtocolError
from .matcher import he_l2_normalize, he_match, he_score
from .model import (
    EncryptedFeature,
    ModelSpec,
    encrypt_image,
    eval_model,
)
from .params import CkksParams
from .serialize import (
    dump_ciphertext,
    dump_keyset,
    load_ciphertext,
    load_keyset,
)

MSG_ENROLL_REQ = 1
MSG_ENROLL_ACK = 2
MSG_VERIFY_REQ = 3
MSG_VERIFY_RESP = 4
MSG_ERROR = 5

ERR_UNKNOWN_IDENTITY = 1
ERR_FINGERPRINT = 2
ERR_MALFORMED = 3
ERR_STORAGE = 4

MAX_IDENTITY_BYTES = 256


# ---------------------------------------------------------------------------
# framing


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    return struct.pack("<IH", len(payload), msg_type) + payload


def read_frame(stream) -> tuple[int, bytes]:
    head = _read_exact(stream, 6)
    length, msg_type = struct.unpack("<IH", head)
    return msg_type, _read_exact(stream, length)


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(ERR_MALFORMED, "connection closed mid-frame")
        buf += chunk
    return buf


def _w_str(buf: io.BytesIO, s: str):
    raw = s.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _r_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode()


def _w_blob(buf: io.BytesIO, raw: bytes):
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _r_blob(buf: io.BytesIO) -> bytes:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n)


def encode_request(identity: str, fingerprint: str, cts, params) -> bytes:
    if len(identity.encode()) > MAX_IDENTITY_BYTES:
        raise ProtocolError(ERR_MALFORMED, "identity label exceeds 256 bytes")
    buf = io.BytesIO()
    _w_str(buf, identity)
    _w_str(buf, fingerprint)
    buf.write(struct.pack("<H", len(cts)))
    for ct in cts:
        _w_blob(buf, dump_ciphertext(ct, params))
    return buf.getvalue()


def decode_request(payload: bytes, params):
    buf = io.BytesIO(payload)
    identity = _r_str(buf)
    fingerprint = _r_str(buf)
    (n,) = struct.unpack("<H", buf.read(2))
    cts = [load_ciphertext(_r_blob(buf), params) for _ in range(n)]
    return identity, fingerprint, cts


def encode_error(code: int, message: str) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<H", code))
    _w_str(buf, message)
    return buf.getvalue()


def decode_error(payload: bytes) -> ProtocolError:
    buf = io.BytesIO(payload)
    (code,) = struct.unpack("<H", buf.read(2))
    return ProtocolError(code, _r_str(buf))


# ---------------------------------------------------------------------------
# encrypted reference store


@dataclass
class EnrollmentRecord:
    identity: str
    feature_bytes: bytes
    fingerprint: str
    created_at: float


class RecordStore:
    """Append-only enrollment store; in-memory index, latest record wins."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._index: dict[str, EnrollmentRecord] = {}
        if os.path.exists(path):
            with open(path, "rb") as fh:
                self._scan(fh)
        self._fh = open(path, "ab")

    def _scan(self, fh):
        while True:
            head = fh.read(4)
            if len(head) < 4:
                break
            (total,) = struct.unpack("<I", head)
            body = fh.read(total)
            if len(body) != total:
                break  # truncated trailing record from a crash; ignore
            buf = io.BytesIO(body)
            meta = json.loads(_r_blob(buf).decode())
            feature = _r_blob(buf)
            self._index[meta["identity"]] = EnrollmentRecord(
                meta["identity"], feature, meta["fingerprint"], meta["created_at"]
            )

    def put(self, record: EnrollmentRecord):
        meta = json.dumps({
            "identity": record.identity,
            "fingerprint": record.fingerprint,
            "created_at": record.created_at,
        }).encode()
        buf = io.BytesIO()
        _w_blob(buf, meta)
        _w_blob(buf, record.feature_bytes)
        body = buf.getvalue()
        with self._lock:
            self._fh.write(struct.pack("<I", len(body)) + body)
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._index[record.identity] = record

    def get(self, identity: str) -> EnrollmentRecord | None:
        with self._lock:
            return self._index.get(identity)

    def identities(self) -> list[str]:
        with self._lock:
            return sorted(self._index)

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# setup bundle (public material only)


def make_setup_bundle(keys: KeySet, fingerprint: str) -> bytes:
    """Public key + eval keys + params + model fingerprint.  Never contains
    the secret key."""
    buf = io.BytesIO()
    _w_str(buf, fingerprint)
    _w_blob(buf, dump_keyset(keys))
    return buf.getvalue()


def load_setup_bundle(data: bytes) -> tuple[str, KeySet]:
    buf = io.BytesIO(data)
    fingerprint = _r_str(buf)
    keys = load_keyset(_r_blob(buf))
    return fingerprint, keys


# ---------------------------------------------------------------------------
# server


class Server:
    """Evaluates enrollment/verification requests; never decrypts."""

    def __init__(self, model: ModelSpec, keys: KeySet, store: RecordStore):
        if keys.secret is not None:
            raise ProtocolError(
                ERR_MALFORMED, "server must be handed evaluation keys only"
            )
        if model.l2_poly is None or model.threshold is None:
            raise ProtocolError(ERR_MALFORMED, "model lacks calibration data")
        self.model = model
        self.keys = keys
        self.store = store

    def handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        try:
            if msg_type == MSG_ENROLL_REQ:
                return self._enroll(payload)
            if msg_type == MSG_VERIFY_REQ:
                return self._verify(payload)
            return MSG_ERROR, encode_error(ERR_MALFORMED,
                                           f"unknown message type {msg_type}")
        except ProtocolError as exc:
            return MSG_ERROR, encode_error(exc.code, str(exc))
        except EnfaceError as exc:
            return MSG_ERROR, encode_error(ERR_MALFORMED, str(exc))

    def _extract(self, payload: bytes):
        identity, fingerprint, cts = decode_request(payload, self.model.params)
        if fingerprint != self.model.fingerprint:
            raise ProtocolError(
                ERR_FINGERPRINT, "request fingerprint does not match loaded model"
            )
        feature = eval_model(cts, self.model, self.keys)
        return identity, feature

    def _enroll(self, payload: bytes) -> tuple[int, bytes]:
        identity, feature = self._extract(payload)
        record = EnrollmentRecord(
            identity=identity,
            feature_bytes=dump_ciphertext(feature.ct, self.model.params),
            fingerprint=self.model.fingerprint,
            created_at=time.time(),
        )
        self.store.put(record)
        buf = io.BytesIO()
        _w_str(buf, identity)
        return MSG_ENROLL_ACK, buf.getvalue()

    def _verify(self, payload: bytes) -> tuple[int, bytes]:
        identity, probe = self._extract(payload)
        record = self.store.get(identity)
        if record is None:
            raise ProtocolError(
                ERR_UNKNOWN_IDENTITY, f"identity {identity!r} is not enrolled"
            )
        if record.fingerprint != self.model.fingerprint:
            raise ProtocolError(
                ERR_FINGERPRINT, "stored record was enrolled under another model"
            )
        reference = EncryptedFeature(
            load_ciphertext(record.feature_bytes, self.model.params),
            self.model.feature_dim, record.fingerprint,
        )
        ref_n = he_l2_normalize(reference, self.model.l2_poly, self.keys)
        probe_n = he_l2_normalize(probe, self.model.l2_poly, self.keys)
        score = he_score(ref_n, probe_n, self.keys)
        match_ct = he_match(score, self.model.threshold, self.model.params)
        buf = io.BytesIO()
        _w_blob(buf, dump_ciphertext(match_ct, self.model.params))
        return MSG_VERIFY_RESP, buf.getvalue()


# ---------------------------------------------------------------------------
# transcript recording and transports


@dataclass
class Transcript:
    frames: list[tuple[str, int, bytes]] = field(default_factory=list)

    def record(self, direction: str, msg_type: int, payload: bytes):
        self.frames.append((direction, msg_type, payload))

    def contains(self, blob: bytes) -> bool:
        """True if any frame body contains the byte string (canary scan)."""
        return any(blob in payload for _, _, payload in self.frames)

    def dump(self) -> bytes:
        buf = io.BytesIO()
        for direction, msg_type, payload in self.frames:
            _w_str(buf, direction)
            buf.write(struct.pack("<H", msg_type))
            _w_blob(buf, payload)
        return buf.getvalue()


class LoopbackTransport:
    """In-process request/response channel with transcript recording."""

    def __init__(self, server: Server, transcript: Transcript | None = None):
        self.server = server
        self.transcript = transcript if transcript is not None else Transcript()

    def round_trip(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        self.transcript.record("client->server", msg_type, payload)
        resp_type, resp = self.server.handle(msg_type, payload)
        self.transcript.record("server->client", resp_type, resp)
        return resp_type, resp


class SocketTransport:
    """Client side of the TCP transport."""

    def __init__(self, host: str, port: int, transcript: Transcript | None = None):
        self.addr = (host, port)
        self.transcript = transcript if transcript is not None else Transcript()

    def round_trip(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        self.transcript.record("client->server", msg_type, payload)
        with socket.create_connection(self.addr) as sock:
            sock.sendall(pack_frame(msg_type, payload))
            with sock.makefile("rb") as stream:
                resp_type, resp = read_frame(stream)
        self.transcript.record("server->client", resp_type, resp)
        return resp_type, resp


def serve_forever(server: Server, host: str = "127.0.0.1", port: int = 0):
    """Run the threaded TCP server; returns (tcp_server, bound_port).

    Call ``tcp_server.shutdown()`` to stop."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            try:
                msg_type, payload = read_frame(self.rfile)
            except ProtocolError:
                return
            resp_type, resp = server.handle(msg_type, payload)
            self.wfile.write(pack_frame(resp_type, resp))

    class TcpServer(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    tcp = TcpServer((host, port), Handler)
    thread = threading.Thread(target=tcp.serve_forever, daemon=True)
    thread.start()
    return tcp, tcp.server_address[1]


# ---------------------------------------------------------------------------
# client


class ClientSession:
    """Holds the secret key; encrypts probes and decrypts match scalars.

    The model object is used only for its public metadata (normalization
    stats, patch geometry, fingerprint); the client never evaluates it."""

    def __init__(self, keys: KeySet, model: ModelSpec):
        if keys.secret is None:
            raise ProtocolError(ERR_MALFORMED, "client session needs the secret key")
        self.keys = keys
        self.model = model

    def enroll_request(self, identity: str, image: np.ndarray) -> bytes:
        cts = encrypt_image(image, self.model, self.keys)
        return encode_request(identity, self.model.fingerprint, cts,
                              self.model.params)

    def verify_request(self, identity: str, image: np.ndarray) -> bytes:
        return self.enroll_request(identity, image)

    def decide(self, resp_type: int, payload: bytes) -> tuple[bool, float]:
        """Decrypt the match scalar: (is_match, score - T)."""
        if resp_type == MSG_ERROR:
            raise decode_error(payload)
        if resp_type != MSG_VERIFY_RESP:
            raise ProtocolError(ERR_MALFORMED, f"unexpected response {resp_type}")
        ct = load_ciphertext(_r_blob(io.BytesIO(payload)), self.model.params)
        value = float(decrypt_to_values(ct, self.keys.secret,
                                        self.model.params)[0].real)
        if not np.isfinite(value):
            raise ProtocolError(ERR_MALFORMED, "corrupted verify response")
        return value < 0, value

    def enroll(self, transport, identity: str, image: np.ndarray) -> str:
        resp_type, resp = transport.round_trip(
            MSG_ENROLL_REQ, self.enroll_request(identity, image))
        if resp_type == MSG_ERROR:
            raise decode_error(resp)
        if resp_type != MSG_ENROLL_ACK:
            raise ProtocolError(ERR_MALFORMED, f"unexpected response {resp_type}")
        return _r_str(io.BytesIO(resp))

    def verify(self, transport, identity: str, image: np.ndarray) -> tuple[bool, float]:
        resp_type, resp = transport.round_trip(
            MSG_VERIFY_REQ, self.verify_request(identity, image))
        return self.decide(resp_type, resp)


def client_setup(params: CkksParams, model: ModelSpec,
                 seed: int = 0) -> tuple[ClientSession, bytes]:
    """Generate the client's keys and the public SetupBundle for the server.

    The KeySet (with the secret) stays local; the bundle carries only public
    evaluation material plus the model fingerprint being agreed on."""
    keys = keygen(params, model.required_rotation_steps(), rng_seed=seed)
    bundle = make_setup_bundle(keys, model.fingerprint)
    return ClientSession(keys, model), bundle


def server_setup(bundle: bytes, model: ModelSpec, store: RecordStore) -> Server:
    fingerprint, keys = load_setup_bundle(bundle)
    if fingerprint != model.fingerprint:
        raise FingerprintError("setup bundle was issued for a different model")
    return Server(model, keys, store)
