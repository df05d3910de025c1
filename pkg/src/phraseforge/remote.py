"""Remote encoder wire protocol.

Line-delimited JSON over a byte stream. One request per line:

    {"id": "<string>", "texts": ["...", ...]}

and exactly one response line per request:

    {"id": "<same string>", "dim": <int>, "vectors": [[<2*dim floats>], ...]}

Each wire vector is the start and end base vectors of one text, concatenated
(start first), so ``dim`` is the per-side dimension. Vectors are base features
only; projection always happens locally. Lines are canonical JSON (sorted
keys, no spaces) encoded as UTF-8.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np

from .encoder import BaseEmbedding, featurize
from .errors import ConfigurationError, ProtocolError, TransportError


def canonical_line(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def encode_request(request_id: str, texts: list[str]) -> bytes:
    return canonical_line({"id": request_id, "texts": list(texts)})


def encode_response(request_id: str, dim: int, vectors) -> bytes:
    return canonical_line({
        "id": request_id,
        "dim": int(dim),
        "vectors": [[float(x) for x in vec] for vec in vectors],
    })


def parse_request(line: bytes) -> tuple[str, list[str]]:
    try:
        obj = json.loads(line.decode("utf-8"))
        request_id = obj["id"]
        texts = obj["texts"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed request line: {exc}") from exc
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise ProtocolError("request texts must be a list of strings")
    return str(request_id), texts


def parse_response(line: bytes, expect_id: str, expect_count: int) -> list[BaseEmbedding]:
    """Validate a response line and split each wire vector into start/end."""
    try:
        obj = json.loads(line.decode("utf-8"))
        response_id = obj["id"]
        dim = int(obj["dim"])
        vectors = obj["vectors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed response line: {exc}") from exc
    if response_id != expect_id:
        raise ProtocolError(f"response id {response_id!r} does not match request {expect_id!r}")
    if dim < 2:
        raise ProtocolError(f"response dim must be >= 2, got {dim}")
    if not isinstance(vectors, list) or len(vectors) != expect_count:
        got = len(vectors) if isinstance(vectors, list) else "non-list"
        raise ProtocolError(f"expected {expect_count} vectors, got {got}")
    out = []
    for vec in vectors:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != 2 * dim:
            raise ProtocolError(
                f"vector length {arr.shape} inconsistent with dim {dim}")
        if not np.all(np.isfinite(arr)):
            raise ProtocolError("response vector contains non-finite values")
        out.append(BaseEmbedding(arr[:dim].copy(), arr[dim:].copy()))
    return out


def _split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigurationError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def remote_encode(texts: list[str], endpoint: str, request_id: str = "0",
                  timeout: float = 10.0) -> list[BaseEmbedding]:
    """One-shot batch encode against a remote encoder service."""
    texts = list(texts)
    if not texts:
        return []
    host, port = _split_endpoint(endpoint)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.sendall(encode_request(request_id, texts))
            with sock.makefile("rb") as stream:
                line = stream.readline()
    except (OSError, socket.timeout) as exc:
        raise TransportError(f"encoder endpoint {endpoint} unreachable: {exc}") from exc
    if not line:
        raise TransportError(f"encoder endpoint {endpoint} closed the connection")
    return parse_response(line, expect_id=request_id, expect_count=len(texts))


class RemoteEncoder:
    """Provider that proxies to a remote encoder service.

    Matches the HashedFeaturizer provider surface so contexts and phrases can
    be encoded against a real service instead of the built-in featurizer.
    Request ids are a per-client counter; each batch is one request line.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._counter = 0
        self._lock = threading.Lock()
        self.dim: int | None = None

    def _next_id(self) -> str:
        with self._lock:
            self._counter += 1
            return str(self._counter)

    def encode_batch(self, texts: list[str]) -> list[BaseEmbedding]:
        embeddings = remote_encode(texts, self.endpoint, request_id=self._next_id(),
                                   timeout=self.timeout)
        if embeddings:
            dim = embeddings[0].dim
            if self.dim is None:
                self.dim = dim
            elif self.dim != dim:
                raise ProtocolError(
                    f"response dim changed from {self.dim} to {dim}")
        return embeddings

    def encode(self, text: str) -> BaseEmbedding:
        return self.encode_batch([text])[0]

    def describe(self) -> str:
        return f"remote-encoder({self.endpoint})"


class _EncoderHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            request_id, texts = parse_request(line)
            server: EncoderServer = self.server  # type: ignore[assignment]
            vectors = []
            for text in texts:
                base = featurize(text, server.dim, server.seed)
                vectors.append(np.concatenate([base.start_vec, base.end_vec]))
            self.wfile.write(encode_response(request_id, server.dim, vectors))
            self.wfile.flush()


class EncoderServer(socketserver.ThreadingTCPServer):
    """Reference encoder service backed by the deterministic featurizer.

    Mainly used by the test suite; ``phraseforge`` itself only ships the
    client side of the protocol.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, dim: int, seed: int, host: str = "127.0.0.1", port: int = 0):
        self.dim = dim
        self.seed = seed
        super().__init__((host, port), _EncoderHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
