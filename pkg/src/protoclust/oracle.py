"""Hard-label oracles: in-process, TCP server, and TCP client.

The oracle boundary is deliberately narrow. A request carries feature
rows; the response carries integer cluster labels and nothing else (no
probabilities, no logits, no parameters), so a frozen source model can
be exposed over a socket without leaking its internals.

Wire format: one JSON object per line, UTF-8.
  request   {"id": <int>, "features": [[...], ...]}
  response  {"id": <int>, "k": <int>, "labels": [<int>, ...]}
  error     {"id": <int>, "error": "bad_json" | "bad_request" |
                                   "width_mismatch" | "empty"}
A malformed request gets an error response; the connection stays open.
"""

import json
import socket
import socketserver
import threading
import time

import numpy as np

from .model import load_model, predict
from .numkit import as_matrix

MAX_ROWS_PER_FRAME = 256


class OracleError(RuntimeError):
    pass


class LocalOracle:
    """Argmax labels from a model held in this process.

    query_count tracks the number of feature rows ever labeled, which is
    what a privacy audit of the oracle boundary needs.
    """

    def __init__(self, model):
        self.model = model
        self.query_count = 0

    @property
    def k(self):
        return self.model.k

    @property
    def input_dim(self):
        return self.model.spec.input_dim

    def query(self, features):
        feats = as_matrix(features, "features")
        if feats.shape[0] == 0:
            raise ValueError("empty query")
        if feats.shape[1] != self.input_dim:
            raise ValueError(
                f"feature width {feats.shape[1]} != oracle input {self.input_dim}"
            )
        probs = predict(self.model, feats)
        self.query_count += feats.shape[0]
        # np.argmax takes the lowest index on ties
        return np.argmax(probs, axis=1).astype(np.int64)


class OracleServer(socketserver.ThreadingTCPServer):
    """Serves a LocalOracle over newline-delimited JSON."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model, address=("127.0.0.1", 0)):
        super().__init__(address, _OracleHandler)
        self.oracle = LocalOracle(model)
        self._lock = threading.Lock()

    @property
    def port(self):
        return self.server_address[1]

    def process_line(self, raw):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                return {"id": 0, "error": "bad_json"}
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError:
            return {"id": 0, "error": "bad_json"}
        if not isinstance(msg, dict):
            return {"id": 0, "error": "bad_json"}
        rid = msg.get("id")
        if not isinstance(rid, int) or rid < 0:
            return {"id": 0, "error": "bad_request"}
        rows = msg.get("features")
        if not isinstance(rows, list):
            return {"id": rid, "error": "bad_request"}
        if len(rows) == 0:
            return {"id": rid, "error": "empty"}
        if len(rows) > MAX_ROWS_PER_FRAME:
            return {"id": rid, "error": "bad_request"}
        width = self.oracle.input_dim
        for row in rows:
            if not isinstance(row, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
            ):
                return {"id": rid, "error": "bad_request"}
            if len(row) != width:
                return {"id": rid, "error": "width_mismatch"}
        feats = np.array(rows, dtype=np.float64)
        if not np.all(np.isfinite(feats)):
            return {"id": rid, "error": "bad_request"}
        with self._lock:
            labels = self.oracle.query(feats)
        return {"id": rid, "k": self.oracle.k, "labels": [int(v) for v in labels]}


class _OracleHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                raw = self.rfile.readline()
            except (ConnectionError, OSError):
                return
            if not raw:
                return
            if not raw.strip():
                continue
            reply = self.server.process_line(raw)
            try:
                self.wfile.write(
                    (json.dumps(reply, separators=(",", ":")) + "\n").encode("utf-8")
                )
                self.wfile.flush()
            except (ConnectionError, OSError):
                return


def start_server(model, host="127.0.0.1", port=0):
    """Bind and return an OracleServer plus a thread running it."""
    server = OracleServer(model, (host, port))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


class RemoteOracle:
    """Client for OracleServer with framing, retries and backoff.

    Large queries are split into frames of at most MAX_ROWS_PER_FRAME
    rows. Transport failures trigger reconnect-and-resend up to
    `retries` times with linear backoff; protocol-level errors (the
    server answered, but with an error code) raise immediately.
    """

    def __init__(self, host, port, retries=3, backoff=0.2, timeout=10.0):
        self.host = host
        self.port = port
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.query_count = 0
        self._sock = None
        self._reader = None
        self._next_id = 1

    def _connect(self):
        self.close()
        self._sock = socket.create_connection(
            (self.host, self.port), timeout=self.timeout
        )
        self._reader = self._sock.makefile("rb")

    def close(self):
        if self._reader is not None:
            try:
                self._reader.close()
            except OSError:
                pass
            self._reader = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _exchange(self, frame):
        payload = (json.dumps(frame, separators=(",", ":")) + "\n").encode("utf-8")
        last_err = None
        for attempt in range(self.retries + 1):
            try:
                if self._sock is None:
                    self._connect()
                self._sock.sendall(payload)
                raw = self._reader.readline()
                if not raw:
                    raise ConnectionError("server closed the connection")
                return json.loads(raw.decode("utf-8"))
            except (ConnectionError, OSError, json.JSONDecodeError) as err:
                last_err = err
                self.close()
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise OracleError(f"oracle unreachable after {self.retries + 1} attempts: {last_err}")

    def query(self, features):
        feats = as_matrix(features, "features")
        if feats.shape[0] == 0:
            raise ValueError("empty query")
        labels = []
        k_seen = None
        for lo in range(0, feats.shape[0], MAX_ROWS_PER_FRAME):
            chunk = feats[lo:lo + MAX_ROWS_PER_FRAME]
            rid = self._next_id
            self._next_id += 1
            reply = self._exchange({"id": rid, "features": chunk.tolist()})
            if not isinstance(reply, dict):
                raise OracleError(f"malformed reply: {reply!r}")
            if "error" in reply:
                raise OracleError(f"oracle rejected frame: {reply['error']}")
            if reply.get("id") != rid:
                raise OracleError(
                    f"response id {reply.get('id')!r} does not match request {rid}"
                )
            got = reply.get("labels")
            if not isinstance(got, list) or len(got) != chunk.shape[0]:
                raise OracleError("label count does not match rows sent")
            k = reply.get("k")
            if not isinstance(k, int) or k < 2:
                raise OracleError(f"bad cluster count in reply: {k!r}")
            if k_seen is None:
                k_seen = k
            elif k != k_seen:
                raise OracleError("cluster count changed between frames")
            if any(not isinstance(v, int) or v < 0 or v >= k for v in got):
                raise OracleError("labels outside [0, k)")
            labels.extend(got)
            self.query_count += chunk.shape[0]
        self.k = k_seen
        return np.array(labels, dtype=np.int64)


def connect_oracle(address):
    """Build an oracle from an address string.

    "local:<checkpoint path>" loads the model into this process;
    "tcp://host:port" talks to a running server.
    """
    if address.startswith("local:"):
        return LocalOracle(load_model(address[len("local:"):]))
    if address.startswith("tcp://"):
        rest = address[len("tcp://"):]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"bad oracle address {address!r}, want tcp://host:port")
        try:
            port = int(port)
        except ValueError:
            raise ValueError(f"bad port in oracle address {address!r}") from None
        return RemoteOracle(host, port)
    raise ValueError(f"unrecognized oracle address {address!r}")
