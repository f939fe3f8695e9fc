"""Weight aggregation and round orchestration.

Each round the combiner sends the current global weights to a selected
set of clients, collects their locally trained weights, combines them as
the pair-count weighted average sum_k (n_k / n) W_k, and folds the
result into the global model as a running mean over rounds:
W_t = W_{t-1} + (W_t^round - W_{t-1}) / t. The `replace` merge mode
keeps the round average as-is instead.

Accumulation runs in float64 and is cast back to the weight dtype at the
end, so aggregation order cannot leak into the result at float32 scale.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import AggregationError, ContractError, Disconnected, ProtocolError
from .protocol import (
    ERR_BAD_MESSAGE,
    ERR_FEDERATION_COMPLETE,
    Error,
    Heartbeat,
    Join,
    RoundResult,
    RoundStart,
    Update,
    deserialize_weights,
    recv_message,
    send_message,
    serialize_weights,
)
from .tensor import Tensor
from .weights import ModelWeights

log = logging.getLogger(__name__)

MERGE_MODES = ("incremental", "replace")
METRICS_COLUMNS = (
    "t",
    "n_received",
    "mean_train_acc",
    "mean_val_acc",
    "mean_train_loss",
    "mean_val_loss",
)


def select_clients(client_ids, fraction: float, seed: int, min_clients: int = 1) -> list[str]:
    """Seeded sample of ceil(fraction * len(ids)) ids, at least min_clients.

    Input order does not matter: ids are sorted before sampling and the
    sample is returned sorted, so selection is reproducible.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction {fraction} out of range (0, 1]")
    ids = sorted(client_ids)
    if not ids:
        raise ContractError("no clients to select from")
    count = max(min_clients, math.ceil(fraction * len(ids)))
    count = min(count, len(ids))
    return sorted(random.Random(seed).sample(ids, count))


def aggregate_round(updates: list[Update]) -> ModelWeights:
    """Pair-count weighted average of client weights, accumulated in float64."""
    if not updates:
        raise ContractError("aggregate_round needs at least one update")
    total = sum(u.n_k for u in updates)
    if total <= 0:
        raise ContractError("total pair count across updates is zero")
    ref = updates[0].weights
    ref_names = ref.names()
    acc = {name: np.zeros(ref[name].shape, dtype=np.float64) for name in ref_names}
    for update in updates:
        w = update.weights
        if w.names() != ref_names:
            extra = set(w.names()) ^ set(ref_names)
            raise AggregationError(
                f"tensor set mismatch ({sorted(extra)[:3]}...)",
                client_id=update.client_id,
            )
        coef = update.n_k / total
        for name in ref_names:
            arr = w[name].data
            if arr.shape != ref[name].shape:
                raise AggregationError(
                    f"shape {arr.shape} != {ref[name].shape}",
                    client_id=update.client_id, tensor=name,
                )
            if not np.all(np.isfinite(arr)):
                raise AggregationError(
                    "non-finite values", client_id=update.client_id, tensor=name
                )
            acc[name] += coef * arr.astype(np.float64)
    dtype = ref.dtype
    return ModelWeights(
        (name, Tensor(acc[name], dtype=dtype, name=name)) for name in ref_names
    )


def incremental_merge(w_prev: ModelWeights, w_round: ModelWeights, t: int) -> ModelWeights:
    """Running mean across rounds; t == 1 returns the round result exactly."""
    if t < 1:
        raise ContractError(f"round number must be >= 1, got {t}")
    if t == 1:
        return w_round
    if w_prev.names() != w_round.names():
        raise AggregationError("merge inputs have different tensor sets")
    dtype = w_prev.dtype
    items = []
    for name in w_prev.names():
        prev = w_prev[name].data.astype(np.float64)
        cur = w_round[name].data.astype(np.float64)
        if prev.shape != cur.shape:
            raise AggregationError("shape mismatch in merge", tensor=name)
        items.append((name, Tensor(prev + (cur - prev) / t, dtype=dtype, name=name)))
    return ModelWeights(items)


@dataclass
class FederationState:
    weights: ModelWeights
    t: int = 0
    rounds: int = 0
    done: bool = False
    history: list = field(default_factory=list)
    last_updates: dict = field(default_factory=dict)


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def metrics_row(result: RoundResult) -> str:
    cells = [
        str(result.t),
        str(result.n_received),
        f"{result.mean_train_acc:.6f}",
        f"{result.mean_val_acc:.6f}",
        f"{result.mean_train_loss:.6f}",
        f"{result.mean_val_loss:.6f}",
    ]
    if result.global_acc is not None and result.global_loss is not None:
        cells.append(f"{result.global_acc:.6f}")
        cells.append(f"{result.global_loss:.6f}")
    return "\t".join(cells)


def _build_result(t: int, updates: list[Update], weights: ModelWeights, eval_fn) -> RoundResult:
    global_acc = global_loss = None
    if eval_fn is not None:
        global_loss, global_acc = eval_fn(weights)
    return RoundResult(
        t=t,
        n_received=len(updates),
        mean_train_acc=_mean(u.train_acc for u in updates),
        mean_val_acc=_mean(u.val_acc for u in updates),
        mean_train_loss=_mean(u.train_loss for u in updates),
        mean_val_loss=_mean(u.val_loss for u in updates),
        weights=weights,
        global_acc=global_acc,
        global_loss=global_loss,
    )


class RoundCoordinator:
    """Runs the federation against in-process clients.

    Weights still pass through the wire serialization in both directions
    so byte-level behaviour matches the socket path. A client whose
    round raises is skipped for that round; a round with zero usable
    updates is retried once, then the federation aborts.
    """

    def __init__(
        self,
        clients: list,
        initial_weights: ModelWeights,
        rounds: int,
        epochs: int = 1,
        lr: float = 0.001,
        batch_size: int = 32,
        fraction: float = 1.0,
        min_clients: int = 1,
        merge: str = "incremental",
        seed: int = 0,
        eval_fn=None,
        on_round_end=None,
    ):
        if merge not in MERGE_MODES:
            raise ContractError(f"merge mode {merge!r} not one of {MERGE_MODES}")
        if rounds < 1:
            raise ContractError("rounds must be >= 1")
        self.clients = {c.client_id: c for c in clients}
        if len(self.clients) != len(clients):
            raise ContractError("duplicate client ids")
        self.state = FederationState(weights=initial_weights, rounds=rounds)
        self.epochs, self.lr, self.batch_size = epochs, lr, batch_size
        self.fraction, self.min_clients = fraction, min_clients
        self.merge, self.seed = merge, seed
        self.eval_fn, self.on_round_end = eval_fn, on_round_end

    def _run_round(self, t: int) -> list[Update]:
        selected = select_clients(self.clients, self.fraction, self.seed + t, self.min_clients)
        wire_weights = deserialize_weights(serialize_weights(self.state.weights))
        start = RoundStart(t, self.epochs, self.lr, self.batch_size, 0, wire_weights)
        updates = []
        for client_id in selected:
            try:
                update = self.clients[client_id].train_round(start)
            except Exception:
                log.warning("client %s failed round %d", client_id, t, exc_info=True)
                continue
            update.weights = deserialize_weights(serialize_weights(update.weights))
            updates.append(update)
        return updates

    def run(self) -> FederationState:
        state = self.state
        for t in range(1, state.rounds + 1):
            updates = self._run_round(t)
            if not updates:
                log.warning("round %d produced no updates, retrying once", t)
                updates = self._run_round(t)
            if not updates:
                raise AggregationError(f"round {t}: no client produced an update")
            w_round = aggregate_round(updates)
            if self.merge == "incremental":
                state.weights = incremental_merge(state.weights, w_round, t)
            else:
                state.weights = w_round
            state.t = t
            state.last_updates = {u.client_id: u for u in updates}
            result = _build_result(t, updates, state.weights, self.eval_fn)
            state.history.append(result)
            for client in self.clients.values():
                client.accept_global(result)
            if self.on_round_end is not None:
                self.on_round_end(result)
        state.done = True
        return state


class _ClientHandle:
    def __init__(self, client_id: str, n_k: int, sock, fh):
        self.client_id = client_id
        self.n_k = n_k
        self.sock = sock
        self.fh = fh
        self.outbox: queue.Queue = queue.Queue()
        self.alive = True


class CombinerServer:
    """Socket federation server plus a small HTTP status endpoint.

    One thread per connected client moves messages between its socket
    and the round loop. Clients that miss the round deadline are dropped
    from the round and the average renormalizes over the updates that
    did arrive; their stale updates are discarded by round number.
    """

    def __init__(
        self,
        initial_weights: ModelWeights,
        rounds: int,
        host: str = "127.0.0.1",
        port: int = 7177,
        epochs: int = 1,
        lr: float = 0.001,
        batch_size: int = 32,
        fraction: float = 1.0,
        min_clients: int = 1,
        deadline_ms: int = 0,
        merge: str = "incremental",
        seed: int = 0,
        metrics_path: str | None = None,
        eval_fn=None,
        http_port: int | None = None,
        join_timeout: float = 120.0,
    ):
        if merge not in MERGE_MODES:
            raise ContractError(f"merge mode {merge!r} not one of {MERGE_MODES}")
        self.host, self.port = host, port
        self.http_port = http_port if http_port is not None else (port + 1 if port else 0)
        self.state = FederationState(weights=initial_weights, rounds=rounds)
        self.epochs, self.lr, self.batch_size = epochs, lr, batch_size
        self.fraction, self.min_clients = fraction, min_clients
        self.deadline_ms, self.merge, self.seed = deadline_ms, merge, seed
        self.metrics_path, self.eval_fn = metrics_path, eval_fn
        self.join_timeout = join_timeout
        self._clients: dict[str, _ClientHandle] = {}
        self._lock = threading.Lock()
        self._joined = threading.Condition(self._lock)
        self._updates: queue.Queue = queue.Queue()
        self._listener: socket.socket | None = None
        self._http: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []
        self._closing = False

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        self._listener = socket.create_server((self.host, self.port))
        self.port = self._listener.getsockname()[1]
        accept = threading.Thread(target=self._accept_loop, name="combiner-accept", daemon=True)
        accept.start()
        self._threads.append(accept)
        self._http = ThreadingHTTPServer((self.host, self.http_port), self._handler_class())
        self.http_port = self._http.server_address[1]
        http_thread = threading.Thread(target=self._http.serve_forever, name="combiner-http", daemon=True)
        http_thread.start()
        self._threads.append(http_thread)
        log.info("combiner listening on %s:%d (status on :%d)", self.host, self.port, self.http_port)

    def shutdown(self) -> None:
        self._closing = True
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            handles = list(self._clients.values())
        for handle in handles:
            handle.outbox.put(("close", None))
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()

    # -- connection handling ----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, conn: socket.socket) -> None:
        fh = conn.makefile("rwb")
        try:
            msg = recv_message(fh)
        except (Disconnected, ProtocolError):
            conn.close()
            return
        if not isinstance(msg, Join):
            try:
                send_message(fh, Error(ERR_BAD_MESSAGE, "expected JOIN"))
            except OSError:
                pass
            conn.close()
            return
        handle = _ClientHandle(msg.client_id, msg.n_k, conn, fh)
        with self._joined:
            old = self._clients.get(msg.client_id)
            if old is not None:
                old.alive = False
                old.outbox.put(("close", None))
            self._clients[msg.client_id] = handle
            self._joined.notify_all()
        log.info("client %s joined with %d pairs", msg.client_id, msg.n_k)
        try:
            self._pump(handle)
        finally:
            handle.alive = False
            conn.close()
            with self._lock:
                if self._clients.get(msg.client_id) is handle:
                    del self._clients[msg.client_id]

    def _pump(self, handle: _ClientHandle) -> None:
        while handle.alive and not self._closing:
            kind, payload = handle.outbox.get()
            if kind == "close":
                return
            try:
                send_message(handle.fh, payload)
            except OSError:
                return
            if kind != "round_start":
                continue
            deadline = self.deadline_ms / 1000.0 if self.deadline_ms else None
            handle.sock.settimeout(deadline)
            try:
                while True:
                    reply = recv_message(handle.fh)
                    if isinstance(reply, Update):
                        handle.n_k = reply.n_k
                        self._updates.put(reply)
                        break
                    if not isinstance(reply, Heartbeat):
                        raise ProtocolError(f"expected UPDATE, got {type(reply).__name__}")
            except (socket.timeout, TimeoutError):
                log.warning("client %s missed the round deadline, dropping", handle.client_id)
                return
            except (Disconnected, ProtocolError, OSError) as exc:
                log.warning("client %s: %s", handle.client_id, exc)
                return
            finally:
                handle.sock.settimeout(None)

    # -- round loop ---------------------------------------------------------------

    def _wait_for_clients(self) -> None:
        deadline = time.monotonic() + self.join_timeout
        with self._joined:
            while len(self._clients) < self.min_clients:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ContractError(
                        f"only {len(self._clients)} of {self.min_clients} clients joined "
                        f"within {self.join_timeout:.0f}s"
                    )
                self._joined.wait(timeout=remaining)

    def _live_handles(self) -> dict[str, _ClientHandle]:
        with self._lock:
            return {cid: h for cid, h in self._clients.items() if h.alive}

    def _collect(self, t: int, expected: dict[str, _ClientHandle]) -> list[Update]:
        updates: list[Update] = []
        deadline = (
            time.monotonic() + self.deadline_ms / 1000.0 + 1.0 if self.deadline_ms else None
        )
        while expected:
            if deadline is not None and time.monotonic() >= deadline:
                break
            try:
                # short poll so a client dying mid-round cannot stall the
                # federation forever when no deadline is configured
                update = self._updates.get(timeout=0.2)
            except queue.Empty:
                for client_id in [c for c, h in expected.items() if not h.alive]:
                    log.warning(
                        "round %d: client %s disconnected before reporting", t, client_id
                    )
                    del expected[client_id]
                continue
            if update.t != t:
                log.warning("dropping stale update for round %d from %s", update.t, update.client_id)
                continue
            if update.client_id not in expected:
                continue
            del expected[update.client_id]
            updates.append(update)
        return updates

    def _run_round(self, t: int) -> list[Update]:
        live = self._live_handles()
        if not live:
            return []
        selected = select_clients(live, self.fraction, self.seed + t, self.min_clients)
        wire = deserialize_weights(serialize_weights(self.state.weights))
        start = RoundStart(t, self.epochs, self.lr, self.batch_size, self.deadline_ms, wire)
        sent: dict[str, _ClientHandle] = {}
        for client_id in selected:
            handle = live.get(client_id)
            if handle is not None and handle.alive:
                handle.outbox.put(("round_start", start))
                sent[client_id] = handle
        return self._collect(t, sent)

    def _broadcast(self, msg) -> None:
        for handle in self._live_handles().values():
            handle.outbox.put(("send", msg))

    def _drain_outboxes(self, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(h.outbox.empty() for h in self._live_handles().values()):
                time.sleep(0.05)
                return
            time.sleep(0.02)

    def run(self) -> FederationState:
        state = self.state
        self._wait_for_clients()
        metrics_fh = open(self.metrics_path, "a") if self.metrics_path else None
        try:
            for t in range(1, state.rounds + 1):
                updates = self._run_round(t)
                if not updates:
                    log.warning("round %d produced no updates, retrying once", t)
                    self._wait_for_clients()
                    updates = self._run_round(t)
                if not updates:
                    raise AggregationError(f"round {t}: no client produced an update")
                w_round = aggregate_round(updates)
                if self.merge == "incremental":
                    state.weights = incremental_merge(state.weights, w_round, t)
                else:
                    state.weights = w_round
                state.t = t
                state.last_updates = {u.client_id: u for u in updates}
                result = _build_result(t, updates, state.weights, self.eval_fn)
                state.history.append(result)
                if metrics_fh is not None:
                    metrics_fh.write(metrics_row(result) + "\n")
                    metrics_fh.flush()
                log.info("round %s", metrics_row(result).replace("\t", " "))
                self._broadcast(result)
            state.done = True
            self._broadcast(Error(ERR_FEDERATION_COMPLETE, "federation complete"))
            self._drain_outboxes(timeout=2.0)
            return state
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
            self.shutdown()

    # -- status endpoint ----------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            live = [cid for cid, h in self._clients.items() if h.alive]
            n_k = {cid: h.n_k for cid, h in self._clients.items() if h.alive}
        last = self.state.history[-1] if self.state.history else None
        return {
            "t": self.state.t,
            "rounds": self.state.rounds,
            "done": self.state.done,
            "clients_live": sorted(live),
            "n_k": n_k,
            "last_round": None if last is None else {
                "t": last.t,
                "n_received": last.n_received,
                "mean_train_acc": last.mean_train_acc,
                "mean_val_acc": last.mean_val_acc,
                "mean_train_loss": last.mean_train_loss,
                "mean_val_loss": last.mean_val_loss,
                "global_acc": last.global_acc,
                "global_loss": last.global_loss,
            },
        }

    def _handler_class(self):
        server = self

        class StatusHandler(BaseHTTPRequestHandler):
            def do_GET(self):
                if self.path.rstrip("/") != "/federation/status":
                    self.send_error(404)
                    return
                body = json.dumps(server.status()).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, fmt, *args):
                log.debug("status: " + fmt, *args)

        return StatusHandler
