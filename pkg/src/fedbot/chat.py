"""HTTP chat service over the current global model.

Routes: POST /chat answers a message with greedy decoding, POST
/feedback records thumbs up/down and optionally a corrected response
that becomes a new local training pair, GET /metrics returns round
history, GET /federation/status proxies the combiner's status endpoint
with a degraded local fallback.

Every chat and feedback event is appended to a JSONL journal after
normalization, so raw handles and URLs never reach disk, and a restart
replays the journal to restore conversation state and corrected pairs.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.request
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .client import FederatedClient
from .errors import ConfigError
from .model import TransformerConfig, greedy_decode
from .protocol import RoundResult
from .tokenizer import Vocabulary, decode, encode, normalize
from .weights import ModelWeights

log = logging.getLogger(__name__)


class BadRequest(Exception):
    pass


class NotFound(Exception):
    pass


class NotReady(Exception):
    pass


class ChatService:
    """Model state, conversation log, and the feedback loop."""

    def __init__(
        self,
        config: TransformerConfig,
        vocab: Vocabulary,
        weights: ModelWeights | None = None,
        feedback_client: FederatedClient | None = None,
        journal_path: str | None = None,
        combiner_status_url: str | None = None,
    ):
        if config.vocab_size != len(vocab):
            raise ConfigError(
                f"model emits {config.vocab_size} token ids but the vocabulary "
                f"holds {len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        self.feedback_client = feedback_client
        self.journal_path = journal_path
        self.combiner_status_url = combiner_status_url
        self._lock = threading.Lock()
        self._weights = weights
        self._round = 0
        self._messages: dict[str, dict] = {}
        self._history: list[dict] = []
        if journal_path and os.path.exists(journal_path):
            self._replay_journal(journal_path)

    # -- model state -----------------------------------------------------------

    def set_weights(self, weights: ModelWeights, round_t: int) -> None:
        """Swap in a new snapshot; in-flight requests keep the old one."""
        with self._lock:
            self._weights = weights
            self._round = round_t

    def on_round_result(self, result: RoundResult) -> None:
        self.set_weights(result.weights, result.t)
        row = {
            "t": result.t,
            "n_received": result.n_received,
            "mean_train_acc": result.mean_train_acc,
            "mean_val_acc": result.mean_val_acc,
            "mean_train_loss": result.mean_train_loss,
            "mean_val_loss": result.mean_val_loss,
            "global_acc": result.global_acc,
            "global_loss": result.global_loss,
        }
        with self._lock:
            self._history.append(row)

    # -- journal ---------------------------------------------------------------

    def _append_journal(self, record: dict) -> None:
        if not self.journal_path:
            return
        line = json.dumps(record, separators=(",", ":"))
        with self._lock:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _replay_journal(self, path: str) -> None:
        replayed = 0
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("skipping corrupt journal line")
                    continue
                if record.get("type") == "chat":
                    self._messages[record["id"]] = {
                        "query": record["query"],
                        "reply": record["reply"],
                        "feedback": None,
                    }
                elif record.get("type") == "feedback":
                    entry = self._messages.get(record["id"])
                    if entry is None:
                        continue
                    entry["feedback"] = record
                    corrected = record.get("corrected_response")
                    if corrected and self.feedback_client is not None:
                        self.feedback_client.add_local_pair(entry["query"], corrected)
                replayed += 1
        log.info("replayed %d journal records from %s", replayed, path)

    # -- operations --------------------------------------------------------------

    def chat(self, message: str) -> dict:
        if not isinstance(message, str) or not normalize(message):
            raise BadRequest("message must be a non-empty string")
        with self._lock:
            weights, round_t = self._weights, self._round
        if weights is None:
            raise NotReady("federation has not produced a model yet")
        query = normalize(message)
        src = encode(self.vocab, query, self.config.max_len)
        out = greedy_decode(weights, self.config, src)
        reply = decode(self.vocab, out.ids)
        message_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._messages[message_id] = {"query": query, "reply": reply, "feedback": None}
        self._append_journal(
            {"type": "chat", "id": message_id, "query": query, "reply": reply,
             "round": round_t, "ts": time.time()}
        )
        return {"message_id": message_id, "reply": reply, "round": round_t}

    def feedback(self, message_id: str, correct: bool, corrected_response: str | None = None) -> dict:
        with self._lock:
            entry = self._messages.get(message_id)
        if entry is None:
            raise NotFound(f"unknown message_id {message_id!r}")
        record = {
            "type": "feedback", "id": message_id, "correct": bool(correct),
            "corrected_response": normalize(corrected_response) if corrected_response else None,
            "ts": time.time(),
        }
        n_k = None
        if record["corrected_response"] and self.feedback_client is not None:
            n_k = self.feedback_client.add_local_pair(
                entry["query"], record["corrected_response"]
            )
        with self._lock:
            entry["feedback"] = record
        self._append_journal(record)
        return {"message_id": message_id, "recorded": True, "n_k": n_k}

    def metrics(self) -> list[dict]:
        with self._lock:
            return list(self._history)

    def federation_status(self) -> dict:
        if self.combiner_status_url:
            try:
                with urllib.request.urlopen(self.combiner_status_url, timeout=2.0) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except (OSError, ValueError) as exc:
                log.warning("combiner status unreachable: %s", exc)
        with self._lock:
            return {
                "degraded": True,
                "t": self._round,
                "rounds": None,
                "done": False,
                "messages": len(self._messages),
                "n_k": (
                    {self.feedback_client.client_id: self.feedback_client.n_k}
                    if self.feedback_client is not None else {}
                ),
            }


# -- HTTP layer -----------------------------------------------------------------


def _handler_class(service: ChatService):
    class ChatHandler(BaseHTTPRequestHandler):
        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self._cors()
            self.end_headers()
            self.wfile.write(body)

        def _cors(self) -> None:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not raw:
                raise BadRequest("empty request body")
            try:
                parsed = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise BadRequest(f"body is not valid JSON: {exc}")
            if not isinstance(parsed, dict):
                raise BadRequest("body must be a JSON object")
            return parsed

        def do_OPTIONS(self):
            self.send_response(204)
            self._cors()
            self.end_headers()

        def do_GET(self):
            path = self.path.split("?", 1)[0].rstrip("/")
            if path == "/metrics":
                self._reply(200, {"rows": service.metrics()})
            elif path == "/federation/status":
                self._reply(200, service.federation_status())
            elif path == "/healthz" or path == "":
                self._reply(200, {"ok": True})
            else:
                self._reply(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            path = self.path.split("?", 1)[0].rstrip("/")
            try:
                body = self._body()
                if path == "/chat":
                    self._reply(200, service.chat(body.get("message", "")))
                elif path == "/feedback":
                    if "message_id" not in body:
                        raise BadRequest("message_id is required")
                    self._reply(200, service.feedback(
                        str(body["message_id"]),
                        bool(body.get("correct", False)),
                        body.get("corrected_response"),
                    ))
                else:
                    self._reply(404, {"error": f"no route {self.path}"})
            except BadRequest as exc:
                self._reply(400, {"error": str(exc)})
            except NotFound as exc:
                self._reply(404, {"error": str(exc)})
            except NotReady as exc:
                self._reply(503, {"error": str(exc)})
            except Exception as exc:
                log.exception("unhandled error in %s", self.path)
                self._reply(500, {"error": f"internal error: {exc}"})

        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

    return ChatHandler


def serve_chat(service: ChatService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Start the HTTP server on a daemon thread and return it."""
    httpd = ThreadingHTTPServer((host, port), _handler_class(service))
    thread = threading.Thread(target=httpd.serve_forever, name="chat-http", daemon=True)
    thread.start()
    log.info("chat service on %s:%d", host, httpd.server_address[1])
    return httpd
