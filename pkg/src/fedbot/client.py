"""Client-side training: local mini-batch updates on a private silo.

A round starts from the combiner's current global weights, runs the
local update (per epoch, per shuffled mini-batch, one optimizer step
against the batch loss), and reports the new weights together with the
pair count n_k that weighs this client during aggregation.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import Pair, encode_pairs
from .errors import ConfigError, Disconnected, NumericError, ProtocolError
from .model import TransformerConfig, forward, shift_targets
from .protocol import (
    ERR_FEDERATION_COMPLETE,
    Error,
    Heartbeat,
    Join,
    RoundResult,
    RoundStart,
    Update,
    recv_message,
    send_message,
)
from .tensor import GradGraph
from .tokenizer import Vocabulary, normalize
from .weights import ModelWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    lr: float = 0.001
    batch_size: int = 32
    optimizer: str = "sgd"
    shuffle_seed: int = 0
    use_dropout: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def _batch_stats(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    predicted = np.argmax(logits, axis=-1)
    correct = int(np.count_nonzero((predicted == targets) & mask))
    return correct, int(np.count_nonzero(mask))


def client_update(
    weights: ModelWeights,
    config: TransformerConfig,
    src: np.ndarray,
    tgt: np.ndarray,
    train_cfg: LocalTrainConfig,
    on_epoch=None,
) -> tuple[ModelWeights, float, float]:
    """Run the local update and return (weights, final-epoch loss, accuracy).

    The shuffle generator is created once and spans all epochs, so the
    whole trajectory is a pure function of (weights, data, train_cfg).
    The final short batch is trained on, not dropped.
    """
    n = src.shape[0]
    if n == 0:
        raise ConfigError("client_update needs at least one training pair")
    rng = np.random.default_rng(train_cfg.shuffle_seed)
    adam_state = ops.AdamState() if train_cfg.optimizer == "adam" else None
    epoch_loss = epoch_acc = 0.0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = tokens = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch_src, batch_tgt = src[idx], tgt[idx]
            targets, mask = shift_targets(batch_tgt)
            dropout_seed = int(rng.integers(2**63)) if train_cfg.use_dropout else 0
            with GradGraph() as graph:
                logits = forward(
                    weights, config, batch_src, batch_tgt,
                    train_mode=train_cfg.use_dropout, seed=dropout_seed,
                )
                loss = ops.cross_entropy(logits, targets, mask)
                grads = graph.backward(loss)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at epoch {epoch} offset {start}"
                )
            n_included = int(np.count_nonzero(mask))
            loss_sum += loss_value * n_included
            batch_correct, batch_tokens = _batch_stats(logits.data, targets, mask)
            correct += batch_correct
            tokens += batch_tokens
            if adam_state is not None:
                adam_state, weights = ops.adam_step(
                    adam_state, weights, grads, train_cfg.lr
                )
            else:
                weights = ops.sgd_step(weights, grads, train_cfg.lr)
        epoch_loss = loss_sum / max(tokens, 1)
        epoch_acc = 100.0 * correct / max(tokens, 1)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, epoch_acc)
    return weights, epoch_loss, epoch_acc


def local_evaluate(
    weights: ModelWeights,
    config: TransformerConfig,
    src: np.ndarray,
    tgt: np.ndarray,
    batch_size: int = 64,
    forward_fn=None,
) -> tuple[float, float]:
    """Teacher-forced loss and accuracy over a dataset.

    Accuracy is the percentage of non-padding target positions whose
    argmax prediction matches, always within [0, 100]. An empty dataset
    evaluates to (0.0, 0.0).
    """
    n = src.shape[0]
    if n == 0:
        return 0.0, 0.0
    if forward_fn is None:
        forward_fn = lambda w, c, s, t: forward(w, c, s, t, train_mode=False)
    loss_sum = 0.0
    correct = tokens = 0
    for start in range(0, n, batch_size):
        batch_src, batch_tgt = src[start : start + batch_size], tgt[start : start + batch_size]
        targets, mask = shift_targets(batch_tgt)
        logits = forward_fn(weights, config, batch_src, batch_tgt)
        loss = ops.cross_entropy(logits, targets, mask)
        n_included = int(np.count_nonzero(mask))
        loss_sum += loss.item() * n_included
        batch_correct, batch_tokens = _batch_stats(logits.data, targets, mask)
        correct += batch_correct
        tokens += batch_tokens
    return loss_sum / max(tokens, 1), 100.0 * correct / max(tokens, 1)


class FederatedClient:
    """One participant: private pairs, a vocabulary, and round handling.

    Pairs added through add_local_pair while a round is running are
    absorbed at the next round start, so n_k reported with an update
    always equals the number of pairs actually trained on.
    """

    def __init__(
        self,
        client_id: str,
        train_pairs: list,
        val_pairs: list,
        vocab: Vocabulary,
        config: TransformerConfig,
        optimizer: str = "sgd",
        use_dropout: bool = False,
        base_seed: int = 0,
    ):
        if not train_pairs:
            raise ConfigError(f"client {client_id!r} has no training pairs")
        self.client_id = client_id
        self.vocab = vocab
        self.config = config
        self.optimizer = optimizer
        self.use_dropout = use_dropout
        self.base_seed = base_seed
        self._lock = threading.Lock()
        self._train_pairs = list(train_pairs)
        self._pending: list[Pair] = []
        self._val = encode_pairs(vocab, val_pairs, config.max_len) if val_pairs else None
        self.global_weights: ModelWeights | None = None
        self.last_round = 0
        self.on_global = None

    @property
    def n_k(self) -> int:
        with self._lock:
            return len(self._train_pairs) + len(self._pending)

    def add_local_pair(self, query: str, response: str) -> int:
        query, response = normalize(query), normalize(response)
        if not query or not response:
            raise ConfigError("feedback pair must have non-empty query and response")
        with self._lock:
            self._pending.append(Pair(query, response, ""))
            return len(self._train_pairs) + len(self._pending)

    def _snapshot(self) -> list:
        with self._lock:
            self._train_pairs.extend(self._pending)
            self._pending.clear()
            return list(self._train_pairs)

    def train_round(self, msg: RoundStart) -> Update:
        if "embed.src" not in msg.weights:
            raise ProtocolError("global model is missing its embedding table")
        embed = msg.weights["embed.src"].shape
        expected = (self.config.vocab_size, self.config.d_model)
        if embed != expected:
            raise ConfigError(
                f"global model is shaped {embed} but this client is configured "
                f"for {expected}; start the client with the combiner's model flags"
            )
        pairs = self._snapshot()
        src, tgt = encode_pairs(self.vocab, pairs, self.config.max_len)
        train_cfg = LocalTrainConfig(
            epochs=msg.epochs,
            lr=msg.lr,
            batch_size=msg.batch_size,
            optimizer=self.optimizer,
            shuffle_seed=self.base_seed + msg.t,
            use_dropout=self.use_dropout,
        )
        new_weights, train_loss, train_acc = client_update(
            msg.weights, self.config, src, tgt, train_cfg
        )
        if self._val is not None:
            val_loss, val_acc = local_evaluate(new_weights, self.config, *self._val)
        else:
            val_loss, val_acc = 0.0, 0.0
        self.last_round = msg.t
        return Update(
            self.client_id, msg.t, len(pairs),
            train_loss, train_acc, val_loss, val_acc, new_weights,
        )

    def accept_global(self, result: RoundResult) -> None:
        self.global_weights = result.weights
        if self.on_global is not None:
            self.on_global(result)


def run_client(
    host: str,
    port: int,
    client: FederatedClient,
    stop_after_rounds: int | None = None,
    initial_backoff: float = 0.5,
    max_backoff: float = 30.0,
    max_attempts: int | None = None,
) -> int:
    """Socket loop: join, train on request, reconnect with capped backoff.

    Returns the number of rounds completed. A FEDERATION_COMPLETE error
    frame or reaching stop_after_rounds ends the loop cleanly.
    """
    rounds_done = 0
    backoff = initial_backoff
    attempts = 0
    while True:
        try:
            with socket.create_connection((host, port)) as sock:
                fh = sock.makefile("rwb")
                send_message(fh, Join(client.client_id, client.n_k))
                attempts = 0
                backoff = initial_backoff
                while True:
                    msg = recv_message(fh)
                    if isinstance(msg, RoundStart):
                        send_message(fh, client.train_round(msg))
                        rounds_done += 1
                    elif isinstance(msg, RoundResult):
                        client.accept_global(msg)
                        if stop_after_rounds is not None and rounds_done >= stop_after_rounds:
                            return rounds_done
                    elif isinstance(msg, Heartbeat):
                        send_message(fh, Heartbeat())
                    elif isinstance(msg, Error):
                        if msg.code == ERR_FEDERATION_COMPLETE:
                            return rounds_done
                        raise ProtocolError(f"server error {msg.code}: {msg.text}")
                    else:
                        raise ProtocolError(f"unexpected {type(msg).__name__} from server")
        except Disconnected:
            if stop_after_rounds is not None and rounds_done >= stop_after_rounds:
                return rounds_done
            log.info("%s: disconnected, retrying in %.1fs", client.client_id, backoff)
        except (ConnectionError, OSError) as exc:
            log.info("%s: connect failed (%s), retrying in %.1fs", client.client_id, exc, backoff)
        attempts += 1
        if max_attempts is not None and attempts >= max_attempts:
            raise Disconnected(f"gave up after {attempts} attempts")
        time.sleep(backoff)
        backoff = min(backoff * 2.0, max_backoff)
