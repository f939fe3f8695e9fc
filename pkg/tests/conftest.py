"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import csv
import random

import numpy as np
import pytest

from fedbot import ops
from fedbot.data import Pair
from fedbot.model import TransformerConfig, forward, shift_targets
from fedbot.tensor import GradGraph, Tensor
from fedbot.tokenizer import Vocabulary
from fedbot.weights import ModelWeights


def tiny_config(vocab_size: int = 20, **overrides) -> TransformerConfig:
    base = dict(
        vocab_size=vocab_size, d_model=16, n_heads=2, n_layers=1,
        d_ff=32, max_len=10, dropout=0.2, attention_dropout=0.2,
        activation_dropout=0.2,
    )
    base.update(overrides)
    return TransformerConfig(**base)


def word_vocab(n_words: int) -> Vocabulary:
    return Vocabulary.from_pieces([f"w{i}" for i in range(n_words)])


def make_copy_pairs(n_pairs: int, words: list[str], seed: int,
                    min_len: int = 3, max_len: int = 7) -> list[Pair]:
    """Sentences whose response equals the query."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        k = int(rng.integers(min_len, max_len))
        text = " ".join(rng.choice(words, size=k))
        pairs.append(Pair(text, text, ""))
    return pairs


def sentence_pool(words: list[str], pool_size: int, seed: int,
                  min_len: int = 3, max_len: int = 7) -> list[str]:
    rng = np.random.default_rng(seed)
    return [
        " ".join(rng.choice(words, size=int(rng.integers(min_len, max_len))))
        for _ in range(pool_size)
    ]


def teacher_forced_loss(weights: ModelWeights, config: TransformerConfig,
                        src: np.ndarray, tgt: np.ndarray) -> float:
    targets, mask = shift_targets(tgt)
    return ops.cross_entropy(forward(weights, config, src, tgt), targets, mask).item()


def analytic_grads(weights: ModelWeights, config: TransformerConfig,
                   src: np.ndarray, tgt: np.ndarray) -> dict:
    targets, mask = shift_targets(tgt)
    with GradGraph() as graph:
        loss = ops.cross_entropy(forward(weights, config, src, tgt), targets, mask)
        return graph.backward(loss)


def fd_grad_at(weights: ModelWeights, config: TransformerConfig,
               src: np.ndarray, tgt: np.ndarray,
               name: str, index: tuple, step: float) -> float:
    """Central-difference derivative of the loss at one weight coordinate."""

    def shifted(delta: float) -> ModelWeights:
        items = []
        for key in weights.names():
            arr = weights[key].data
            if key == name:
                arr = arr.copy()
                arr[index] += delta
            items.append((key, Tensor(arr, dtype=arr.dtype, name=key)))
        return ModelWeights(items)

    up = teacher_forced_loss(shifted(step), config, src, tgt)
    down = teacher_forced_loss(shifted(-step), config, src, tgt)
    return (up - down) / (2.0 * step)


CSV_COLUMNS = [
    "tweet_id", "author_id", "inbound", "created_at", "text",
    "response_tweet_id", "in_response_to_tweet_id",
]

SUPPORT_QUERIES = [
    "my order is late",
    "cannot log into my account",
    "the app keeps crashing",
    "refund has not arrived",
    "how do i change my address",
    "wifi stopped working",
    "my card was declined",
    "package arrived damaged",
]

SUPPORT_REPLIES = [
    "sorry to hear that we will check your order",
    "please reset your password and try again",
    "could you reinstall the app and retry",
    "refunds take three to five days",
    "you can update the address in settings",
    "try restarting the router first",
    "please verify your billing details",
    "we will send a replacement right away",
]


def write_support_csv(path, n_pairs: int = 40, seed: int = 7, brands=("AcmeHelp", "ZetaCare")):
    """Synthetic support-tweet CSV in the expected seven-column schema."""
    rng = random.Random(seed)
    rows = []
    tid = 1
    for i in range(n_pairs):
        k = rng.randrange(len(SUPPORT_QUERIES))
        q_id, r_id = str(tid), str(tid + 1)
        tid += 2
        brand = brands[i % len(brands)]
        rows.append({
            "tweet_id": q_id, "author_id": f"user{i}", "inbound": "True",
            "created_at": "Tue Oct 31 22:10 2017",
            "text": f"{SUPPORT_QUERIES[k]} @{brand}",
            "response_tweet_id": r_id, "in_response_to_tweet_id": "",
        })
        rows.append({
            "tweet_id": r_id, "author_id": brand, "inbound": "False",
            "created_at": "Tue Oct 31 22:11 2017",
            "text": f"@user{i} {SUPPORT_REPLIES[k]} https://help.example.com/a{i}",
            "response_tweet_id": "", "in_response_to_tweet_id": q_id,
        })
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


@pytest.fixture
def support_csv(tmp_path):
    return write_support_csv(tmp_path / "support.csv")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Stdout of passing tests is captured, so re-emit the one-line
    # acceptance verdicts where a plain ``pytest -v`` run shows them.
    lines = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if not report.nodeid.startswith("tests/test_acceptance.py"):
                continue
            for line in report.capstdout.splitlines():
                if line.startswith(("PASS", "FAIL")):
                    lines.append(line)
    if lines:
        terminalreporter.section("acceptance checklist")
        for line in lines:
            terminalreporter.write_line(line)
