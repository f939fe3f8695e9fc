"""Conversation-pair extraction, cleaning, and per-client silo layout.

Input is the customer-support tweet CSV schema (tweet_id, author_id,
inbound, created_at, text, response_tweet_id, in_response_to_tweet_id).
A training pair is an inbound customer message plus the first resolvable
company reply. Text is normalized and anonymized before it is ever
written to disk, so silos never contain raw handles or URLs.
"""

from __future__ import annotations

import csv
import logging
import os
import random
from dataclasses import dataclass

import numpy as np

from .errors import DataError, SchemaError
from .kvconfig import load_kv, save_kv
from .tokenizer import Vocabulary, encode, normalize

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "tweet_id",
    "author_id",
    "inbound",
    "created_at",
    "text",
    "response_tweet_id",
    "in_response_to_tweet_id",
)


@dataclass(frozen=True)
class Pair:
    query: str
    response: str
    brand: str


@dataclass
class LoadResult:
    pairs: list
    skipped: int


def _is_true(value: str) -> bool:
    return value.strip().lower() == "true"


def load_pairs_csv(path: str, limit: int | None = None) -> LoadResult:
    """Extract (query, response, brand) pairs from the support-tweet CSV.

    Pairs where the reply chain cannot be resolved, or where either side
    normalizes to an empty string, are counted in `skipped`.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, no header row")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        rows = {}
        skipped = 0
        for row in reader:
            tweet_id = (row.get("tweet_id") or "").strip()
            if not tweet_id or row.get("text") is None:
                skipped += 1
                continue
            rows[tweet_id] = row

    pairs: list[Pair] = []
    for tweet_id, row in rows.items():
        if not _is_true(row["inbound"]):
            continue
        reply = _first_company_reply(row, rows)
        if reply is None:
            skipped += 1
            continue
        query = normalize(row["text"])
        response = normalize(reply["text"])
        if not query or not response:
            skipped += 1
            continue
        pairs.append(Pair(query, response, reply["author_id"].strip()))
        if limit is not None and len(pairs) >= limit:
            break
    return LoadResult(pairs, skipped)


def _first_company_reply(row: dict, rows: dict) -> dict | None:
    ids = (row.get("response_tweet_id") or "").split(",")
    for reply_id in ids:
        reply = rows.get(reply_id.strip())
        if reply is not None and not _is_true(reply["inbound"]):
            return reply
    return None


# -- TSV silo files -----------------------------------------------------------


def write_pairs_tsv(path: str, pairs: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(f"{pair.query}\t{pair.response}\n")


def read_pairs_tsv(path: str, brand: str = "") -> list:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
            pairs.append(Pair(cells[0], cells[1], brand))
    return pairs


# -- splitting and sharding ---------------------------------------------------


def split_train_val(pairs: list, seed: int, val_fraction: float = 0.2) -> tuple[list, list]:
    """Shuffle with the given seed, hold out the trailing fraction."""
    if not 0.0 <= val_fraction < 1.0:
        raise DataError(f"val_fraction {val_fraction} out of range [0, 1)")
    shuffled = list(pairs)
    random.Random(seed).shuffle(shuffled)
    n_val = int(round(val_fraction * len(shuffled)))
    n_val = min(n_val, len(shuffled) - 1) if shuffled else 0
    if n_val == 0 and val_fraction > 0.0:
        log.warning("split of %d pairs leaves an empty validation set", len(shuffled))
        return shuffled, []
    return shuffled[:-n_val], shuffled[-n_val:]


def partition_pairs(pairs: list, n_clients: int, seed: int) -> list[list]:
    """Seeded shuffle, then contiguous shards with sizes differing by <= 1."""
    if n_clients < 1:
        raise DataError("n_clients must be >= 1")
    if len(pairs) < n_clients:
        raise DataError(f"cannot split {len(pairs)} pairs across {n_clients} clients")
    shuffled = list(pairs)
    random.Random(seed).shuffle(shuffled)
    base, extra = divmod(len(shuffled), n_clients)
    shards = []
    start = 0
    for i in range(n_clients):
        size = base + (1 if i < extra else 0)
        shards.append(shuffled[start : start + size])
        start += size
    return shards


def partition_by_brand(pairs: list) -> list[tuple[str, list]]:
    """One shard per brand, ordered by brand name."""
    by_brand: dict[str, list] = {}
    for pair in pairs:
        by_brand.setdefault(pair.brand, []).append(pair)
    return [(brand, by_brand[brand]) for brand in sorted(by_brand)]


def client_dir_name(index: int) -> str:
    return f"client_{index:02d}"


def build_silos(
    out_dir: str,
    shards: list[list],
    vocab: Vocabulary,
    seed: int,
    val_fraction: float = 0.2,
    brands: list[str] | None = None,
) -> list[str]:
    """Write one directory per shard: train.tsv, val.tsv, vocab.txt, manifest.

    Every silo receives a copy of the shared vocabulary so all clients
    tokenize identically, which weight aggregation depends on.
    """
    dirs = []
    for i, shard in enumerate(shards):
        if not shard:
            raise DataError(f"shard {i} is empty")
        silo = os.path.join(out_dir, client_dir_name(i))
        os.makedirs(silo, exist_ok=True)
        train, val = split_train_val(shard, seed=seed + i, val_fraction=val_fraction)
        write_pairs_tsv(os.path.join(silo, "train.tsv"), train)
        write_pairs_tsv(os.path.join(silo, "val.tsv"), val)
        vocab.save(os.path.join(silo, "vocab.txt"))
        manifest = {
            "client_id": client_dir_name(i),
            "n_train": len(train),
            "n_val": len(val),
            "seed": seed + i,
        }
        if brands is not None:
            manifest["brand"] = brands[i]
        save_kv(os.path.join(silo, "manifest.txt"), manifest)
        dirs.append(silo)
    return dirs


@dataclass
class Silo:
    client_id: str
    train: list
    val: list
    vocab: Vocabulary
    manifest: dict


def load_silo(path: str) -> Silo:
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise DataError(f"{path}: not a client silo (missing manifest.txt)")
    manifest = load_kv(manifest_path)
    brand = manifest.get("brand", "")
    train = read_pairs_tsv(os.path.join(path, "train.tsv"), brand)
    val_path = os.path.join(path, "val.tsv")
    val = read_pairs_tsv(val_path, brand) if os.path.exists(val_path) else []
    vocab = Vocabulary.load(os.path.join(path, "vocab.txt"))
    if not train:
        raise DataError(f"{path}: train.tsv holds no pairs")
    return Silo(manifest.get("client_id", os.path.basename(path)), train, val, vocab, manifest)


def encode_pairs(
    vocab: Vocabulary, pairs: list, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Token-id matrices [n, max_len] for queries and responses."""
    src = np.stack([encode(vocab, p.query, max_len).ids for p in pairs])
    tgt = np.stack([encode(vocab, p.response, max_len).ids for p in pairs])
    return src, tgt
