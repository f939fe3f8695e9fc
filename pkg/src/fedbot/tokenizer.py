"""Subword tokenization: text cleanup, vocabulary training, encode/decode.

The vocabulary is trained by iterative frequency-based merging of
adjacent symbol pairs; segmentation at encode time is greedy
longest-match-first with "##" marking continuation pieces. Text cleanup
targets short customer-support messages: lowercasing, URL and @-mention
anonymization, punctuation split off as single-character tokens.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
PAD_TOKEN = "<pad>"
START_TOKEN = "<start>"
END_TOKEN = "<end>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN)

URL_TOKEN = "<url>"
USER_TOKEN = "<user>"

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_MENTION_RE = re.compile(r"@\w+")
# placeholders first so their brackets are never split off
_TOKEN_RE = re.compile(r"<url>|<user>|[a-z0-9]+|[^\s]")


def normalize(text: str) -> str:
    """Lowercase, anonymize URLs/@-mentions, split punctuation, collapse blanks."""
    text = text.lower()
    text = _URL_RE.sub(f" {URL_TOKEN} ", text)
    text = _MENTION_RE.sub(f" {USER_TOKEN} ", text)
    return " ".join(_TOKEN_RE.findall(text))


class Vocabulary:
    """Bijective token<->id maps with the four specials pinned at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary contains duplicate tokens")

    @classmethod
    def from_pieces(cls, pieces: Iterable[str]) -> "Vocabulary":
        """Build from content pieces; specials are prepended."""
        return cls(list(SPECIAL_TOKENS) + [p for p in pieces if p not in SPECIAL_TOKENS])

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise IndexError(f"token id {token_id} out of range (vocab size {len(self)})")
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass
class TokenSequence:
    """Fixed-length id sequence: true_length counts the non-PAD prefix."""

    ids: np.ndarray
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)


def _word_symbols(word: str) -> list[str]:
    if word in (URL_TOKEN, USER_TOKEN):
        return [word]
    return [word[0]] + ["##" + ch for ch in word[1:]]


def _merge_symbol(a: str, b: str) -> str:
    return a + b[2:]


def train_vocab(corpus: Iterable[str], vocab_size: int = 8192, min_freq: int = 2) -> Vocabulary:
    """Learn a piece vocabulary by merging the most frequent adjacent pair.

    Every character seen in the corpus stays in the vocabulary (both as a
    word-initial and a continuation piece), so encoding never fails on
    in-corpus text. Merging stops when the vocabulary is full or no pair
    reaches min_freq.
    """
    if vocab_size <= 260:
        raise ContractError(f"vocab_size must exceed 260, got {vocab_size}")
    word_freq: Counter[str] = Counter()
    for line in corpus:
        word_freq.update(normalize(line).split())
    if not word_freq:
        raise ContractError("cannot train a vocabulary on an empty corpus")

    words = [list(_word_symbols(w)) for w in word_freq]
    freqs = [word_freq[w] for w in word_freq]

    alphabet = {URL_TOKEN, USER_TOKEN}
    for symbols in words:
        alphabet.update(symbols)
    pieces: list[str] = sorted(alphabet)
    piece_set = set(pieces)

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, symbols in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] += freqs[idx]
            pair_words[pair].add(idx)

    while len(pieces) + len(SPECIAL_TOKENS) < vocab_size and pair_counts:
        (a, b), count = min(
            pair_counts.items(), key=lambda item: (-item[1], item[0])
        )
        if count < min_freq:
            break
        merged = _merge_symbol(a, b)
        if merged not in piece_set:
            pieces.append(merged)
            piece_set.add(merged)
        for idx in list(pair_words[(a, b)]):
            symbols = words[idx]
            freq = freqs[idx]
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] -= freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                pair_words[pair].discard(idx)
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            words[idx] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += freq
                pair_words[pair].add(idx)

    return Vocabulary.from_pieces(pieces)


def segment_word(vocab: Vocabulary, word: str) -> list[int]:
    """Greedy longest-match-first pieces for one word; unknown chars -> UNK."""
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab.token_to_id:
                match = piece
                break
            end -= 1
        if match is None:
            ids.append(UNK_ID)
            start += 1
        else:
            ids.append(vocab.token_to_id[match])
            start = end
    return ids


def encode(vocab: Vocabulary, text: str, max_len: int = 30) -> TokenSequence:
    """Normalize, segment and frame as [START, ..., END] padded to max_len.

    When the pieces do not fit in max_len - 2, the sequence is truncated
    to max_len with no END marker.
    """
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")
    piece_ids: list[int] = []
    for word in normalize(text).split():
        piece_ids.extend(segment_word(vocab, word))
    if len(piece_ids) <= max_len - 2:
        ids = [START_ID] + piece_ids + [END_ID]
        true_length = len(ids)
        ids += [PAD_ID] * (max_len - len(ids))
    else:
        ids = [START_ID] + piece_ids[: max_len - 1]
        true_length = max_len
    return TokenSequence(np.array(ids, dtype=np.int64), true_length)


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Drop specials, fuse "##" continuations, join words with spaces."""
    words: list[str] = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id in (PAD_ID, START_ID, END_ID):
            continue
        token = vocab.token_of(token_id)
        if token.startswith("##") and words:
            words[-1] += token[2:]
        else:
            words.append(token)
    return " ".join(words)
