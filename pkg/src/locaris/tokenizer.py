"""Domain tokenizer over telemetry prompts.

Tiny fixed vocabulary instead of a learned subword model: AP name tokens,
field keyword tokens, metadata keyword tokens, one token per digit, minus,
space, lowercase letters for metadata values, and a single EOS that doubles
as the padding token. Greedy longest-match encoding makes decode(encode(p))
an exact identity for every prompt the telemetry layer can produce.

Ids fit in one byte (vocabulary < 256 entries). The ordering below is the
versioned contract; changing it changes every checkpoint's embedding layout.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyBatch, SchemaError, UnknownToken

VOCAB_VERSION = "locaris-vocab-v1"

EOS_TOKEN = "<eos>"

_META_KEY_TOKENS = ("BUILDING:", "FLOOR:", "USER:", "PHONE:", "ENVIRONMENT:")


def _token_table(max_aps: int) -> tuple[str, ...]:
    tokens = [EOS_TOKEN]
    tokens += [f"AP{i}" for i in range(1, max_aps + 1)]
    tokens += ["RTT:", "RSS:"]
    tokens += list(_META_KEY_TOKENS)
    tokens += [str(d) for d in range(10)]
    tokens += ["-", " "]
    tokens += [chr(c) for c in range(ord("a"), ord("z") + 1)]
    tokens += ["_"]
    return tuple(tokens)


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    eos_id: int
    pad_id: int
    version: str = VOCAB_VERSION
    _pattern: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.pad_id != self.eos_id:
            raise SchemaError("pad_id must equal eos_id")
        if len(self.id_to_token) > 256:
            raise SchemaError(f"vocabulary too large: {len(self.id_to_token)} > 256")
        # Longest-first alternation turns the regex engine's leftmost-alternative
        # rule into greedy longest-match.
        ordered = sorted(self.token_to_id, key=lambda t: (-len(t), t))
        pattern = re.compile("|".join(re.escape(t) for t in ordered))
        object.__setattr__(self, "_pattern", pattern)

    def __len__(self) -> int:
        return len(self.id_to_token)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with an explicit count of non-padding positions."""

    ids: tuple[int, ...]
    length: int

    def __post_init__(self):
        if not (0 < self.length <= len(self.ids)):
            raise SchemaError(f"length {self.length} out of range for {len(self.ids)} ids")


@dataclass(frozen=True)
class Batch:
    """Dynamically padded batch: ids, 0/1 attention mask, target positions."""

    ids: np.ndarray  # (B, L) int64
    attention_mask: np.ndarray  # (B, L) float64, 1.0 over real tokens
    targets: np.ndarray  # (B, 2) float64 meters

    def __post_init__(self):
        if self.ids.shape != self.attention_mask.shape:
            raise SchemaError("ids and attention_mask shapes differ")
        if self.targets.shape != (self.ids.shape[0], 2):
            raise SchemaError("targets must be (batch, 2)")

    @property
    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1).astype(np.int64)


def build_vocab(max_aps: int = 16) -> Vocab:
    """The fixed vocabulary; identical ids on every call for a given max_aps."""
    table = _token_table(max_aps)
    token_to_id = {t: i for i, t in enumerate(table)}
    eos = token_to_id[EOS_TOKEN]
    return Vocab(token_to_id=token_to_id, id_to_token=table, eos_id=eos, pad_id=eos)


def encode(prompt: str, vocab: Vocab) -> TokenSequence:
    """Greedy longest-match tokenization, one trailing EOS appended."""
    ids = []
    pos = 0
    n = len(prompt)
    while pos < n:
        m = vocab._pattern.match(prompt, pos)
        if m is None:
            raise UnknownToken(prompt, pos)
        ids.append(vocab.token_to_id[m.group(0)])
        pos = m.end()
    ids.append(vocab.eos_id)
    return TokenSequence(ids=tuple(ids), length=len(ids))


def decode(seq: TokenSequence | Sequence[int], vocab: Vocab) -> str:
    """Inverse of encode; EOS/padding ids contribute nothing."""
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return "".join(vocab.id_to_token[i] for i in ids if i != vocab.pad_id)


def pad_batch(seqs: Sequence[TokenSequence], targets: Sequence[Sequence[float]]) -> Batch:
    """Pad with pad_id to the in-batch maximum length only."""
    if len(seqs) == 0:
        raise EmptyBatch("pad_batch needs at least one sequence")
    if len(seqs) != len(targets):
        raise SchemaError(f"{len(seqs)} sequences vs {len(targets)} targets")
    max_len = max(s.length for s in seqs)
    batch = len(seqs)
    ids = np.empty((batch, max_len), dtype=np.int64)
    mask = np.zeros((batch, max_len), dtype=np.float64)
    for i, s in enumerate(seqs):
        real = s.ids[: s.length]
        pad_id = real[-1]  # encode() guarantees the last real token is EOS
        ids[i, : s.length] = real
        ids[i, s.length :] = pad_id
        mask[i, : s.length] = 1.0
    tgt = np.asarray(targets, dtype=np.float64).reshape(batch, 2)
    return Batch(ids=ids, attention_mask=mask, targets=tgt)


def vocab_to_json(vocab: Vocab, path) -> None:
    payload = {
        "version": vocab.version,
        "eos_token": EOS_TOKEN,
        "token_to_id": vocab.token_to_id,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def vocab_from_json(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    token_to_id = {str(k): int(v) for k, v in payload["token_to_id"].items()}
    table = [None] * len(token_to_id)
    for tok, i in token_to_id.items():
        if not (0 <= i < len(table)) or table[i] is not None:
            raise SchemaError(f"vocab file ids are not a permutation: {i}")
        table[i] = tok
    eos = token_to_id[payload["eos_token"]]
    return Vocab(
        token_to_id=token_to_id,
        id_to_token=tuple(table),
        eos_id=eos,
        pad_id=eos,
        version=str(payload.get("version", VOCAB_VERSION)),
    )
