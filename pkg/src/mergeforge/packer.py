"""Best-fit-decreasing sequence packing and EOS-separated concatenation.

Sequences longer than the block capacity are split at capacity boundaries
instead of truncated. Each packed block keeps a segment list so attention can
be restricted to tokens of the same document chunk.
"""

from __future__ import annotations

import bisect
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_CAPACITY = 4096

__all__ = [
    "TokenSequence",
    "Segment",
    "PackedBlock",
    "best_fit_pack",
    "next_fit_pack",
    "pit_concat",
    "segment_mask_bounds",
    "read_sequences",
    "write_blocks",
]


@dataclass(frozen=True)
class TokenSequence:
    id: str
    tokens: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError(f"{self.id}: tokens must be a non-empty one-dimensional array")
        if tokens.min() < 0 or tokens.max() >= 2**32:
            raise ValueError(f"{self.id}: token ids must fit in 32-bit unsigned integers")
        object.__setattr__(self, "tokens", tokens.astype(np.uint32))

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class Segment:
    id: str
    chunk: int
    start: int  # offset within the block
    tokens: np.ndarray

    @property
    def length(self) -> int:
        return int(self.tokens.size)


@dataclass
class PackedBlock:
    capacity: int = DEFAULT_CAPACITY
    segments: list[Segment] = field(default_factory=list)

    @property
    def fill(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def remaining(self) -> int:
        return self.capacity - self.fill

    @property
    def tokens(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.uint32)
        return np.concatenate([s.tokens for s in self.segments])

    def add(self, seq_id: str, chunk: int, tokens: np.ndarray) -> None:
        if tokens.size > self.remaining:
            raise ValueError(f"chunk of {tokens.size} tokens does not fit ({self.remaining} left)")
        self.segments.append(Segment(seq_id, chunk, self.fill, tokens))

    def to_json(self) -> dict:
        return {
            "capacity": self.capacity,
            "segments": [
                {"id": s.id, "chunk": s.chunk, "start": s.start, "len": s.length} for s in self.segments
            ],
            "tokens": self.tokens.tolist(),
        }


def _chunks(sequences: Sequence[TokenSequence], capacity: int) -> list[tuple[str, int, np.ndarray]]:
    out = []
    for seq in sequences:
        for i, start in enumerate(range(0, len(seq), capacity)):
            out.append((seq.id, i, seq.tokens[start : start + capacity]))
    return out


def best_fit_pack(sequences: Sequence[TokenSequence], capacity: int = DEFAULT_CAPACITY) -> list[PackedBlock]:
    """Best-fit-decreasing packing of capacity-sized chunks.

    Chunks are placed longest first (ties keep input order) into the open
    block with the least sufficient room (ties go to the lowest block index).
    """
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    chunks = _chunks(sequences, capacity)
    order = sorted(range(len(chunks)), key=lambda i: (-chunks[i][2].size, i))
    blocks: list[PackedBlock] = []
    # (remaining, block index), kept sorted
    free: list[tuple[int, int]] = []
    for i in order:
        seq_id, chunk, tokens = chunks[i]
        n = tokens.size
        if n == 0:
            continue
        pos = bisect.bisect_left(free, (n, -1))
        if pos < len(free):
            remaining, b = free.pop(pos)
        else:
            blocks.append(PackedBlock(capacity))
            remaining, b = capacity, len(blocks) - 1
        blocks[b].add(seq_id, chunk, tokens)
        if remaining - n > 0:
            bisect.insort(free, (remaining - n, b))
    return blocks


def next_fit_pack(sequences: Sequence[TokenSequence], capacity: int = DEFAULT_CAPACITY) -> list[PackedBlock]:
    """Sequential packing in input order: start a new block whenever a chunk doesn't fit."""
    blocks: list[PackedBlock] = []
    for seq_id, chunk, tokens in _chunks(sequences, capacity):
        if not tokens.size:
            continue
        if not blocks or blocks[-1].remaining < tokens.size:
            blocks.append(PackedBlock(capacity))
        blocks[-1].add(seq_id, chunk, tokens)
    return blocks


def pit_concat(
    task_items: Sequence[TokenSequence],
    document: TokenSequence | None,
    eos_id: int,
    phase: str = "task_only",
) -> TokenSequence:
    """Join task items (and, in ``task_plus_document``, the document) with single EOS separators."""
    if phase not in ("task_only", "task_plus_document"):
        raise ValueError(f"unknown phase {phase!r}")
    parts = list(task_items)
    if phase == "task_only":
        if not parts:
            raise ValueError("task_only concatenation needs at least one task item")
        seq_id = parts[0].id if len(parts) == 1 else "+".join(p.id for p in parts)
    else:
        if document is None:
            raise ValueError("task_plus_document concatenation needs a document")
        parts.append(document)
        seq_id = document.id
    eos = np.array([eos_id], dtype=np.uint32)
    pieces = []
    for i, part in enumerate(parts):
        if i:
            pieces.append(eos)
        pieces.append(part.tokens)
    return TokenSequence(seq_id, np.concatenate(pieces))


def segment_mask_bounds(block: PackedBlock) -> list[tuple[int, int]]:
    """Half-open token spans, one per segment, partitioning ``[0, fill)``."""
    spans = []
    start = 0
    for s in block.segments:
        spans.append((start, start + s.length))
        start += s.length
    return spans


def read_sequences(path: str | os.PathLike) -> list[TokenSequence]:
    """Read line-delimited ``{"id": str, "tokens": [int, ...]}`` objects."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TokenSequence(str(obj["id"]), np.asarray(obj["tokens"], dtype=np.int64)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid sequence record: {exc}") from None
    return out


def iter_block_lines(blocks: Iterable[PackedBlock]) -> Iterator[str]:
    for block in blocks:
        yield json.dumps(block.to_json(), separators=(",", ":"))


def write_blocks(blocks: Iterable[PackedBlock], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in iter_block_lines(blocks):
            fh.write(line + "\n")
