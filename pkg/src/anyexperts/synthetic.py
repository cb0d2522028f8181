"""Synthetic multimodal-like token streams with planted informativeness.

Each sequence alternates textlike and imagelike blocks. A fixed fraction of every
imagelike block is redundant: near-duplicates of a background archetype (ids 0 and 1).
All other tokens are informative, and the target at each position is a fixed
permutation of the most recent informative token's id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .importance import Modality
from .numerics import Rng
from .routing import BoolArray, IntArray

BACKGROUND_IDS = (0, 1)
MIN_VOCAB = 6


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self) -> None:
        if self.size < MIN_VOCAB:
            raise ConfigError(
                f"vocabulary of {self.size} is too small; need at least {MIN_VOCAB} ids", key="vocab"
            )

    @property
    def text_ids(self) -> range:
        half = (self.size - len(BACKGROUND_IDS)) // 2
        return range(len(BACKGROUND_IDS), len(BACKGROUND_IDS) + half)

    @property
    def image_ids(self) -> range:
        return range(self.text_ids.stop, self.size)

    def target_map(self, task_seed: int = 0) -> IntArray:
        """Id → target id; informative ids map through a seeded permutation, background ids to themselves."""
        mapping = np.arange(self.size, dtype=np.int64)
        informative = np.arange(len(BACKGROUND_IDS), self.size, dtype=np.int64)
        mapping[informative] = informative[Rng(task_seed).split("targets").permutation(informative.size)]
        return mapping


@dataclass(frozen=True)
class SyntheticStream:
    tokens: IntArray
    modalities: tuple[Modality, ...]
    informative: BoolArray
    targets: IntArray
    redundancy: float

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])

    def spans(self) -> list[tuple[int, int]]:
        """Contiguous imagelike spans as half-open [start, end) pairs."""
        spans: list[tuple[int, int]] = []
        start = None
        for position, modality in enumerate(self.modalities):
            if modality is Modality.IMAGELIKE and start is None:
                start = position
            elif modality is not Modality.IMAGELIKE and start is not None:
                spans.append((start, position))
                start = None
        if start is not None:
            spans.append((start, self.seq_len))
        return spans


@dataclass(frozen=True)
class TokenBatch:
    """Sequences concatenated row-wise, with each token's origin kept for export."""

    tokens: IntArray
    modalities: tuple[Modality, ...]
    informative: BoolArray
    targets: IntArray
    sequence: IntArray
    position: IntArray

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


def block_modalities(seq_len: int) -> tuple[Modality, ...]:
    block = max(2, seq_len // 4)
    return tuple(Modality.TEXTLIKE if (p // block) % 2 == 0 else Modality.IMAGELIKE for p in range(seq_len))


def _sequence(rng: Rng, seq_len: int, redundancy: float, vocab: Vocabulary, target_map: IntArray) -> SyntheticStream:
    modalities = block_modalities(seq_len)
    image_positions = np.array([p for p, m in enumerate(modalities) if m is Modality.IMAGELIKE], dtype=np.int64)
    n_redundant = math.floor(redundancy * image_positions.size)
    redundant = image_positions[rng.choice(image_positions.size, n_redundant)] if n_redundant else image_positions[:0]

    informative = np.ones(seq_len, dtype=bool)
    informative[redundant] = False
    tokens = np.empty(seq_len, dtype=np.int64)
    text_ids, image_ids = vocab.text_ids, vocab.image_ids
    draws = rng.integers(0, 1 << 30, size=seq_len)
    for p, modality in enumerate(modalities):
        if not informative[p]:
            tokens[p] = BACKGROUND_IDS[draws[p] % len(BACKGROUND_IDS)]
        elif modality is Modality.TEXTLIKE:
            tokens[p] = text_ids[draws[p] % len(text_ids)]
        else:
            tokens[p] = image_ids[draws[p] % len(image_ids)]

    targets = np.empty(seq_len, dtype=np.int64)
    last = int(tokens[0])
    for p in range(seq_len):
        if informative[p]:
            last = int(tokens[p])
        targets[p] = target_map[last]
    return SyntheticStream(tokens, modalities, informative, targets, redundancy)


def generate(
    seed: int,
    n_sequences: int,
    seq_len: int,
    redundancy: float,
    vocab: int = 32,
    *,
    stream: str = "train",
    task_seed: int = 0,
) -> list[SyntheticStream]:
    """Deterministic sequences for ``seed``; ``stream`` names an independent draw (train, eval, ...).

    The target permutation depends on ``task_seed`` only, so every stream poses the same task.
    """
    if not 0.0 <= redundancy < 1.0:
        raise ConfigError(f"redundancy must lie in [0, 1), got {redundancy}", key="redundancy")
    if seq_len < 4:
        raise ConfigError(f"seq_len must be at least 4, got {seq_len}", key="seq_len")
    if n_sequences < 1:
        raise ConfigError(f"n_sequences must be positive, got {n_sequences}", key="n_sequences")
    vocabulary = Vocabulary(vocab)
    target_map = vocabulary.target_map(task_seed)
    root = Rng(seed).split(stream)
    return [
        _sequence(root.split(f"sequence.{i}"), seq_len, redundancy, vocabulary, target_map)
        for i in range(n_sequences)
    ]


def stack(streams: Sequence[SyntheticStream]) -> TokenBatch:
    if not streams:
        raise ContractError("cannot stack an empty list of streams")
    return TokenBatch(
        tokens=np.concatenate([s.tokens for s in streams]),
        modalities=tuple(m for s in streams for m in s.modalities),
        informative=np.concatenate([s.informative for s in streams]),
        targets=np.concatenate([s.targets for s in streams]),
        sequence=np.concatenate([np.full(s.seq_len, i, dtype=np.int64) for i, s in enumerate(streams)]),
        position=np.concatenate([np.arange(s.seq_len, dtype=np.int64) for s in streams]),
    )
