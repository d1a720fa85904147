"""Byte corpora, train/valid/test splits and contiguous window streams."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    split: tuple[float, float, float] = (0.9, 0.05, 0.05)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        split_offsets(1000, self.split)


class CorpusError(ValueError):
    pass


class StreamExhausted(Exception):
    """No lane has room for another full window."""


@dataclass(frozen=True)
class Corpus:
    data: bytes
    train_end: int
    valid_end: int

    def split(self, name: str) -> np.ndarray:
        bounds = {"train": (0, self.train_end), "valid": (self.train_end, self.valid_end),
                  "test": (self.valid_end, len(self.data))}
        try:
            lo, hi = bounds[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}") from None
        return np.frombuffer(self.data, dtype=np.uint8, count=hi - lo, offset=lo)


def split_offsets(size: int, fractions) -> tuple[int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise CorpusError("split fractions must be three non-negative numbers")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise CorpusError(f"split fractions must sum to 1, got {sum(fractions)}")
    train_end = math.floor(size * fractions[0] + 1e-9)
    valid_end = math.floor(size * (fractions[0] + fractions[1]) + 1e-9)
    return train_end, min(valid_end, size)


def from_bytes(data: bytes, fractions=(0.9, 0.05, 0.05)) -> Corpus:
    if not data:
        raise CorpusError("corpus is empty")
    return Corpus(bytes(data), *split_offsets(len(data), fractions))


def load(path, fractions=(0.9, 0.05, 0.05)) -> Corpus:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    if not data:
        raise CorpusError(f"corpus {path} is empty")
    return from_bytes(data, fractions)


class WindowStream:
    """Splits a byte array into ``lanes`` equal contiguous chunks and walks
    each chunk ``window`` bytes at a time.

    Targets are the inputs shifted by one byte and never cross a lane's end,
    so a lane of L bytes yields (L - 1) // window windows.
    """

    def __init__(self, data: np.ndarray, lanes: int, window: int):
        if lanes < 1 or window < 1:
            raise ValueError("lanes and window must be positive")
        self.data = np.asarray(data, dtype=np.uint8)
        self.lanes = lanes
        self.window = window
        self.chunk = len(self.data) // lanes
        self.starts = np.arange(lanes) * self.chunk
        self.reset()

    def reset(self) -> None:
        self.cursor = 0

    @property
    def windows_per_lane(self) -> int:
        return max((self.chunk - 1) // self.window, 0)

    def next_windows(self) -> tuple[np.ndarray, np.ndarray]:
        if self.cursor + self.window + 1 > self.chunk:
            raise StreamExhausted(f"stream exhausted after {self.cursor // self.window} windows")
        pos = self.starts[:, None] + self.cursor + np.arange(self.window + 1)[None, :]
        block = self.data[pos].astype(np.int64)
        self.cursor += self.window
        return block[:, :-1], block[:, 1:]

    def __iter__(self):
        while True:
            try:
                yield self.next_windows()
            except StreamExhausted:
                return


# Synthetic text with long-range structure: every document introduces a few
# invented names that recur throughout it, so recalling them pays off beyond
# a short context.

_WORDS = (
    "the of and to in is was for on that with as by at from his her it an were are which this be "
    "had not but have they one their also has its after first been new two who other into more "
    "time during over many only some when then would city year may later there most about three "
    "them such while under both between since before part through world where known war state "
    "family north river school house music album film team season game work line early small "
    "great people life found well years near high long built around called second several south "
    "large each much however became number form local public own made until although along place "
    "members against named following used based set being including released years record group"
).split()
_VERBS = ("met", "visited", "followed", "wrote to", "joined", "left", "praised", "helped",
          "watched", "answered", "thanked", "found")
_SYLLABLES = ("ka", "ro", "mi", "tel", "van", "dor", "si", "lu", "bar", "en", "qui", "zo",
              "pha", "ner", "os", "tri", "gal", "um", "wen", "ly")


def _name(rng: random.Random) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 4))).capitalize()


def synthetic_corpus(num_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like text of exactly ``num_bytes`` bytes."""
    rng = random.Random(seed)
    parts: list[str] = []
    size = 0
    while size < num_bytes:
        names = [_name(rng) for _ in range(rng.randint(3, 6))]
        doc = [f"= {names[0]} =\n\n"]
        for _ in range(rng.randint(12, 30)):
            words = [rng.choice(_WORDS) for _ in range(rng.randint(4, 12))]
            a, b = rng.sample(names, 2)
            words.insert(rng.randrange(len(words) + 1), f"{a} {rng.choice(_VERBS)} {b}")
            sentence = " ".join(words)
            doc.append(sentence[0].upper() + sentence[1:] + ". ")
            if rng.random() < 0.2:
                doc.append("\n\n")
        doc.append("\n\n")
        text = "".join(doc)
        parts.append(text)
        size += len(text)
    return "".join(parts).encode("ascii")[:num_bytes]
