"""Per-layer activation caches and long/short-range memory arrangement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import TRACKER, Tensor

PATTERNS = ("interleaved", "first", "last", "middle", "explicit")


def arrange(num_layers: int, num_lrm: int, pattern: str) -> tuple[int, ...]:
    """Layer indices that get a long-range memory, sorted ascending.

    interleaved: layer ceil(l/K)*(j+1) - 1 for j < K, clamped to the top layer;
    collisions fall back to the nearest free lower layer (then higher).
    first / last: the bottom / top K layers.
    middle: a contiguous block of K layers centred on l // 2, extra layer on
    the left when K is even.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if not 0 <= num_lrm <= num_layers:
        raise ValueError(f"num_lrm must be in [0, {num_layers}], got {num_lrm}")
    if pattern == "first":
        return tuple(range(num_lrm))
    if pattern == "last":
        return tuple(range(num_layers - num_lrm, num_layers))
    if pattern == "middle":
        start = min(max(num_layers // 2 - num_lrm // 2, 0), num_layers - num_lrm)
        return tuple(range(start, start + num_lrm))
    if pattern == "interleaved":
        if num_lrm == 0:
            return ()
        step = math.ceil(num_layers / num_lrm)
        taken: set[int] = set()
        for j in range(num_lrm):
            idx = min(step * (j + 1) - 1, num_layers - 1)
            if idx in taken:
                idx = _nearest_free(idx, taken, num_layers)
            taken.add(idx)
        return tuple(sorted(taken))
    if pattern == "explicit":
        raise ValueError("the explicit pattern takes its layer set from the config, not arrange()")
    raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")


def _nearest_free(idx: int, taken: set[int], num_layers: int) -> int:
    for i in range(idx - 1, -1, -1):
        if i not in taken:
            return i
    for i in range(idx + 1, num_layers):
        if i not in taken:
            return i
    raise AssertionError("no free layer left")


@dataclass(frozen=True)
class MemoryConfig:
    """Which layers hold a long-range memory and how long every cache is.

    ``lrm_length_eval`` only changes LRM layers; SRM length is the same at
    train and eval time.  With ``pattern="explicit"`` the LRM layers come
    from ``lrm_layers``; otherwise from :func:`arrange` with ``num_lrm``
    (default: every layer).
    """

    num_layers: int
    lrm_length: int
    srm_length: int
    lrm_length_eval: int | None = None
    pattern: str = "interleaved"
    num_lrm: int | None = None
    lrm_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.lrm_length < 0 or self.srm_length < 0:
            raise ValueError("memory lengths must be >= 0")
        if self.lrm_length_eval is not None and self.lrm_length_eval < 0:
            raise ValueError("lrm_length_eval must be >= 0")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.pattern == "explicit":
            if self.lrm_layers is None:
                raise ValueError("pattern 'explicit' needs lrm_layers")
            layers = tuple(sorted(set(int(i) for i in self.lrm_layers)))
            if any(not 0 <= i < self.num_layers for i in layers):
                raise ValueError(f"lrm_layers {layers} outside 0..{self.num_layers - 1}")
            object.__setattr__(self, "lrm_layers", layers)
            if self.num_lrm is not None and self.num_lrm != len(layers):
                raise ValueError("num_lrm disagrees with len(lrm_layers)")
        else:
            if self.lrm_layers is not None:
                raise ValueError("lrm_layers is only valid with pattern 'explicit'")
            arrange(self.num_layers, self.resolved_num_lrm, self.pattern)

    @property
    def resolved_num_lrm(self) -> int:
        if self.pattern == "explicit":
            return len(self.lrm_layers)
        return self.num_layers if self.num_lrm is None else self.num_lrm

    @property
    def eval_length(self) -> int:
        return self.lrm_length if self.lrm_length_eval is None else self.lrm_length_eval

    def lrm_layer_set(self) -> tuple[int, ...]:
        if self.pattern == "explicit":
            return self.lrm_layers
        return arrange(self.num_layers, self.resolved_num_lrm, self.pattern)

    def capacities(self, eval: bool = False) -> list[int]:
        lrm = self.eval_length if eval else self.lrm_length
        chosen = set(self.lrm_layer_set())
        return [lrm if i in chosen else self.srm_length for i in range(self.num_layers)]

    def with_eval_length(self, length: int | None) -> "MemoryConfig":
        return self if length is None else replace(self, lrm_length_eval=length)


@dataclass
class LayerMemory:
    """FIFO cache of one layer's input activations, oldest row first.

    ``rows`` is (r, d) or (b, r, d) with r <= capacity, or None when empty.
    """

    layer: int
    capacity: int
    rows: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return 0 if self.rows is None else self.rows.shape[-2]

    def tensor(self) -> Tensor | None:
        return None if self.rows is None else Tensor(self.rows)


def update(mem: LayerMemory, window_activations) -> LayerMemory:
    """Append a window's rows and evict the oldest beyond capacity."""
    new = window_activations.data if isinstance(window_activations, Tensor) else np.asarray(window_activations)
    if mem.rows is not None and (new.shape[-1] != mem.rows.shape[-1] or new.ndim != mem.rows.ndim):
        raise ValueError(f"activation shape {new.shape} does not match memory rows {mem.rows.shape}")
    if mem.capacity == 0:
        return LayerMemory(mem.layer, 0, None)
    rows = new if mem.rows is None else np.concatenate([mem.rows, new], axis=-2)
    if rows.shape[-2] > mem.capacity:
        rows = rows[..., rows.shape[-2] - mem.capacity:, :]
    rows = np.array(rows, copy=True)
    TRACKER.track(rows)
    return LayerMemory(mem.layer, mem.capacity, rows)


def state_size(config: MemoryConfig, d: int, bytes_per_value: int, eval: bool = False) -> int:
    """Bytes of cached activations: sum over layers of m_l * d * bytes."""
    if d < 1 or bytes_per_value < 1:
        raise ValueError("d and bytes_per_value must be positive")
    return sum(c * d * bytes_per_value for c in config.capacities(eval))


class MemoryManager:
    """Memories of every layer for one stream of windows (b parallel lanes)."""

    def __init__(self, config: MemoryConfig, eval: bool = False):
        self.config = config
        self.eval = eval
        self.memories = self.reset()

    def reset(self) -> list[LayerMemory]:
        self.memories = [LayerMemory(i, c) for i, c in enumerate(self.config.capacities(self.eval))]
        return self.memories

    def state(self) -> list[int]:
        return [len(m) for m in self.memories]

    def update_all(self, activations) -> list[LayerMemory]:
        self.memories = [update(m, a) for m, a in zip(self.memories, activations)]
        return self.memories
