"""Multi-head attention over a layer's memory cache plus the current window."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class AttentionParams:
    """Per-layer attention weights.

    Head ``i`` owns column block ``i`` of ``query``/``key``/``value`` (each
    d x d/k) and row block ``i`` of ``output`` ((d/k) x d), so the merged
    projection ``concat_i(attn_i) @ output`` equals ``sum_i attn_i W_i``.
    ``rel_bias[i, r]`` is the logit bias of head ``i`` for relative distance
    ``r``, clipped at ``max_distance``.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    rel_bias: Tensor

    @property
    def d_model(self) -> int:
        return self.query.shape[0]

    @property
    def heads(self) -> int:
        return self.rel_bias.shape[0]

    @property
    def max_distance(self) -> int:
        return self.rel_bias.shape[1] - 1

    @classmethod
    def init(cls, d_model: int, heads: int, max_distance: int, rng: np.random.Generator,
             dtype="fp32", std: float = 0.02, output_std: float | None = None) -> "AttentionParams":
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        if max_distance < 0:
            raise ValueError("max_distance must be >= 0")
        dt = T.as_dtype(dtype)

        def w(s=std):
            return Tensor(rng.normal(0.0, s, (d_model, d_model)).astype(dt), requires_grad=True)

        return cls(
            query=w(), key=w(), value=w(), output=w(std if output_std is None else output_std),
            rel_bias=Tensor(np.zeros((heads, max_distance + 1), dtype=dt), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "query": self.query, "key": self.key, "value": self.value,
            "output": self.output, "rel_bias": self.rel_bias,
        }


def param_count(d_model: int, heads: int, max_distance: int) -> int:
    return 4 * d_model * d_model + heads * (max_distance + 1)


@dataclass
class AttentionInput:
    """Current window activations plus this layer's (gradient-free) memory rows.

    ``window`` is (n, d) or (b, n, d); ``memory`` is (m, d) / (b, m, d) with
    rows ordered oldest first, or ``None`` for an empty cache.
    """

    window: Tensor
    memory: Tensor | np.ndarray | None = None

    def __post_init__(self):
        if self.window.ndim not in (2, 3):
            raise ShapeError(f"window must be (n, d) or (b, n, d), got {self.window.shape}")
        if self.memory is None:
            return
        mem = self.memory.data if isinstance(self.memory, Tensor) else np.asarray(self.memory)
        if mem.ndim != self.window.ndim:
            raise ShapeError(f"memory rank {mem.ndim} does not match window rank {self.window.ndim}")
        if mem.shape[-1] != self.window.shape[-1]:
            raise ShapeError(f"memory width {mem.shape[-1]} != window width {self.window.shape[-1]}")
        if mem.ndim == 3 and mem.shape[0] != self.window.shape[0]:
            raise ShapeError("memory and window batch sizes differ")

    @property
    def memory_length(self) -> int:
        return 0 if self.memory is None else self.memory.shape[-2]


@lru_cache(maxsize=256)
def relative_index(n: int, m: int, max_distance: int) -> np.ndarray:
    """Clipped distance ``min(m + t - j, max_distance)`` for query t, key j.

    Keys in the causal future get distance 0; they are masked anyway.
    """
    t = np.arange(n)[:, None]
    j = np.arange(m + n)[None, :]
    idx = np.clip(m + t - j, 0, max_distance)
    idx.flags.writeable = False
    return idx


@lru_cache(maxsize=256)
def causal_mask(n: int, m: int, dtype: np.dtype) -> np.ndarray:
    """Additive mask: 0 where key j <= m + t, -inf beyond."""
    t = np.arange(n)[:, None]
    j = np.arange(m + n)[None, :]
    mask = np.where(j <= m + t, 0.0, -np.inf).astype(dtype)
    mask.flags.writeable = False
    return mask


def attend(inp: AttentionInput, params: AttentionParams, *, scale_logits: bool = True,
           dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Causal multi-head attention of the window over [memory; window].

    Query t sees all memory rows and window rows 0..t.  Returns a tensor with
    the window's shape.
    """
    x = inp.window
    d = params.d_model
    if x.shape[-1] != d:
        raise ShapeError(f"window width {x.shape[-1]} != model width {d}")
    unbatched = x.ndim == 2
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    b, n, _ = x.shape
    k = params.heads
    dh = d // k
    m = inp.memory_length

    if m:
        mem = inp.memory if isinstance(inp.memory, Tensor) else Tensor(inp.memory)
        if unbatched:
            mem = T.reshape(mem, (1,) + mem.shape)
        ctx = T.concat([mem, x], axis=1)
    else:
        ctx = x

    q = T.transpose(T.reshape(x @ params.query, (b, n, k, dh)), (0, 2, 1, 3))
    keys = T.transpose(T.reshape(ctx @ params.key, (b, m + n, k, dh)), (0, 2, 3, 1))
    values = T.transpose(T.reshape(ctx @ params.value, (b, m + n, k, dh)), (0, 2, 1, 3))

    logits = q @ keys
    if scale_logits:
        logits = T.scale(logits, 1.0 / np.sqrt(dh))
    logits = logits + T.take(params.rel_bias, relative_index(n, m, params.max_distance), axis=1)
    logits = logits + causal_mask(n, m, x.dtype)
    probs = T.dropout(T.softmax(logits, axis=-1), dropout, rng)

    heads = T.reshape(T.transpose(probs @ values, (0, 2, 1, 3)), (b, n, d))
    out = heads @ params.output
    if unbatched:
        out = T.reshape(out, (n, d))
    return out


def attention_flops(n: int, m: int) -> int:
    """Score-matrix size n * (n + m): relative attention cost per layer.

    A unit-width cost model for comparing memory configurations, not a
    wall-clock predictor.
    """
    if n < 1 or m < 0:
        raise ValueError(f"need n >= 1 and m >= 0, got n={n}, m={m}")
    return n * (n + m)
