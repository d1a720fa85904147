"""Residual pre-norm Transformer-XL stack over bytes, with per-layer memories."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionInput, AttentionParams, attend
from .memory import LayerMemory, MemoryConfig, update
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d_model: int
    heads: int
    window: int
    memory: MemoryConfig
    ff_mult: int = 4
    vocab: int = 256
    max_distance: int | None = None
    scale_logits: bool = True
    attn_dropout: float = 0.0
    tie_embeddings: bool = False
    activation: str = "gelu"
    dtype: str = "fp32"
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1 or self.d_model < 1 or self.heads < 1 or self.window < 1:
            raise ValueError("layers, d_model, heads and window must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.memory.num_layers != self.layers:
            raise ValueError(f"memory config is for {self.memory.num_layers} layers, model has {self.layers}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError("activation must be 'gelu' or 'relu'")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attn_dropout must be in [0, 1)")
        T.as_dtype(self.dtype)

    @property
    def r_max(self) -> int:
        """Largest distinguishable relative distance (train LRM span by default)."""
        if self.max_distance is not None:
            return self.max_distance
        return self.memory.lrm_length + self.window - 1


DESK_MEMORY = MemoryConfig(num_layers=12, lrm_length=192, srm_length=32)
DESK = ModelConfig(layers=12, d_model=128, heads=4, window=64, memory=DESK_MEMORY)


class ModelParams:
    """Named trainable tensors, in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def nbytes(self) -> int:
        return sum(t.data.nbytes for t in self.tensors.values())

    def attention(self, layer: int) -> AttentionParams:
        p = f"layers.{layer}.attn."
        return AttentionParams(*(self.tensors[p + k] for k in ("query", "key", "value", "output", "rel_bias")))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data[...] = arrays[k]

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: Tensor(np.zeros_like(t.data), requires_grad=True) for k, t in self.items()})


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dt = T.as_dtype(config.dtype)
    d, std = config.d_model, config.init_std
    ff = config.ff_mult * d
    out_std = std / math.sqrt(2 * config.layers)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, shape).astype(dt), requires_grad=True)

    def const(shape, v):
        return Tensor(np.full(shape, v, dtype=dt), requires_grad=True)

    p: dict[str, Tensor] = {"embed": normal((config.vocab, d))}
    for i in range(config.layers):
        pre = f"layers.{i}."
        attn = AttentionParams.init(d, config.heads, config.r_max, rng, dt, std, out_std)
        for k, t in attn.tensors().items():
            p[pre + "attn." + k] = t
        p[pre + "ln1.gain"] = const(d, 1.0)
        p[pre + "ln1.bias"] = const(d, 0.0)
        p[pre + "ln2.gain"] = const(d, 1.0)
        p[pre + "ln2.bias"] = const(d, 0.0)
        p[pre + "ff.w1"] = normal((d, ff))
        p[pre + "ff.b1"] = const(ff, 0.0)
        p[pre + "ff.w2"] = normal((ff, d), out_std)
        p[pre + "ff.b2"] = const(d, 0.0)
    p["ln_f.gain"] = const(d, 1.0)
    p["ln_f.bias"] = const(d, 0.0)
    if not config.tie_embeddings:
        p["out.weight"] = normal((d, config.vocab))
    p["out.bias"] = const(config.vocab, 0.0)
    return ModelParams(p)


def param_count(config: ModelConfig) -> int:
    d, ff, v, l = config.d_model, config.ff_mult * config.d_model, config.vocab, config.layers
    per_layer = 4 * d * d + config.heads * (config.r_max + 1) + 4 * d + d * ff + ff + ff * d + d
    out = (0 if config.tie_embeddings else d * v) + v
    return v * d + l * per_layer + 2 * d + out


def fresh_memories(config: ModelConfig, eval: bool = False, lrm_eval: int | None = None) -> list[LayerMemory]:
    mem = config.memory.with_eval_length(lrm_eval) if lrm_eval is not None else config.memory
    return [LayerMemory(i, c) for i, c in enumerate(mem.capacities(eval or lrm_eval is not None))]


def forward(params: ModelParams, config: ModelConfig, tokens, memories: list[LayerMemory] | None,
            *, train: bool = False, rng: np.random.Generator | None = None,
            use_memory: bool = True) -> tuple[Tensor, list[LayerMemory]]:
    """Next-token logits for a window of byte ids and the updated memories.

    ``tokens`` is (n,) or (b, n).  Each layer caches its input activations,
    then applies pre-norm attention over [memory; window] and a pre-norm
    feedforward block, both residual.  ``use_memory=False`` skips every
    cache read and write.
    """
    ids = np.asarray(tokens)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab):
        raise ValueError(f"token id outside [0, {config.vocab})")
    unbatched = ids.ndim == 1
    if unbatched:
        ids = ids[None, :]
    if use_memory:
        if memories is None or len(memories) != config.layers:
            raise ValueError(f"expected {config.layers} layer memories")
        for mem in memories:
            if len(mem) and mem.rows.shape[0] != ids.shape[0]:
                raise ValueError("memory batch size does not match tokens")
            if len(mem) > mem.capacity:
                raise ValueError("memory holds more rows than its capacity")

    dropout = config.attn_dropout if train else 0.0
    act = T.gelu if config.activation == "gelu" else T.relu
    h = T.embedding(params["embed"], ids)
    new_memories: list[LayerMemory] = []
    for i in range(config.layers):
        pre = f"layers.{i}."
        gain, bias = params[pre + "ln1.gain"], params[pre + "ln1.bias"]
        mem_rows = None
        if use_memory:
            mem = memories[i]
            new_memories.append(update(mem, h.data))
            if len(mem):
                mem_rows = T.layer_norm(Tensor(mem.rows), gain, bias)
        a = attend(AttentionInput(T.layer_norm(h, gain, bias), mem_rows), params.attention(i),
                   scale_logits=config.scale_logits, dropout=dropout, rng=rng)
        h = h + a
        f = T.layer_norm(h, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
        f = act(f @ params[pre + "ff.w1"] + params[pre + "ff.b1"]) @ params[pre + "ff.w2"] + params[pre + "ff.b2"]
        h = h + f
    h = T.layer_norm(h, params["ln_f.gain"], params["ln_f.bias"])
    w_out = T.transpose(params["embed"]) if config.tie_embeddings else params["out.weight"]
    logits = h @ w_out + params["out.bias"]
    if unbatched:
        logits = T.reshape(logits, logits.shape[1:])
    return logits, new_memories


def loss(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy in nats."""
    return T.cross_entropy(logits, targets)


def bpc(nats_per_token: float) -> float:
    if nats_per_token < 0:
        raise ValueError("nats per token must be >= 0")
    return nats_per_token / math.log(2)


# -- checkpoint container ------------------------------------------------------
#
# layout: MAGIC | u32 version | u32 header_len | header JSON (utf-8) | arrays
# header = {"config": {flat experiment keys}, "arrays": [{name, shape, dtype, offset}]}
# arrays are little-endian ("<f4" or "<f8"), offsets relative to the end of
# the header.

MAGIC = b"TXLMEMCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, config_flat: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config_flat, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns the stored flat config and the named arrays."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        start = len(MAGIC) + 8
        header = json.loads(raw[start:start + hlen])
        base = start + hlen
        arrays = {}
        for e in header["arrays"]:
            dt = np.dtype(e.get("dtype", "<f4"))
            if dt.str not in ("<f4", "<f8"):
                raise CheckpointError(f"{path}: unsupported array dtype {dt.str}")
            count = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=base + e["offset"])
            arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        return header["config"], arrays
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None


def params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig) -> ModelParams:
    dt = T.as_dtype(config.dtype)
    template = init_params(config, 0)
    if set(arrays) != set(template.tensors):
        raise CheckpointError("checkpoint tensors do not match the model config")
    out = {}
    for k, t in template.items():
        if arrays[k].shape != t.shape:
            raise CheckpointError(f"{k}: shape {arrays[k].shape} != expected {t.shape}")
        out[k] = Tensor(arrays[k].astype(dt), requires_grad=True)
    return ModelParams(out)
