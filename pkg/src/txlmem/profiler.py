"""Training-step latency and peak tracked memory versus memory configuration,
next to an analytic cost model."""

from __future__ import annotations

import ctypes
import ctypes.util
import gc
import statistics
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .attention import attention_flops
from .data import WindowStream
from .memory import state_size
from .model import ModelConfig, forward, fresh_memories, init_params, loss
from .tensor import TRACKER, Tape, as_dtype
from .train import Adam, clip_by_global_norm

if TYPE_CHECKING:
    from .config import ExperimentConfig

# (num LRMs, memory GB, microseconds per token) for a 24-layer model on
# Enwik8; kept for trend comparison only.
PUBLISHED_REFERENCE = (
    (24, 3.4, 405),
    (12, 2.8, 273),
    (4, 1.1, 191),
    (1, 0.50, 155),
    (0, 0.20, 143),
)

MEMORY_HEADER = "peak tracked activation+memory bytes (tensor allocations, excludes parameters and optimizer state)"


@dataclass
class Prediction:
    state_bytes: int
    relative_flops: float


@dataclass
class ProfileRow:
    name: str
    num_lrm: int
    peak_bytes: int
    us_per_token: float
    state_bytes: int
    relative_flops: float


_LAYER_CONSTANT: dict[tuple, float] = {}


def _pin_allocator() -> bool:
    """Keep freed step buffers in the glibc heap instead of unmapping them.

    Every step allocates and frees the same large activation buffers; with
    glibc's defaults each one is a fresh mmap and page-faults on first
    touch, which adds history-dependent noise to latency (a caching
    allocator, in GPU terms).  No-op where glibc is unavailable.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(mallopt(m_mmap_threshold, 1 << 30)) and bool(mallopt(m_trim_threshold, (1 << 31) - 1))


def default_layer_constant(config: ModelConfig) -> float:
    """Window-side work of one layer in score-matrix units.

    One score entry costs 2 * d multiply-adds (logit plus weighted value).
    Query/key/value/output projections of the window and the feedforward
    block cost n * d^2 * (4 + 2 * ff_mult), i.e. n * d * (2 + ff_mult) units.
    """
    return float(config.window * config.d_model * (2 + config.ff_mult))


def calibrate_layer_constant(config: ModelConfig, lanes: int = 4, repeats: int = 5, seed: int = 0) -> float:
    """Measure one layer's fixed cost in units of ``attention_flops``.

    Times a one-layer model step with empty memories and with memories of
    length ``4 * window``; the difference prices a unit of attention cost, the
    empty-memory time the remainder.  Cached per shape for the process.
    """
    key = (config.d_model, config.heads, config.window, config.ff_mult, config.dtype, lanes)
    if key in _LAYER_CONSTANT:
        return _LAYER_CONSTANT[key]
    from .memory import MemoryConfig

    n, extra = config.window, 4 * config.window

    def timed(m: int) -> float:
        mem = MemoryConfig(num_layers=1, lrm_length=m, srm_length=m)
        cfg = ModelConfig(layers=1, d_model=config.d_model, heads=config.heads, window=n, memory=mem,
                          ff_mult=config.ff_mult, vocab=config.vocab, max_distance=config.r_max,
                          dtype=config.dtype)
        params = init_params(cfg, seed)
        rng = np.random.default_rng(seed)
        mems = fresh_memories(cfg)
        times = []
        for i in range(repeats + m // n + 1):
            ids = rng.integers(0, cfg.vocab, (lanes, n + 1))
            t0 = time.perf_counter()
            with Tape() as tape:
                logits, mems = forward(params, cfg, ids[:, :-1], mems)
                step_loss = loss(logits, ids[:, 1:])
            tape.backward(step_loss)
            times.append(time.perf_counter() - t0)
        return statistics.median(times[-repeats:])

    t0, t1 = timed(0), timed(extra)
    unit = max(t1 - t0, 1e-12) / (attention_flops(n, extra) - attention_flops(n, 0))
    const = max(t0 / unit - attention_flops(n, 0), 0.0)
    _LAYER_CONSTANT[key] = const
    return const


def predict(config: ModelConfig, layer_constant: float | None = None, eval: bool = False) -> Prediction:
    """Analytic state size and relative per-step cost of a memory layout."""
    c = default_layer_constant(config) if layer_constant is None else layer_constant
    caps = config.memory.capacities(eval)
    flops = sum(attention_flops(config.window, m) + c for m in caps)
    nbytes = as_dtype(config.dtype).itemsize
    return Prediction(state_size(config.memory, config.d_model, nbytes, eval), flops)


def _run_steps(config: "ExperimentConfig", warmup: int, measure: int, seed: int):
    mcfg, lanes = config.model, config.train.lanes
    gc.collect()
    # buffers already alive in the process (other models, fixtures) are not
    # part of this config's footprint
    baseline = TRACKER.live
    params = init_params(mcfg, np.random.default_rng(seed))
    param_bytes = params.nbytes()
    opt = Adam(params, config.train.beta1, config.train.beta2, config.train.eps)
    rng = np.random.default_rng(seed)
    data = rng.integers(0, mcfg.vocab, lanes * (warmup + measure + 1) * mcfg.window + lanes, dtype=np.uint8)
    stream = WindowStream(data, lanes, mcfg.window)
    mems = fresh_memories(mcfg)
    names = list(params)
    times, peaks = [], []
    gc.collect()
    gc.disable()
    try:
        for step in range(warmup + measure):
            inputs, targets = stream.next_windows()
            TRACKER.reset_peak()
            t0 = time.perf_counter()
            with Tape() as tape:
                logits, mems = forward(params, mcfg, inputs, mems)
                step_loss = loss(logits, targets)
            grads = tape.backward(step_loss, wrt=params.values())
            del tape, logits
            named = {k: grads[params[k]] for k in names}
            del grads
            clip_by_global_norm(named, config.train.clip_norm)
            opt.step(params, named, config.train.lr)
            del named
            elapsed = time.perf_counter() - t0
            if step >= warmup:
                times.append(elapsed)
                peaks.append(TRACKER.peak - baseline - param_bytes)
    finally:
        gc.enable()
    return times, peaks, lanes * mcfg.window


def profile(configs: Sequence["ExperimentConfig"], names: Sequence[str] | None = None,
            warmup: int = 10, measure: int = 50, seed: int = 0,
            layer_constant: float | None = None) -> list[ProfileRow]:
    """Run identical training steps per config, strictly one config at a time.

    Latency is the median microseconds per input token over the measured
    steps; peak bytes is the largest tracked allocation high-water mark of
    any measured step, minus parameter storage and minus whatever was
    already tracked before the config's model was built.
    """
    if measure < 1 or warmup < 0:
        raise ValueError("need measure >= 1 and warmup >= 0")
    _pin_allocator()
    rows = []
    for i, cfg in enumerate(configs):
        times, peaks, tokens = _run_steps(cfg, warmup, measure, seed)
        pred = predict(cfg.model, layer_constant)
        rows.append(ProfileRow(
            name=names[i] if names else f"config{i}",
            num_lrm=cfg.memory.resolved_num_lrm,
            peak_bytes=int(max(peaks)),
            us_per_token=statistics.median(times) * 1e6 / tokens,
            state_bytes=pred.state_bytes,
            relative_flops=pred.relative_flops,
        ))
    return rows


def format_table(rows: Sequence[ProfileRow]) -> str:
    lines = [f"# memory: {MEMORY_HEADER}",
             "name\tnum_lrm\tpeak_bytes\tus_per_token\tstate_bytes\trelative_flops"]
    for r in rows:
        lines.append(f"{r.name}\t{r.num_lrm}\t{r.peak_bytes}\t{r.us_per_token:.3f}\t{r.state_bytes}\t"
                     f"{r.relative_flops:.1f}")
    return "\n".join(lines) + "\n"


def series(rows: Sequence[ProfileRow]) -> dict:
    """Plot-ready columns, with the published reference alongside."""
    return {
        "num_lrm": [r.num_lrm for r in rows],
        "peak_bytes": [r.peak_bytes for r in rows],
        "us_per_token": [r.us_per_token for r in rows],
        "relative_flops": [r.relative_flops for r in rows],
        "memory_metric": MEMORY_HEADER,
        "published_reference": {
            "num_lrm": [p[0] for p in PUBLISHED_REFERENCE],
            "memory_gb": [p[1] for p in PUBLISHED_REFERENCE],
            "us_per_token": [p[2] for p in PUBLISHED_REFERENCE],
        },
    }


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
