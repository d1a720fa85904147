"""Training loop with periodic validation and early stopping, evaluation in
bits per character, and the short-range-memory length sweep."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from .data import Corpus, StreamExhausted, WindowStream
from .model import (CheckpointError, ModelConfig, ModelParams, forward, fresh_memories, init_params, loss,
                    params_from_arrays, read_checkpoint, save_checkpoint)
from .tensor import Tape, token_nll

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)

LN2 = math.log(2)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float = 1.0
    lanes: int = 8
    max_steps: int = 2000
    valid_interval: int = 250
    patience: int = 3
    seed: int = 0
    log_interval: int = 50
    valid_prefix: int = 50_000
    eval_lanes: int = 8
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr", "clip_norm", "lanes", "max_steps", "valid_interval", "patience",
                     "log_interval", "valid_prefix", "eval_lanes", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if self.warmup_steps < 0 or self.seed < 0:
            raise ValueError("train.warmup_steps and train.seed must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss_value: float, grad_norm: float, last_valid_bpc: float | None):
        super().__init__(f"non-finite loss at step {step}: loss={loss_value}, grad_norm={grad_norm}, "
                         f"last valid bpc={last_valid_bpc}")
        self.step = step
        self.loss = loss_value
        self.grad_norm = grad_norm
        self.last_valid_bpc = last_valid_bpc


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.98, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


def learning_rate(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def score_stream(params: ModelParams, config: ModelConfig, data: np.ndarray, lanes: int,
                 lrm_eval: int | None = None) -> tuple[float, int]:
    """Summed nats and token count of one contiguous pass, memories persisting."""
    stream = WindowStream(data, lanes, config.window)
    mems = fresh_memories(config, eval=True, lrm_eval=lrm_eval)
    total, count = 0.0, 0
    for inputs, targets in stream:
        logits, mems = forward(params, config, inputs, mems)
        total += float(token_nll(logits.data.astype(np.float64), targets).sum())
        count += targets.size
    return total, count


@dataclass
class EvalReport:
    split: str
    tokens: int
    mean_nats: float
    bpc: float
    wall_ms: float
    memory: dict

    def to_dict(self, wall: bool = True) -> dict:
        d = {"split": self.split, "tokens": self.tokens, "mean_nats": self.mean_nats,
             "bpc": self.bpc, "memory": self.memory}
        if wall:
            d["wall_ms"] = self.wall_ms
        return d


def evaluate(params: ModelParams, config: ModelConfig, corpus: Corpus, split: str,
             lrm_eval: int | None = None, lanes: int = 1, max_bytes: int | None = None) -> EvalReport:
    """Bits per character of ``split`` in one pass with persistent memories.

    ``lrm_eval`` extends the long-range memories at test time (None keeps the
    trained length); short-range memories are unchanged.  Parameters are not
    modified.
    """
    if lrm_eval is not None and lrm_eval < config.memory.lrm_length:
        raise ValueError(f"lrm_eval={lrm_eval} is shorter than the trained LRM length")
    data = corpus.split(split)
    if max_bytes is not None:
        data = data[:max_bytes]
    start = time.perf_counter()
    total, count = score_stream(params, config, data, lanes, lrm_eval)
    if count == 0:
        raise StreamExhausted(f"split {split!r} has no full window of {config.window} bytes per lane")
    mem = config.memory.with_eval_length(lrm_eval) if lrm_eval is not None else config.memory
    mean_nats = total / count
    return EvalReport(
        split=split, tokens=count, mean_nats=mean_nats, bpc=mean_nats / LN2,
        wall_ms=(time.perf_counter() - start) * 1e3,
        memory={"capacities": mem.capacities(eval=lrm_eval is not None),
                "lrm_layers": list(mem.lrm_layer_set()), "pattern": mem.pattern,
                "lrm_length": mem.lrm_length, "lrm_length_eval": mem.eval_length if lrm_eval else mem.lrm_length,
                "srm_length": mem.srm_length},
    )


def load_model(path) -> tuple[ModelParams, "ExperimentConfig"]:
    from .config import ConfigError, ExperimentConfig

    flat, arrays = read_checkpoint(path)
    try:
        cfg = ExperimentConfig.from_flat(flat)
    except ConfigError as e:
        raise CheckpointError(f"{path}: stored config is invalid ({e})") from None
    return params_from_arrays(arrays, cfg.model), cfg


def evaluate_checkpoint(path, corpus: Corpus, split: str, lrm_eval: int | None = None,
                        lanes: int = 1, max_bytes: int | None = None) -> EvalReport:
    params, cfg = load_model(path)
    return evaluate(params, cfg.model, corpus, split, lrm_eval, lanes, max_bytes)


@dataclass
class TrainResult:
    params: ModelParams
    records: list[dict]
    steps: int
    best_step: int | None
    best_valid_bpc: float | None
    stopped_early: bool
    checkpoint: Path | None = None
    valid_history: list[tuple[int, float]] = field(default_factory=list)


def train(config: "ExperimentConfig", corpus: Corpus, *, metrics_path=None, checkpoint_path=None,
          init: ModelParams | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam with warmup and global-norm clipping over contiguous lanes.

    Every ``valid_interval`` steps (and at the last step) the first
    ``valid_prefix`` bytes of the validation split are scored; training stops
    once validation BPC has not improved for ``patience`` checks.  The
    returned parameters are those with the best recorded validation BPC.
    """
    mcfg, tcfg = config.model, config.train
    params = init if init is not None else init_params(mcfg, np.random.default_rng(tcfg.seed))
    drop_rng = np.random.default_rng(tcfg.seed + 1)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    names = list(params)
    stream = WindowStream(corpus.split("train"), tcfg.lanes, mcfg.window)
    if stream.windows_per_lane == 0:
        raise StreamExhausted("training split is too small for one window per lane")
    valid = corpus.split("valid")[:tcfg.valid_prefix]
    mems = fresh_memories(mcfg)

    records: list[dict] = []
    metrics = open(metrics_path, "w") if metrics_path else None

    def emit(rec: dict) -> None:
        records.append(rec)
        if metrics:
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
        if on_record:
            on_record(rec)

    best_bpc: float | None = None
    best_step: int | None = None
    best_arrays = None
    bad_checks = 0
    history: list[tuple[int, float]] = []
    window_loss, window_count = 0.0, 0
    clock = time.perf_counter()
    stopped_early = False
    step = 0
    try:
        for step in range(1, tcfg.max_steps + 1):
            try:
                inputs, targets = stream.next_windows()
            except StreamExhausted:
                stream.reset()
                mems = fresh_memories(mcfg)
                inputs, targets = stream.next_windows()
            with Tape() as tape:
                logits, mems = forward(params, mcfg, inputs, mems, train=True, rng=drop_rng)
                step_loss = loss(logits, targets)
            value = step_loss.item()
            grads = tape.backward(step_loss, wrt=params.values())
            del tape, logits
            named = {k: grads[params[k]] for k in names}
            del grads
            gnorm = clip_by_global_norm(named, tcfg.clip_norm)
            if not (math.isfinite(value) and math.isfinite(gnorm)):
                raise TrainingDiverged(step, value, gnorm, history[-1][1] if history else None)
            opt.step(params, named, learning_rate(step, tcfg))
            del named
            window_loss += value
            window_count += 1

            if step % tcfg.log_interval == 0 or step == tcfg.max_steps:
                now = time.perf_counter()
                nats = window_loss / window_count
                emit({"step": step, "split": "train", "loss_nats": nats, "bpc": nats / LN2,
                      "wall_ms": (now - clock) * 1e3})
                window_loss, window_count = 0.0, 0

            if step % tcfg.valid_interval == 0 or step == tcfg.max_steps:
                start = time.perf_counter()
                total, count = score_stream(params, mcfg, valid, tcfg.eval_lanes)
                if count == 0:
                    raise StreamExhausted("validation prefix has no full window per lane")
                nats = total / count
                vbpc = nats / LN2
                emit({"step": step, "split": "valid", "loss_nats": nats, "bpc": vbpc,
                      "wall_ms": (time.perf_counter() - start) * 1e3})
                history.append((step, vbpc))
                if best_bpc is None or vbpc < best_bpc:
                    best_bpc, best_step, bad_checks = vbpc, step, 0
                    best_arrays = params.snapshot()
                else:
                    bad_checks += 1
                    if bad_checks >= tcfg.patience:
                        stopped_early = True
                        log.info("early stop at step %d (best %.4f at %d)", step, best_bpc, best_step)
                        break
    finally:
        if metrics:
            metrics.close()

    if best_arrays is not None:
        params.load_arrays(best_arrays)
    ckpt = None
    if checkpoint_path is not None:
        ckpt = Path(checkpoint_path)
        save_checkpoint(ckpt, params, config.to_flat())
    return TrainResult(params, records, step, best_step, best_bpc, stopped_early, ckpt, history)


@dataclass
class SweepRow:
    srm_length: int
    test_bpc: float
    test_nats: float
    tokens: int
    best_valid_bpc: float | None


def srm_sweep(base: "ExperimentConfig", lengths, corpus: Corpus, *, fine_tune: bool = False,
              base_params: ModelParams | None = None, split: str = "test",
              eval_max_bytes: int | None = None, checkpoint_dir=None) -> list[SweepRow]:
    """Train (or fine-tune from ``base_params``) and test one model per SRM length.

    LRM layers are evaluated at the config's ``lrm_length_eval``.
    """
    lengths = [int(x) for x in lengths]
    if not lengths or any(x <= 0 for x in lengths) or lengths != sorted(set(lengths)):
        raise ValueError("SRM lengths must be positive and strictly ascending")
    if fine_tune and base_params is None:
        raise ValueError("fine_tune needs base_params")
    rows = []
    for length in lengths:
        cfg = base.with_memory(srm_length=length)
        init = None
        if fine_tune:
            init = ModelParams({k: type(t)(t.data.copy(), requires_grad=True) for k, t in base_params.items()})
        ckpt = Path(checkpoint_dir) / f"srm_{length}.ckpt" if checkpoint_dir else None
        result = train(cfg, corpus, init=init, checkpoint_path=ckpt)
        lrm_eval = cfg.memory.lrm_length_eval
        if lrm_eval is not None and lrm_eval == cfg.memory.lrm_length:
            lrm_eval = None
        rep = evaluate(result.params, cfg.model, corpus, split, lrm_eval, max_bytes=eval_max_bytes)
        rows.append(SweepRow(length, rep.bpc, rep.mean_nats, rep.tokens, result.best_valid_bpc))
    return rows


def format_sweep(rows: list[SweepRow]) -> str:
    lines = ["srm_length\ttest_bpc\ttest_nats\ttokens\tbest_valid_bpc"]
    for r in rows:
        vb = "" if r.best_valid_bpc is None else f"{r.best_valid_bpc:.6f}"
        lines.append(f"{r.srm_length}\t{r.test_bpc:.6f}\t{r.test_nats:.6f}\t{r.tokens}\t{vb}")
    return "\n".join(lines) + "\n"
