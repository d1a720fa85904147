"""Slow, obviously-correct reference implementations used by the tests."""

import itertools
import math

import numpy as np

from txlmem.tensor import Tape, Tensor, mul, sum_

FD_STEP = 1e-5


def matmul_loop(a, b):
    """Triple-loop matrix product of 2-D arrays."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def attention_oracle(window, memory, wq, wk, wv, wo, rel_bias, scale=True):
    """Per-query, per-head causal attention over [memory; window], unbatched."""
    n, d = window.shape
    mem = np.zeros((0, d)) if memory is None else memory
    m = mem.shape[0]
    ctx = np.concatenate([mem, window], axis=0)
    k = rel_bias.shape[0]
    dh = d // k
    r_max = rel_bias.shape[1] - 1
    out = np.zeros((n, d))
    for t in range(n):
        merged = np.zeros(d)
        for h in range(k):
            cols = slice(h * dh, (h + 1) * dh)
            q = window[t] @ wq[:, cols]
            visible = range(m + t + 1)
            logits = []
            for j in visible:
                key = ctx[j] @ wk[:, cols]
                s = float(q @ key)
                if scale:
                    s /= math.sqrt(dh)
                s += rel_bias[h, min(m + t - j, r_max)]
                logits.append(s)
            top = max(logits)
            weights = [math.exp(s - top) for s in logits]
            z = sum(weights)
            head = np.zeros(dh)
            for w, j in zip(weights, visible):
                head += (w / z) * (ctx[j] @ wv[:, cols])
            merged[cols] = head
        out[t] = merged @ wo
    return out


def cross_entropy_loop(logits, targets):
    """Mean negative log-likelihood in nats, one position at a time."""
    rows = logits.reshape(-1, logits.shape[-1])
    tg = np.asarray(targets).reshape(-1)
    total = 0.0
    for row, y in zip(rows, tg):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[y]
    return total / len(tg)


def rel_error(analytic, numeric):
    """max |a - n| relative to the largest magnitude of either."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, x, step=FD_STEP):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f()
        x[idx] = old - step
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def check_op(op, *arrays, seed=0):
    """Relative error of each input's gradient for ``sum(op(*inputs) * R)``.

    ``R`` is a fixed random projection, so every output element contributes.
    Returns a list of errors, one per input.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape():
        probe = op(*tensors)
    proj = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar():
        return float((op(*tensors).data * proj).sum())

    with Tape() as tape:
        out = sum_(mul(op(*tensors), Tensor(proj)))
    grads = tape.backward(out, wrt=tensors)
    return [rel_error(grads[t], numeric_grad(scalar, t.data)) for t in tensors]


def first_oracle(num_layers, k):
    """K-subset minimising the largest index, found by enumeration when small."""
    if num_layers <= 14:
        best = min(itertools.combinations(range(num_layers), k), key=lambda s: (max(s, default=-1), s))
        return tuple(best)
    return tuple(i for i in range(num_layers) if i < k)


def last_oracle(num_layers, k):
    """K-subset maximising the smallest index, found by enumeration when small."""
    if num_layers <= 14:
        best = max(itertools.combinations(range(num_layers), k),
                   key=lambda s: (min(s, default=num_layers), s))
        return tuple(best)
    return tuple(i for i in range(num_layers) if i >= num_layers - k)
