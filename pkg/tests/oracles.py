"""Independent reference computations used by the test suite.

Nothing here calls into the code paths it is used to check, except
:func:`central_difference`, which only evaluates forward passes.
"""

import contextlib
import itertools
import math

import numpy as np

import progattr.tensor as T


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[oi])
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, ci, i * stride + ki, j * stride + kj] * float(w[oi, ci, ki, kj])
                    out[ni, oi, i, j] = acc
    return out


def dense_loops(x, w, b):
    n, f = x.shape
    c = w.shape[1]
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            out[i, j] = float(b[j]) + sum(float(x[i, k]) * float(w[k, j]) for k in range(f))
    return out


def cross_entropy_direct(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, np.float64), labels):
        total += -math.log(math.exp(row[y]) / sum(math.exp(v) for v in row))
    return total / len(labels)


def soft_margin_direct(logits, targets):
    total = 0.0
    for x, y in zip(np.asarray(logits, np.float64).ravel(), np.asarray(targets).ravel()):
        s = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(s) + (1 - y) * math.log(1 - s))
    return total / np.asarray(targets).size


@contextlib.contextmanager
def relu_recorder():
    """Collect the sign pattern of every ReLU input while active."""
    original = T.relu
    masks = []

    def recording(x):
        masks.append((x.data > 0).copy())
        return original(x)

    T.relu = recording
    try:
        yield masks
    finally:
        T.relu = original


def _signature(f):
    with relu_recorder() as masks:
        value = float(f())
    return value, masks


def central_difference(f, params, eps=1e-2):
    """Numerical gradient of scalar ``f()`` with respect to each parameter.

    Returns ``(grads, valid)``; ``valid`` is False for elements whose
    perturbation flips a ReLU input sign, where the function has a kink
    inside ``[v - eps, v + eps]`` and the difference quotient is meaningless.
    """
    _, base_masks = _signature(f)
    grads, valid = [], []
    for p in params:
        g = np.zeros(p.shape)
        ok = np.ones(p.shape, bool)
        for idx in itertools.product(*map(range, p.shape)):
            v = p.data[idx]
            p.data[idx] = v + eps
            fp, mp = _signature(f)
            p.data[idx] = v - eps
            fm, mm = _signature(f)
            p.data[idx] = v
            g[idx] = (fp - fm) / (2 * eps)
            ok[idx] = all(np.array_equal(a, b) and np.array_equal(a, c)
                          for a, b, c in zip(base_masks, mp, mm))
        grads.append(g)
        valid.append(ok)
    return grads, valid


def grads_match(analytic, numeric, rel=1e-3, abs_=1e-4):
    analytic = np.asarray(analytic, np.float64)
    return np.abs(analytic - numeric) <= np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), abs_)


def pr_brute_force(scores, labels, cls):
    """Precision/recall for every distinct threshold by direct counting (pure Python)."""
    pairs = list(zip([float(s) for s in scores], [int(l) == cls for l in labels]))
    positives = sum(1 for _, p in pairs if p)
    out = []
    for t in sorted({s for s, _ in pairs}):
        tp = sum(1 for s, p in pairs if s >= t and p)
        fp = sum(1 for s, p in pairs if s >= t and not p)
        out.append((t, tp / (tp + fp), tp / positives))
    return out
