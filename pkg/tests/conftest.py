"""Shared oracles and fixtures.

The oracles here are deliberately naive (nested loops, central differences)
and share no code with the engine they check.
"""

import numpy as np
import pytest


def naive_conv2d(x, w, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ch, y * stride + i, z * stride + j] * w[f, ch, i, j]
                    out[b, f, y, z] = acc
    return out


def naive_maxpool(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for z in range(wo):
                    out[b, ch, y, z] = x[b, ch, y * stride:y * stride + window, z * stride:z * stride + window].max()
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def central_difference(f, arr, h=1e-5, indices=None):
    """d f / d arr by central differences; ``f`` re-reads ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def kink_safe_central_difference(f, arr, indices, steps=(1e-5, 1e-6, 1e-7), agree=1e-3):
    """Central differences that avoid straddling a ReLU/max-pool kink.

    For each entry the largest step whose forward and backward one-sided
    slopes agree (relative ``agree``) is used; a kink inside [-h, h] makes
    them disagree. Falls back to the smallest step.
    """
    grad = np.zeros_like(arr)
    f0 = f()
    for idx in indices:
        old = arr[idx]
        for h in steps:
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) <= agree * max(abs(right), abs(left), 1e-6):
                break
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-6):
    """Largest |a-b| / max(|a|, |b|, floor) over all entries."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
