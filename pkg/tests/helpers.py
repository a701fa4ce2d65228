"""Shared oracles and builders for the test suite."""
import itertools
from fractions import Fraction

import numpy as np


def random_data(rng, shape, dtype):
    dtype = np.dtype(dtype)
    if dtype.kind == "f":
        return rng.normal(0, 500, shape).astype(dtype)
    info = np.iinfo(dtype)
    lo, hi = max(info.min, -(2**40)), min(info.max, 2**40)
    return rng.integers(lo, hi, shape, endpoint=True).astype(dtype)


def perm_flip_affine(perm, signs, spacing=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0)):
    a = np.zeros((4, 4))
    for j, (w, s) in enumerate(zip(perm, signs)):
        a[w, j] = s * spacing[j]
    a[:3, 3] = offset
    a[3, 3] = 1.0
    return a


def voxel_world(vol):
    idx = np.array(list(itertools.product(*(range(n) for n in vol.shape))), dtype=float)
    world = idx @ vol.affine[:3, :3].T + vol.affine[:3, 3]
    values = vol.data[tuple(idx.astype(int).T)]
    return world, values


def brute_force(y_true, y_pred, k):
    """Independent metrics oracle: nested loops and exact fractions."""
    counts = [[0] * k for _ in range(k)]
    for i in range(k):
        for j in range(k):
            counts[i][j] = sum(1 for t, p in zip(y_true, y_pred) if t == i and p == j)
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(k)) - tp
        fn = sum(counts[c]) - tp
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else Fraction(0))
    acc = Fraction(sum(counts[c][c] for c in range(k)), len(y_true))
    return counts, prec, rec, f1, acc
