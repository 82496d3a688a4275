"""Slow, obviously-correct reference computations used as test oracles.

Everything here loops over rows in plain Python and shares no code with
the package.
"""

import math


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def predict_rows(w, b, X):
    return [1 if sigmoid(sum(wi * xi for wi, xi in zip(w, row)) + b) >= 0.5 else 0 for row in X]


def _rate(num, den):
    return None if den == 0 else num / den


def eod(y, a, yhat):
    tp = {0: 0, 1: 0}
    pos = {0: 0, 1: 0}
    for yi, ai, hi in zip(y, a, yhat):
        if yi == 1:
            pos[ai] += 1
            tp[ai] += hi
    r0, r1 = _rate(tp[0], pos[0]), _rate(tp[1], pos[1])
    return None if r0 is None or r1 is None else r0 - r1


def spd(a, yhat):
    hits = {0: 0, 1: 0}
    rows = {0: 0, 1: 0}
    for ai, hi in zip(a, yhat):
        rows[ai] += 1
        hits[ai] += hi
    r0, r1 = _rate(hits[0], rows[0]), _rate(hits[1], rows[1])
    return None if r0 is None or r1 is None else r0 - r1


def accuracy(y, yhat):
    return sum(int(p == q) for p, q in zip(y, yhat)) / len(y)


def reweigh(y, a):
    n = len(y)
    out = {}
    for av in (0, 1):
        for yv in (0, 1):
            joint = sum(1 for yi, ai in zip(y, a) if yi == yv and ai == av)
            if joint == 0:
                out[av, yv] = 1.0
                continue
            pa = sum(1 for ai in a if ai == av) / n
            py = sum(1 for yi in y if yi == yv) / n
            out[av, yv] = pa * py / (joint / n)
    return out


def weighted_bce(w, b, X, y, sw):
    total = 0.0
    for row, yi, wi in zip(X, y, sw):
        p = sigmoid(sum(a * c for a, c in zip(w, row)) + b)
        p = min(max(p, 1e-12), 1 - 1e-12)
        total += wi * -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
    return total / sum(sw)


def population_std(xs):
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))
