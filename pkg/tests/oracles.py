"""Slow, independent reference implementations used by the tests."""
import itertools
import math
from collections import deque

import numpy as np


def neighbour_offsets(ndim, full):
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=ndim):
        if not any(d):
            continue
        if full or sum(map(abs, d)) == 1:
            offs.append(d)
    return offs


def flood_fill(mask, full=True):
    """Breadth-first labeling; returns a list of components as sets of index tuples."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros(mask.shape, dtype=bool)
    offs = neighbour_offsets(mask.ndim, full)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        comp = {start}
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for d in offs:
                q = tuple(a + b for a, b in zip(p, d))
                if all(0 <= c < n for c, n in zip(q, mask.shape)) and mask[q] and not seen[q]:
                    seen[q] = True
                    comp.add(q)
                    queue.append(q)
        comps.append(frozenset(comp))
    return comps


def set_metrics(pred, truth):
    """Dice/sensitivity/specificity from Python sets of flat indices."""
    pred = np.asarray(pred, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    universe = set(range(pred.size))
    a = {i for i in universe if pred[i]}
    b = {i for i in universe if truth[i]}
    dice = 1.0 if not a and not b else 2 * len(a & b) / (len(a) + len(b))
    sen = None if not b else len(a & b) / len(b)
    neg = universe - b
    spe = None if not neg else len(neg - a) / len(neg)
    return dice, sen, spe


def adam_scalar(grad_fn, theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a single float, written with plain Python arithmetic."""
    m = v = 0.0
    history = [theta]
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        history.append(theta)
    return history


def best_threshold(dice_table, thresholds):
    """Exhaustive argmax of mean Dice over candidates; first (smallest) wins ties."""
    best, best_score = None, -1.0
    for j, thr in enumerate(thresholds):
        score = sum(row[j] for row in dice_table) / len(dice_table)
        if score > best_score:
            best, best_score = thr, score
    return best, best_score
