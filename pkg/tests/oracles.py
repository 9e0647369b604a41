"""Independent oracles the test suite checks the package against.

Everything here is written with plain loops and explicit arithmetic, on
purpose: these functions must not share code (or vectorization mistakes)
with the implementations they judge.
"""

import math


def oracle_kl(p, q, epsilon=1e-9):
    """Direct-summation KL(p || q) with q floored at epsilon, renormalized."""
    q = [max(float(x), epsilon) for x in q]
    total = sum(q)
    q = [x / total for x in q]
    out = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            out += pi * math.log(pi / qi)
    return out


def oracle_macro_f1(counts):
    """Definitional macro F1 of a square count grid (rows = true class).

    Precision, recall, and F1 all treat 0/0 as 0.
    """
    c = len(counts)
    f1s = []
    for k in range(c):
        tp = counts[k][k]
        predicted = sum(counts[t][k] for t in range(c))
        actual = sum(counts[k])
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / actual if actual > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        f1s.append(f1)
    return sum(f1s) / c


def oracle_prob_message_size(n_samples, n_classes):
    """Field-by-field byte count of a probability message."""
    header = 2 + 1 + 1 + 4 + 4 + 4 + 2 + 2
    per_sample = 8 + 4 * n_classes
    return header + n_samples * per_sample


def oracle_param_message_size(n_params):
    header = 2 + 1 + 1 + 4 + 4 + 4 + 2 + 2
    return header + 4 * n_params


def oracle_mean_argmax(prob_stack):
    """Pass-through ensemble: per-sample mean over models, argmax with
    lowest-index tie-break. prob_stack is (n, M, C) nested lists or array."""
    preds = []
    for sample in prob_stack:
        m = len(sample)
        c = len(sample[0])
        mean = [sum(sample[j][k] for j in range(m)) / m for k in range(c)]
        best, best_k = mean[0], 0
        for k in range(1, c):
            if mean[k] > best:
                best, best_k = mean[k], k
        preds.append(best_k)
    return preds


def oracle_accuracy(preds, labels):
    return sum(1 for p, y in zip(preds, labels) if p == y) / len(labels)


def simplex_grid(m, resolution):
    """All weight vectors on the m-simplex whose entries are multiples of
    resolution. Yields tuples."""
    steps = round(1.0 / resolution)

    def rec(prefix, remaining, slots):
        if slots == 1:
            yield prefix + (remaining,)
            return
        for k in range(remaining + 1):
            yield from rec(prefix + (k,), remaining - k, slots - 1)

    for combo in rec((), steps, m):
        yield tuple(k / steps for k in combo)


def oracle_grid_search(prob_stack, labels, resolution=0.05):
    """Best weighted-fusion accuracy over the weight grid.

    Returns (best_accuracy, best_weights). Fusion is the plain convex
    combination; prediction is argmax with lowest-index tie-break.
    """
    n = len(prob_stack)
    m = len(prob_stack[0])
    c = len(prob_stack[0][0])
    best_acc, best_w = -1.0, None
    for w in simplex_grid(m, resolution):
        correct = 0
        for i in range(n):
            fused = [sum(w[j] * prob_stack[i][j][k] for j in range(m))
                     for k in range(c)]
            top, top_k = fused[0], 0
            for k in range(1, c):
                if fused[k] > top:
                    top, top_k = fused[k], k
            if top_k == labels[i]:
                correct += 1
        acc = correct / n
        if acc > best_acc:
            best_acc, best_w = acc, w
    return best_acc, best_w
