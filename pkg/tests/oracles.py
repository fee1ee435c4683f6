"""Independent reference implementations used only by tests.

Exact rational arithmetic, no shared code with the package paths they check.
"""
from fractions import Fraction


def hits(pred, gold, k):
    count = 0
    for p in pred[:k]:
        for g in gold:
            if p == g:
                count += 1
                break
    return count


def precision(pred, gold, k):
    return Fraction(hits(pred, gold, k), k)


def recall(pred, gold, k):
    return Fraction(hits(pred, gold, k), len(gold))


def sensitivity(pred, gold, k):
    return Fraction(hits(pred, gold, k), min(k, len(gold)))


def f1(pred, gold, k):
    p, r = precision(pred, gold, k), recall(pred, gold, k)
    return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)


def average_precision(pred, gold, k):
    """Enumerate every cutoff i and add precision@i where position i is relevant."""
    total = Fraction(0)
    for i in range(1, min(k, len(pred)) + 1):
        prefix = pred[:i]
        rel_i = 1 if prefix[-1] in gold else 0
        prec_i = Fraction(sum(1 for p in prefix if p in gold), i)
        total += prec_i * rel_i
    return total / min(k, len(gold))


def lloyd(points, init_idx, max_iters=100):
    """Plain-Python Lloyd's k-means from the given initial point indices.

    An empty cluster takes the point farthest from its own centroid, drawn
    from clusters with more than one member (lowest index on ties).
    """
    cents = [list(points[i]) for i in init_idx]
    labels = None
    for _ in range(max_iters):
        new = []
        own = []
        for p in points:
            dists = [sum((a - b) ** 2 for a, b in zip(p, c)) for c in cents]
            new.append(dists.index(min(dists)))
            own.append(min(dists))
        for c in range(len(cents)):
            if c in new:
                continue
            sizes = {lab: new.count(lab) for lab in new}
            best, best_d = None, -1.0
            for i, lab in enumerate(new):
                if sizes[lab] > 1 and own[i] > best_d:
                    best, best_d = i, own[i]
            new[best] = c
        if new == labels:
            break
        labels = new
        for c in range(len(cents)):
            members = [points[i] for i, lab in enumerate(labels) if lab == c]
            if members:
                cents[c] = [sum(col) / len(members) for col in zip(*members)]
    return labels
