"""Independent scalar references, written with plain loops and ``math``.

Nothing here imports the package; these functions exist to cross-check it.
"""
import math

# Frozen after computing by hand and with ``supcon_scalar`` below.
SUPCON_Z = [(1.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, 1.0)]
SUPCON_Y = ["a", "a", "b", "b"]
GOLDEN_SUPCON_EQUAL = 0.2395447  # tau = beta = 0.5: ln(e^2 + 2) - 2
GOLDEN_SUPCON_CII = -0.4485553   # tau = 0.5, beta = 1: ln(e + 2) - 2
GOLDEN_INFOMAX = 0.5753641       # -2 ln 0.75
GOLDEN_NLL_075 = 0.2876821       # -ln 0.75
GOLDEN_CFD = 0.8253641           # 0.5753641 + 0.1 * 2.5


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def supcon_scalar(z, y, tau, beta):
    """Per-anchor average, anchor excluded everywhere, beta on same-class denominator terms."""
    total, anchors = 0.0, 0
    n = len(z)
    for i in range(n):
        partners = [p for p in range(n) if p != i and y[p] == y[i]]
        if not partners:
            continue
        denom = 0.0
        for q in range(n):
            if q == i:
                continue
            t = beta if y[q] == y[i] else tau
            denom += math.exp(dot(z[i], z[q]) / t)
        term = 0.0
        for p in partners:
            term += -math.log(math.exp(dot(z[i], z[p]) / tau) / denom)
        total += term / len(partners)
        anchors += 1
    return total / anchors if anchors else 0.0


def metrics_scalar(tp, fp, tn, fn):
    def ratio(a, b):
        return a / b if b else 0.0

    p = ratio(tp, tp + fp)
    r = ratio(tp, tp + fn)
    return {
        "precision": p,
        "recall": r,
        "f1": ratio(2 * p * r, p + r),
        "far": ratio(fp, fp + tn),
        "accuracy": ratio(tp + tn, tp + fp + tn + fn),
    }


def mean_rows(rows):
    n = len(rows)
    return [sum(r[j] for r in rows) / n for j in range(len(rows[0]))]
