"""Training objectives and their gradients.

Every loss returns a :class:`LossResult` with the scalar value and analytic
gradients with respect to its array inputs.  Prototype-based losses return
gradients for both the query embeddings and the prototypes; route the latter
back to the support embeddings with :func:`prototypes_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PrototypeError

LOG_FLOOR = 1e-30
_LOG_FLOOR = np.log(LOG_FLOOR)


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, int] = field(default_factory=dict)


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # C, D
    classes: list           # roster, aligned with rows
    normal_index: int | None = None

    def index_of(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[y] for y in np.asarray(labels).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise PrototypeError(f"label {exc.args[0]!r} is not in the class roster {self.classes}") from None


def similarity(zi, zj):
    return float(np.dot(zi, zj))


def _logsumexp(a, axis, where=None):
    if where is None:
        m = a.max(axis=axis, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    big = np.where(where, a, -np.inf)
    m = big.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = np.where(where, np.exp(a - m), 0).sum(axis=axis, keepdims=True)
    return (m + np.log(s)).squeeze(axis)


def supcon_cii_loss(z, labels, tau, beta=None) -> LossResult:
    """Supervised contrastive loss with class-conditional denominator temperatures.

    Same-class pairs in the denominator are scaled by ``1/beta``, other pairs
    by ``1/tau``; the positive (numerator) term always uses ``tau``.  The
    anchor is excluded from both sums.  ``beta=None`` or ``beta == tau``
    gives the plain single-temperature loss.  Anchors without a same-class
    partner are skipped and counted in ``diagnostics['skipped_anchors']``.
    """
    beta = tau if beta is None else beta
    if not (tau > 0 and beta >= tau):
        raise ValueError(f"need 0 < tau <= beta, got tau={tau}, beta={beta}")
    z = np.asarray(z)
    y = np.asarray(labels)
    n = z.shape[0]
    sim = z @ z.T
    same = y[:, None] == y[None, :]
    offdiag = ~np.eye(n, dtype=bool)
    pos = same & offdiag
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    diag = {"skipped_anchors": int(n - n_valid)}
    if n_valid == 0:
        return LossResult(0.0, {"z": np.zeros_like(z)}, diag)

    temps = np.where(same, beta, tau)
    logits = sim / temps
    lse = _logsumexp(logits, axis=1, where=offdiag)
    pos_sum = np.where(pos, sim, 0).sum(axis=1) / tau
    per_anchor = lse - pos_sum / np.maximum(n_pos, 1)
    value = float(per_anchor[valid].sum() / n_valid)

    # dL/dsim
    soft = np.where(offdiag, np.exp(logits - lse[:, None]), 0)
    g = soft / temps - np.where(pos, 1.0 / (tau * np.maximum(n_pos, 1))[:, None], 0)
    g = g * (valid[:, None] / n_valid)
    dz = g @ z + g.T @ z
    return LossResult(value, {"z": dz}, diag)


def compute_prototypes(embeddings, labels, classes=None, normal_label=0) -> PrototypeSet:
    """Per-class mean of support embeddings.

    Members are summed in lexicographic row order, so the result is
    bit-identical under any permutation of the support set.
    """
    emb = np.asarray(embeddings)
    y = np.asarray(labels)
    roster = sorted(set(y.tolist())) if classes is None else list(classes)
    protos = np.empty((len(roster), emb.shape[1]), dtype=emb.dtype)
    for i, c in enumerate(roster):
        members = emb[y == c]
        if members.shape[0] == 0:
            raise PrototypeError(f"class {c!r} has no support embeddings")
        members = members[np.lexsort(members.T[::-1])]
        protos[i] = members.sum(axis=0) / members.shape[0]
    normal = roster.index(normal_label) if normal_label in roster else None
    return PrototypeSet(protos, roster, normal)


def prototypes_backward(dprotos, labels, protos: PrototypeSet):
    """Gradient of a loss w.r.t. the support embeddings, given its gradient w.r.t. the prototypes."""
    idx = protos.index_of(labels)
    counts = np.bincount(idx, minlength=len(protos.classes)).astype(dprotos.dtype)
    return dprotos[idx] / counts[idx][:, None]


def squared_distances(q, c):
    diff = q[:, None, :] - c[None, :, :]
    return (diff * diff).sum(axis=2), diff


def class_probability(q, protos: PrototypeSet):
    """Softmax over negative squared Euclidean distances; rows sum to one."""
    q = np.atleast_2d(q)
    d, _ = squared_distances(q, protos.prototypes)
    logits = -d
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _dist_grads(dlogits, diff):
    # logits = -||q - c||^2: dlogit/dq = -2 diff, dlogit/dc = +2 diff
    dq = -2 * (dlogits[:, :, None] * diff).sum(axis=1)
    dc = 2 * (dlogits[:, :, None] * diff).sum(axis=0)
    return dq, dc


def proto_nll_loss(q, labels, protos: PrototypeSet) -> LossResult:
    """Mean negative log-probability of the true class."""
    idx = protos.index_of(labels)
    d, diff = squared_distances(q, protos.prototypes)
    logits = -d
    lse = _logsumexp(logits, axis=1)
    logp = logits - lse[:, None]
    n = q.shape[0]
    rows = np.arange(n)
    true_logp = logp[rows, idx]
    clamped = true_logp < _LOG_FLOOR
    value = float(-np.where(clamped, _LOG_FLOOR, true_logp).mean())
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, idx] = 1
    dlogits = (p - onehot) * (~clamped)[:, None] / n
    dq, dc = _dist_grads(dlogits, diff)
    return LossResult(value, {"q": dq, "prototypes": dc}, {"clamped": int(clamped.sum())})


def infomax_loss(q, labels, protos: PrototypeSet, normal_label=0) -> LossResult:
    """Binary cross-entropy between queries and the normal prototype.

    ``S(x)`` is the softmax probability of the normal class.  The loss is
    ``-(mean_{normal} log S + mean_{abnormal} log(1 - S))``; an empty side
    contributes nothing and is recorded in the diagnostics.
    """
    if protos.normal_index is None:
        raise PrototypeError("prototype set has no normal class")
    k = protos.normal_index
    y = np.asarray(labels)
    protos.index_of(y)
    is_normal = y == normal_label
    d, diff = squared_distances(q, protos.prototypes)
    logits = -d
    lse = _logsumexp(logits, axis=1)
    p = np.exp(logits - lse[:, None])
    others = np.ones(len(protos.classes), dtype=bool)
    others[k] = False
    log_s = logits[:, k] - lse
    log_not_s = _logsumexp(logits, axis=1, where=np.broadcast_to(others, logits.shape)) - lse

    diag = {"clamped": 0, "empty_normal": 0, "empty_abnormal": 0}
    value = 0.0
    dlogits = np.zeros_like(logits)
    for side, mask, logv in (("normal", is_normal, log_s), ("abnormal", ~is_normal, log_not_s)):
        m = int(mask.sum())
        if m == 0:
            diag[f"empty_{side}"] = 1
            continue
        lv = logv[mask]
        clamped = lv < _LOG_FLOOR
        diag["clamped"] += int(clamped.sum())
        value -= float(np.where(clamped, _LOG_FLOOR, lv).sum() / m)
        # d log S / d logits = e_k - p ; d log(1-S) / d logits = r - p, r = p restricted to others, renormalized
        if side == "normal":
            target = np.zeros_like(p[mask])
            target[:, k] = 1
        else:
            r = np.where(others, p[mask], 0)
            target = r / r.sum(axis=1, keepdims=True)
        g = -(target - p[mask]) / m
        g[clamped] = 0
        dlogits[mask] = g
    dq, dc = _dist_grads(dlogits, diff)
    return LossResult(value, {"q": dq, "prototypes": dc}, diag)


def distance_regularizer(q, labels, protos: PrototypeSet) -> LossResult:
    """Mean squared distance from each query to its own class prototype."""
    idx = protos.index_of(labels)
    diff = q - protos.prototypes[idx]
    n = q.shape[0]
    value = float((diff * diff).sum() / n)
    dq = 2 * diff / n
    dc = np.zeros_like(protos.prototypes)
    np.add.at(dc, idx, -dq)
    return LossResult(value, {"q": dq, "prototypes": dc})


def cfd_loss(classification: LossResult, regularizer: LossResult, alpha: float) -> LossResult:
    """``classification + alpha * regularizer`` with gradients combined the same way."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    grads = dict(classification.grads)
    for k, g in regularizer.grads.items():
        grads[k] = grads[k] + alpha * g if k in grads else alpha * g
    diag = dict(classification.diagnostics)
    for k, v in regularizer.diagnostics.items():
        diag[k] = diag.get(k, 0) + v
    return LossResult(classification.value + alpha * regularizer.value, grads, diag)


def softmax_cross_entropy(logits, targets) -> LossResult:
    """Mean softmax cross-entropy for the linear baseline; ``targets`` are column indices."""
    n = logits.shape[0]
    lse = _logsumexp(logits, axis=1)
    rows = np.arange(n)
    value = float((lse - logits[rows, targets]).mean())
    p = np.exp(logits - lse[:, None])
    p[rows, targets] -= 1
    return LossResult(value, {"logits": p / n})
