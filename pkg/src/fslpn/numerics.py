"""Dense numpy layers with hand-derived backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and that cache.  Arrays keep whatever dtype
they arrive in, so running a graph in float64 is just a matter of casting the
inputs and the :class:`ParameterSet`.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError, OptimizerError, StateError

log = logging.getLogger(__name__)

PARTITIONS = ("extractor", "head", "classifier")
BUFFER_SUFFIXES = (".running_mean", ".running_var", ".prototypes")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ZeroNormWarning(UserWarning):
    pass


def _check_rank(name, arr, rank):
    if arr.ndim != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {arr.shape}")


def assert_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{what}: {bad} non-finite value(s)")


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------

def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


@dataclass
class ParameterSet:
    """Named tensors, each tagged with the partition it belongs to.

    Names are dotted and start with the partition (``extractor.stem.conv.w``).
    Running statistics and stored prototypes are non-trainable buffers; they
    travel with the set (and its checkpoints) but never see the optimizer.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self.partition_of(name) not in PARTITIONS:
            raise KeyError(f"{name!r} does not start with a known partition {PARTITIONS}")
        self.entries[name] = np.asarray(value)

    @staticmethod
    def partition_of(name: str) -> str:
        return name.split(".", 1)[0]

    def __getitem__(self, name):
        return self.entries[name]

    def __setitem__(self, name, value):
        if name not in self.entries:
            raise KeyError(name)
        self.entries[name] = value

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, partition: str | None = None, trainable: bool | None = None) -> list[str]:
        out = []
        for name in self.entries:
            if partition is not None and self.partition_of(name) != partition:
                continue
            if trainable is not None and is_buffer(name) == trainable:
                continue
            out.append(name)
        return out

    def freeze(self, *partitions: str) -> None:
        for p in partitions:
            if p not in PARTITIONS:
                raise KeyError(p)
            self.frozen.add(p)

    def unfreeze(self, *partitions: str) -> None:
        for p in partitions:
            self.frozen.discard(p)

    def is_frozen(self, name: str) -> bool:
        return self.partition_of(name) in self.frozen

    def count(self, partition: str | None = None) -> int:
        return sum(self.entries[n].size for n in self.names(partition, trainable=True))

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.entries.items()}, set(self.frozen))

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.entries.items()}, set(self.frozen))

    def checksum(self, partition: str | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(self.names(partition)):
            arr = np.ascontiguousarray(self.entries[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def merge(self, other: "ParameterSet") -> None:
        for name, value in other.entries.items():
            self.entries[name] = value


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], learning_rate: float) -> ParameterSet:
    """In-place plain SGD on every unfrozen trainable entry."""
    targets = [n for n in params.names(trainable=True) if not params.is_frozen(n)]
    missing = [n for n in targets if n not in grads]
    if missing:
        raise OptimizerError(f"no gradient for unfrozen parameter(s): {', '.join(missing)}")
    for name in targets:
        w = params.entries[name]
        g = grads[name]
        if g.shape != w.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        w -= (learning_rate * g).astype(w.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv1d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation over the last axis: x[B,Cin,L] * w[Cout,Cin,K] + b.

    ``b`` may be None for convolutions feeding a batch norm.
    """
    _check_rank("conv1d input", x, 3)
    _check_rank("conv1d kernel", w, 3)
    B, cin, L = x.shape
    cout, wcin, K = w.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: input channels (axis 1) = {cin} but kernel in-channels (axis 1) = {wcin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {b.shape} != (out-channels,) = ({cout},)")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv1d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if L + 2 * padding < K:
        raise DimensionError(f"conv1d: padded length (axis 2) {L + 2 * padding} shorter than kernel (axis 2) {K}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    # windows[b, c, l, k] = xp[b, c, l*stride + k]
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    out = np.tensordot(windows, w, axes=([1, 3], [1, 2]))  # B, L', Cout
    out = out.transpose(0, 2, 1)
    if b is not None:
        out = out + b[None, :, None]
    cache = (x.shape, windows, w, stride, padding)
    return np.ascontiguousarray(out), cache


def conv1d_backward(dout, cache):
    if cache is None:
        raise StateError("conv1d_backward called without a forward cache")
    x_shape, windows, w, stride, padding = cache
    B, cin, L = x_shape
    cout, _, K = w.shape
    Lout = windows.shape[2]
    if dout.shape != (B, cout, Lout):
        raise DimensionError(f"conv1d_backward: upstream gradient {dout.shape} != forward output {(B, cout, Lout)}")
    dw = np.tensordot(dout, windows, axes=([0, 2], [0, 2]))  # Cout, Cin, K
    db = dout.sum(axis=(0, 2))
    dwin = np.tensordot(dout, w, axes=([1], [0]))  # B, L', Cin, K
    dxp = np.zeros((B, cin, L + 2 * padding), dtype=dout.dtype)
    stop = stride * (Lout - 1) + 1
    for k in range(K):
        dxp[:, :, k:k + stop:stride] += dwin[:, :, :, k].transpose(0, 2, 1)
    dx = dxp[:, :, padding:padding + L] if padding else dxp
    return dx, dw, db


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train,
                       momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization of x[B,C,L].

    In train mode the running statistics are updated in place (running
    variance uses the unbiased batch estimate).
    """
    _check_rank("batch_norm input", x, 3)
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({C},), got {gamma.shape}/{beta.shape}")
    if train:
        m = B * L
        if m < 2:
            raise DegenerateBatchError(f"batch_norm: train mode needs B*L >= 2, got {m}")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, gamma, train)


def batch_norm_backward(dout, cache):
    if cache is None:
        raise StateError("batch_norm_backward called without a forward cache")
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if not train:
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[2]
    dx = (inv_std[None, :, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def global_avg_pool_forward(x):
    _check_rank("global_avg_pool input", x, 3)
    return x.mean(axis=2), x.shape


def global_avg_pool_backward(dout, shape):
    B, C, L = shape
    return np.broadcast_to((dout / L)[:, :, None], shape).copy()


def dense_forward(x, w, b):
    """Affine map x[B,Din] @ w[Din,Dout] + b."""
    _check_rank("dense input", x, 2)
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"dense: input features (axis 1) = {x.shape[1]} but weight rows (axis 0) = {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def l2_normalize_rows(x):
    """Row-wise unit-norm scaling.

    Returns ``(out, cache)``; ``cache`` carries the norms and a zero-row mask.
    All-zero rows are passed through unchanged and raise a
    :class:`ZeroNormWarning` instead of an error.
    """
    _check_rank("l2_normalize_rows input", x, 2)
    # scale by the row max first so squaring neither underflows nor overflows
    with np.errstate(over="ignore", invalid="ignore"):
        peak = np.abs(x).max(axis=1)
        scaled = x / np.where(peak > 0, peak, 1)[:, None]
        norms = peak * np.sqrt((scaled * scaled).sum(axis=1))
    if not np.isfinite(norms).all():
        raise NumericError(f"l2_normalize_rows: non-finite norm in {int((~np.isfinite(norms)).sum())} row(s) "
                           f"(max |x| {float(np.nanmax(np.abs(x))):.3g})")
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero row(s) left unnormalized", ZeroNormWarning, stacklevel=2)
    safe = np.where(zero, 1, norms)
    out = x / safe[:, None]
    return out, (out, safe, zero)


def l2_normalize_backward(dout, cache):
    out, norms, zero = cache
    proj = (dout * out).sum(axis=1, keepdims=True)
    dx = (dout - out * proj) / norms[:, None]
    dx[zero] = dout[zero]
    return dx


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_probes: int
    tolerance: float
    per_input: dict[str, float] = field(default_factory=dict)
    excluded: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} at {self.worst} "
                f"over {self.n_probes} probes ({self.excluded} excluded at kinks)")


def grad_check(func: Callable[[dict], float], inputs: Mapping[str, np.ndarray],
               analytic: Mapping[str, np.ndarray], tolerance: float = 1e-4, step: float = 1e-5,
               max_probes: int | None = None, rng=None, skip: Mapping[str, np.ndarray] | None = None,
               floor: float = 1e-5, pattern: Callable[[dict], bytes] | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar function with central differences.

    ``func`` receives a dict of float64 arrays and returns a scalar.  Only the
    names in ``analytic`` are probed; ``skip`` masks out entries (e.g. ReLU
    inputs near the kink).  Relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.

    ``pattern`` maps the inputs to an activation signature (e.g. packed ReLU
    masks); a probe whose +/- step changes the signature straddles a kink and
    is excluded rather than compared.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    for k, v in arrays.items():
        assert_finite(v, f"grad_check input {k}")
    worst, worst_where, total, excluded = 0.0, "", 0, 0
    base_sig = pattern(arrays) if pattern is not None else None
    per_input = {}
    for name, grad in analytic.items():
        grad = np.asarray(grad, dtype=np.float64)
        assert_finite(grad, f"analytic gradient {name}")
        x = arrays[name]
        if grad.shape != x.shape:
            raise DimensionError(f"grad_check: gradient for {name} has shape {grad.shape}, input {x.shape}")
        candidates = np.arange(x.size)
        if skip is not None and name in skip:
            candidates = candidates[~np.asarray(skip[name]).ravel()]
        if max_probes is not None and candidates.size > max_probes:
            candidates = np.sort(rng.choice(candidates, max_probes, replace=False))
        flat = x.reshape(-1)
        local = 0.0
        for i in candidates:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(func(arrays))
            sig_p = pattern(arrays) if pattern is not None else None
            flat[i] = orig - step
            fm = float(func(arrays))
            sig_m = pattern(arrays) if pattern is not None else None
            flat[i] = orig
            if pattern is not None and (sig_p != base_sig or sig_m != base_sig):
                excluded += 1
                continue
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite function value probing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            ana = grad.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            local = max(local, rel)
            if rel > worst:
                worst, worst_where = rel, f"{name}[{np.unravel_index(i, x.shape)}]"
        per_input[name] = local
        total += candidates.size
    return GradCheckReport(worst, worst_where, total - excluded, tolerance, per_input, excluded)


def weighted_sum_check(forward: Callable[..., np.ndarray], backward: Callable[[np.ndarray], Iterable[np.ndarray]],
                       inputs: dict[str, np.ndarray], names: list[str], tolerance=1e-4, seed=0, **kw) -> GradCheckReport:
    """Grad-check an array-valued op through the scalar ``sum(out * R)`` with fixed random ``R``.

    ``forward(**inputs)`` returns the output; ``backward(R)`` returns the
    analytic gradients for ``names`` in order, given the forward just run on
    the unperturbed inputs.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    out = forward(**inputs)
    weights = rng.standard_normal(out.shape)
    grads = dict(zip(names, backward(weights)))
    return grad_check(lambda a: float((forward(**a) * weights).sum()), inputs, grads, tolerance, rng=rng, **kw)
