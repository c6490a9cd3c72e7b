"""Residual 1-D extractor, contrastive head, prototype embedding and the linear baseline.

Parameters live in a :class:`~fslpn.numerics.ParameterSet`; the classes here
hold configuration only, so one instance can run any compatible set.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError


@dataclass
class ExtractorConfig:
    input_length: int = 13
    channels: int = 64
    conv_layers: int = 9
    kernel_size: int = 3

    def __post_init__(self):
        if self.conv_layers < 1 or (self.conv_layers - 1) % 2:
            raise ValueError(f"conv_layers must be 1 + 2*blocks, got {self.conv_layers}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd so padding preserves length")

    @property
    def blocks(self) -> int:
        return (self.conv_layers - 1) // 2

    def parameter_count(self) -> int:
        c, k = self.channels, self.kernel_size
        stem = c * k + 2 * c
        block = 2 * (c * c * k + 2 * c)
        return stem + self.blocks * block


@dataclass
class HeadConfig:
    hidden: int = 128
    out: int = 128


@dataclass
class ClassifierConfig:
    out_dim: int = 32


@dataclass
class ModelConfig:
    extractor: ExtractorConfig
    head: HeadConfig
    classifier: ClassifierConfig

    @classmethod
    def default(cls, input_length=13, **kw):
        ext = {k: kw.pop(k) for k in ("channels", "conv_layers", "kernel_size") if k in kw}
        out_dim = kw.pop("out_dim", 32)
        if kw:
            raise TypeError(f"unknown model options {sorted(kw)}")
        return cls(ExtractorConfig(input_length, **ext), HeadConfig(), ClassifierConfig(out_dim))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(ExtractorConfig(**d["extractor"]), HeadConfig(**d["head"]), ClassifierConfig(**d["classifier"]))


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Extractor
# ---------------------------------------------------------------------------

class Extractor:
    """Stem conv-BN-ReLU followed by ``blocks`` residual blocks, no pooling inside.

    Each block is conv-BN-ReLU-conv-BN plus the identity shortcut, then ReLU.
    Convolutions here carry no bias; the following batch norm's shift covers it.
    All convolutions are stride 1 with same padding, so the feature map keeps
    the input length.
    """

    prefix = "extractor"

    def __init__(self, config: ExtractorConfig):
        self.config = config

    def _layers(self):
        yield "stem", 1
        for b in range(self.config.blocks):
            yield f"block{b}.conv1", self.config.channels
            yield f"block{b}.conv2", self.config.channels

    def init_params(self, params: nx.ParameterSet, rng, dtype=np.float32):
        c, k = self.config.channels, self.config.kernel_size
        for name, cin in self._layers():
            p = f"{self.prefix}.{name}"
            params.add(f"{p}.w", _kaiming(rng, (c, cin, k), cin * k, dtype))
            params.add(f"{p}.bn.gamma", np.ones(c, dtype))
            params.add(f"{p}.bn.beta", np.zeros(c, dtype))
            params.add(f"{p}.bn.running_mean", np.zeros(c, dtype))
            params.add(f"{p}.bn.running_var", np.ones(c, dtype))

    def _conv_bn(self, params, name, x, train):
        p = f"{self.prefix}.{name}"
        pad = self.config.kernel_size // 2
        h, c1 = nx.conv1d_forward(x, params[f"{p}.w"], None, 1, pad)
        h, c2 = nx.batch_norm_forward(h, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"],
                                      params[f"{p}.bn.running_mean"], params[f"{p}.bn.running_var"], train)
        return h, (c1, c2)

    def _conv_bn_backward(self, name, dh, cache, grads):
        p = f"{self.prefix}.{name}"
        c1, c2 = cache
        dh, grads[f"{p}.bn.gamma"], grads[f"{p}.bn.beta"] = nx.batch_norm_backward(dh, c2)
        dx, grads[f"{p}.w"], _ = nx.conv1d_backward(dh, c1)
        return dx

    def forward(self, params, x, train=False):
        """x[B,1,F] -> (feature map [B,Cw,F], pooled [B,Cw], cache)."""
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.config.input_length:
            raise DimensionError(
                f"extractor expects input (B, 1, {self.config.input_length}), got {x.shape}")
        caches = []
        h, cb = self._conv_bn(params, "stem", x, train)
        h, mask = nx.relu_forward(h)
        caches.append((cb, mask))
        for b in range(self.config.blocks):
            shortcut = h
            u, c1 = self._conv_bn(params, f"block{b}.conv1", h, train)
            u, m1 = nx.relu_forward(u)
            u, c2 = self._conv_bn(params, f"block{b}.conv2", u, train)
            h, m2 = nx.relu_forward(u + shortcut)
            caches.append((c1, m1, c2, m2))
        pooled, pc = nx.global_avg_pool_forward(h)
        return h, pooled, (caches, pc)

    @staticmethod
    def activation_pattern(cache) -> bytes:
        caches, _ = cache
        masks = [caches[0][1]] + [m for c in caches[1:] for m in (c[1], c[3])]
        return b"".join(np.packbits(m).tobytes() for m in masks)

    def backward(self, dmap, dpooled, cache, need_input=False):
        """Gradients for all extractor parameters given upstream grads of the map and/or pooled output."""
        caches, pc = cache
        dh = np.zeros(pc, dtype=(dmap if dmap is not None else dpooled).dtype)
        if dmap is not None:
            dh += dmap
        if dpooled is not None:
            dh += nx.global_avg_pool_backward(dpooled, pc)
        grads = {}
        for b in reversed(range(self.config.blocks)):
            c1, m1, c2, m2 = caches[b + 1]
            ds = nx.relu_backward(dh, m2)
            du = self._conv_bn_backward(f"block{b}.conv2", ds, c2, grads)
            du = nx.relu_backward(du, m1)
            dh = ds + self._conv_bn_backward(f"block{b}.conv1", du, c1, grads)
        cb, mask = caches[0]
        dx = self._conv_bn_backward("stem", nx.relu_backward(dh, mask), cb, grads)
        if need_input:
            grads["input"] = dx
        return grads


# ---------------------------------------------------------------------------
# Contrastive head
# ---------------------------------------------------------------------------

class Head:
    prefix = "head"

    def __init__(self, config: HeadConfig, in_dim: int):
        self.config = config
        self.in_dim = in_dim

    def init_params(self, params, rng, dtype=np.float32):
        h, o = self.config.hidden, self.config.out
        params.add("head.fc1.w", _kaiming(rng, (self.in_dim, h), self.in_dim, dtype))
        params.add("head.fc1.b", np.zeros(h, dtype))
        params.add("head.fc2.w", _kaiming(rng, (h, o), h, dtype))
        params.add("head.fc2.b", np.zeros(o, dtype))

    def forward(self, params, pooled):
        """pooled[B,Cw] -> z[B,out] on the unit hypersphere."""
        h, c1 = nx.dense_forward(pooled, params["head.fc1.w"], params["head.fc1.b"])
        h, m = nx.relu_forward(h)
        h, c2 = nx.dense_forward(h, params["head.fc2.w"], params["head.fc2.b"])
        z, cn = nx.l2_normalize_rows(h)
        return z, (c1, m, c2, cn)

    def backward(self, dz, cache):
        c1, m, c2, cn = cache
        grads = {}
        dh = nx.l2_normalize_backward(dz, cn)
        dh, grads["head.fc2.w"], grads["head.fc2.b"] = nx.dense_backward(dh, c2)
        dh = nx.relu_backward(dh, m)
        dx, grads["head.fc1.w"], grads["head.fc1.b"] = nx.dense_backward(dh, c1)
        return dx, grads


# ---------------------------------------------------------------------------
# Prototype embedding
# ---------------------------------------------------------------------------

class Classifier:
    """Width-1 convolution over the extractor's feature map, ReLU, global average pool."""

    prefix = "classifier"

    def __init__(self, config: ClassifierConfig, in_channels: int):
        self.config = config
        self.in_channels = in_channels

    def init_params(self, params, rng, dtype=np.float32):
        o, c = self.config.out_dim, self.in_channels
        params.add("classifier.proj.w", _kaiming(rng, (o, c, 1), c, dtype))
        params.add("classifier.proj.b", np.zeros(o, dtype))

    def forward(self, params, fmap):
        h, cc = nx.conv1d_forward(fmap, params["classifier.proj.w"], params["classifier.proj.b"])
        h, m = nx.relu_forward(h)
        emb, pc = nx.global_avg_pool_forward(h)
        return emb, (cc, m, pc)

    def backward(self, demb, cache):
        cc, m, pc = cache
        dh = nx.relu_backward(nx.global_avg_pool_backward(demb, pc), m)
        dmap, dw, db = nx.conv1d_backward(dh, cc)
        return dmap, {"classifier.proj.w": dw, "classifier.proj.b": db}


class LinearBaseline:
    """Single dense layer from pooled features to class logits."""

    def __init__(self, in_dim: int, n_classes: int = 2):
        self.in_dim = in_dim
        self.n_classes = n_classes

    def init_params(self, params, rng, dtype=np.float32):
        params.add("classifier.linear.w", _kaiming(rng, (self.in_dim, self.n_classes), self.in_dim, dtype))
        params.add("classifier.linear.b", np.zeros(self.n_classes, dtype))

    def forward(self, params, pooled):
        return nx.dense_forward(pooled, params["classifier.linear.w"], params["classifier.linear.b"])

    def backward(self, dlogits, cache):
        _, dw, db = nx.dense_backward(dlogits, cache)
        return {"classifier.linear.w": dw, "classifier.linear.b": db}


# ---------------------------------------------------------------------------
# Assembled network
# ---------------------------------------------------------------------------

class FSLPN:
    """The three components wired together over one ParameterSet."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.extractor = Extractor(config.extractor)
        self.head = Head(config.head, config.extractor.channels)
        self.classifier = Classifier(config.classifier, config.extractor.channels)
        self.linear = LinearBaseline(config.extractor.channels)

    def init_params(self, seed=0, dtype=np.float32, linear=False) -> nx.ParameterSet:
        rng = np.random.default_rng(seed)
        params = nx.ParameterSet()
        self.extractor.init_params(params, rng, dtype)
        self.head.init_params(params, rng, dtype)
        self.classifier.init_params(params, rng, dtype)
        if linear:
            self.linear.init_params(params, rng, dtype)
        return params

    def embed(self, params, x):
        """Eval-mode embedding F_phi(f(x)) without caches, for inference."""
        fmap, _, _ = self.extractor.forward(params, x, train=False)
        emb, _ = self.classifier.forward(params, fmap)
        return emb
