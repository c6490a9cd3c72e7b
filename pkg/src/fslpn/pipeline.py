"""Two-stage training, evaluation, metrics and the ablation / sweep drivers."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import numerics as nx
from .data import ABNORMAL, NORMAL, Dataset, sample_episode
from .errors import ContractError, FSLPNError, NumericError
from .model import FSLPN, Classifier, ModelConfig

log = logging.getLogger(__name__)

STAGE2_LOSSES = ("nll", "infomax")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    episodes: int = 1000
    classifier_episodes: int | None = None   # defaults to ``episodes``
    ways: int = 2
    shots: int = 2
    queries: int = 15
    tau: float = 0.1
    beta: float = 1.0
    alpha: float = 0.001
    stage2_loss: str = "infomax"
    seed: int = 0
    dtype: str = "float32"
    eval_episodes: int = 200

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.tau <= self.beta:
            raise ValueError("need 0 < tau <= beta")
        if self.stage2_loss not in STAGE2_LOSSES:
            raise ValueError(f"stage2_loss must be one of {STAGE2_LOSSES}")

    @property
    def n_classifier_episodes(self) -> int:
        return self.episodes if self.classifier_episodes is None else self.classifier_episodes

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def seed_streams(seed: int):
    """Independent generators for init, stage 1, stage 2 and evaluation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _batch(ds: Dataset, idx, dtype):
    return ds.features[idx][:, None, :].astype(dtype)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _ratio(a, b):
    return a / b if b else 0.0


@dataclass
class MetricsReport:
    """Confusion counts with "abnormal" as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    episodes: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)

    @property
    def far(self):
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    def add(self, y_true, y_pred):
        t = np.asarray(y_true) != NORMAL
        p = np.asarray(y_pred) != NORMAL
        self.tp += int((t & p).sum())
        self.fp += int((~t & p).sum())
        self.tn += int((~t & ~p).sum())
        self.fn += int((t & ~p).sum())

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        diag = dict(self.diagnostics)
        for k, v in other.diagnostics.items():
            diag[k] = diag.get(k, 0) + v
        return MetricsReport(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                             self.fn + other.fn, self.episodes + other.episodes, diag)

    def percents(self) -> dict:
        return {k: 100 * getattr(self, k) for k in ("precision", "recall", "f1", "far", "accuracy")}


def mean_percents(reports) -> dict:
    rows = [r.percents() for r in reports]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


# ---------------------------------------------------------------------------
# Stage 1: contrastive pretraining
# ---------------------------------------------------------------------------

def _check_grads(grads, where):
    bad = sorted(n for n, g in grads.items() if not np.isfinite(g).all())
    if bad:
        raise NumericError(f"{where}: non-finite gradient in {', '.join(bad[:3])}"
                           f"{' ...' if len(bad) > 3 else ''}; lower the learning rate")


@dataclass
class PretrainResult:
    params: nx.ParameterSet
    losses: list
    skipped_anchors: int = 0


def pretrain_extractor(ds: Dataset, cfg: TrainConfig, model: FSLPN, params: nx.ParameterSet | None = None,
                       cii: bool = True) -> PretrainResult:
    """SGD on extractor + head with the supervised contrastive loss.

    Each episode's support and query samples form one mini-batch.  With
    ``cii=False`` the same-class temperature equals ``tau``.
    """
    init_rng, stage1_rng, _, _ = seed_streams(cfg.seed)
    if params is None:
        params = model.init_params(int(init_rng.integers(2**31)), cfg.np_dtype)
    beta = cfg.beta if cii else cfg.tau
    params.unfreeze("extractor", "head")
    params.freeze("classifier")
    curve, skipped = [], 0
    for ep in range(cfg.episodes):
        episode = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, stage1_rng)
        idx = np.concatenate([episode.support_idx, episode.query_idx])
        y = np.concatenate([episode.support_y, episode.query_y])
        x = _batch(ds, idx, cfg.np_dtype)
        _, pooled, ecache = model.extractor.forward(params, x, train=True)
        z, hcache = model.head.forward(params, pooled)
        res = L.supcon_cii_loss(z, y, cfg.tau, beta)
        if not np.isfinite(res.value):
            raise NumericError(f"stage 1 episode {ep}: non-finite loss {res.value} "
                               f"(max |pooled| {float(np.abs(pooled).max()):.3g}, last losses {curve[-3:]})")
        dpooled, grads = model.head.backward(res.grads["z"], hcache)
        grads.update(model.extractor.backward(None, dpooled, ecache))
        _check_grads(grads, f"stage 1 episode {ep}")
        nx.sgd_step(params, grads, cfg.learning_rate)
        curve.append(res.value)
        skipped += res.diagnostics["skipped_anchors"]
    params.unfreeze("classifier")
    return PretrainResult(params, curve, skipped)


# ---------------------------------------------------------------------------
# Stage 2: prototype classifier
# ---------------------------------------------------------------------------

class EmbeddingPath:
    """``F_phi(f(x))`` with a frozen extractor, or ``F_phi(x)`` when ``identity`` is set."""

    def __init__(self, model: FSLPN, identity: bool = False):
        self.model = model
        self.identity = identity
        self.classifier = Classifier(model.config.classifier, 1) if identity else model.classifier

    def init_classifier(self, params, rng, dtype):
        for name in params.names("classifier"):
            del params.entries[name]
        self.classifier.init_params(params, rng, dtype)

    def feature_map(self, params, x):
        if self.identity:
            return x
        return self.model.extractor.forward(params, x, train=False)[0]

    def forward(self, params, x):
        return self.classifier.forward(params, self.feature_map(params, x))

    def embed(self, params, x):
        return self.forward(params, x)[0]


def stage2_loss(q, q_y, protos: L.PrototypeSet, selector: str, alpha: float) -> L.LossResult:
    cls = L.infomax_loss(q, q_y, protos) if selector == "infomax" else L.proto_nll_loss(q, q_y, protos)
    if alpha == 0:
        return cls
    return L.cfd_loss(cls, L.distance_regularizer(q, q_y, protos), alpha)


@dataclass
class ClassifierResult:
    params: nx.ParameterSet
    losses: list
    diagnostics: dict


def train_classifier(ds: Dataset, params: nx.ParameterSet, cfg: TrainConfig, model: FSLPN,
                     identity: bool = False) -> ClassifierResult:
    """Fit the prototype embedding on episodes with extractor and head frozen.

    The classifier weights are re-initialized from the seed.  Raises
    :class:`ContractError` if any extractor tensor changed.
    """
    init_rng, _, stage2_rng, _ = seed_streams(cfg.seed)
    init_rng = np.random.default_rng(init_rng.integers(2**31) + 1)
    path = EmbeddingPath(model, identity)
    path.init_classifier(params, init_rng, cfg.np_dtype)
    params.freeze("extractor", "head")
    params.unfreeze("classifier")
    before = params.checksum("extractor")
    curve, diag = [], {}
    for _ in range(cfg.n_classifier_episodes):
        episode = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, stage2_rng)
        ns = len(episode.support_idx)
        x = _batch(ds, np.concatenate([episode.support_idx, episode.query_idx]), cfg.np_dtype)
        emb, ccache = path.forward(params, x)
        protos = L.compute_prototypes(emb[:ns], episode.support_y, episode.classes)
        res = stage2_loss(emb[ns:], episode.query_y, protos, cfg.stage2_loss, cfg.alpha)
        demb = np.concatenate([L.prototypes_backward(res.grads["prototypes"], episode.support_y, protos),
                               res.grads["q"]]).astype(emb.dtype)
        _, grads = path.classifier.backward(demb, ccache)
        if not np.isfinite(res.value):
            raise NumericError(f"stage 2 episode {len(curve)}: non-finite loss {res.value}")
        _check_grads(grads, f"stage 2 episode {len(curve)}")
        nx.sgd_step(params, grads, cfg.learning_rate)
        curve.append(res.value)
        for k, v in res.diagnostics.items():
            diag[k] = diag.get(k, 0) + v
    if params.checksum("extractor") != before:
        raise ContractError("extractor parameters changed during classifier training")
    params.unfreeze("extractor", "head")
    return ClassifierResult(params, curve, diag)


def train_linear(ds: Dataset, params: nx.ParameterSet, cfg: TrainConfig, model: FSLPN) -> ClassifierResult:
    """Softmax-regression baseline on pooled extractor features, extractor frozen."""
    init_rng, _, stage2_rng, _ = seed_streams(cfg.seed)
    for name in params.names("classifier"):
        del params.entries[name]
    model.linear.init_params(params, np.random.default_rng(init_rng.integers(2**31) + 2), cfg.np_dtype)
    params.freeze("extractor", "head")
    before = params.checksum("extractor")
    curve = []
    for _ in range(cfg.n_classifier_episodes):
        episode = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, stage2_rng)
        idx = np.concatenate([episode.support_idx, episode.query_idx])
        y = np.concatenate([episode.support_y, episode.query_y])
        _, pooled, _ = model.extractor.forward(params, _batch(ds, idx, cfg.np_dtype), train=False)
        logits, cache = model.linear.forward(params, pooled)
        res = L.softmax_cross_entropy(logits, y)
        nx.sgd_step(params, model.linear.backward(res.grads["logits"].astype(logits.dtype), cache),
                    cfg.learning_rate)
        curve.append(res.value)
    if params.checksum("extractor") != before:
        raise ContractError("extractor parameters changed during classifier training")
    params.unfreeze("extractor", "head")
    return ClassifierResult(params, curve, {})


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def classify(q, protos: L.PrototypeSet):
    """Nearest prototype by the softmax of negative squared distances."""
    p = L.class_probability(q, protos)
    return np.asarray(protos.classes)[p.argmax(axis=1)], p


def evaluate(ds: Dataset, params: nx.ParameterSet, cfg: TrainConfig, model: FSLPN,
             episodes: int | None = None, identity: bool = False, linear: bool = False,
             predictor=None) -> MetricsReport:
    """Few-shot evaluation over fresh episodes of ``ds``; counts are summed across episodes.

    ``predictor(episode) -> labels`` replaces the model, which is how the
    oracle sanity check injects ground truth.
    """
    _, _, _, eval_rng = seed_streams(cfg.seed)
    episodes = cfg.eval_episodes if episodes is None else episodes
    path = EmbeddingPath(model, identity)
    report = MetricsReport()
    for _ in range(episodes):
        episode = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, eval_rng)
        if predictor is not None:
            pred = predictor(episode)
        elif linear:
            x = _batch(ds, episode.query_idx, cfg.np_dtype)
            _, pooled, _ = model.extractor.forward(params, x, train=False)
            logits, _ = model.linear.forward(params, pooled)
            pred = logits.argmax(axis=1)
        else:
            ns = len(episode.support_idx)
            x = _batch(ds, np.concatenate([episode.support_idx, episode.query_idx]), cfg.np_dtype)
            emb = path.embed(params, x)
            protos = L.compute_prototypes(emb[:ns], episode.support_y, episode.classes)
            pred, _ = classify(emb[ns:], protos)
        report.add(episode.query_y, pred)
        report.episodes += 1
    return report


# ---------------------------------------------------------------------------
# End-to-end runs, ablation and sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    pretrain: bool = True
    cii: bool = True
    stage2: str = "infomax"          # nll | infomax | linear
    regularize: bool = True


ABLATION_VARIANTS = (
    Variant("PN", pretrain=False, cii=False, stage2="nll", regularize=False),
    Variant("F(·) + linerclassifier", cii=False, stage2="linear", regularize=False),
    Variant("F(·) + PN", cii=False, stage2="nll", regularize=False),
    Variant("F(·) + PN + CII", cii=True, stage2="nll", regularize=False),
    Variant("F(·) + PN +CII + SPinfomax (ours)", cii=True, stage2="infomax", regularize=True),
)
FULL = ABLATION_VARIANTS[-1]


@dataclass
class RunResult:
    variant: Variant
    seed: int
    metrics: MetricsReport | None
    params: nx.ParameterSet | None = None
    pretrain_losses: list = field(default_factory=list)
    classifier_losses: list = field(default_factory=list)
    error: str | None = None
    wall_time: float = 0.0


class PretrainCache:
    """Reuses stage-1 results across variants / sweep points with identical inputs."""

    def __init__(self):
        self._store = {}

    def get(self, ds, cfg, model, cii):
        key = (id(ds), cii, repr(model.config.extractor), repr(model.config.head),
               cfg.seed, cfg.episodes, cfg.learning_rate, cfg.ways, cfg.shots, cfg.queries,
               cfg.tau, cfg.beta if cii else cfg.tau, cfg.dtype)
        if key not in self._store:
            self._store[key] = pretrain_extractor(ds, cfg, model, cii=cii)
        res = self._store[key]
        return res.params.copy(), res.losses


def run_variant(train: Dataset, test: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
                variant: Variant = FULL, cache: PretrainCache | None = None) -> RunResult:
    t0 = time.perf_counter()
    model = FSLPN(model_cfg)
    cfg = replace(cfg, stage2_loss=variant.stage2 if variant.stage2 != "linear" else cfg.stage2_loss,
                  alpha=cfg.alpha if variant.regularize else 0.0)
    pre_losses = []
    if variant.pretrain:
        cache = cache or PretrainCache()
        params, pre_losses = cache.get(train, cfg, model, variant.cii)
    else:
        params = nx.ParameterSet()
    if variant.stage2 == "linear":
        res = train_linear(train, params, cfg, model)
        metrics = evaluate(test, params, cfg, model, linear=True)
    else:
        identity = not variant.pretrain
        res = train_classifier(train, params, cfg, model, identity=identity)
        metrics = evaluate(test, params, cfg, model, identity=identity)
    metrics.diagnostics.update(res.diagnostics)
    return RunResult(variant, cfg.seed, metrics, params, pre_losses, res.losses,
                     wall_time=time.perf_counter() - t0)


def _guarded(fn, variant, seed):
    try:
        return fn()
    except FSLPNError as exc:
        log.warning("variant %s seed %d failed: %s", variant.name, seed, exc)
        return RunResult(variant, seed, None, error=f"{type(exc).__name__}: {exc}")


@dataclass
class TableRow:
    label: str
    runs: list

    @property
    def failed(self):
        return [r for r in self.runs if r.error]

    def mean(self):
        ok = [r.metrics for r in self.runs if r.metrics is not None]
        return mean_percents(ok) if ok else None


def run_ablation(train: Dataset, test: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
                 seeds=(0,), variants=ABLATION_VARIANTS) -> list:
    """Train and evaluate each variant under the same seeds; failures are annotated, not raised."""
    cache = PretrainCache()
    rows = []
    for v in variants:
        runs = []
        for s in seeds:
            scfg = replace(cfg, seed=s)
            runs.append(_guarded(lambda: run_variant(train, test, scfg, model_cfg, v, cache), v, s))
        rows.append(TableRow(v.name, runs))
        log.info("ablation %s: %s", v.name, rows[-1].mean())
    return rows


SWEEP_PARAMETERS = ("conv_layers", "out_dim", "alpha", "shots")
SWEEP_GRIDS = {
    "conv_layers": (1, 5, 9, 13, 17),
    "out_dim": (16, 32, 64, 128, 256),
    "alpha": (0.0, 0.1, 0.01, 0.001),
    "shots": (10, 5, 3, 2),
}


def sweep(parameter: str, values, train: Dataset, test: Dataset, cfg: TrainConfig,
          model_cfg: ModelConfig, seeds=(0,), variant: Variant = FULL) -> list:
    """One train+evaluate cycle per value (per seed) of a model or training knob."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    cache = PretrainCache()
    rows = []
    for value in values:
        mc = ModelConfig.from_dict(model_cfg.to_dict())
        c = cfg
        if parameter == "conv_layers":
            mc.extractor.conv_layers = int(value)
        elif parameter == "out_dim":
            mc.classifier.out_dim = int(value)
        elif parameter == "alpha":
            c = replace(cfg, alpha=float(value))
        else:
            c = replace(cfg, shots=int(value))
        runs = []
        for s in seeds:
            scfg = replace(c, seed=s)
            try:
                runs.append(run_variant(train, test, scfg, mc, variant, cache))
            except (FSLPNError, ValueError) as exc:
                runs.append(RunResult(variant, s, None, error=f"{type(exc).__name__}: {exc}"))
        rows.append(TableRow(f"{parameter}={value}", runs))
    return rows


def format_table(rows, first_column="method", sep="\t") -> str:
    """Delimiter-separated table, percentages to two decimals, failures annotated."""
    cols = ("precision", "recall", "f1", "far", "accuracy")
    lines = [sep.join((first_column,) + cols + ("seeds", "note"))]
    for row in rows:
        m = row.mean()
        cells = [f"{m[c]:.2f}" for c in cols] if m else ["nan"] * len(cols)
        note = "; ".join(f"seed {r.seed}: {r.error}" for r in row.failed)
        lines.append(sep.join([row.label] + cells + [str(len(row.runs) - len(row.failed)), note or "-"]))
    return "\n".join(lines) + "\n"


def config_echo(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> dict:
    echo = {"train": asdict(cfg)}
    if model_cfg is not None:
        echo["model"] = model_cfg.to_dict()
    return echo
