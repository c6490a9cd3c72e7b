"""Command-line entry point: ``fslpn <command> [options]``.

Exit codes: 0 success, 2 parse/usage, 3 data, 4 numeric, 5 contract.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import losses as L
from . import pipeline as P
from .checkpoint import check_shapes, checkpoint_load, checkpoint_save
from .config import RunConfig, parse_config, serialize
from .errors import ConfigError, FSLPNError
from .model import FSLPN, ModelConfig

log = logging.getLogger("fslpn")

EXIT_CODES = {"parse": 2, "data": 3, "numeric": 4, "contract": 5}
COMMANDS = ("select-features", "pretrain", "train", "evaluate", "ablate", "sweep", "infer")


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# Preprocessing state
# ---------------------------------------------------------------------------

@dataclass
class Preprocessing:
    schema: str
    encoding: dict
    features: list

    def apply(self, raw: D.RawDataset) -> D.Dataset:
        return D.preprocess(raw, self.encoding, self.features)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        return cls(d["schema"], d["encoding"], list(d["features"]))


def fit_preprocessing(raw: D.RawDataset, cfg: RunConfig):
    enc = D.build_encoding(raw)
    target = cfg.target_count or D.get_schema(cfg.schema).target_count
    report = D.sulov_select(D.preprocess(raw, enc), target, cfg.correlation_threshold, cfg.mi_bins)
    return Preprocessing(cfg.schema, enc, report.kept), report


def prepare_split(train_path, test_path, schema, target_count=None, correlation_threshold=0.7, mi_bins=20):
    """Fit encoding and feature selection on the training file; return (train, test, report)."""
    cfg = RunConfig(schema=schema, target_count=target_count, correlation_threshold=correlation_threshold,
                    mi_bins=mi_bins)
    raw = D.load_dataset(train_path, schema)
    pre, report = fit_preprocessing(raw, cfg)
    return pre.apply(raw), pre.apply(D.load_dataset(test_path, schema)), report


def _load(path, cfg, what="dataset"):
    if not path:
        raise UsageError(f"no {what} given (use --dataset or the [data] section)")
    return D.load_dataset(path, cfg.schema)


def _preprocessing_for(cfg: RunConfig, raw_train=None):
    """Reuse ``preprocess.json`` from the output directory, else fit it on the training file."""
    state = Path(cfg.out_dir) / "preprocess.json"
    if state.exists():
        return Preprocessing.from_dict(json.loads(state.read_text()))
    raw_train = raw_train if raw_train is not None else _load(cfg.train_path, cfg)
    pre, report = fit_preprocessing(raw_train, cfg)
    state.write_text(pre.to_json())
    (Path(cfg.out_dir) / "selection.tsv").write_text(report.to_text())
    return pre


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _echo(cfg: RunConfig, pre: Preprocessing | None = None, model_cfg: ModelConfig | None = None, **extra):
    blob = {"config": serialize(cfg)}
    if pre is not None:
        blob["preprocessing"] = asdict(pre)
    if model_cfg is not None:
        blob["model"] = model_cfg.to_dict()
    blob.update(extra)
    return json.dumps(blob, sort_keys=True)


def _report_text(cfg: RunConfig, command: str, sections: dict) -> str:
    lines = ["[run]", f"command = {command}", f"seed = {cfg.seed}", f"seeds = {','.join(map(str, cfg.seeds))}"]
    for name, body in sections.items():
        lines.append(f"[{name}]")
        if isinstance(body, dict):
            lines += [f"{k} = {v}" for k, v in body.items()]
        else:
            lines.append(body.rstrip("\n"))
    lines.append("[config]")
    lines.append(serialize(cfg).rstrip("\n"))
    return "\n".join(lines) + "\n"


def _write_report(cfg, name, command, sections, started):
    out = Path(cfg.out_dir) / name
    out.write_text(_report_text(cfg, command, sections))
    # wall time lives beside the report so reruns produce identical reports
    out.with_name(out.name + ".timing").write_text(f"wall_time_seconds = {time.perf_counter() - started:.3f}\n")
    return out


def metrics_section(m: P.MetricsReport) -> dict:
    pct = m.percents()
    body = {"episodes": m.episodes, "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn}
    body.update({k: f"{v:.2f}" for k, v in pct.items()})
    for k, v in sorted(m.diagnostics.items()):
        body[f"diag_{k}"] = v
    return body


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_select_features(cfg: RunConfig):
    raw = _load(cfg.train_path, cfg)
    pre, report = fit_preprocessing(raw, cfg)
    out = Path(cfg.out_dir)
    (out / "selection.tsv").write_text(report.to_text())
    (out / "preprocess.json").write_text(pre.to_json())
    D.write_cache(pre.apply(raw), out / "train.fslp")
    print(f"kept {len(report.kept)} features: {', '.join(report.kept)}")


def _model_files(cfg, pre):
    model_cfg = cfg.model_config(len(pre.features))
    return model_cfg, FSLPN(model_cfg)


def cmd_pretrain(cfg: RunConfig):
    t0 = time.perf_counter()
    raw = _load(cfg.train_path, cfg)
    pre = _preprocessing_for(cfg, raw)
    ds = pre.apply(raw)
    model_cfg, model = _model_files(cfg, pre)
    res = P.pretrain_extractor(ds, cfg.train_config(), model)
    ckpt = Path(cfg.checkpoint or Path(cfg.out_dir) / "extractor.ckpt")
    checkpoint_save(res.params, _echo(cfg, pre, model_cfg, stage="pretrain"), ckpt)
    curve = res.losses
    k = min(100, len(curve))
    _write_report(cfg, "pretrain.txt", "pretrain", {
        "result": {"checkpoint": ckpt, "episodes": len(curve),
                   "loss_first_mean": f"{np.mean(curve[:k]):.6f}", "loss_last_mean": f"{np.mean(curve[-k:]):.6f}",
                   "skipped_anchors": res.skipped_anchors}}, t0)
    print(f"wrote {ckpt}")


def _load_checkpoint(cfg):
    if not cfg.checkpoint:
        raise UsageError(f"{cfg.command} needs --checkpoint")
    if not Path(cfg.checkpoint).exists():
        raise UsageError(f"checkpoint {cfg.checkpoint} does not exist")
    params, echo, _ = checkpoint_load(cfg.checkpoint)
    meta = json.loads(echo)
    pre = Preprocessing.from_dict(meta["preprocessing"])
    model_cfg = ModelConfig.from_dict(meta["model"])
    check_shapes(params, FSLPN(model_cfg).init_params(), partitions=("extractor", "head"))
    return params.astype(np.dtype(cfg.dtype)), meta, pre, model_cfg


def cmd_train(cfg: RunConfig):
    t0 = time.perf_counter()
    params, meta, pre, model_cfg = _load_checkpoint(cfg)
    model_cfg.classifier.out_dim = cfg.out_dim
    model = FSLPN(model_cfg)
    ds = pre.apply(_load(cfg.train_path, cfg))
    tcfg = cfg.train_config()
    res = P.train_classifier(ds, params, tcfg, model)
    # reference prototypes for single-record inference
    ref_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[4])
    ep = D.sample_episode(ds, tcfg.ways, tcfg.shots, 0, ref_rng)
    x = ds.features[ep.support_idx][:, None, :].astype(tcfg.np_dtype)
    protos = L.compute_prototypes(model.embed(params, x), ep.support_y, ep.classes)
    params.add("classifier.prototypes", protos.prototypes)
    out = Path(cfg.out_dir) / "model.ckpt"
    checkpoint_save(params, _echo(cfg, pre, model_cfg, stage="train", roster=protos.classes), out)
    k = min(100, len(res.losses))
    _write_report(cfg, "train.txt", "train", {
        "result": {"checkpoint": out, "episodes": len(res.losses),
                   "loss_first_mean": f"{np.mean(res.losses[:k]):.6f}",
                   "loss_last_mean": f"{np.mean(res.losses[-k:]):.6f}",
                   **{f"diag_{a}": b for a, b in sorted(res.diagnostics.items())}}}, t0)
    print(f"wrote {out}")


def cmd_evaluate(cfg: RunConfig):
    t0 = time.perf_counter()
    params, meta, pre, model_cfg = _load_checkpoint(cfg)
    if "classifier.proj.w" not in params:
        raise UsageError("evaluate needs a trained model checkpoint (run `train` first)")
    ds = pre.apply(_load(cfg.test_path or cfg.train_path, cfg))
    m = P.evaluate(ds, params, cfg.train_config(), FSLPN(model_cfg))
    path = _write_report(cfg, "metrics.txt", "evaluate", {"metrics": metrics_section(m)}, t0)
    print(path.read_text().split("[config]")[0], end="")


def _train_test(cfg):
    raw_train = _load(cfg.train_path, cfg)
    pre = _preprocessing_for(cfg, raw_train)
    if not cfg.test_path:
        raise UsageError(f"{cfg.command} needs --test-dataset")
    return pre, pre.apply(raw_train), pre.apply(_load(cfg.test_path, cfg, "test dataset"))


def cmd_ablate(cfg: RunConfig):
    t0 = time.perf_counter()
    pre, train, test = _train_test(cfg)
    rows = P.run_ablation(train, test, cfg.train_config(), cfg.model_config(len(pre.features)), cfg.seeds)
    table = P.format_table(rows)
    (Path(cfg.out_dir) / "ablation.tsv").write_text(table)
    _write_report(cfg, "ablation.txt", "ablate", {"table": table}, t0)
    print(table, end="")


def cmd_sweep(cfg: RunConfig, parameter, values):
    t0 = time.perf_counter()
    if parameter not in P.SWEEP_PARAMETERS:
        raise UsageError(f"--param must be one of {P.SWEEP_PARAMETERS}")
    grid = P.SWEEP_GRIDS[parameter] if values is None else [float(v) if parameter == "alpha" else int(v)
                                                             for v in values.split(",")]
    pre, train, test = _train_test(cfg)
    rows = P.sweep(parameter, grid, train, test, cfg.train_config(), cfg.model_config(len(pre.features)),
                   cfg.seeds)
    table = P.format_table(rows, first_column=parameter)
    (Path(cfg.out_dir) / f"sweep_{parameter}.tsv").write_text(table)
    _write_report(cfg, f"sweep_{parameter}.txt", "sweep", {"table": table}, t0)
    print(table, end="")


def cmd_infer(cfg: RunConfig):
    params, meta, pre, model_cfg = _load_checkpoint(cfg)
    if "classifier.prototypes" not in params:
        raise UsageError("infer needs a checkpoint written by `train`")
    path = cfg.test_path or cfg.train_path
    if not path:
        raise UsageError("infer needs --dataset pointing at the record(s) to classify")
    raw = D.load_dataset(path, cfg.schema, require_labels=False)
    ds = pre.apply(raw)
    model = FSLPN(model_cfg)
    protos = L.PrototypeSet(params["classifier.prototypes"], list(meta["roster"]))
    emb = model.embed(params, ds.features[:, None, :].astype(params["classifier.proj.w"].dtype))
    pred, prob = P.classify(emb, protos)
    names = {D.NORMAL: "normal", D.ABNORMAL: "abnormal"}
    for label, p in zip(pred, prob):
        probs = " ".join(f"p({names[c]})={v:.6f}" for c, v in zip(protos.classes, p))
        print(f"{names[int(label)]}\t{probs}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

FLAG_KEYS = {
    "dataset": "train_path", "test_dataset": "test_path", "schema": "schema", "seed": "seed",
    "alpha": "alpha", "tau": "tau", "beta": "beta", "shots": "shots", "ways": "ways", "queries": "queries",
    "episodes": "episodes", "lr": "learning_rate", "conv_layers": "conv_layers", "out_dim": "out_dim",
    "stage2_loss": "stage2_loss", "eval_episodes": "eval_episodes", "seeds": "seeds",
    "checkpoint": "checkpoint", "out_dir": "out_dir",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [data] [model] [train] [eval] sections")
    common.add_argument("--dataset", help="input CSV (training data; test data for evaluate; records for infer)")
    common.add_argument("--test-dataset", help="held-out CSV for ablate / sweep")
    common.add_argument("--schema", choices=sorted(D.SCHEMAS))
    common.add_argument("--seed", type=int)
    common.add_argument("--seeds", help="comma-separated seeds for ablate / sweep")
    common.add_argument("--out-dir")
    common.add_argument("--checkpoint")
    for flag in ("alpha", "tau", "beta", "lr"):
        common.add_argument(f"--{flag}", type=float)
    for flag in ("shots", "ways", "queries", "episodes", "conv-layers", "out-dim", "eval-episodes"):
        common.add_argument(f"--{flag}", type=int)
    common.add_argument("--stage2-loss", choices=P.STAGE2_LOSSES)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fslpn", description="Few-shot prototypical anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "sweep":
            sp.add_argument("--param", required=True, choices=P.SWEEP_PARAMETERS)
            sp.add_argument("--values", help="comma-separated values (default: the standard grid)")
    return parser


def resolve(args) -> RunConfig:
    overrides = {"command": args.command}
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    cfg = parse_config(args.config, overrides)
    if args.command == "evaluate" and args.dataset:
        cfg.test_path = args.dataset
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        if args.command == "select-features":
            cmd_select_features(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.param, args.values)
        else:
            cmd_infer(cfg)
    except FSLPNError as exc:
        print(f"fslpn: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(f"fslpn: data error: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
