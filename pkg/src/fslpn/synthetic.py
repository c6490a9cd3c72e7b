"""Synthetic flow records in the UNSW_NB15 / NSL_KDD file layouts.

Used by the tests and the demo scripts when the real datasets are not
available.  Records are drawn from class-conditional log-normal profiles so
that a subset of columns carries label information, a few columns are
near-duplicates of others, and some are pure noise or constant.
"""
from __future__ import annotations

import csv

import numpy as np

from .data import NSL_FAMILIES, UNSW_ATTACKS, Dataset, get_schema

_CATEGORY_VALUES = {
    "proto": ["tcp", "udp", "unas", "arp", "ospf", "sctp"],
    "service": ["-", "http", "dns", "smtp", "ftp-data", "ftp", "ssh", "pop3"],
    "state": ["INT", "FIN", "CON", "REQ", "RST"],
    "protocol_type": ["tcp", "udp", "icmp"],
    "flag": ["SF", "S0", "REJ", "RSTR", "SH", "RSTO"],
}
_NSL_SERVICE = ["http", "private", "domain_u", "smtp", "ftp_data", "eco_i", "other", "ecr_i", "telnet"]


def _profiles(n_features, rng, informative, separation):
    """Per-feature log-scale means for (normal, abnormal) and a shared spread."""
    base = rng.uniform(-1.0, 4.0, n_features)
    shift = np.zeros(n_features)
    idx = rng.choice(n_features, informative, replace=False)
    shift[idx] = rng.choice([-1, 1], informative) * rng.uniform(0.5, 1.0, informative) * separation
    spread = rng.uniform(0.3, 0.9, n_features)
    return base, base + shift, spread


def make_records(schema: str, n: int, seed: int = 0, abnormal_fraction: float = 0.5,
                 informative: int = 12, separation: float = 1.5, profile_seed: int = 1234):
    """Return ``(header, rows)`` for ``n`` synthetic records.

    ``profile_seed`` fixes the class profiles, so train and test files drawn
    with different ``seed`` share one distribution.
    """
    sch = get_schema(schema)
    prof_rng = np.random.default_rng(profile_seed)
    rng = np.random.default_rng(seed)
    numeric = [f for f in sch.features if f not in sch.categorical]
    n_num = len(numeric)
    mu_n, mu_a, spread = _profiles(n_num, prof_rng, min(informative, n_num), separation)
    dup_of = {n_num - 1: 0, n_num - 2: 1}      # near-duplicate columns
    const_col = n_num - 3
    cat_probs = {}
    for c in sch.categorical:
        values = _NSL_SERVICE if (schema == "nsl_kdd" and c == "service") else _CATEGORY_VALUES[c]
        cat_probs[c] = (values, prof_rng.dirichlet(np.ones(len(values)) * 2),
                        prof_rng.dirichlet(np.ones(len(values)) * 2))

    labels = (rng.random(n) < abnormal_fraction).astype(int)
    z = rng.standard_normal((n, n_num))
    logx = np.where(labels[:, None] == 1, mu_a, mu_n) + z * spread
    x = np.expm1(np.clip(logx, 0, 12))
    for j, src in dup_of.items():
        x[:, j] = x[:, src] * 1.01 + rng.normal(0, 1e-3, n)
    x[:, const_col] = 0.0

    if schema == "unsw_nb15":
        attacks = [a for a in UNSW_ATTACKS if a != "Backdoors"]
        cats = np.where(labels == 1, rng.choice(attacks, n), "Normal")
    else:
        names = [a for fam in NSL_FAMILIES.values() for a in fam[:2]]
        cats = np.where(labels == 1, rng.choice(names, n), "normal")

    cat_cols = {}
    for c, (values, p_norm, p_abn) in cat_probs.items():
        draw_n = rng.choice(len(values), n, p=p_norm)
        draw_a = rng.choice(len(values), n, p=p_abn)
        cat_cols[c] = np.array(values)[np.where(labels == 1, draw_a, draw_n)]

    header = list(sch.features) + list(sch.trailing)
    rows = []
    num_pos = {f: i for i, f in enumerate(numeric)}
    for i in range(n):
        row = []
        for f in sch.features:
            if f in cat_cols:
                row.append(cat_cols[f][i])
            else:
                row.append(f"{x[i, num_pos[f]]:.6g}")
        if schema == "unsw_nb15":
            row += [cats[i], str(labels[i])]
        else:
            row += [cats[i], str(int(rng.integers(0, 22)))]
        rows.append(row)
    return header, rows


def write_csv(path, schema: str, n: int, seed: int = 0, header: bool = True, **kw) -> None:
    head, rows = make_records(schema, n, seed, **kw)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(head)
        w.writerows(rows)


def duplicated_feature_set(seed: int, n: int = 600):
    """Four features where one is a noisier copy of another.

    Returns ``(Dataset, strong, weak)``: ``weak`` tracks ``strong`` closely
    (|r| well above 0.7) but carries extra label-independent noise, so its
    mutual information with the label is lower.  Column order is shuffled.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    strong = y * 2.0 + rng.normal(0, 0.6, n)
    weak = strong + rng.normal(0, 0.45, n)
    cols = {"strong": strong, "weak": weak, "other": rng.normal(0, 1, n) + 0.5 * y, "noise": rng.normal(0, 1, n)}
    order = [list(cols)[i] for i in rng.permutation(4)]
    x = np.column_stack([cols[c] for c in order])
    return Dataset(x, y.astype(np.int64), order), "strong", "weak"
