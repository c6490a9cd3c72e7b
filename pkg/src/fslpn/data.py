"""Intrusion-record ingestion, encoding, feature selection and episode sampling."""
from __future__ import annotations

import csv
import io
import logging
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SamplingError, SchemaError

log = logging.getLogger(__name__)

NORMAL, ABNORMAL = 0, 1

UNSW_FEATURES = [
    "dur", "proto", "service", "state", "spkts", "dpkts", "sbytes", "dbytes", "rate", "sttl", "dttl",
    "sload", "dload", "sloss", "dloss", "sinpkt", "dinpkt", "sjit", "djit", "swin", "stcpb", "dtcpb",
    "dwin", "tcprtt", "synack", "ackdat", "smean", "dmean", "trans_depth", "response_body_len",
    "ct_srv_src", "ct_state_ttl", "ct_dst_ltm", "ct_src_dport_ltm", "ct_dst_sport_ltm",
    "ct_dst_src_ltm", "is_ftp_login", "ct_ftp_cmd", "ct_flw_http_mthd", "ct_src_ltm", "ct_srv_dst",
    "is_sm_ips_ports",
]
UNSW_ATTACKS = ["Analysis", "Backdoor", "Backdoors", "DoS", "Exploits", "Fuzzers", "Generic",
                "Reconnaissance", "Shellcode", "Worms"]

NSL_FEATURES = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land", "wrong_fragment",
    "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised", "root_shell", "su_attempted",
    "num_root", "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate", "srv_serror_rate",
    "rerror_rate", "srv_rerror_rate", "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate",
    "dst_host_count", "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]
NSL_FAMILIES = {
    "dos": ["back", "land", "neptune", "pod", "smurf", "teardrop", "apache2", "mailbomb", "processtable",
            "udpstorm"],
    "probe": ["ipsweep", "nmap", "portsweep", "satan", "mscan", "saint"],
    "r2l": ["ftp_write", "guess_passwd", "imap", "multihop", "phf", "spy", "warezclient", "warezmaster",
            "sendmail", "named", "snmpgetattack", "snmpguess", "xlock", "xsnoop", "worm", "httptunnel"],
    "u2r": ["buffer_overflow", "loadmodule", "perl", "rootkit", "ps", "sqlattack", "xterm"],
}
NSL_ATTACK_FAMILY = {a: fam for fam, names in NSL_FAMILIES.items() for a in names}


@dataclass(frozen=True)
class Schema:
    name: str
    features: list
    categorical: tuple
    trailing: tuple       # non-feature columns after the features, in file order
    target_count: int


SCHEMAS = {
    "unsw_nb15": Schema("unsw_nb15", UNSW_FEATURES, ("proto", "service", "state"), ("attack_cat", "label"), 13),
    "nsl_kdd": Schema("nsl_kdd", NSL_FEATURES, ("protocol_type", "service", "flag"), ("label", "difficulty"), 15),
}


def get_schema(name) -> Schema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise SchemaError(f"unknown schema {name!r}; expected one of {sorted(SCHEMAS)}") from None


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class RawDataset:
    schema: str
    feature_names: list
    numeric: np.ndarray          # n, F float64; NaN in categorical columns
    categorical: dict            # column -> array of str
    labels: np.ndarray           # n, int64 (0 normal, 1 abnormal)
    categories: np.ndarray       # n, str attack category ("normal" for normal traffic)

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    features: np.ndarray         # n, F float64
    labels: np.ndarray
    feature_names: list
    categories: np.ndarray | None = None
    unknown_categories: int = 0
    zero_rows: int = 0
    _by_class: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_indices(self) -> dict:
        if self._by_class is None:
            self._by_class = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}
        return self._by_class

    def select(self, columns) -> "Dataset":
        pos = [self.feature_names.index(c) for c in columns]
        return Dataset(self.features[:, pos], self.labels, list(columns), self.categories,
                       self.unknown_categories)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _looks_numeric(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def load_dataset(path, schema: str, require_labels: bool = True) -> RawDataset:
    """Parse a UNSW_NB15 or NSL_KDD CSV file.

    UNSW_NB15 files need a header naming the 42 flow features plus
    ``attack_cat`` and ``label`` (an ``id`` column is dropped).  NSL_KDD files
    may have a header or be the headerless 43-column distribution format.
    With ``require_labels=False`` the label columns may be absent (labels are
    then -1), which is how single records are fed to inference.
    """
    sch = get_schema(schema)
    text = Path(path).read_text(encoding="utf-8", errors="replace")
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(t.strip() for t in rows[-1]):
        rows.pop()
    if not rows:
        raise ParseError(f"{path}: empty file, zero records", line=1)

    expected = sch.features + list(sch.trailing)
    first = [t.strip().lower() for t in rows[0]]
    if sch.name == "nsl_kdd" and _looks_numeric(first[0]) and (
            len(first) == len(expected) or (not require_labels and len(first) == len(sch.features))):
        header, body, offset = expected[:len(first)], rows, 1
    else:
        header, body, offset = first, rows[1:], 2
    if not body:
        raise ParseError(f"{path}: header only, zero records", line=offset)

    if not require_labels and not any(c in header for c in sch.trailing):
        expected = list(sch.features)
    missing = [c for c in expected if c not in header]
    if missing:
        raise SchemaError(f"{path}: {sch.name} file lacks column(s) {missing}")
    extra = [c for c in header if c not in expected and c != "id"]
    if extra:
        raise SchemaError(f"{path}: unexpected column(s) {extra} for {sch.name} "
                          f"({len(sch.features)} features expected)")
    width = len(header)
    for i, r in enumerate(body):
        if len(r) != width:
            raise ParseError(f"expected {width} fields, found {len(r)}", line=i + offset)

    table = np.array(body, dtype=object)
    col = {name: table[:, header.index(name)] for name in expected}
    numeric = np.full((len(body), len(sch.features)), np.nan)
    categorical = {}
    for j, name in enumerate(sch.features):
        values = np.char.strip(col[name].astype(str))
        if name in sch.categorical:
            categorical[name] = values
            continue
        try:
            numeric[:, j] = values.astype(np.float64)
        except ValueError:
            for i, v in enumerate(values):
                if not _looks_numeric(v):
                    raise ParseError(f"column {name!r}: cannot parse {v!r} as a number", line=i + offset) from None

    if expected == sch.features:
        labels, cats = np.full(len(body), -1, dtype=np.int64), np.full(len(body), "unknown")
    else:
        labels, cats = _labels(sch, col, offset)
    log.info("loaded %d %s records from %s", len(labels), sch.name, path)
    return RawDataset(sch.name, list(sch.features), numeric, categorical, labels, cats)


def _labels(sch, col, offset):
    if sch.name == "unsw_nb15":
        raw = np.char.strip(col["label"].astype(str))
        bad = ~np.isin(raw, ["0", "1"])
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise SchemaError(f"line {i + offset}: unknown label {raw[i]!r} (expected 0 or 1)")
        labels = raw.astype(np.int64)
        cats = np.char.strip(col["attack_cat"].astype(str))
        cats = np.where(labels == NORMAL, "normal", cats)
        return labels, cats
    raw = np.char.lower(np.char.strip(col["label"].astype(str)))
    labels = np.empty(len(raw), dtype=np.int64)
    cats = np.empty(len(raw), dtype=object)
    for i, v in enumerate(raw):
        if v == "normal":
            labels[i], cats[i] = NORMAL, "normal"
        elif v in NSL_ATTACK_FAMILY:
            labels[i], cats[i] = ABNORMAL, NSL_ATTACK_FAMILY[v]
        else:
            raise SchemaError(f"line {i + offset}: unknown label {v!r}")
    return labels, cats.astype(str)


# ---------------------------------------------------------------------------
# Encoding and normalization
# ---------------------------------------------------------------------------

def build_encoding(raw: RawDataset) -> dict:
    """Frequency-ranked integer codes per categorical column (ties by value).

    The code ``len(codes)`` is reserved for values unseen at build time.
    """
    enc = {}
    for name, values in raw.categorical.items():
        counts = Counter(values.tolist())
        ranked = sorted(counts, key=lambda v: (-counts[v], v))
        enc[name] = {v: i for i, v in enumerate(ranked)}
    return enc


def l2_normalize(x):
    """Row-wise L2 scaling in float64; zero rows stay zero. Returns (rows, zero_count)."""
    norms = np.sqrt((x * x).sum(axis=1))
    zero = norms == 0
    return x / np.where(zero, 1.0, norms)[:, None], int(zero.sum())


def preprocess(data, encoding: dict | None = None, columns=None) -> Dataset:
    """Encode categoricals, optionally keep ``columns``, and L2-normalize each row.

    Passing an already preprocessed :class:`Dataset` only re-normalizes it,
    which is a no-op up to rounding.
    """
    if isinstance(data, Dataset):
        ds = data.select(columns) if columns is not None else data
        rows, zeros = l2_normalize(ds.features)
        return Dataset(rows, ds.labels, list(ds.feature_names), ds.categories, ds.unknown_categories, zeros)

    raw = data
    encoding = build_encoding(raw) if encoding is None else encoding
    x = raw.numeric.copy()
    unknown = 0
    for name, values in raw.categorical.items():
        if name not in encoding:
            raise SchemaError(f"encoding map has no entry for categorical column {name!r}")
        codes = encoding[name]
        reserved = len(codes)
        j = raw.feature_names.index(name)
        mapped = np.array([codes.get(v, reserved) for v in values.tolist()], dtype=np.float64)
        n_unk = int((mapped == reserved).sum())
        if n_unk:
            warnings.warn(f"{n_unk} unseen value(s) in {name!r} mapped to the unknown code {reserved}",
                          stacklevel=2)
        unknown += n_unk
        x[:, j] = mapped
    names = list(raw.feature_names)
    if columns is not None:
        pos = [names.index(c) for c in columns]
        x, names = x[:, pos], list(columns)
    rows, zeros = l2_normalize(x)
    return Dataset(rows, raw.labels.copy(), names, raw.categories, unknown, zeros)


# ---------------------------------------------------------------------------
# Feature selection
# ---------------------------------------------------------------------------

def mutual_information(feature, labels, bins=20) -> float:
    """MI (nats) between an equal-width-binned feature and discrete labels."""
    f = np.asarray(feature, dtype=np.float64)
    lo, hi = f.min(), f.max()
    if hi == lo:
        return 0.0
    b = np.minimum(((f - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    _, y = np.unique(labels, return_inverse=True)
    joint = np.zeros((bins, y.max() + 1))
    np.add.at(joint, (b, y), 1)
    joint /= joint.sum()
    pb = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pb @ py)[nz])).sum())


def correlation_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    sd = np.sqrt((xc * xc).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (xc.T @ xc) / np.outer(sd, sd)
    corr[~np.isfinite(corr)] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr


@dataclass
class FeatureSelectionReport:
    names: list
    mis: np.ndarray
    correlation: np.ndarray
    kept: list                   # kept names, ranked by MIS
    status: dict                 # name -> "kept" | "dropped"
    reason: dict                 # name -> text
    target_count: int
    threshold: float
    bins: int = 20

    def to_text(self) -> str:
        lines = [f"# target_count={self.target_count} correlation_threshold={self.threshold} bins={self.bins}",
                 "feature\tmis\tstatus\treason"]
        for i, name in enumerate(self.names):
            lines.append(f"{name}\t{self.mis[i]:.6f}\t{self.status[name]}\t{self.reason[name]}")
        return "\n".join(lines) + "\n"

    def violations(self):
        """Kept pairs above the correlation threshold that were not forced in."""
        idx = {n: i for i, n in enumerate(self.names)}
        out = []
        for a in range(len(self.kept)):
            for b in range(a + 1, len(self.kept)):
                na, nb = self.kept[a], self.kept[b]
                r = abs(self.correlation[idx[na], idx[nb]])
                forced = self.reason[na].startswith("forced") or self.reason[nb].startswith("forced")
                if r > self.threshold and not forced:
                    out.append((na, nb, r))
        return out


def sulov_select(ds: Dataset, target_count: int, correlation_threshold: float = 0.7,
                 bins: int = 20) -> FeatureSelectionReport:
    """Drop the lower-MIS member of every highly correlated pair, then keep the top ``target_count`` by MIS.

    MIS ties are broken by original column index (lower index wins).  When
    fewer than ``target_count`` features survive, dropped ones are restored in
    MIS order and marked as forced.
    """
    if not 0 < correlation_threshold < 1:
        raise ValueError("correlation_threshold must lie in (0, 1)")
    F = ds.n_features
    if not 1 <= target_count <= F:
        raise ValueError(f"target_count must be in [1, {F}], got {target_count}")
    if len(np.unique(ds.labels)) < 2:
        raise SchemaError("feature selection needs both classes present")
    x = ds.features
    names = list(ds.feature_names)
    mis = np.array([mutual_information(x[:, j], ds.labels, bins) for j in range(F)])
    corr = correlation_matrix(x)
    constant = x.max(axis=0) == x.min(axis=0)
    mis[constant] = 0.0

    order_key = lambda j: (-mis[j], j)  # noqa: E731
    reason = {}
    for j in np.flatnonzero(constant):
        reason[names[j]] = "zero information"
    live = [j for j in range(F) if not constant[j]]
    for a_pos, a in enumerate(live):
        for b in live[a_pos + 1:]:
            r = abs(corr[a, b])
            if r > correlation_threshold:
                winner, loser = sorted((a, b), key=order_key)
                reason.setdefault(names[loser], f"correlated with {names[winner]} (|r|={r:.3f})")

    survivors = sorted((j for j in range(F) if names[j] not in reason), key=order_key)
    if len(survivors) >= target_count:
        for j in survivors[target_count:]:
            reason[names[j]] = "below top-k MIS cut"
        kept_idx = survivors[:target_count]
    else:
        pool = sorted((j for j in range(F) if names[j] in reason and not constant[j]), key=order_key)
        pool += sorted(np.flatnonzero(constant).tolist())
        restored = pool[:target_count - len(survivors)]
        for j in restored:
            reason[names[j]] = f"forced: restored to meet target count ({reason[names[j]]})"
        kept_idx = sorted(survivors + restored, key=order_key)
    for j in kept_idx:
        reason.setdefault(names[j], "kept")
    kept = [names[j] for j in kept_idx]
    status = {n: ("kept" if n in kept else "dropped") for n in names}
    return FeatureSelectionReport(names, mis, corr, kept, status, reason, target_count,
                                  correlation_threshold, bins)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray
    classes: list

    def support_x(self, ds: Dataset):
        return ds.features[self.support_idx]

    def query_x(self, ds: Dataset):
        return ds.features[self.query_idx]

    @property
    def query_normal(self):
        return self.query_idx[self.query_y == NORMAL]

    @property
    def query_abnormal(self):
        return self.query_idx[self.query_y != NORMAL]


def sample_episode(ds: Dataset, ways: int, shots: int, queries: int, seed) -> Episode:
    """Draw a C-way N-shot episode; ``seed`` is an int or a numpy Generator.

    Classes are drawn uniformly without replacement and the roster is kept
    sorted.  Within each class the support and query samples are drawn
    together without replacement, so the two sets never overlap.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_class = ds.class_indices()
    pool = sorted(by_class)
    if ways > len(pool):
        raise SamplingError(f"{ways}-way episode requested but only {len(pool)} classes present")
    classes = sorted(int(c) for c in rng.choice(pool, size=ways, replace=False))
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for c in classes:
        members = by_class[c]
        if len(members) < shots + queries:
            raise SamplingError(f"class {c} has {len(members)} samples; need {shots} support + {queries} query")
        pick = rng.choice(members, size=shots + queries, replace=False)
        s_idx.append(pick[:shots])
        q_idx.append(pick[shots:])
        s_y += [c] * shots
        q_y += [c] * queries
    return Episode(np.concatenate(s_idx), np.array(s_y), np.concatenate(q_idx), np.array(q_y), classes)


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"FSLP"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


def write_cache(ds: Dataset, path) -> None:
    """Row-major float32 table with the label appended as the last column."""
    table = np.column_stack([ds.features, ds.labels]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, table.shape[0], table.shape[1]))
        fh.write(table.tobytes(order="C"))


def read_cache(path, feature_names=None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _CACHE_HEADER.size:
        raise ParseError(f"{path}: truncated cache header")
    magic, version, rows, cols = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ParseError(f"{path}: not an FSLP v{CACHE_VERSION} cache")
    body = blob[_CACHE_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise ParseError(f"{path}: expected {rows * cols * 4} payload bytes, found {len(body)}")
    table = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    names = feature_names or [f"f{i}" for i in range(cols - 1)]
    return Dataset(table[:, :-1], table[:, -1].astype(np.int64), list(names))
