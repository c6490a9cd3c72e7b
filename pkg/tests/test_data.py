import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fslpn import data as D
from fslpn import synthetic
from fslpn.errors import ParseError, SamplingError, SchemaError


@pytest.fixture(scope="module")
def unsw_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "unsw.csv"
    synthetic.write_csv(path, "unsw_nb15", 1500, seed=0)
    return path


@pytest.fixture(scope="module")
def unsw(unsw_csv):
    return D.preprocess(D.load_dataset(unsw_csv, "unsw_nb15"))


def test_load_unsw(unsw_csv):
    raw = D.load_dataset(unsw_csv, "unsw_nb15")
    assert len(raw) == 1500 and len(raw.feature_names) == 42
    assert set(np.unique(raw.labels)) == {0, 1}
    assert set(raw.categorical) == {"proto", "service", "state"}


def test_load_nsl_headerless(tmp_path):
    path = tmp_path / "nsl.txt"
    synthetic.write_csv(path, "nsl_kdd", 200, seed=1, header=False)
    raw = D.load_dataset(path, "nsl_kdd")
    assert len(raw) == 200 and len(raw.feature_names) == 41
    assert raw.numeric.shape == (200, 41)


def test_empty_and_malformed_files(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ParseError, match="zero records"):
        D.load_dataset(empty, "unsw_nb15")
    head, rows = synthetic.make_records("unsw_nb15", 5, seed=0)
    short = tmp_path / "short.csv"
    with open(short, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        w.writerows(rows[:2])
        w.writerow(rows[2][:-3])
    with pytest.raises(ParseError) as exc:
        D.load_dataset(short, "unsw_nb15")
    assert exc.value.line == 4
    wrong = tmp_path / "wrong.csv"
    with open(wrong, "w", newline="") as fh:
        csv.writer(fh).writerows([head[:-3] + head[-2:], rows[0][:-3] + rows[0][-2:]])
    with pytest.raises(SchemaError, match="lacks"):
        D.load_dataset(wrong, "unsw_nb15")
    with pytest.raises(SchemaError):
        D.get_schema("kdd99")


def test_bad_label(tmp_path):
    head, rows = synthetic.make_records("unsw_nb15", 3, seed=0)
    rows[1][-1] = "7"
    path = tmp_path / "lab.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([head] + rows)
    with pytest.raises(SchemaError, match="line 3"):
        D.load_dataset(path, "unsw_nb15")


def test_preprocess_examples():
    ds = D.Dataset(np.array([[3.0, 4.0], [0.6, 0.8], [0.0, 0.0]]), np.array([0, 1, 0]), ["a", "b"])
    out = D.preprocess(ds)
    np.testing.assert_allclose(out.features[0], [0.6, 0.8])
    np.testing.assert_allclose(out.features[1], [0.6, 0.8], atol=1e-9)
    assert out.zero_rows == 1 and not out.features[2].any()


def test_unknown_category_substitution(unsw_csv, tmp_path):
    raw = D.load_dataset(unsw_csv, "unsw_nb15")
    enc = D.build_encoding(raw)
    raw.categorical["proto"] = raw.categorical["proto"].copy()
    raw.categorical["proto"][:3] = "never-seen"
    with pytest.warns(UserWarning, match="unknown code"):
        ds = D.preprocess(raw, enc)
    assert ds.unknown_categories == 3


def test_preprocess_unit_norm_and_idempotent(unsw):
    norms = np.linalg.norm(unsw.features, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-9) | (norms == 0))
    again = D.preprocess(unsw)
    np.testing.assert_allclose(again.features, unsw.features, atol=1e-9)


def test_sulov_counts_and_report(unsw):
    rep = D.sulov_select(unsw, 13)
    assert len(rep.kept) == 13
    assert rep.violations() == []
    text = rep.to_text()
    assert text.count("\tkept\t") == 13
    # the report's own matrix certifies every kept pair
    idx = [rep.names.index(n) for n in rep.kept]
    sub = np.abs(rep.correlation[np.ix_(idx, idx)])
    np.fill_diagonal(sub, 0)
    forced = [n for n in rep.kept if rep.reason[n].startswith("forced")]
    assert forced or sub.max() <= 0.7


def test_sulov_all_uncorrelated_keeps_everything():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.standard_normal((400, 5)) + y[:, None] * rng.uniform(0.1, 1, 5)
    rep = D.sulov_select(D.Dataset(x, y, list("abcde")), 5)
    assert sorted(rep.kept) == list("abcde")


def test_sulov_constant_column_has_zero_information():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 100)
    x = np.column_stack([y + rng.normal(0, 1, 100), np.zeros(100)])
    rep = D.sulov_select(D.Dataset(x, y, ["a", "c"]), 1)
    assert rep.kept == ["a"] and rep.reason["c"] == "zero information"


@pytest.mark.parametrize("seed", range(25))
def test_sulov_drops_lower_mis_duplicate(seed):
    ds, strong, weak = synthetic.duplicated_feature_set(seed)
    rep = D.sulov_select(ds, 3)
    mis = dict(zip(rep.names, rep.mis))
    assert mis[strong] > mis[weak]
    assert strong in rep.kept and weak not in rep.kept
    assert rep.reason[weak].startswith(f"correlated with {strong}")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_sulov_column_order_invariance(seed):
    ds, _, _ = synthetic.duplicated_feature_set(seed % 1000)
    perm = np.random.default_rng(seed).permutation(4)
    shuffled = D.Dataset(ds.features[:, perm], ds.labels, [ds.feature_names[i] for i in perm])
    assert set(D.sulov_select(ds, 3).kept) == set(D.sulov_select(shuffled, 3).kept)


def test_episode_shape_and_determinism(unsw):
    ep = D.sample_episode(unsw, 2, 2, 15, 7)
    assert ep.support_idx.size == 4 and ep.query_idx.size == 30
    assert not set(ep.support_idx) & set(ep.query_idx)
    again = D.sample_episode(unsw, 2, 2, 15, 7)
    assert ep.support_idx.tobytes() == again.support_idx.tobytes()
    assert ep.query_idx.tobytes() == again.query_idx.tobytes()


def test_episode_exhausting_class_uses_every_sample():
    y = np.array([0] * 5 + [1] * 5)
    ds = D.Dataset(np.arange(20.0).reshape(10, 2), y, ["a", "b"])
    ep = D.sample_episode(ds, 2, 2, 3, 0)
    assert sorted(np.concatenate([ep.support_idx, ep.query_idx]).tolist()) == list(range(10))
    with pytest.raises(SamplingError):
        D.sample_episode(ds, 2, 2, 4, 0)
    with pytest.raises(SamplingError):
        D.sample_episode(ds, 3, 1, 1, 0)


def test_episode_disjointness_over_1000_seeds(unsw):
    for seed in range(1000):
        ep = D.sample_episode(unsw, 2, 2, 15, seed)
        assert not np.intersect1d(ep.support_idx, ep.query_idx).size
        assert set(ep.query_y.tolist()) <= set(ep.classes)
        assert all((ep.support_y == c).sum() == 2 for c in ep.classes)
        assert np.array_equal(unsw.labels[ep.support_idx], ep.support_y)


def test_cache_round_trip(unsw, tmp_path):
    path = tmp_path / "c.fslp"
    D.write_cache(unsw, path)
    back = D.read_cache(path, unsw.feature_names)
    np.testing.assert_array_equal(back.features, unsw.features.astype(np.float32))
    np.testing.assert_array_equal(back.labels, unsw.labels)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ParseError):
        D.read_cache(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ParseError):
        D.read_cache(path)


def test_synthetic_schema_shaped_selection_counts(tmp_path):
    for schema, expect in (("unsw_nb15", 13), ("nsl_kdd", 15)):
        path = tmp_path / f"{schema}.csv"
        synthetic.write_csv(path, schema, 800, seed=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = D.preprocess(D.load_dataset(path, schema))
        rep = D.sulov_select(ds, D.get_schema(schema).target_count)
        assert len(rep.kept) == expect
