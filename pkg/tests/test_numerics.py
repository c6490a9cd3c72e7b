import warnings
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fslpn import numerics as nx
from fslpn.errors import DegenerateBatchError, DimensionError, NumericError, OptimizerError, StateError

import gradcases


def test_conv1d_hand_example():
    x = np.array([[[1.0, 2.0, 3.0]]])
    w = np.array([[[1.0, 0.0, -1.0]]])
    out, _ = nx.conv1d_forward(x, w, np.zeros(1), 1, 1)
    np.testing.assert_array_equal(out, [[[-2.0, -2.0, 2.0]]])


def test_conv1d_identity_kernel_is_exact():
    x = np.random.default_rng(0).standard_normal((3, 1, 7))
    out, _ = nx.conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)
    # centered delta with same padding trims back to the input
    out, _ = nx.conv1d_forward(x, np.array([[[0.0, 1.0, 0.0]]]), None, 1, 1)
    np.testing.assert_array_equal(out, x)


def test_conv1d_zero_input_gives_bias():
    out, _ = nx.conv1d_forward(np.zeros((2, 3, 5)), np.ones((4, 3, 3)), np.arange(4.0), 1, 1)
    assert np.all(out == np.arange(4.0)[None, :, None])


def test_conv1d_backward_zero_upstream_and_scalar_case():
    x = np.array([[[2.5]]])
    w = np.array([[[1.5]]])
    out, cache = nx.conv1d_forward(x, w, np.zeros(1))
    dx, dw, db = nx.conv1d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()
    _, dw, _ = nx.conv1d_backward(np.ones_like(out), cache)
    assert dw[0, 0, 0] == 2.5


def test_conv1d_small_random_case_fd():
    rng = np.random.default_rng(7)
    inp = {"x": rng.standard_normal((2, 2, 5)), "w": rng.standard_normal((3, 2, 3)), "b": rng.standard_normal(3)}
    state = {}

    def fwd(x, w, b):
        out, state["c"] = nx.conv1d_forward(x, w, b, 1, 1)
        return out

    rep = nx.weighted_sum_check(fwd, lambda r: nx.conv1d_backward(r, state["c"]), inp, ["x", "w", "b"])
    assert rep.passed, str(rep)


def test_conv1d_errors():
    with pytest.raises(DimensionError, match="axis 1"):
        nx.conv1d_forward(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)), None)
    with pytest.raises(DimensionError):
        nx.conv1d_forward(np.zeros((1, 1, 2)), np.zeros((1, 1, 5)), None)
    with pytest.raises(StateError):
        nx.conv1d_backward(np.zeros((1, 1, 1)), None)


def test_batch_norm_standardizes_in_train_mode():
    x = np.random.default_rng(1).standard_normal((8, 3, 10)) * 4 + 2
    out, _ = nx.batch_norm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-4)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(2).standard_normal((4, 2, 3))
    beta = np.array([0.3, -1.2])
    out, _ = nx.batch_norm_forward(x, np.zeros(2), beta, np.zeros(2), np.ones(2), True)
    assert np.all(out == beta[None, :, None])


def test_batch_norm_running_stats_and_eval_repeatable():
    x = np.random.default_rng(3).standard_normal((4, 2, 5))
    rm, rv = np.zeros(2), np.ones(2)
    nx.batch_norm_forward(x, np.ones(2), np.zeros(2), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))
    a, _ = nx.batch_norm_forward(x, np.ones(2), np.zeros(2), rm, rv, False)
    b, _ = nx.batch_norm_forward(x, np.ones(2), np.zeros(2), rm, rv, False)
    assert a.tobytes() == b.tobytes()


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        nx.batch_norm_forward(np.zeros((1, 2, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_small_layer_examples():
    out, _ = nx.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    pooled, _ = nx.global_avg_pool_forward(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    assert pooled[0, 0] == 2.5
    x = np.random.default_rng(4).standard_normal((3, 4))
    out, _ = nx.dense_forward(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(out, x)


def test_l2_normalize_examples():
    out, _ = nx.l2_normalize_rows(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8]])
    unit = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(nx.l2_normalize_rows(unit)[0], unit)
    with pytest.warns(nx.ZeroNormWarning):
        out, _ = nx.l2_normalize_rows(np.zeros((1, 2)))
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_sgd_examples():
    p = nx.ParameterSet()
    p.add("classifier.proj.w", np.array([1.0]))
    p.add("extractor.stem.w", np.array([2.0]))
    p.add("extractor.stem.bn.running_mean", np.array([0.0]))
    nx.sgd_step(p, {"classifier.proj.w": np.array([0.5]), "extractor.stem.w": np.array([0.0])}, 0.1)
    assert p["classifier.proj.w"][0] == pytest.approx(0.95, abs=1e-15)
    assert p["extractor.stem.w"][0] == 2.0
    p.freeze("extractor")
    nx.sgd_step(p, {"classifier.proj.w": np.array([1.0]), "extractor.stem.w": np.array([9.0])}, 0.1)
    assert p["extractor.stem.w"][0] == 2.0
    assert p["classifier.proj.w"][0] == pytest.approx(0.85)
    p.unfreeze("extractor")
    with pytest.raises(OptimizerError):
        nx.sgd_step(p, {"classifier.proj.w": np.array([1.0])}, 0.1)


def test_grad_check_linear_op_is_near_exact():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 3))
    x = rng.standard_normal((2, 4))
    r = rng.standard_normal((2, 3))
    rep = nx.grad_check(lambda a: float(((a["x"] @ w) * r).sum()), {"x": x}, {"x": r @ w.T}, floor=1.0)
    assert rep.max_rel_error < 1e-9


def test_grad_check_relu_kink_exclusion():
    x = np.array([0.0, 0.5, -0.7, 2e-4])
    skip = np.abs(x) <= 1e-3
    rep = nx.grad_check(lambda a: float(np.maximum(a["x"], 0).sum()), {"x": x}, {"x": (x > 0).astype(float)},
                        skip={"x": skip})
    assert rep.passed and rep.n_probes == 2


def test_grad_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = nx.grad_check(lambda a: float((a["x"] ** 2).sum()), {"x": x}, {"x": 3 * x})
    assert not rep.passed


def test_full_extractor_default_config_fd():
    rng = np.random.default_rng(11)
    rep = gradcases.case_extractor(rng, channels=64, blocks=4, kernel=3, length=13, probes=4)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradient_cases(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(3):
        rep = gradcases.CASES[name](rng)
        assert rep.passed, f"{name}: {rep}"


def test_parameter_set_partitions_and_checksum():
    p = nx.ParameterSet()
    p.add("extractor.stem.w", np.ones(3))
    p.add("head.fc1.w", np.ones(2))
    c = p.checksum("extractor")
    q = p.copy()
    q["head.fc1.w"] = np.zeros(2)
    assert q.checksum("extractor") == c and q.checksum() != p.checksum()
    with pytest.raises(KeyError):
        p.add("bogus.w", np.ones(1))


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_l2_rows_unit_norm_and_idempotent(x):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", nx.ZeroNormWarning)
        once, _ = nx.l2_normalize_rows(x)
        twice, _ = nx.l2_normalize_rows(once)
    norms = np.linalg.norm(once, axis=1)
    nonzero = np.linalg.norm(x, axis=1) > 0
    np.testing.assert_allclose(norms[nonzero], 1, atol=1e-9)
    np.testing.assert_allclose(twice, once, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 8)), elements=finite))
def test_conv1d_width1_identity_property(x):
    c = x.shape[1]
    out, _ = nx.conv1d_forward(x, np.eye(c)[:, :, None], None)
    # IEEE equality: -0.0 * 1 + 0.0 yields +0.0, numerically the same value
    assert np.array_equal(out, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-4, 1.0))
def test_sgd_frozen_partition_bit_exact(seed, lr):
    rng = np.random.default_rng(seed)
    p = nx.ParameterSet()
    for n in ("extractor.a.w", "head.b.w", "classifier.c.w"):
        p.add(n, rng.standard_normal(4))
    frozen = rng.choice(list(nx.PARTITIONS))
    p.freeze(frozen)
    before = {n: p[n].tobytes() for n in p.names(frozen)}
    nx.sgd_step(p, {n: rng.standard_normal(4) for n in p.names()}, lr)
    assert all(p[n].tobytes() == b for n, b in before.items())


def test_l2_normalize_extreme_magnitudes():
    # squares of these overflow / underflow in their own dtype; the rows are still normalizable
    for x in (np.full((1, 4), 1e30, dtype=np.float32), np.full((1, 4), 1e-170)):
        out, _ = nx.l2_normalize_rows(x)
        np.testing.assert_allclose(out, 0.5, rtol=1e-6)


def test_l2_normalize_non_finite_is_a_numeric_error():
    with pytest.raises(NumericError, match="non-finite norm"):
        nx.l2_normalize_rows(np.array([[np.inf, 1.0], [1.0, 2.0]], dtype=np.float32))
