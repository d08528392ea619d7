import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakylstm.signal import FeatureSequence
from leakylstm.speaker import (TotalVariability, Ubm, baum_welch_stats, condition_inputs,
                               extract_ivector, ivector_from_stats, read_ivector_csv,
                               responsibilities, train_tv, train_ubm, write_ivector_csv)


def gaussian_pdf(x, mean, var):
    return math.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


@pytest.fixture(scope="module")
def two_blob_frames():
    rng = np.random.default_rng(0)
    a = rng.normal([-3.0, 0.0], 0.5, size=(3000, 2))
    b = rng.normal([3.0, 1.0], 0.5, size=(3000, 2))
    return np.vstack([a, b])


def test_ubm_recovers_separable_gmm(two_blob_frames):
    ubm = train_ubm(two_blob_frames, K=2, iters=15, seed=1)
    means = ubm.means[np.argsort(ubm.means[:, 0])]
    assert np.all(np.abs(means - [[-3.0, 0.0], [3.0, 1.0]]) < 0.05)
    assert np.allclose(ubm.weights, 0.5, atol=0.02)
    h = np.array(ubm.loglik_history)
    assert np.all(np.diff(h) >= -1e-9 * np.abs(h[:-1]))


def test_ubm_single_component_is_sample_statistics():
    X = np.random.default_rng(1).normal([1.0, -2.0, 0.5], [1.0, 2.0, 0.3], size=(500, 3))
    ubm = train_ubm(X, K=1, iters=3)
    np.testing.assert_allclose(ubm.means[0], X.mean(0), atol=1e-10)
    np.testing.assert_allclose(ubm.variances[0], X.var(0), atol=1e-10)
    assert ubm.weights.tolist() == [1.0]


def test_ubm_rejects_too_few_frames_and_bad_params():
    with pytest.raises(ValueError):
        train_ubm(np.zeros((3, 2)), K=5)
    with pytest.raises(ValueError):
        Ubm(np.array([0.7, 0.7]), np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        Ubm(np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)))


def test_variance_floor_on_collapsed_component(caplog):
    X = np.vstack([np.zeros((50, 2)), np.random.default_rng(0).normal(5, 1, (200, 2))])
    ubm = train_ubm(X, K=2, iters=5)
    assert np.all(ubm.variances >= 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_responsibilities_row_stochastic(seed):
    rng = np.random.default_rng(seed)
    K, d = 4, 3
    w = rng.dirichlet(np.ones(K))
    ubm = Ubm(w, rng.normal(size=(K, d)), rng.uniform(0.2, 2, size=(K, d)))
    X = rng.normal(size=(30, d)) * 3
    gamma, _ = responsibilities(ubm, X)
    assert np.allclose(gamma.sum(1), 1.0, atol=1e-12)
    N, F = baum_welch_stats(ubm, X)
    assert N.sum() == pytest.approx(30.0)
    assert F.shape == (K * d,)


def test_baum_welch_against_scalar_loops():
    ubm = Ubm(np.array([0.3, 0.7]), np.array([[0.0], [2.0]]), np.array([[1.0], [0.5]]))
    xs = [-0.5, 0.3, 1.1, 2.4, 3.0]
    N = [0.0, 0.0]
    F = [0.0, 0.0]
    for x in xs:
        lik = [ubm.weights[k] * gaussian_pdf(x, ubm.means[k, 0], ubm.variances[k, 0]) for k in range(2)]
        for k in range(2):
            g = lik[k] / sum(lik)
            N[k] += g
            F[k] += g * (x - ubm.means[k, 0])
    Nb, Fb = baum_welch_stats(ubm, np.array(xs)[:, None])
    np.testing.assert_allclose(Nb, N, rtol=1e-12)
    np.testing.assert_allclose(Fb, F, rtol=1e-12, atol=1e-14)


def test_baum_welch_single_frame_at_mean():
    ubm = Ubm(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [10.0, 10.0]]), np.ones((2, 2)))
    N, F = baum_welch_stats(ubm, np.array([[10.0, 10.0]]))
    assert N[1] > 1 - 1e-12
    assert np.allclose(F, 0, atol=1e-12)
    with pytest.raises(ValueError):
        baum_welch_stats(ubm, np.zeros((0, 2)))


def synthetic_tv_problem(K=8, d=4, dw=3, n_utts=300, frames=300, seed=1):
    rng = np.random.default_rng(seed)
    means = rng.normal(0, 8, size=(K, d))
    ubm = Ubm(np.full(K, 1 / K), means, np.ones((K, d)))
    T_true = rng.normal(0, 0.5, size=(K * d, dw))

    def draw(w, n):
        M = (means.reshape(-1) + T_true @ w).reshape(K, d)
        return M[rng.integers(K, size=n)] + rng.normal(size=(n, d))

    ws = rng.normal(size=(n_utts, dw))
    stats = [baum_welch_stats(ubm, draw(w, frames)) for w in ws]
    return ubm, T_true, stats, ws, draw


def subspace_angle_deg(A, B):
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return math.degrees(math.acos(min(1.0, s.min())))


@pytest.fixture(scope="module")
def tv_problem():
    ubm, T_true, stats, ws, _ = synthetic_tv_problem()
    tv = train_tv(ubm, stats, dw=3, iters=30, seed=0)
    return ubm, T_true, stats, ws, tv


def test_tv_recovers_subspace(tv_problem):
    ubm, T_true, stats, ws, tv = tv_problem
    assert subspace_angle_deg(tv.T, T_true) < 5.0


def test_tv_likelihood_proxy_non_decreasing(tv_problem):
    h = np.array(tv_problem[4].history)
    assert np.all(np.diff(h) >= -1e-9 * np.abs(h[:-1]))


def test_tv_rejects_degenerate_inputs(tv_problem):
    ubm, _, stats, _, _ = tv_problem
    with pytest.raises(ValueError):
        train_tv(ubm, stats, dw=0)
    with pytest.raises(ValueError):
        train_tv(ubm, stats[:3], dw=5)


def test_ivector_recovery_with_true_t():
    ubm, T_true, _, _, draw = synthetic_tv_problem(n_utts=1)
    w_true = np.array([1.0, -2.0, 1.5])
    X = draw(w_true, 20000)
    w = extract_ivector(ubm, TotalVariability(T_true), X)
    assert np.linalg.norm(w - w_true) / np.linalg.norm(w_true) < 0.10


def test_split_half_ivectors_agree(tv_problem):
    ubm, _, _, _, tv = tv_problem
    draw = synthetic_tv_problem(n_utts=1)[4]
    X = draw(np.array([1.0, -2.0, 1.5]), 8000)
    w1 = extract_ivector(ubm, tv, X[:4000])
    w2 = extract_ivector(ubm, tv, FeatureSequence(X[4000:]))
    assert w1 @ w2 / np.linalg.norm(w1) / np.linalg.norm(w2) > 0.9


def test_ivector_zero_t_and_linearity_and_closed_form():
    rng = np.random.default_rng(4)
    K, d, dw = 3, 2, 2
    ubm = Ubm(np.full(K, 1 / K), rng.normal(size=(K, d)), rng.uniform(0.5, 2, size=(K, d)))
    N = rng.uniform(1, 10, size=K)
    F1, F2 = rng.normal(size=K * d), rng.normal(size=K * d)
    assert np.all(ivector_from_stats(ubm, TotalVariability(np.zeros((K * d, dw))), N, F1) == 0)
    T = rng.normal(size=(K * d, dw))
    tv = TotalVariability(T)
    lhs = ivector_from_stats(ubm, tv, N, 2 * F1 - 3 * F2)
    rhs = 2 * ivector_from_stats(ubm, tv, N, F1) - 3 * ivector_from_stats(ubm, tv, N, F2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    for c in (0.5, 3.0):
        Tc = c * T
        Sinv = np.diag(1 / ubm.variance_supervector)
        Nbig = np.diag(np.repeat(N, d))
        direct = np.linalg.solve(np.eye(dw) + Tc.T @ Sinv @ Nbig @ Tc, Tc.T @ Sinv @ F1)
        np.testing.assert_allclose(ivector_from_stats(ubm, TotalVariability(Tc), N, F1), direct,
                                   rtol=1e-10)


def test_condition_inputs_dimension_and_content():
    feats = FeatureSequence(np.random.default_rng(0).normal(size=(7, 129)))
    out = condition_inputs(feats, [np.arange(10.0), -np.arange(10.0)])
    assert out.values.shape == (7, 149)
    assert np.array_equal(out.values[:, :129], feats.values)
    assert np.array_equal(out.values[3, 129:139], np.arange(10.0))
    zeros = condition_inputs(feats, [np.zeros(10), np.zeros(10)])
    assert np.all(zeros.values[:, 129:] == 0)
    swapped = condition_inputs(feats, [-np.arange(10.0), np.arange(10.0)])
    assert not np.array_equal(swapped.values, out.values)
    with pytest.raises(ValueError):
        condition_inputs(feats, [np.zeros(10), np.zeros(9)])


def test_ivector_csv_round_trip(tmp_path):
    rows = [("utt_a", "spk1", np.array([0.1, -2.5])), ("utt_b", "spk2", np.array([1e-9, 3.0]))]
    write_ivector_csv(tmp_path / "iv.csv", rows)
    back = read_ivector_csv(tmp_path / "iv.csv")
    assert (tmp_path / "iv.csv").read_text().splitlines()[0] == "utterance_id,speaker_id,w_1,w_2"
    for utt, spk, w in rows:
        assert back[utt][0] == spk
        assert np.array_equal(back[utt][1], w)
