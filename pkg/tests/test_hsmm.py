import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mild.errors import DegenerateComponentWarning, DimensionMismatch, EmptySequence, InsufficientData
from mild.gauss import BlockSplit, MultivariateGaussian
from mild.hsmm import (
    ForwardFilter,
    GmrStream,
    HsmmModel,
    duration_log_pmf,
    dwell_times,
    em_objective,
    fit_em,
    fit_hsmm,
    forward_variable,
    gmr_condition,
    init_temporal_split,
    prior_component,
    prior_schedule,
    segment_transitions,
    viterbi,
)

from conftest import random_hsmm
from oracles import (
    emission_table,
    gaussian_pmf,
    naive_hmm_h,
    naive_hsmm_h,
    no_self_transitions,
    straight_line_gmr,
)


def oracle_h(model, obs, mode, emissions):
    means = [g.mean for g in model.components]
    covs = [g.cov for g in model.components]
    d1 = len(model.split.first_dims)
    T = len(obs)
    if emissions == "full":
        N = emission_table(means, covs, obs, list(range(model.dim)))
    elif emissions == "marginal":
        N = emission_table(means, covs, obs[:, :d1], list(range(d1)))
    else:
        N = np.ones((T, model.K))
    if mode == "hmm":
        return naive_hmm_h(model.pi, model.trans, N)
    pmf = gaussian_pmf(model.dur_mean, model.dur_std, model.d_max)
    return naive_hsmm_h(model.pi, no_self_transitions(model.trans), pmf, N)


def run_filter(model, obs, mode, emissions):
    d1 = len(model.split.first_dims)
    if emissions == "full":
        return forward_variable(model, obs, mode, "full").h
    if emissions == "marginal":
        return forward_variable(model, obs[:, :d1], mode, "marginal").h
    return forward_variable(model, None, mode, "dropped", n_steps=len(obs)).h


@pytest.mark.parametrize("mode", ["hsmm", "hmm"])
@pytest.mark.parametrize("emissions", ["full", "marginal", "dropped"])
def test_forward_matches_direct_summation(rng, mode, emissions):
    for _ in range(40):
        K, d1, d2 = (int(v) for v in rng.integers(1, [5, 3, 3]))
        model = random_hsmm(rng, K, d1, d2, int(rng.integers(1, 5)))
        obs = rng.normal(0, 1.5, (int(rng.integers(1, 9)), d1 + d2))
        h = run_filter(model, obs, mode, emissions)
        np.testing.assert_allclose(h, oracle_h(model, obs, mode, emissions), atol=1e-10, rtol=0)
        np.testing.assert_allclose(h.sum(axis=1), 1.0, atol=1e-9)


def test_unit_durations_reduce_to_hmm(rng):
    for _ in range(20):
        model = random_hsmm(rng, 3, 1, 1, 1)
        # no self-transitions, so the step chain and the segment chain coincide
        np.fill_diagonal(model.trans, 0.0)
        model.trans /= model.trans.sum(axis=1, keepdims=True)
        model._cache.clear()
        obs = rng.standard_normal((6, 2))
        np.testing.assert_allclose(
            forward_variable(model, obs, "hsmm").h, forward_variable(model, obs, "hmm").h, atol=1e-12
        )


def test_single_state_is_always_one(rng):
    model = random_hsmm(rng, 1, 2, 2, 3)
    h = forward_variable(model, rng.standard_normal((5, 4))).h
    np.testing.assert_array_equal(h, 1.0)


def test_streaming_filter_matches_batch(rng):
    model = random_hsmm(rng, 4, 2, 1, 4)
    obs = rng.standard_normal((10, 3))
    f = ForwardFilter(model)
    stream = np.array([f.step(o) for o in obs])
    res = forward_variable(model, obs)
    np.testing.assert_array_equal(stream, res.h)
    assert f.loglik == res.loglik


def test_forward_errors(rng):
    model = random_hsmm(rng, 2, 1, 1, 2)
    with pytest.raises(EmptySequence):
        forward_variable(model, np.zeros((0, 2)))
    with pytest.raises(DimensionMismatch):
        forward_variable(model, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ForwardFilter(model, mode="semi")


def test_duration_pmf_normalized_and_floored():
    logp = duration_log_pmf([3.0, 1.0], [0.0, 2.0], 6)
    np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0)
    # std 0 is floored to 0.5, so mass sits mostly at d = 3
    assert np.argmax(logp[0]) == 2 and np.exp(logp[0, 2]) == pytest.approx(1 / (1 + 2 * np.exp(-2) + 2 * np.exp(-8) + np.exp(-18)))
    np.testing.assert_allclose(np.exp(logp), gaussian_pmf([3.0, 1.0], [0.5, 2.0], 6), atol=1e-14)


def test_segment_transitions():
    a = segment_transitions(np.array([[0.5, 0.5, 0.0], [0.0, 0.2, 0.8], [0.0, 0.0, 1.0]]))
    np.testing.assert_allclose(a, [[0, 1, 0], [0, 0, 1], [0, 0, 1]])


def test_left_right_dropped_schedule_advances(rng):
    demos = [np.repeat(np.arange(3.0), 10)[:, None] * np.ones((1, 2)) + 0.01 * rng.standard_normal((30, 2)) for _ in range(4)]
    model = fit_hsmm(demos, 3, BlockSplit.halves(1))
    sched = prior_schedule(model, 30)
    assert sched[0] == 0 and sched[-1] == 2
    assert np.all(np.diff(sched) >= 0)
    i, (m1, m2) = prior_component(model, 29)
    assert i == 2 and m1.dim == 1 and m2.dim == 1


def test_gmr_matches_straight_line(rng):
    for _ in range(25):
        K = int(rng.integers(1, 5))
        d1, d2 = (int(v) for v in rng.integers(1, 4, size=2))
        model = random_hsmm(rng, K, d1, d2, int(rng.integers(1, 6)))
        z1 = rng.normal(0, 1.5, (int(rng.integers(1, 8)), d1))
        mu, sigma, h = gmr_condition(model, z1)
        ref_mu, ref_sigma = straight_line_gmr(
            model.pi, model.trans, model.dur_mean, model.dur_std, model.d_max,
            [g.mean for g in model.components], [g.cov for g in model.components], d1, z1,
        )
        np.testing.assert_allclose(mu, ref_mu, atol=1e-9, rtol=0)
        np.testing.assert_allclose(sigma, ref_sigma, atol=1e-9, rtol=0)
        np.testing.assert_allclose(h.sum(axis=1), 1.0, atol=1e-12)


def test_gmr_single_component_is_exact_conditional(rng):
    from mild.gauss import condition

    model = random_hsmm(rng, 1, 2, 3, 2)
    z1 = rng.standard_normal((4, 2))
    mu, sigma, _ = gmr_condition(model, z1)
    for t in range(4):
        c = condition(model.components[0], model.split, z1[t])
        np.testing.assert_allclose(mu[t], c.mean, atol=1e-12)
        np.testing.assert_allclose(sigma[t], c.cov, atol=1e-12)


def test_gmr_stream_is_bit_identical_to_batch(rng):
    model = random_hsmm(rng, 3, 2, 2, 3)
    z1 = rng.standard_normal((7, 2))
    mu, sigma, _ = gmr_condition(model, z1)
    s = GmrStream(model)
    for t in range(7):
        m, c, _ = s.step(z1[t])
        assert np.array_equal(m, mu[t]) and np.array_equal(c, sigma[t])


def test_gmr_causality(rng):
    model = random_hsmm(rng, 3, 1, 1, 3)
    z1 = rng.standard_normal((8, 1))
    changed = z1.copy()
    changed[5:] += 10.0
    a = gmr_condition(model, z1)[0]
    b = gmr_condition(model, changed)[0]
    np.testing.assert_array_equal(a[:5], b[:5])


def planted_demos(rng, n=10, T=40):
    means = np.array([[-2.0, 1.0], [3.0, -1.0]])
    demos = []
    for _ in range(n):
        cut = int(rng.integers(T // 3, 2 * T // 3))
        states = np.r_[np.zeros(cut, int), np.ones(T - cut, int)]
        demos.append(means[states] + 0.3 * rng.standard_normal((T, 2)))
    return demos, means


def test_em_recovers_planted_two_state_model(rng):
    demos, means = planted_demos(rng)
    history = []
    model = fit_hsmm(demos, 2, BlockSplit.halves(1), history=history)
    np.testing.assert_allclose(model.means, means, atol=0.1)
    assert np.all(np.diff(history) >= -1e-6)
    assert model.trans[1, 1] == pytest.approx(1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_em_objective_monotone(K, seed):
    rng = np.random.default_rng(seed)
    demos = [np.cumsum(rng.standard_normal((int(rng.integers(12, 25)), 2)), axis=0) for _ in range(4)]
    history = []
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateComponentWarning)
        try:
            fit_hsmm(demos, K, BlockSplit.halves(1), max_iters=30, history=history)
        except DegenerateComponentWarning:
            return
    assert np.all(np.diff(history) >= -1e-6)


def test_em_objective_helper_matches_history(rng):
    demos, _ = planted_demos(rng, n=4)
    init = init_temporal_split(demos, 2, BlockSplit.halves(1))
    history = []
    fit_em(init, demos, max_iters=1, history=history)
    assert history[0] == pytest.approx(em_objective(init, demos), rel=1e-12)


def test_temporal_split_init():
    demos = [np.arange(20.0).reshape(10, 2) for _ in range(3)]
    m = init_temporal_split(demos, 2)
    np.testing.assert_allclose(m.means, [[4.0, 5.0], [14.0, 15.0]])
    assert m.pi[0] == pytest.approx(1 - 1e-6)
    np.testing.assert_allclose(m.dur_mean, 5.0)
    np.testing.assert_allclose(m.dur_std, 2.5)
    assert m.trans[0, 1] > 0 and m.trans[1, 0] == 0


def test_constant_demo_gives_regularization_floor():
    demos = [np.full((10, 2), 3.0)]
    m = init_temporal_split(demos, 2)
    for g in m.components:
        np.testing.assert_allclose(g.mean, 3.0)
        np.testing.assert_allclose(g.cov, 1e-8 * np.eye(2))


def test_init_rejects_short_demos():
    with pytest.raises(InsufficientData):
        init_temporal_split([np.zeros((3, 2))], 4)


def test_viterbi_and_dwell_times(rng):
    demos, _ = planted_demos(rng, n=3)
    model = fit_hsmm(demos, 2, BlockSplit.halves(1))
    path = viterbi(model, demos[0])
    runs = dwell_times(path)
    assert [s for s, _ in runs] == [0, 1]
    assert sum(n for _, n in runs) == 40
    assert dwell_times([2, 2, 0, 0, 0, 2]) == [(2, 2), (0, 3), (2, 1)]


def test_degenerate_component_is_reseeded(rng):
    demos = [rng.standard_normal((20, 2)) * 0.1 for _ in range(3)]
    init = init_temporal_split(demos, 2, BlockSplit.halves(1))
    far = MultivariateGaussian.from_cov([1e3, 1e3], np.eye(2) * 1e-4)
    stuck = HsmmModel(init.pi, init.trans, [init.components[0], far], init.dur_mean, init.dur_std, init.d_max, init.split, reg=init.reg)
    with pytest.warns(DegenerateComponentWarning):
        out = fit_em(stuck, demos, max_iters=3)
    assert np.all(np.abs(out.means) < 1.0)


def test_model_validation(rng):
    good = random_hsmm(rng, 2, 1, 1, 2)
    with pytest.raises(DimensionMismatch):
        HsmmModel(good.pi[:1], good.trans, good.components, good.dur_mean, good.dur_std, 2, good.split)
    with pytest.raises(DimensionMismatch):
        HsmmModel(good.pi, good.trans, good.components, good.dur_mean, good.dur_std, 2, BlockSplit.halves(1, 2))


def test_scaled_forward_backward_falls_back_to_log_space(rng):
    from mild.hsmm.fit import _forward_backward, _forward_backward_log

    pi = np.array([0.0, 0.5, 0.5])
    a = rng.dirichlet(np.ones(3), size=3)
    log_b = rng.normal(0, 1, (2, 6, 3))
    np.testing.assert_allclose(_forward_backward(pi + 0.1, a, log_b)[2], _forward_backward_log(np.log(pi + 0.1), np.log(a), log_b)[2])
    # the only state with non-negligible emission has zero initial mass: the scaled pass underflows
    log_b[:, 0] = [0.0, -2000.0, -2000.0]
    gamma, _, ll = _forward_backward(pi, a, log_b)
    with np.errstate(divide="ignore"):
        ref = _forward_backward_log(np.log(pi), np.log(a), log_b)
    assert np.all(np.isfinite(gamma)) and np.all(np.isfinite(ll))
    np.testing.assert_allclose(ll, ref[2])
