import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import oracle_individuals, random_hp, random_params, random_training_set
from magmagp.data import IndividualSeries, PriorMean, TrainingSet
from magmagp.kernels import HyperParams, NoiseVariance, cov_matrix, psi_matrix
from magmagp.simulation import SimConfig, simulate_dataset
from magmagp.training import (
    DEFAULT_INIT_ELL,
    DEFAULT_INIT_SIGMA2,
    DEFAULT_INIT_V,
    Diagnostics,
    HyperPosterior,
    ModelHyperParams,
    TrainConfig,
    _summarise_jitter,
    e_step,
    hyper_posterior_on,
    init_theta,
    m_step,
    observed_data_log_likelihood,
    q_objective_common,
    q_objective_individual,
    q_objective_theta0,
    q_value,
    train_em,
)
from oracles import (
    central_difference,
    corrected_objective,
    gaussian_logpdf,
    gram,
    joint_hyper_posterior,
    relative_error,
    stacked_log_likelihood,
)

M0 = PriorMean(0.7)


def m0_scalar(x):
    return 0.7


def _fd_check(fun, x):
    value, grad = fun(x)
    fd = central_difference(lambda z: fun(z)[0], x)
    return relative_error(grad, fd)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def test_e_step_identity_example():
    # ell -> 0 makes K = I on a spread grid; v -> 0 and sigma2 = 1 make Psi = I
    t = np.array([0.0, 1.0, 2.0])
    y = np.array([2.0, -4.0, 6.0])
    data = TrainingSet([IndividualSeries("a", t, y)])
    params = ModelHyperParams(
        "common", HyperParams(0.0, -15.0), shared=(HyperParams(-400.0, 0.0), NoiseVariance(0.0)),
        mean_nugget=0.0,
    )
    post = e_step(data, params, PriorMean(0.0))
    np.testing.assert_allclose(post.cov, 0.5 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(post.mean, 0.5 * y, atol=1e-14)


def test_empty_sum_returns_prior():
    grid = np.array([0.0, 0.4, 1.0])
    theta0 = HyperParams(0.3, 0.1)
    post = hyper_posterior_on(grid, iter(()), theta0, M0)
    np.testing.assert_array_equal(post.mean, M0(grid))
    np.testing.assert_array_equal(post.cov, cov_matrix(grid, grid, theta0))


@pytest.mark.parametrize("nugget", [0.0, 1e-8])
@pytest.mark.parametrize("seed", range(5))
def test_e_step_matches_joint_oracle_uncommon(seed, nugget):
    rng = np.random.default_rng(seed)
    data = random_training_set(rng, 3, 8, common_grid=False)
    params = random_params(rng, data, "different", mean_nugget=nugget)
    post = e_step(data, params, M0)
    theta0 = (params.theta0.log_v, params.theta0.log_ell)
    m, c = joint_hyper_posterior(data.grid, oracle_individuals(data, params), theta0, m0_scalar, nugget)
    assert relative_error(post.mean, m) < 1e-8
    assert relative_error(post.cov, c) < 1e-8


def test_e_step_error_names_individual():
    data = TrainingSet([IndividualSeries("bad", [0.0, 1.0], [0.0, 0.0])])
    params = ModelHyperParams(
        "common", HyperParams(0.0, 0.0), shared=(HyperParams(-400.0, 0.0), NoiseVariance(-800.0))
    )
    with pytest.raises(Exception, match="Psi\\[bad\\]"):
        e_step(data, params, M0)


@given(seed=st.integers(0, 10_000), common=st.booleans())
def test_hyper_posterior_invariants(seed, common):
    rng = np.random.default_rng(seed)
    data = random_training_set(rng, int(rng.integers(1, 5)), 10, common)
    params = random_params(rng, data, "different")
    post = e_step(data, params, M0)
    K = cov_matrix(data.grid, data.grid, params.theta0)
    assert np.max(np.abs(post.cov - post.cov.T)) <= 1e-8
    assert np.linalg.eigvalsh(post.cov).min() >= -1e-8
    # the posterior covariance stays below the prior in Loewner order
    assert np.linalg.eigvalsh(K - post.cov).min() >= -1e-8

    # adding one more individual can only shrink the variances on the same grid
    extra_t = data.grid[rng.random(data.grid.size) < 0.5]
    if extra_t.size:
        more = TrainingSet(list(data) + [IndividualSeries("extra", extra_t, rng.standard_normal(extra_t.size))])
        ind = dict(params.individual)
        ind["extra"] = random_hp(rng)
        post2 = e_step(more, ModelHyperParams("different", params.theta0, individual=ind, mean_nugget=0.0), M0)
        assert np.all(np.diag(post2.cov) <= np.diag(post.cov) + 1e-8)


# ---------------------------------------------------------------------------
# M-step objectives
# ---------------------------------------------------------------------------


def _posterior(seed, common=False, m=3):
    rng = np.random.default_rng(seed)
    data = random_training_set(rng, m, 9, common)
    params = random_params(rng, data, "different")
    return rng, data, params, e_step(data, params, M0)


def test_theta0_objective_without_trace_term():
    _, data, params, post = _posterior(1)
    zero = HyperPosterior(post.grid, post.mean, np.zeros_like(post.cov))
    value, _ = q_objective_theta0(zero, M0, params.theta0)
    K = cov_matrix(post.grid, post.grid, params.theta0)
    assert value == pytest.approx(gaussian_logpdf(post.mean, M0(post.grid), K), rel=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_theta0_objective_value_and_gradient(seed):
    rng, _, params, post = _posterior(seed)
    theta0 = HyperParams(*rng.uniform([-0.5, -0.5], [1.0, 0.5]))
    value, _ = q_objective_theta0(post, M0, theta0)
    K = gram(post.grid, post.grid, theta0.log_v, theta0.log_ell)
    expected = corrected_objective(post.mean - M0(post.grid), post.cov, K)
    assert value == pytest.approx(expected, rel=1e-8)
    err = _fd_check(lambda x: q_objective_theta0(post, M0, HyperParams(*x)), theta0.to_array())
    assert err < 1e-5


def test_individual_objective_closed_form():
    _, data, params, post = _posterior(2)
    s = data.individuals[0]
    idx = np.searchsorted(post.grid, s.timestamps)
    zero = HyperPosterior(post.grid, post.mean, np.zeros_like(post.cov))
    at_mean = IndividualSeries(s.id, s.timestamps, post.mean[idx])
    hp, noise = params.for_individual(s.id)
    value, _ = q_objective_individual(zero, at_mean, hp, noise)
    _, logdet = np.linalg.slogdet(2 * math.pi * psi_matrix(s.timestamps, hp, noise))
    assert value == pytest.approx(-0.5 * logdet, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_individual_objective_value_and_gradient(seed):
    rng, data, params, post = _posterior(seed)
    s = data.individuals[1]
    hp, noise = random_hp(rng)
    x = np.array([hp.log_v, hp.log_ell, noise.log_sigma2])
    idx = np.searchsorted(post.grid, s.timestamps)
    S = gram(s.timestamps, s.timestamps, hp.log_v, hp.log_ell) + noise.sigma2 * np.eye(len(s))
    expected = corrected_objective(s.outputs - post.mean[idx], post.cov[np.ix_(idx, idx)], S)
    assert q_objective_individual(post, s, hp, noise)[0] == pytest.approx(expected, rel=1e-8)
    f = lambda z: q_objective_individual(post, s, HyperParams(z[0], z[1]), NoiseVariance(z[2]))  # noqa: E731
    assert _fd_check(f, x) < 1e-5


@pytest.mark.parametrize("common", [True, False])
def test_common_objective_is_sum_and_gradient(common):
    rng, data, _, post = _posterior(7, common=common, m=4)
    hp, noise = random_hp(rng)
    total = sum(q_objective_individual(post, s, hp, noise)[0] for s in data)
    grad = sum(q_objective_individual(post, s, hp, noise)[1] for s in data)
    v, g = q_objective_common(post, data.individuals, hp, noise)
    assert v == pytest.approx(total, rel=1e-10)
    np.testing.assert_allclose(g, grad, rtol=1e-8, atol=1e-10)
    x = np.array([hp.log_v, hp.log_ell, noise.log_sigma2])
    f = lambda z: q_objective_common(post, data.individuals, HyperParams(z[0], z[1]), NoiseVariance(z[2]))  # noqa: E731
    assert _fd_check(f, x) < 1e-5


def test_sigma2_optimum_near_grid_search():
    # one individual, kernel at truth, known posterior of the mean process
    rng = np.random.default_rng(0)
    t = np.arange(40) / 4.0
    hp = HyperParams.from_natural(1.5, 1.2)
    f = rng.multivariate_normal(np.zeros(t.size), cov_matrix(t, t, hp) + 1e-10 * np.eye(t.size))
    y = f + 0.5 * rng.standard_normal(t.size)
    post = HyperPosterior(t, np.zeros(t.size), np.zeros((t.size, t.size)))
    s = IndividualSeries("a", t, y)

    from magmagp._optimize import maximize

    res = maximize(
        lambda z: (lambda vg: (vg[0], vg[1][2:]))(q_objective_individual(post, s, hp, NoiseVariance(z[0]))),
        np.array([math.log(0.16)]),
    )
    s2_opt = math.exp(res.x[0])
    grid = np.logspace(-3, math.log10(4), 2000)
    K = gram(t, t, hp.log_v, hp.log_ell)
    vals = [gaussian_logpdf(y, np.zeros_like(y), K + g * np.eye(t.size)) for g in grid]
    s2_grid = grid[int(np.argmax(vals))]
    assert abs(s2_opt - s2_grid) <= 0.2 * s2_grid


# ---------------------------------------------------------------------------
# M-step and EM
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["common", "different"])
def test_m_step_improves_q(mode):
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        data = random_training_set(rng, 3, 8, common_grid=bool(seed % 2))
        params = random_params(rng, data, mode, mean_nugget=1e-8)
        post = e_step(data, params, M0)
        new = m_step(data, post, mode, params, M0)
        assert q_value(data, post, new, M0) >= q_value(data, post, params, M0) - 1e-9
        if mode == "common":
            assert new.individual is None and len(new.shared) == 2
        else:
            assert set(new.individual) == set(data.ids)


def test_m_step_single_individual_modes_agree():
    rng = np.random.default_rng(4)
    data = random_training_set(rng, 1, 8, common_grid=True)
    pair = random_hp(rng)
    theta0 = HyperParams(0.2, 0.3)
    common = ModelHyperParams("common", theta0, shared=pair)
    diff = ModelHyperParams("different", theta0, individual={"i0": pair})
    post = e_step(data, common, M0)
    a = m_step(data, post, "common", common, M0)
    b = m_step(data, post, "different", diff, M0)
    xa = np.r_[a.shared[0].to_array(), a.shared[1].log_sigma2]
    pair_b = b.individual["i0"]
    xb = np.r_[pair_b[0].to_array(), pair_b[1].log_sigma2]
    np.testing.assert_allclose(xa, xb, rtol=1e-6, atol=1e-8)


def test_m_step_records_optimizer_warnings():
    rng = np.random.default_rng(9)
    data = random_training_set(rng, 2, 8, common_grid=False)
    params = random_params(rng, data, "common")
    diag = Diagnostics()
    m_step(data, e_step(data, params, M0), "common", params, M0, max_evals=2, diagnostics=diag)
    assert diag.warnings and all(w.startswith("optimizer") for w in diag.warnings)
    with pytest.raises(ValueError):
        m_step(data, e_step(data, params, M0), "different", params, M0)


def test_observed_ll_single_individual_and_permutation():
    rng = np.random.default_rng(12)
    data = random_training_set(rng, 1, 7, common_grid=True)
    params = random_params(rng, data, "common")
    s = data.individuals[0]
    hp, noise = params.shared
    cov = cov_matrix(s.timestamps, s.timestamps, params.theta0) + psi_matrix(s.timestamps, hp, noise)
    assert observed_data_log_likelihood(data, params, M0) == pytest.approx(
        gaussian_logpdf(s.outputs, M0(s.timestamps), cov), rel=1e-10
    )
    data3 = random_training_set(rng, 3, 7, common_grid=False)
    p3 = random_params(rng, data3, "different")
    base = observed_data_log_likelihood(data3, p3, M0)
    perm = TrainingSet(list(data3)[::-1])
    assert observed_data_log_likelihood(perm, p3, M0) == pytest.approx(base, rel=1e-12)
    theta0 = (p3.theta0.log_v, p3.theta0.log_ell)
    assert base == pytest.approx(stacked_log_likelihood(oracle_individuals(data3, p3), theta0, m0_scalar), rel=1e-10)


def test_observed_ll_matches_quadrature():
    # 2-point grid, two individuals: integrate mu0 out numerically
    t = np.array([0.0, 1.0])
    data = TrainingSet([IndividualSeries("a", t, [0.4, 1.1]), IndividualSeries("b", t, [-0.3, 0.5])])
    params = ModelHyperParams(
        "different",
        HyperParams(0.0, 0.0),
        individual={
            "a": (HyperParams(-0.5, 0.2), NoiseVariance(-1.0)),
            "b": (HyperParams(-0.2, -0.1), NoiseVariance(-0.5)),
        },
        mean_nugget=0.0,
    )
    m0 = PriorMean(0.2)
    K = gram(t, t, 0.0, 0.0)
    L = np.linalg.cholesky(K)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / math.sqrt(2 * math.pi)
    psis = {s.id: psi_matrix(t, *params.for_individual(s.id)) for s in data}
    total = 0.0
    for z1, w1 in zip(nodes, weights):
        for z2, w2 in zip(nodes, weights):
            mu = 0.2 + L @ np.array([z1, z2])
            dens = 1.0
            for s in data:
                dens *= math.exp(gaussian_logpdf(s.outputs, mu, psis[s.id]))
            total += w1 * w2 * dens
    assert observed_data_log_likelihood(data, params, m0) == pytest.approx(math.log(total), rel=1e-8)


def test_init_theta_defaults_and_restarts():
    data = random_training_set(np.random.default_rng(0), 2, 6, False)
    p = init_theta(TrainConfig(mode="different"), data)
    assert DEFAULT_INIT_V == math.e and DEFAULT_INIT_ELL == math.e
    assert DEFAULT_INIT_SIGMA2 == pytest.approx(0.16)
    assert p.theta0 == HyperParams(1.0, 1.0)
    assert all(hp == HyperParams(1.0, 1.0) for hp, _ in p.individual.values())
    assert all(n.sigma2 == pytest.approx(0.16) for _, n in p.individual.values())
    cfg = TrainConfig(mode="common", seed=3)
    r1, r1b = init_theta(cfg, data, 1), init_theta(cfg, data, 1)
    assert r1 == r1b and r1 != init_theta(cfg, data, 0)
    assert abs(r1.theta0.log_v - 1.0) <= 1.0


@pytest.mark.parametrize("mode", ["common", "different"])
def test_train_em_monotone_and_deterministic(mode):
    rng = np.random.default_rng(21)
    data = random_training_set(rng, 3, 10, common_grid=False)
    cfg = TrainConfig(mode=mode, n_restarts=2, seed=5)
    a, b = train_em(data, cfg), train_em(data, cfg)
    assert np.all(np.diff(a.diagnostics.trace) >= -1e-6)
    assert a.params == b.params
    np.testing.assert_array_equal(a.hyper_posterior.cov, b.hyper_posterior.cov)
    lls = a.diagnostics.restart_log_likelihoods
    assert len(lls) == 2 and a.diagnostics.trace[-1] == max(lls)


def test_train_em_on_simulated_data_converges():
    ds = simulate_dataset(SimConfig(seed=4))
    model = train_em(ds.training, TrainConfig())
    assert model.diagnostics.converged and model.diagnostics.iterations <= 100
    np.testing.assert_array_equal(model.grid, ds.training.grid)


def test_common_mode_permutation_invariance():
    rng = np.random.default_rng(8)
    data = random_training_set(rng, 4, 10, common_grid=False)
    a = train_em(data, TrainConfig(mode="common"))
    b = train_em(TrainingSet(list(data)[::-1]), TrainConfig(mode="common"))
    qa = q_value(data, a.hyper_posterior, a.params, a.prior_mean)
    qb = q_value(data, b.hyper_posterior, b.params, b.prior_mean)
    assert abs(qa - qb) <= 1e-6 * max(1.0, abs(qa))


def test_train_em_rejects_bad_input():
    with pytest.raises(ValueError):
        train_em(TrainingSet([]), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(mode="shared")
    with pytest.raises(ValueError):
        TrainConfig(n_restarts=0)


def test_model_hyperparams_contract_and_round_trip():
    theta0 = HyperParams(0.1, 0.2)
    pair = (HyperParams(0.3, 0.4), NoiseVariance(-1.0))
    with pytest.raises(ValueError):
        ModelHyperParams("common", theta0)
    with pytest.raises(ValueError):
        ModelHyperParams("different", theta0, shared=pair)
    p = ModelHyperParams("different", theta0, individual={"a": pair, "b": pair})
    assert ModelHyperParams.from_dict(p.to_dict()) == p
    c = ModelHyperParams("common", theta0, shared=pair, mean_nugget=0.0)
    assert ModelHyperParams.from_dict(c.to_dict()) == c


def test_jitter_summary():
    class W:
        def __init__(self, role, jitter):
            self.message = type("M", (), {"role": role, "jitter": jitter})()

    out = _summarise_jitter([W("a", 1e-8), W("a", 1e-6), W("b", 1e-7)])
    assert out == [
        {"role": "a", "count": 2, "max_jitter": 1e-6},
        {"role": "b", "count": 1, "max_jitter": 1e-7},
    ]
