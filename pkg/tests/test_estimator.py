from dataclasses import fields

import numpy as np
import pytest

from fedvar.estimator import (
    NonFiniteError,
    SiloGradReport,
    elbo_terms,
    pooled_stl_gradient,
    server_global_grad,
    server_terms,
    server_theta_grad,
    silo_terms,
    silo_theta_grad,
)
from fedvar.fd import fd_gradient_oracle
from fedvar.federation import global_noise, local_noise
from fedvar.gradcheck import federated_stl_gradient, random_noise, random_state, toy_problem
from fedvar.models import ConjugateGaussianModel, Dataset, Silo, gen_conjugate, random_assignment
from fedvar.models.base import LogDensity, Model
from fedvar.rng import RngKey
from fedvar.vfamily import GlobalVarParams, LocalVarParams


def _exact_noise(g, model, data):
    return g.normal(size=1), [g.normal(size=model.n_local(s)) for s in data.silos]


def test_exact_posterior_elbo_equals_log_evidence(conj, conj_data):
    g_, locals_ = conj.exact_posterior(conj_data)
    logZ = conj.log_evidence(conj_data)
    g = np.random.default_rng(0)
    for _ in range(20):
        eG, eLs = _exact_noise(g, conj, conj_data)
        est = elbo_terms(conj, np.zeros(0), g_, locals_, eG, eLs, conj_data)
        assert abs(est.value - logZ) < 1e-10
        assert np.isclose(est.value, est.server_term + sum(est.silo_terms))
    assert abs(conj.analytic_elbo(conj_data, g_, locals_) - logZ) < 1e-10


def test_elbo_additive_across_partitions(conj):
    data = gen_conjugate(RngKey(4), 10, 1, conj.tau, conj.lam, conj.s)
    split = data.repartition(random_assignment(RngKey(5), 10, 2))
    key = RngKey(9)
    g = GlobalVarParams(np.array([0.3]), np.array([-0.4]), np.zeros(0))
    full_local = LocalVarParams(np.linspace(-1, 1, 10), np.full((10, 1), 0.2), np.full(10, -0.5), np.zeros(0), (1,) * 10)

    def total(ds):
        eG = global_noise(key, 3, 1)
        locals_, eLs = [], []
        for s in ds.silos:
            u = conj.local_units(s)
            locals_.append(LocalVarParams(full_local.mu_bar[u], full_local.C[u], full_local.log_sigma[u], np.zeros(0), (1,) * u.size))
            eLs.append(local_noise(key, 3, u, 1))
        return elbo_terms(conj, np.zeros(0), g, locals_, eG, eLs, ds).value

    assert abs(total(data) - total(split)) < 1e-10


def test_zero_data_elbo_is_negative_kl():
    m = ConjugateGaussianModel(tau=1.5)
    g = GlobalVarParams(np.array([0.7]), np.array([-0.3]), np.zeros(0))
    v, t2 = np.exp(2 * g.log_sigma[0]), m.tau**2
    kl = 0.5 * (v / t2 + g.mu[0] ** 2 / t2 - 1 - np.log(v / t2))
    assert np.isclose(m.analytic_elbo(Dataset([]), g, []), -kl, atol=1e-12)
    rng = np.random.default_rng(1)
    vals = np.array([server_terms(m, np.zeros(0), g, rng.normal(size=1)).elbo_term for _ in range(20000)])
    assert abs(vals.mean() + kl) < 4 * vals.std() / np.sqrt(vals.size)


def test_stl_zero_gradient_at_exact_posterior(conj, conj_data):
    g_, locals_ = conj.exact_posterior(conj_data)
    rng = np.random.default_rng(2)
    for _ in range(20):
        eG, eLs = _exact_noise(rng, conj, conj_data)
        st = server_terms(conj, np.zeros(0), g_, eG)
        total = st.g_eta_G.copy()
        for s, p, e in zip(conj_data.silos, locals_, eLs):
            t = silo_terms(conj, s, np.zeros(0), g_, p, eG, e)
            assert np.linalg.norm(t.g_eta_L) < 1e-8
            total += t.g_eta_G
        assert np.linalg.norm(total) < 1e-8


class _Decoupled(Model):
    """Likelihood ignores z_G entirely."""

    name = "decoupled"
    n_global = 2
    unit_dim = 1

    def local_units(self, silo):
        return np.sort(silo.index)

    def log_prior_global(self, theta, z_G):
        return LogDensity(float(-0.5 * z_G @ z_G), np.zeros(0), -z_G)

    def log_local_joint(self, silo, theta, z_G, z_L):
        r = z_L - silo.y
        return LogDensity(float(-0.5 * r @ r), np.zeros(0), np.zeros(2), -r)


def test_decoupled_silo_reports_nothing_but_updates_locally():
    m = _Decoupled()
    silo = Silo(0, np.arange(3), np.array([1.0, -2.0, 0.5]))
    rng = np.random.default_rng(3)
    g = GlobalVarParams(rng.normal(size=2), rng.normal(size=2), rng.normal(size=1))
    p = LocalVarParams(np.zeros(3), np.zeros((3, 2)), np.zeros(3), np.zeros(3))
    t = silo_terms(m, silo, np.zeros(0), g, p, rng.normal(size=2), rng.normal(size=3))
    assert np.all(t.g_eta_G == 0)
    assert np.linalg.norm(t.g_eta_L) > 0
    assert silo_theta_grad(m, silo, np.zeros(0), np.zeros(2), np.zeros(3)).size == 0


@pytest.mark.parametrize("model_id", ["conjugate", "glmm", "multinom", "hierbnn"])
def test_federated_equals_pooled(model_id):
    root = RngKey(0).derive("fed-vs-pooled", model_id)
    for t in range(5):
        model, data = toy_problem(model_id, root.derive(t, "data"))
        theta, g, locals_ = random_state(model, data, root.derive(t, "state"), diagonal=t % 2 == 1)
        eG, eLs = random_noise(model, data, root.derive(t, "noise"))
        gt_f, ge_f = federated_stl_gradient(model, data, theta, g, locals_, eG, eLs)
        gt_p, geG_p, geL_p = pooled_stl_gradient(model, data, theta, g, locals_, eG, eLs)
        assert np.max(np.abs(gt_f - gt_p), initial=0) < 1e-10
        assert np.max(np.abs(ge_f - np.concatenate([geG_p] + geL_p))) < 1e-10


def test_stl_gradient_unbiased_for_elbo(conj):
    data = gen_conjugate(RngKey(12), 3, 1, conj.tau, conj.lam, conj.s)
    rng = np.random.default_rng(4)
    g = GlobalVarParams(np.array([0.2]), np.array([-0.5]), np.zeros(0))
    p = LocalVarParams(rng.normal(size=3), rng.normal(scale=0.3, size=(3, 1)), np.full(3, -0.3), np.zeros(0), (1,) * 3)
    n_global = g.n_params

    def elbo(v):
        gg = GlobalVarParams.from_flat(v[:n_global], 1)
        return conj.analytic_elbo(data, gg, [p.with_flat(v[n_global:])])

    target = fd_gradient_oracle(elbo, np.concatenate([g.flat(), p.flat()]))
    n = 20000
    samples = np.empty((n, target.size))
    for i in range(n):
        eG, eL = rng.normal(size=1), rng.normal(size=3)
        st = server_terms(conj, np.zeros(0), g, eG)
        t = silo_terms(conj, data.silos[0], np.zeros(0), g, p, eG, eL)
        samples[i] = np.concatenate([st.g_eta_G + t.g_eta_G, t.g_eta_L])
    se = samples.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(samples.mean(axis=0) - target) < 4 * se + 1e-6)


def _report(j, g, r=0):
    return SiloGradReport(j, r, np.array([float(j)]), np.asarray(g, dtype=float), 0.0)


def test_server_fold_order_and_validation():
    rng = np.random.default_rng(5)
    reps = [_report(j, rng.normal(size=4) * 10.0 ** rng.integers(-8, 8)) for j in range(6)]
    a = server_global_grad(np.zeros(4), reps, range(6))
    b = server_global_grad(np.zeros(4), reps[::-1], range(6))
    assert np.array_equal(a, b)
    assert np.array_equal(server_global_grad(np.ones(4), [_report(0, np.zeros(4))]), np.ones(4))
    assert np.array_equal(server_theta_grad(np.array([0.5]), reps), [0.5 + 15.0])
    with pytest.raises(ValueError):
        server_global_grad(np.zeros(4), reps + [reps[0]])
    with pytest.raises(ValueError):
        server_global_grad(np.zeros(4), reps[:-1], range(6))


def test_reports_carry_only_aggregates():
    assert {f.name for f in fields(SiloGradReport)} == {"silo_id", "round", "g_theta", "g_eta_G", "elbo_term"}


def test_non_finite_is_raised(conj, conj_data):
    g = GlobalVarParams(np.array([np.nan]), np.zeros(1), np.zeros(0))
    with pytest.raises(NonFiniteError):
        server_terms(conj, np.zeros(0), g, np.zeros(1))
