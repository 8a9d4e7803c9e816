"""Acceptance suite: one PASS/FAIL line per criterion at the stated tolerances.

Run with ``pytest -v -s tests/test_acceptance.py`` or directly as a script
(``python3 tests/test_acceptance.py``) to print just the summary lines.
"""

import sys
import time

import numpy as np
import pytest

from fedvar.averaging import (
    AvgConfig,
    GaussianSummary,
    barycenter_cov_diagonal,
    barycenter_cov_fixed_point,
    run_sfvi_avg,
)
from fedvar.estimator import pooled_stl_gradient, server_terms, silo_terms
from fedvar.federation import RunConfig, run_sfvi
from fedvar.gradcheck import check_model_gradients, federated_stl_gradient, random_noise, random_state, toy_problem
from fedvar.harness import predictive_proba
from fedvar.models import (
    ConjugateGaussianModel,
    ToyHierBNNModel,
    gen_conjugate,
    gen_heterogeneous_classification,
    random_assignment,
)
from fedvar.rng import RngKey

pytestmark = pytest.mark.slow

MODELS = ("conjugate", "glmm", "multinom", "hierbnn")
CONJ_LR = 0.01


def _conjugate_data(N=200, J=1, seed=7):
    model = ConjugateGaussianModel()
    return model, gen_conjugate(RngKey(seed), N, J, model.tau, model.lam, model.s)


def criterion_1():
    model, data = _conjugate_data()
    cfg = RunConfig(n_iter=2000, seed=3, lr=CONJ_LR)
    t0 = time.perf_counter()
    runs = {}
    for J in (1, 2, 5):
        split = data if J == 1 else data.repartition(random_assignment(RngKey(100 + J), data.N, J))
        runs[J] = run_sfvi(model, split, cfg)
    elapsed = time.perf_counter() - t0
    ref = runs[1]
    worst = 0.0
    for J in (2, 5):
        r = runs[J]
        a = np.concatenate([r.theta, r.eta_G.flat(), r.trace.elbo])
        b = np.concatenate([ref.theta, ref.eta_G.flat(), ref.trace.elbo])
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))))
    ok = worst <= 1e-6 and elapsed < 60
    return ok, f"max relative difference {worst:.1e} over final params and {len(ref.trace.rows)} ELBOs, {elapsed:.1f}s"


def criterion_2():
    model, data = _conjugate_data(J=5)
    t0 = time.perf_counter()
    r = run_sfvi(model, data, RunConfig(n_iter=5000, seed=3, lr=CONJ_LR, log_every=5000))
    elapsed = time.perf_counter() - t0
    kl = model.kl_global_to_exact(data, r.eta_G)
    locals_ = [s.eta_L for s in r.silos]
    gap = abs(model.analytic_elbo(data, r.eta_G, locals_) - model.log_evidence(data))
    ok = kl < 1e-3 and gap < 1e-2 and elapsed < 60
    return ok, f"KL {kl:.1e}, |ELBO - log evidence| {gap:.1e}, {elapsed:.1f}s"


def criterion_3():
    model, data = _conjugate_data(N=40, J=4)
    g, locals_ = model.exact_posterior(data)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        eps_G = rng.normal(size=1)
        grad_G = server_terms(model, np.zeros(0), g, eps_G).g_eta_G
        parts = []
        for s, p in zip(data.silos, locals_):
            t = silo_terms(model, s, np.zeros(0), g, p, eps_G, rng.normal(size=p.dim))
            grad_G = grad_G + t.g_eta_G
            parts.append(t.g_eta_L)
        worst = max(worst, float(np.linalg.norm(np.concatenate([grad_G] + parts))))
    return worst < 1e-8, f"max gradient norm {worst:.1e} over 100 draws"


def criterion_4():
    details, ok = [], True
    for m in MODELS:
        res = check_model_gradients(m, trials=25, seed=0)
        worst = max(r.max_err / r.scale for r in res)
        passed = all(r.passed for r in res)
        ok &= passed
        details.append(f"{m} {worst:.0e}")
    return ok, "worst relative error: " + ", ".join(details)


def criterion_5():
    rng = np.random.default_rng(5)
    diff, max_res = 0.0, 0.0
    for _ in range(10):
        sums = [GaussianSummary(rng.normal(size=5), np.exp(rng.normal(size=5))) for _ in range(4)]
        S, _, res = barycenter_cov_fixed_point(sums, tol=1e-9)
        diff = max(diff, float(np.max(np.abs(S - np.diag(barycenter_cov_diagonal(sums))))))
        max_res = max(max_res, res)
    A = rng.normal(size=(5, 5))
    Sigma = A @ A.T + 0.5 * np.eye(5)
    S, _, res = barycenter_cov_fixed_point([GaussianSummary(np.zeros(5), Sigma)] * 3, tol=1e-9)
    idem = float(np.linalg.norm(S - Sigma))
    max_res = max(max_res, res)
    closed = barycenter_cov_diagonal([GaussianSummary([0.0], [1.0]), GaussianSummary([0.0], [9.0])])[0]
    ok = diff < 1e-8 and idem < 1e-9 and max_res < 1e-9 and closed == 4.0
    return ok, f"vs diagonal formula {diff:.1e}, idempotence {idem:.1e}, max residual {max_res:.1e}, {{1,9}} -> {closed:g}"


def criterion_6():
    worst = 0.0
    for m in MODELS:
        root = RngKey(6).derive("fed-vs-pooled", m)
        for t in range(20):
            model, data = toy_problem(m, root.derive(t, "data"))
            theta, g, locals_ = random_state(model, data, root.derive(t, "state"), diagonal=t % 2 == 1)
            eps_G, eps_Ls = random_noise(model, data, root.derive(t, "noise"))
            gt, ge = federated_stl_gradient(model, data, theta, g, locals_, eps_G, eps_Ls)
            pt, pG, pL = pooled_stl_gradient(model, data, theta, g, locals_, eps_G, eps_Ls)
            worst = max(worst, float(np.max(np.abs(ge - np.concatenate([pG] + pL)))))
            worst = max(worst, float(np.max(np.abs(gt - pt), initial=0.0)))
    return worst < 1e-10, f"max absolute difference {worst:.1e} over 4 models x 20 states"


def criterion_7():
    model, data = _conjugate_data(J=3)
    t0 = time.perf_counter()
    r = run_sfvi_avg(model, data, AvgConfig(R=20, m=200, mode="diagonal", seed=3, lr=CONJ_LR))
    elapsed = time.perf_counter() - t0
    kl = model.kl_global_to_exact(data, r.eta_G)
    return kl < 0.05 and elapsed < 120, f"KL {kl:.1e}, {elapsed:.1f}s"


def _minority_accuracy(probs, test_silo, dominant):
    mask = test_silo.y != dominant
    return float(np.mean(np.argmax(probs, axis=1)[mask] == test_silo.y[mask]))


def criterion_8(seeds=range(5), n_iter=2000):
    model = ToyHierBNNModel(d=4, hidden=8, K=4)
    hier, indep = [], []
    for seed in seeds:
        key = RngKey(seed).derive("data")
        train = gen_heterogeneous_classification(key, 5, 100, 4, 4, 0.9)
        test = gen_heterogeneous_classification(key, 5, 100, 4, 4, 0.9, split="test")
        cfg = RunConfig(n_iter=n_iter, lr=0.01, seed=seed, log_every=n_iter)
        fed = run_sfvi(model, train, cfg)
        p_fed = predictive_proba(model, fed.eta_G, fed.local_params(), test, 100, seed)
        h, i = [], []
        for s, ts in zip(train.silos, test.silos):
            alone = run_sfvi(model, s.standalone(), cfg)
            p_alone = predictive_proba(model, alone.eta_G, alone.local_params(), ts.standalone(), 100, seed)
            h.append(_minority_accuracy(p_fed[s.silo_id], ts, s.silo_id % 4))
            i.append(_minority_accuracy(p_alone[s.silo_id], ts, s.silo_id % 4))
        hier.append(np.mean(h))
        indep.append(np.mean(i))
    a, b = float(np.mean(hier)), float(np.mean(indep))
    return a > b, f"non-dominant-class accuracy: hierarchical {a:.3f} vs per-silo {b:.3f} (5 seeds)"


CRITERIA = {
    1: ("partition invariance", criterion_1),
    2: ("exact-posterior recovery", criterion_2),
    3: ("STL zero variance at optimum", criterion_3),
    4: ("gradient correctness", criterion_4),
    5: ("barycenter correctness", criterion_5),
    6: ("federated equals monolithic gradients", criterion_6),
    7: ("SFVI-Avg convergence", criterion_7),
    8: ("heterogeneous-data directional claim", criterion_8),
}


def _line(k, ok, detail):
    name = CRITERIA[k][0]
    return f"criterion {k} ({name}): {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k][1]()
    with capsys.disabled():
        print("\n" + _line(k, ok, detail))
    assert ok, detail


def test_criterion_9(capsys):
    with capsys.disabled():
        print("\ncriterion 9 (topic-model and MCMC comparisons): SKIP (out of scope)")


if __name__ == "__main__":
    failed = 0
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k][1]()
        failed += not ok
        print(_line(k, ok, detail), flush=True)
    print("criterion 9 (topic-model and MCMC comparisons): SKIP (out of scope)")
    sys.exit(1 if failed else 0)
