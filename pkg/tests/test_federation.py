from dataclasses import fields

import numpy as np
import pytest

from fedvar.checkpoint import Checkpoint, from_sfvi, restore_sfvi
from fedvar.estimator import SiloGradReport, silo_terms
from fedvar.federation import (
    RunConfig,
    ServerBroadcast,
    broadcast,
    global_noise,
    init_server,
    init_silo,
    local_noise,
    run_sfvi,
    server_round,
    silo_round,
)
from fedvar.models import gen_conjugate, gen_heterogeneous_classification, make_model, random_assignment
from fedvar.optim import adam_step
from fedvar.rng import RngKey


@pytest.fixture
def small(conj):
    return conj, gen_conjugate(RngKey(21), 20, 1, conj.tau, conj.lam, conj.s)


def test_zero_rounds_gives_initial_row(small):
    model, data = small
    res = run_sfvi(model, data, RunConfig(n_iter=0))
    assert [r["round"] for r in res.trace.rows] == [0]
    assert res.eta_G.mu[0] == 0


def test_messages_hold_no_silo_data():
    # nothing but aggregate gradients, scalars and the global broadcast cross the boundary
    assert [f.name for f in fields(ServerBroadcast)] == ["round", "theta", "eta_G", "eps_G"]
    assert [f.name for f in fields(SiloGradReport)] == ["silo_id", "round", "g_theta", "g_eta_G", "elbo_term"]


def test_silo_rejects_stale_broadcast(small):
    model, data = small
    cfg = RunConfig()
    server = init_server(model, cfg)
    silo = init_silo(model, data.silos[0], cfg)
    b = broadcast(server, model)
    silo_round(silo, b, model, server.key)
    with pytest.raises(ValueError):
        silo_round(silo, b, model, server.key)


def test_report_order_does_not_matter(conj):
    data = gen_conjugate(RngKey(2), 12, 4, conj.tau, conj.lam, conj.s)
    cfg = RunConfig(lr=0.05)
    model, outs = conj, []
    for order in (slice(None), slice(None, None, -1)):
        server = init_server(model, cfg)
        silos = [init_silo(model, s, cfg) for s in data.silos]
        b = broadcast(server, model)
        reports = [silo_round(s, b, model, server.key) for s in silos]
        server_round(server, b, reports[order], model, [s.silo_id for s in silos])
        outs.append(server.eta_G.flat())
    assert np.array_equal(outs[0], outs[1])


def test_server_rejects_foreign_round(small):
    model, data = small
    cfg = RunConfig()
    server = init_server(model, cfg)
    silo = init_silo(model, data.silos[0], cfg)
    b = broadcast(server, model)
    r = silo_round(silo, b, model, server.key)
    bad = SiloGradReport(r.silo_id, 7, r.g_theta, r.g_eta_G, r.elbo_term)
    with pytest.raises(ValueError):
        server_round(server, b, [bad], model, [0])


def test_partition_invariance_short(conj):
    data = gen_conjugate(RngKey(3), 30, 1, conj.tau, conj.lam, conj.s)
    cfg = RunConfig(n_iter=50, lr=0.01, seed=4)
    ref = run_sfvi(conj, data, cfg)
    for J in (2, 3):
        split = data.repartition(random_assignment(RngKey(J), 30, J))
        r = run_sfvi(conj, split, cfg)
        assert np.allclose(r.eta_G.flat(), ref.eta_G.flat(), rtol=1e-12, atol=1e-14)
        assert np.allclose(r.trace.elbo, ref.trace.elbo, rtol=1e-12)


def test_deterministic_and_seed_sensitive(small):
    model, data = small
    a = run_sfvi(model, data, RunConfig(n_iter=20, seed=1))
    b = run_sfvi(model, data, RunConfig(n_iter=20, seed=1))
    c = run_sfvi(model, data, RunConfig(n_iter=20, seed=2))
    assert np.array_equal(a.eta_G.flat(), b.eta_G.flat())
    assert not np.array_equal(a.eta_G.flat(), c.eta_G.flat())


def test_thread_workers_match_serial(conj):
    data = gen_conjugate(RngKey(5), 24, 4, conj.tau, conj.lam, conj.s)
    a = run_sfvi(conj, data, RunConfig(n_iter=15, seed=3))
    b = run_sfvi(conj, data, RunConfig(n_iter=15, seed=3, n_workers=4))
    assert np.array_equal(a.eta_G.flat(), b.eta_G.flat())
    assert np.array_equal(a.trace.elbo, b.trace.elbo)


def test_theta_is_learned_for_empirical_bayes():
    model = make_model("multinom", d=2, K=3)
    data = gen_heterogeneous_classification(RngKey(6), 2, 20, 2, 3, 0.6)
    r = run_sfvi(model, data, RunConfig(n_iter=10, lr=0.01))
    assert r.theta.shape == (2,) and np.any(r.theta != 0)


def test_checkpoint_resume_equals_continuous_run(tmp_path, conj):
    data = gen_conjugate(RngKey(7), 15, 3, conj.tau, conj.lam, conj.s)
    full = run_sfvi(conj, data, RunConfig(n_iter=40, seed=9, lr=0.02))
    half = run_sfvi(conj, data, RunConfig(n_iter=25, seed=9, lr=0.02))
    path = tmp_path / "ck.json"
    from_sfvi(half, "conjugate", {}).save(path)
    server, silos = restore_sfvi(Checkpoint.load(path), conj, data, RunConfig(seed=9, lr=0.02))
    rest = run_sfvi(conj, data, RunConfig(n_iter=15, seed=9, lr=0.02), server, silos)
    assert np.array_equal(rest.eta_G.flat(), full.eta_G.flat())
    for s1, s2 in zip(rest.silos, full.silos):
        assert np.array_equal(s1.eta_L.flat(), s2.eta_L.flat())
    assert np.array_equal(rest.trace.elbo, full.trace.elbo[26:])


def test_conjugate_converges_to_exact_posterior(conj, conj_data):
    r = run_sfvi(conj, conj_data, RunConfig(n_iter=1500, lr=0.02, seed=0))
    assert conj.kl_global_to_exact(conj_data, r.eta_G) < 1e-3


def test_multi_sample_report_is_mean_of_single_samples(conj):
    data = gen_conjugate(RngKey(8), 6, 1, conj.tau, conj.lam, conj.s)
    cfg = RunConfig(n_mc=3, lr=0.05)
    server = init_server(conj, cfg)
    b = broadcast(server, conj)
    assert b.eps_G.shape == (3, 1)
    assert np.array_equal(b.eps_G[0], global_noise(server.key, 1, 1))
    silo = init_silo(conj, data.silos[0], cfg)
    rep = silo_round(silo, b, conj, server.key)
    # oracle: per-sample terms from the same state, Adam on the averaged local gradient,
    # then the global terms at the same latents
    units = conj.local_units(data.silos[0])
    fresh = init_silo(conj, data.silos[0], cfg)
    g = server.eta_G
    noise = [(b.eps_G[s], local_noise(server.key, 1, units, 1, s)) for s in range(3)]
    pre = [silo_terms(conj, fresh.data, np.zeros(0), g, fresh.eta_L, eG, eL) for eG, eL in noise]
    _, flat = adam_step(fresh.opt, fresh.eta_L.flat(), np.mean([t.g_eta_L for t in pre], axis=0))
    moved = fresh.eta_L.with_flat(flat)
    post = [
        silo_terms(conj, fresh.data, np.zeros(0), g, moved, eG, eL, z=(t.z_G, t.z_L)) for (eG, eL), t in zip(noise, pre)
    ]
    assert np.allclose(rep.g_eta_G, np.mean([t.g_eta_G for t in post], axis=0), rtol=1e-13, atol=1e-13)
    assert np.isclose(rep.elbo_term, np.mean([t.elbo_term for t in pre]), rtol=1e-13)
    assert np.array_equal(silo.eta_L.flat(), moved.flat())


def test_multi_sample_keeps_partition_invariance(conj):
    data = gen_conjugate(RngKey(9), 20, 1, conj.tau, conj.lam, conj.s)
    cfg = RunConfig(n_iter=30, lr=0.02, seed=2, n_mc=3)
    a = run_sfvi(conj, data, cfg)
    b = run_sfvi(conj, data.repartition(random_assignment(RngKey(1), 20, 4)), cfg)
    assert np.allclose(a.eta_G.flat(), b.eta_G.flat(), rtol=1e-12, atol=1e-14)
    single = run_sfvi(conj, data, RunConfig(n_iter=30, lr=0.02, seed=2))
    assert not np.array_equal(a.eta_G.flat(), single.eta_G.flat())
    with pytest.raises(ValueError):
        RunConfig(n_mc=0)
