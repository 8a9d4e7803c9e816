"""Finite-difference audit of every analytic gradient on small random problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import server_terms, silo_terms, stl_surrogate
from .fd import fd_gradient_oracle
from .models import (
    Dataset,
    Model,
    gen_conjugate,
    gen_glmm,
    gen_heterogeneous_classification,
    make_model,
)
from .rng import RngKey, std_normal
from .vfamily import (
    GlobalVarParams,
    LocalVarParams,
    grad_logq_global_wrt_z,
    grad_logq_local_wrt_z,
    jacobian_vjp_global,
    jacobian_vjp_local,
    logq_global,
    logq_local,
    sample_global,
    sample_local,
)

RTOL = 1e-5
RTOL_RELU = 1e-4
TOY_KWARGS = {
    "conjugate": {"tau": 1.3, "lam": 0.8, "s": 0.6},
    "glmm": {},
    "multinom": {"d": 3, "K": 3},
    "hierbnn": {"d": 3, "hidden": 4, "K": 3},
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    trial: int
    max_err: float
    scale: float
    rtol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= 1e-8 + self.rtol * self.scale


def toy_problem(model_id: str, key: RngKey) -> tuple[Model, Dataset]:
    """A small two-silo problem for ``model_id``."""
    model = make_model(model_id, **TOY_KWARGS[model_id])
    if model_id == "conjugate":
        data = gen_conjugate(key, 6, 2, model.tau, model.lam, model.s)
    elif model_id == "glmm":
        data = gen_glmm(key, n_subjects=5, n_visits=3, subject_silo=np.array([0, 0, 1, 1, 1]))
    else:
        data = gen_heterogeneous_classification(key, 2, 5, model.d, model.K, 0.7)
    return model, data


def _normals(key: RngKey, n: int, scale: float, shift: float = 0.0) -> np.ndarray:
    return shift + scale * std_normal(key, n) if n else np.zeros(0)


def random_state(model: Model, data: Dataset, key: RngKey, diagonal: bool = False):
    """Random ``(theta, eta_G, [eta_Lj])`` in a numerically tame region."""
    nG = model.n_global
    g0 = GlobalVarParams.init(nG, diagonal)
    g = GlobalVarParams(
        _normals(key.derive("mu"), nG, 0.5),
        _normals(key.derive("ls"), nG, 0.2, -1.0),
        _normals(key.derive("L"), g0.L_strict.size, 0.3),
        diagonal,
    )
    locals_ = []
    for s in data.silos:
        p0 = LocalVarParams.init(model.n_local(s), nG, model.local_blocks(s))
        k = key.derive("local", s.silo_id)
        flat = np.concatenate([
            _normals(k.derive("mu"), p0.dim, 0.5),
            _normals(k.derive("ls"), p0.dim, 0.2, -1.0),
            _normals(k.derive("L"), p0.L_strict.size, 0.3),
            _normals(k.derive("C"), p0.C.size, 0.3),
        ])
        locals_.append(p0.with_flat(flat))
    theta = model.init_theta() + _normals(key.derive("theta"), model.n_theta, 0.3)
    return theta, g, locals_


def random_noise(model: Model, data: Dataset, key: RngKey):
    eps_G = std_normal(key.derive("eps_G"), model.n_global)
    eps_Ls = [_normals(key.derive("eps_L", s.silo_id), model.n_local(s), 1.0) for s in data.silos]
    return eps_G, eps_Ls


def federated_stl_gradient(model, data, theta, g, locals_, eps_G, eps_Ls):
    """Assemble ``(grad_theta, flat grad over (eta_G, eta_L1, ...))`` from per-silo terms."""
    st = server_terms(model, theta, g, eps_G)
    g_eta, g_theta, own = st.g_eta_G.copy(), st.g_theta.copy(), []
    for silo, p, e in zip(data.silos, locals_, eps_Ls):
        t = silo_terms(model, silo, theta, g, p, eps_G, e)
        g_eta = g_eta + t.g_eta_G
        g_theta = g_theta + t.g_theta
        own.append(t.g_eta_L)
    return g_theta, np.concatenate([g_eta] + own)


def _result(name, trial, analytic, numeric, rtol) -> CheckResult:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    return CheckResult(name, trial, err, scale, rtol)


KINK_MARGIN = 1e-3


def near_kink(model: Model, data: Dataset, z_G, z_Ls) -> bool:
    """True when some ReLU preactivation is within ``KINK_MARGIN`` of zero."""
    if not hasattr(model, "preactivations"):
        return False
    return any(
        np.min(np.abs(model.preactivations(z_G, z_L, s.X)), initial=np.inf) < KINK_MARGIN
        for s, z_L in zip(data.silos, z_Ls)
    )


def check_instance(model: Model, data: Dataset, key: RngKey, trial: int, h: float = 1e-5) -> list[CheckResult] | None:
    """All gradient checks at one random state; ``None`` if the state sits on a ReLU kink."""
    rtol = RTOL_RELU if model.name == "hierbnn" else RTOL
    theta, g, locals_ = random_state(model, data, key, diagonal=trial % 2 == 1)
    eps_G, eps_Ls = random_noise(model, data, key)
    z_G = sample_global(g, eps_G)
    z_Ls = [sample_local(p, g.mu, z_G, e) for p, e in zip(locals_, eps_Ls)]
    if near_kink(model, data, z_G, z_Ls):
        return None
    out = []

    def add(name, analytic, f, x):
        if np.size(x):
            out.append(_result(name, trial, analytic, fd_gradient_oracle(f, x, h), rtol))

    prior = model.log_prior_global(theta, z_G)
    add("model.prior.z_G", prior.d_z_G, lambda z: model.log_prior_global(theta, z).value, z_G)
    add("model.prior.theta", prior.d_theta, lambda t: model.log_prior_global(t, z_G).value, theta)
    for silo, z_L in zip(data.silos, z_Ls):
        lj = model.log_local_joint(silo, theta, z_G, z_L)
        add("model.local.z_G", lj.d_z_G, lambda z: model.log_local_joint(silo, theta, z, z_L).value, z_G)
        add("model.local.z_L", lj.d_z_L, lambda z: model.log_local_joint(silo, theta, z_G, z).value, z_L)
        add("model.local.theta", lj.d_theta, lambda t: model.log_local_joint(silo, t, z_G, z_L).value, theta)

    # variational family
    add("vfamily.logq_global.z", grad_logq_global_wrt_z(g, z_G), lambda z: logq_global(g, z), z_G)
    cot_G = std_normal(key.derive("cot_G"), g.dim)
    add(
        "vfamily.vjp_global",
        jacobian_vjp_global(g, eps_G, cot_G),
        lambda v: cot_G @ sample_global(GlobalVarParams.from_flat(v, g.dim, g.diagonal), eps_G),
        g.flat(),
    )
    for silo, p, e, z_L in zip(data.silos, locals_, eps_Ls, z_Ls):
        if p.dim == 0:
            continue
        dG, dL = grad_logq_local_wrt_z(p, g.mu, z_G, z_L)
        add("vfamily.logq_local.z_G", dG, lambda z: logq_local(p, g.mu, z, z_L), z_G)
        add("vfamily.logq_local.z_L", dL, lambda z: logq_local(p, g.mu, z_G, z), z_L)
        cot = std_normal(key.derive("cot_L", silo.silo_id), p.dim)
        own, via_G = jacobian_vjp_local(p, g, eps_G, e, cot)
        add("vfamily.vjp_local.eta_L", own, lambda v: cot @ sample_local(p.with_flat(v), g.mu, z_G, e), p.flat())

        def through_G(v):
            gg = GlobalVarParams.from_flat(v, g.dim, g.diagonal)
            return cot @ sample_local(p, gg.mu, sample_global(gg, eps_G), e)

        add("vfamily.vjp_local.eta_G", via_G, through_G, g.flat())

    # estimator: assembled federated gradient against the STL surrogate
    g_theta, g_eta = federated_stl_gradient(model, data, theta, g, locals_, eps_G, eps_Ls)
    f, x0 = stl_surrogate(model, data, theta, g, locals_, eps_G, eps_Ls)
    add("estimator.stl.eta", g_eta, f, x0)
    add("estimator.theta", g_theta, lambda t: model.log_joint(data, t, z_G, z_Ls), theta)
    return out


def check_model_gradients(model_id: str, trials: int = 25, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    root = RngKey(seed).derive("gradcheck", model_id)
    results = []
    for t in range(trials):
        model, data = toy_problem(model_id, root.derive(t, "data"))
        for attempt in range(100):
            res = check_instance(model, data, root.derive(t, "state", attempt), t, h)
            if res is not None:
                break
        else:
            raise RuntimeError("could not draw a state away from ReLU kinks")
        results.extend(res)
    return results


def summarize(results: list[CheckResult]) -> list[tuple[str, int, float, bool]]:
    """Per check name: ``(name, n, worst relative error, all passed)``."""
    names = sorted({r.name for r in results})
    rows = []
    for n in names:
        rs = [r for r in results if r.name == n]
        worst = max(r.max_err / r.scale for r in rs)
        rows.append((n, len(rs), worst, all(r.passed for r in rs)))
    return rows
