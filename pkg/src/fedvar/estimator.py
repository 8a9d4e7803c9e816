"""Single-sample ELBO and its sticking-the-landing gradient, split by silo.

For one noise draw the ELBO estimate decomposes as ``L0 + sum_j Lj`` with::

    L0 = log p(z_G) - log q(z_G)                       (server)
    Lj = log p(y_j, z_Lj | z_G) - log q(z_Lj | z_G)     (silo j)

and the STL gradient in the global variational parameters is the server's
``J_G^T grad_zG L0`` plus one additive contribution per silo::

    g_j = J_G^T grad_zG Lj + J_{Lj,G}^T grad_zLj Lj

Silo ``j`` additionally gets ``J_{Lj,Lj}^T grad_zLj Lj`` for its own local
parameters and reports ``grad_theta log p(y_j, z_Lj | z_G)``. Only ``g_j``,
the theta-gradient and the scalar ``Lj`` ever leave a silo.

``scale`` multiplies the silo's log-joint term (not its ``log q`` term); it
is 1 for exact federated gradients and ``N / N_j`` during local training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models.base import Model
from .models.data import Dataset, Silo
from .vfamily import (
    GlobalVarParams,
    LocalVarParams,
    block_strict_positions,
    grad_logq_global_wrt_z,
    grad_logq_local_wrt_z,
    jacobian_vjp_global,
    jacobian_vjp_local,
    joint_mean_cov,
    logq_global,
    logq_local,
    sample_global,
    sample_local,
)


class NonFiniteError(FloatingPointError):
    """A log-density or gradient evaluated to NaN or infinity."""


def _finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


@dataclass(frozen=True)
class SiloGradReport:
    """Everything a silo sends to the server after one SFVI round."""

    silo_id: int
    round: int
    g_theta: np.ndarray
    g_eta_G: np.ndarray
    elbo_term: float


@dataclass(frozen=True)
class ServerTerms:
    z_G: np.ndarray
    elbo_term: float
    g_eta_G: np.ndarray
    g_theta: np.ndarray


@dataclass(frozen=True)
class SiloTerms:
    z_G: np.ndarray
    z_L: np.ndarray
    elbo_term: float
    g_eta_L: np.ndarray
    g_eta_G: np.ndarray
    g_theta: np.ndarray


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    server_term: float
    silo_terms: tuple[float, ...]


def server_terms(model: Model, theta, g: GlobalVarParams, eps_G) -> ServerTerms:
    z_G = sample_global(g, eps_G)
    prior = model.log_prior_global(theta, z_G)
    lq = logq_global(g, z_G)
    value = _finite(prior.value - lq, "server ELBO term")
    cot = prior.d_z_G - grad_logq_global_wrt_z(g, z_G)
    grad = _finite(jacobian_vjp_global(g, eps_G, cot), "server eta_G gradient")
    return ServerTerms(z_G, float(value), grad, _finite(prior.d_theta, "theta prior gradient"))


def silo_terms(
    model: Model,
    silo: Silo,
    theta,
    g: GlobalVarParams,
    p: LocalVarParams,
    eps_G,
    eps_L,
    *,
    z: tuple[np.ndarray, np.ndarray] | None = None,
    scale: float = 1.0,
) -> SiloTerms:
    """All per-silo quantities for one noise draw.

    Pass ``z=(z_G, z_L)`` to evaluate at previously sampled latents instead of
    re-sampling from the current parameters.
    """
    if z is None:
        z_G = sample_global(g, eps_G)
        z_L = sample_local(p, g.mu, z_G, eps_L)
    else:
        z_G, z_L = z
    joint = model.log_local_joint(silo, theta, z_G, z_L)
    lq = logq_local(p, g.mu, z_G, z_L)
    value = _finite(scale * joint.value - lq, f"silo {silo.silo_id} ELBO term")
    dq_G, dq_L = grad_logq_local_wrt_z(p, g.mu, z_G, z_L)
    cot_G = scale * joint.d_z_G - dq_G
    cot_L = scale * joint.d_z_L - dq_L
    own, via_G = jacobian_vjp_local(p, g, eps_G, eps_L, cot_L)
    g_eta_G = jacobian_vjp_global(g, eps_G, cot_G) + via_G
    return SiloTerms(
        z_G,
        z_L,
        float(value),
        _finite(own, f"silo {silo.silo_id} local gradient"),
        _finite(g_eta_G, f"silo {silo.silo_id} eta_G gradient"),
        _finite(scale * joint.d_theta, f"silo {silo.silo_id} theta gradient"),
    )


def elbo_terms(model, theta, g, locals_, eps_G, eps_Ls, dataset: Dataset) -> ElboEstimate:
    L0 = server_terms(model, theta, g, eps_G).elbo_term
    Ls = tuple(
        silo_terms(model, silo, theta, g, p, eps_G, e).elbo_term
        for silo, p, e in zip(dataset.silos, locals_, eps_Ls)
    )
    return ElboEstimate(L0 + sum(Ls), L0, Ls)


def silo_local_grad(model, silo, theta, g, p, eps_G, eps_L) -> np.ndarray:
    return silo_terms(model, silo, theta, g, p, eps_G, eps_L).g_eta_L


def silo_global_grad_contrib(model, silo, theta, g, p, eps_G, eps_L) -> np.ndarray:
    return silo_terms(model, silo, theta, g, p, eps_G, eps_L).g_eta_G


def silo_theta_grad(model, silo, theta, z_G, z_L) -> np.ndarray:
    return _finite(model.log_local_joint(silo, theta, z_G, z_L).d_theta, "theta gradient")


def _ordered(reports, expected_ids):
    by_id: dict[int, SiloGradReport] = {}
    for r in reports:
        if r.silo_id in by_id:
            raise ValueError(f"duplicate report from silo {r.silo_id}")
        by_id[r.silo_id] = r
    if expected_ids is not None and set(by_id) != set(expected_ids):
        missing = sorted(set(expected_ids) - set(by_id))
        extra = sorted(set(by_id) - set(expected_ids))
        raise ValueError(f"reports do not match silos (missing {missing}, unexpected {extra})")
    return [by_id[k] for k in sorted(by_id)]


def server_global_grad(server_grad, reports, expected_ids=None) -> np.ndarray:
    """``server_grad + sum_j g_j`` folded in ascending silo id."""
    total = np.array(server_grad, dtype=float, copy=True)
    for r in _ordered(reports, expected_ids):
        total = total + r.g_eta_G
    return total


def server_theta_grad(prior_grad, reports, expected_ids=None) -> np.ndarray:
    total = np.array(prior_grad, dtype=float, copy=True)
    for r in _ordered(reports, expected_ids):
        total = total + r.g_theta
    return total


# ---------------------------------------------------------------------------
# non-federated reference


def _global_jacobian(g: GlobalVarParams, eps_G) -> np.ndarray:
    n = g.dim
    Le = eps_G if g.diagonal else g.L @ eps_G
    cols = [np.eye(n), np.diag(g.sigma * Le)]
    if not g.diagonal:
        rows, cc = np.tril_indices(n, -1)
        J = np.zeros((n, rows.size))
        J[rows, np.arange(rows.size)] = g.sigma[rows] * eps_G[cc]
        cols.append(J)
    return np.hstack(cols)


def _local_jacobian(p: LocalVarParams, g: GlobalVarParams, eps_G, eps_L) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(d z_L / d eta_L, d z_L / d eta_G)``."""
    n, nG = p.dim, g.dim
    dz_G = g.sigma * (eps_G if g.diagonal else g.L @ eps_G)
    Le = p.L @ eps_L
    rows, cc = block_strict_positions(p.blocks)
    J_L = np.zeros((n, rows.size))
    J_L[rows, np.arange(rows.size)] = p.sigma[rows] * eps_L[cc]
    J_C = np.zeros((n, n * nG))
    for b in range(nG):
        J_C[np.arange(n), b * n + np.arange(n)] = dz_G[b]
    own = np.hstack([np.eye(n), np.diag(p.sigma * Le), J_L, J_C])
    JG = _global_jacobian(g, eps_G)
    JG[:, :nG] = 0.0  # mu_G cancels between z_G and the explicit centring
    return own, p.C @ JG


def pooled_stl_gradient(model: Model, dataset: Dataset, theta, g, locals_, eps_G, eps_Ls):
    """STL gradient computed without any federation machinery.

    Uses the dense joint covariance of q and explicit Jacobians of the
    sampling map. Returns ``(grad_theta, grad_eta_G, [grad_eta_Lj])``.
    """
    z_G = sample_global(g, eps_G)
    z_Ls = [sample_local(p, g.mu, z_G, e) for p, e in zip(locals_, eps_Ls)]
    z = np.concatenate([z_G] + z_Ls)
    mean, cov = joint_mean_cov(g, locals_)
    dlogq = -np.linalg.solve(cov, z - mean)

    prior = model.log_prior_global(theta, z_G)
    dlogp = [prior.d_z_G.copy()]
    g_theta = prior.d_theta.copy()
    for silo, z_L in zip(dataset.silos, z_Ls):
        lj = model.log_local_joint(silo, theta, z_G, z_L)
        dlogp[0] += lj.d_z_G
        dlogp.append(lj.d_z_L)
        g_theta = g_theta + lj.d_theta
    cot = np.concatenate(dlogp) - dlogq

    nG = g.dim
    grad_G = _global_jacobian(g, eps_G).T @ cot[:nG]
    grads_L = []
    off = nG
    for p, e in zip(locals_, eps_Ls):
        own, via_G = _local_jacobian(p, g, eps_G, e)
        c = cot[off : off + p.dim]
        grad_G = grad_G + via_G.T @ c
        grads_L.append(own.T @ c)
        off += p.dim
    return g_theta, grad_G, grads_L


def stl_surrogate(model: Model, dataset: Dataset, theta, g, locals_, eps_G, eps_Ls):
    """Return ``f(eta_flat)`` whose ordinary gradient is the STL estimator.

    ``log q`` is evaluated with the parameters frozen at their current values,
    so only the sampling path depends on ``eta``. Useful as a finite-difference
    target; the flat layout is ``(eta_G, eta_L1, ..., eta_LJ)``.
    """
    frozen_g, frozen_L = g, list(locals_)
    sizes = [g.n_params] + [p.n_params for p in locals_]
    cuts = np.cumsum(sizes)[:-1]

    def f(eta):
        parts = np.split(np.asarray(eta, dtype=float), cuts)
        gg = GlobalVarParams.from_flat(parts[0], g.dim, g.diagonal)
        z_G = sample_global(gg, eps_G)
        total = model.log_prior_global(theta, z_G).value - logq_global(frozen_g, z_G)
        for silo, p0, v, e in zip(dataset.silos, frozen_L, parts[1:], eps_Ls):
            p = p0.with_flat(v)
            z_L = sample_local(p, gg.mu, z_G, e)
            total += model.log_local_joint(silo, theta, z_G, z_L).value
            total -= logq_local(p0, frozen_g.mu, z_G, z_L)
        return total

    x0 = np.concatenate([g.flat()] + [p.flat() for p in locals_])
    return f, x0
