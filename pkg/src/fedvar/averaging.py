"""SFVI-Avg: local multi-step training followed by server-side averaging.

Each round the server broadcasts ``(theta, eta_G)``. Every silo then runs ``m``
STL steps on its own data with the local log-joint scaled by ``N / N_j``, so
that one silo stands in for the whole dataset. The server averages the drifted
``theta^(j)`` arithmetically and replaces ``eta_G`` by the parameters of the
2-Wasserstein barycenter of the Gaussians ``q_{eta_G^(j)}``.

Step ``s`` of round ``r`` (both from 0) consumes the noise of SFVI step
``r * m + s + 1``, so a single-silo run retraces ``R * m`` SFVI steps.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimator import server_terms, silo_terms
from .federation import (
    RunConfig,
    SiloState,
    TrainingTrace,
    evaluate_state,
    global_noise,
    init_silo,
    local_noise,
    mc_mean,
)
from .linalg import DimensionError, inv_sqrtm_pd, sqrtm_psd
from .models.base import Model
from .models.data import Dataset
from .optim import AdamState, adam_step
from .rng import RngKey
from .vfamily import GlobalVarParams

BARY_COLUMNS = ("round", "bary_iters", "bary_residual")
MODES = ("diagonal", "full")


class BarycenterError(RuntimeError):
    """The covariance fixed-point iteration did not converge."""

    def __init__(self, msg: str, residual: float, iters: int):
        super().__init__(msg)
        self.residual = residual
        self.iters = iters


@dataclass(frozen=True)
class GaussianSummary:
    """Mean and covariance of a Gaussian; ``cov`` is a vector of variances when diagonal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        n = mean.shape[0]
        if cov.ndim == 1:
            if cov.shape != (n,):
                raise DimensionError(f"variance vector has length {cov.shape[0]}, expected {n}")
            if np.any(cov <= 0) or not np.all(np.isfinite(cov)):
                raise ValueError("variances must be finite and strictly positive")
        elif cov.shape == (n, n):
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * max(1.0, np.abs(cov).max())):
                raise ValueError("covariance is not symmetric")
        else:
            raise DimensionError(f"covariance has shape {cov.shape}, expected ({n},) or ({n}, {n})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 1

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov


@dataclass
class AvgConfig(RunConfig):
    """SFVI-Avg settings. Optimizer fields are shared with :class:`RunConfig`.

    ``mode`` picks the barycenter and also the global family: ``"diagonal"``
    trains a mean-field ``q(z_G)``. ``weighted`` averages ``theta`` with
    weights ``N_j / N`` instead of ``1 / J``.
    """

    R: int = 10
    m: int = 100
    mode: str = "diagonal"
    tol: float = 1e-9
    max_iter: int = 200
    weighted: bool = False

    def __post_init__(self):
        if self.R < 1 or self.m < 1:
            raise ValueError("R and m must both be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be > 0 and max_iter >= 1")
        self.diagonal = self.mode == "diagonal"
        self.n_iter = self.R * self.m
        super().__post_init__()


# ---------------------------------------------------------------------------
# barycenters


def _check_summaries(summaries) -> list[GaussianSummary]:
    summaries = list(summaries)
    if not summaries:
        raise ValueError("need at least one Gaussian")
    n = summaries[0].dim
    if any(s.dim != n for s in summaries):
        raise DimensionError("Gaussians have different dimensions")
    return summaries


def barycenter_mean(summaries) -> np.ndarray:
    summaries = _check_summaries(summaries)
    return np.mean([s.mean for s in summaries], axis=0)


def barycenter_cov_diagonal(summaries) -> np.ndarray:
    """Barycenter variances of diagonal Gaussians: ``mean(sqrt(var))**2``."""
    summaries = _check_summaries(summaries)
    if not all(s.diagonal for s in summaries):
        raise ValueError("diagonal barycenter needs variance vectors")
    sd = np.sqrt(np.array([s.cov for s in summaries]))
    return np.mean(sd, axis=0) ** 2


def _mean_root(S: np.ndarray, covs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    r = sqrtm_psd(S)
    return r, np.mean([sqrtm_psd(r @ c @ r) for c in covs], axis=0)


def fixed_point_residual(S, summaries) -> float:
    """Frobenius norm of ``S - mean_j (S^1/2 S_j S^1/2)^1/2``."""
    covs = [s.dense_cov() for s in _check_summaries(summaries)]
    return float(np.linalg.norm(S - _mean_root(np.asarray(S, dtype=float), covs)[1]))


def barycenter_cov_fixed_point(summaries, tol: float = 1e-9, max_iter: int = 200) -> tuple[np.ndarray, int, float]:
    """Barycenter covariance by fixed-point iteration.

    Iterates ``S <- S^-1/2 (mean_j (S^1/2 S_j S^1/2)^1/2)^2 S^-1/2`` from the
    arithmetic mean of the inputs. Stops once both the Frobenius change of an
    update and the residual of the barycenter equation drop below ``tol``.
    Returns ``(S, iterations, residual)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    covs = [s.dense_cov() for s in _check_summaries(summaries)]
    S = np.mean(covs, axis=0)
    residual = np.inf
    for it in range(1, max_iter + 1):
        r, M = _mean_root(S, covs)
        residual = float(np.linalg.norm(S - M))
        ri = inv_sqrtm_pd(S)
        new = ri @ M @ M @ ri
        new = 0.5 * (new + new.T)
        change = float(np.linalg.norm(new - S))
        S = new
        if change < tol:
            residual = fixed_point_residual(S, summaries)
            if residual < tol:
                return S, it, residual
    raise BarycenterError(
        f"barycenter fixed point did not converge in {max_iter} iterations (residual {residual:.3e})",
        residual,
        max_iter,
    )


def summary_from_eta(g: GlobalVarParams) -> GaussianSummary:
    if g.diagonal:
        return GaussianSummary(g.mu, g.sigma**2)
    return GaussianSummary(g.mu, g.cov())


def eta_from_moments(mean, cov, diagonal: bool) -> GlobalVarParams:
    """Map a Gaussian back to ``(mu, log sigma, L)`` via its Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if diagonal:
        var = cov if cov.ndim == 1 else np.diag(cov)
        return GlobalVarParams(mean.copy(), 0.5 * np.log(var), np.zeros(0), True)
    K = np.linalg.cholesky(cov)
    sigma = np.diag(K).copy()
    L = K / sigma[:, None]
    rows, cols = np.tril_indices(mean.shape[0], -1)
    return GlobalVarParams(mean.copy(), np.log(sigma), L[rows, cols], False)


@dataclass(frozen=True)
class BarycenterResult:
    eta_G: GlobalVarParams
    iters: int
    residual: float


def barycenter_eta(etas: list[GlobalVarParams], mode: str, tol: float = 1e-9, max_iter: int = 200) -> BarycenterResult:
    """Variational parameters of the barycenter of ``q_{eta_G^(j)}``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    diagonal = etas[0].diagonal
    if any(e.diagonal != diagonal for e in etas):
        raise ValueError("cannot mix diagonal and full global families")
    if mode == "diagonal" and not diagonal:
        raise ValueError("diagonal barycenter mode needs a diagonal global family")
    summaries = [summary_from_eta(e) for e in etas]
    mean = barycenter_mean(summaries)
    if mode == "diagonal":
        # average standard deviations directly; exact for a single silo
        sd = np.mean([e.sigma for e in etas], axis=0)
        return BarycenterResult(GlobalVarParams(mean, np.log(sd), np.zeros(0), True), 0, 0.0)
    S, iters, res = barycenter_cov_fixed_point(summaries, tol, max_iter)
    return BarycenterResult(eta_from_moments(mean, S, diagonal), iters, res)


# ---------------------------------------------------------------------------
# local training


@dataclass
class AvgSiloState:
    """A silo's persistent SFVI-Avg state: local parameters plus its own optimizers."""

    local: SiloState
    opt_theta: AdamState = field(repr=False)
    opt_eta_G: AdamState = field(repr=False)

    @property
    def silo_id(self) -> int:
        return self.local.silo_id


@dataclass(frozen=True)
class LocalResult:
    silo_id: int
    theta: np.ndarray
    eta_G: GlobalVarParams
    n_obs: int


def init_avg_silo(model: Model, silo, config: AvgConfig) -> AvgSiloState:
    local = init_silo(model, silo, config)
    n_eta = GlobalVarParams.init(model.n_global, config.diagonal).n_params
    return AvgSiloState(local, config.adam(model.n_theta, config.lr_theta), config.adam(n_eta))


def local_training_phase(
    state: AvgSiloState,
    model: Model,
    theta,
    eta_G: GlobalVarParams,
    key: RngKey,
    first_step: int,
    m: int,
    N: int,
    n_mc: int = 1,
) -> LocalResult:
    """Run ``m`` scaled STL steps on one silo starting from the broadcast state.

    Updates ``state`` in place (local parameters and optimizer moments) and
    returns the drifted ``(theta^(j), eta_G^(j))``. Steps use the noise of
    SFVI steps ``first_step, ..., first_step + m - 1``, averaged over ``n_mc``
    Monte Carlo samples per step.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    loc = state.local
    n_j = loc.data.n_obs
    if n_j < 1:
        raise ValueError(f"silo {loc.silo_id} has no observations")
    scale = N / n_j
    theta = np.array(theta, dtype=float, copy=True)
    g = eta_G
    for i in range(first_step, first_step + m):
        noise = [
            (global_noise(key, i, model.n_global, s), local_noise(key, i, loc.units, model.unit_dim, s))
            for s in range(n_mc)
        ]
        pre = [silo_terms(model, loc.data, theta, g, loc.eta_L, eG, eL, scale=scale) for eG, eL in noise]
        loc.opt, flat = adam_step(loc.opt, loc.eta_L.flat(), mc_mean([t.g_eta_L for t in pre]))
        loc.eta_L = loc.eta_L.with_flat(flat)
        g_eta, g_theta = [], []
        for (eG, eL), t in zip(noise, pre):
            post = silo_terms(model, loc.data, theta, g, loc.eta_L, eG, eL, z=(t.z_G, t.z_L), scale=scale)
            st = server_terms(model, theta, g, eG)
            g_eta.append(st.g_eta_G + post.g_eta_G)
            g_theta.append(st.g_theta + post.g_theta)
        if model.n_theta:
            state.opt_theta, theta = adam_step(state.opt_theta, theta, mc_mean(g_theta))
        state.opt_eta_G, flat = adam_step(state.opt_eta_G, g.flat(), mc_mean(g_eta))
        g = GlobalVarParams.from_flat(flat, model.n_global, g.diagonal)
    loc.round += m
    return LocalResult(loc.silo_id, theta, g, n_j)


def average_theta(results: list[LocalResult], weighted: bool = False) -> np.ndarray:
    results = sorted(results, key=lambda r: r.silo_id)
    if weighted:
        w = np.array([r.n_obs for r in results], dtype=float)
        w /= w.sum()
    else:
        w = np.full(len(results), 1.0 / len(results))
    return np.sum([wi * r.theta for wi, r in zip(w, results)], axis=0)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class SFVIAvgResult:
    theta: np.ndarray
    eta_G: GlobalVarParams
    silos: list[AvgSiloState]
    trace: TrainingTrace
    key: RngKey
    round: int = 0

    def local_params(self) -> dict:
        return {s.silo_id: s.local.eta_L for s in self.silos}


EVAL_STREAM = "eval"


def run_sfvi_avg(
    model: Model,
    dataset: Dataset,
    config: AvgConfig,
    theta=None,
    eta_G: GlobalVarParams | None = None,
    silos: list[AvgSiloState] | None = None,
    start_round: int = 0,
    callback=None,
) -> SFVIAvgResult:
    """Run ``config.R`` SFVI-Avg rounds.

    Trace row ``r`` evaluates the averaged state after round ``r`` (row 0 is
    the initial state) on a noise stream separate from training. Each row
    also carries the barycenter diagnostics ``bary_iters``/``bary_residual``.
    """
    model.validate(dataset)
    theta = model.init_theta() if theta is None else np.asarray(theta, dtype=float)
    if eta_G is None:
        eta_G = GlobalVarParams.init(model.n_global, config.diagonal, config.init_log_sigma)
    if eta_G.diagonal != config.diagonal:
        raise ValueError("global family does not match the barycenter mode")
    silos = [init_avg_silo(model, s, config) for s in dataset.silos] if silos is None else silos
    silos = sorted(silos, key=lambda s: s.silo_id)
    key = RngKey(config.seed)
    eval_key = key.derive(EVAL_STREAM)
    N = dataset.N
    trace = TrainingTrace()
    t0 = time.perf_counter()

    def row(r, iters, res):
        st = evaluate_state(model, theta, eta_G, [s.local for s in silos], eval_key, r)
        return {
            "round": r,
            "elbo": st.elbo,
            "grad_norm_theta": st.grad_norm_theta,
            "grad_norm_etaG": st.grad_norm_etaG,
            "wall_ms": 1e3 * (time.perf_counter() - t0),
            "bary_iters": iters,
            "bary_residual": res,
        }

    if start_round == 0:
        trace.rows.append(row(0, 0, 0.0))
    pool = ThreadPoolExecutor(config.n_workers) if config.n_workers > 1 else None
    try:
        for r in range(start_round, start_round + config.R):
            first = r * config.m + 1

            def phase(s, theta=theta, eta_G=eta_G, first=first):
                return local_training_phase(s, model, theta, eta_G, key, first, config.m, N, config.n_mc)

            results = list(pool.map(phase, silos)) if pool is not None else [phase(s) for s in silos]
            results.sort(key=lambda x: x.silo_id)
            theta = average_theta(results, config.weighted)
            bary = barycenter_eta([x.eta_G for x in results], config.mode, config.tol, config.max_iter)
            eta_G = bary.eta_G
            if (r + 1) % config.log_every == 0 or r + 1 == start_round + config.R:
                trace.rows.append(row(r + 1, bary.iters, bary.residual))
            if config.snapshot_every and (r + 1) % config.snapshot_every == 0:
                trace.snapshots.append({"round": r + 1, "theta": theta.tolist(), "eta_G": eta_G.flat().tolist()})
            if callback is not None:
                callback(r + 1, theta, eta_G, silos)
    finally:
        if pool is not None:
            pool.shutdown()
    return SFVIAvgResult(theta, eta_G, silos, trace, key, start_round + config.R)
