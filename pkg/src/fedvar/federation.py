"""SFVI: server and silo rounds plus an in-process orchestrator.

Only two message types cross the silo boundary: :class:`ServerBroadcast`
(server to silos) and :class:`~fedvar.estimator.SiloGradReport` (silo to
server). Silo state, its local variational parameters and its data are never
placed in either.

Noise contract. For round ``i`` of a run keyed by ``key``:

* ``eps_G`` is ``std_normal(key / i / "global", n_G)``, shared by all silos;
* the noise of local unit ``k`` is ``std_normal(key / i / "local" / k, unit_dim)``.

With ``n_mc = S > 1`` Monte Carlo samples per round, sample 0 uses the keys
above and sample ``s`` inserts ``"mc" / s`` after ``"global"`` or ``"local"``.

Local noise is keyed by the unit's global id, never the silo id, so every
partitioning of the same observations consumes identical noise. Combined with
elementwise Adam and additive gradient reports this makes the whole
trajectory independent of the partitioning.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    SiloGradReport,
    server_global_grad,
    server_terms,
    server_theta_grad,
    silo_terms,
)
from .models.base import Model
from .models.data import Dataset, Silo
from .optim import AdamState, adam_step
from .rng import GLOBAL, LOCAL, RngKey, std_normal, std_normal_rows
from .vfamily import DEFAULT_LOG_SIGMA, GlobalVarParams, LocalVarParams

TRACE_COLUMNS = ("round", "elbo", "grad_norm_theta", "grad_norm_etaG", "wall_ms")


@dataclass
class RunConfig:
    """Settings for an SFVI run.

    ``lr`` applies to every optimizer unless ``lr_local`` / ``lr_theta`` are set.
    """

    n_iter: int = 1000
    seed: int = 0
    lr: float = 1e-3
    lr_local: float | None = None
    lr_theta: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    diagonal: bool = False
    init_log_sigma: float = DEFAULT_LOG_SIGMA
    log_every: int = 1
    snapshot_every: int = 0
    n_workers: int = 1
    n_mc: int = 1

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def adam(self, n: int, lr: float | None = None) -> AdamState:
        return AdamState.zeros(
            n, lr=self.lr if lr is None else lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps
        )


@dataclass(frozen=True)
class ServerBroadcast:
    """Round number, current globals and the ``(n_mc, n_G)`` global noise."""

    round: int
    theta: np.ndarray
    eta_G: np.ndarray
    eps_G: np.ndarray


@dataclass
class ServerState:
    theta: np.ndarray
    eta_G: GlobalVarParams
    opt_theta: AdamState
    opt_eta_G: AdamState
    key: RngKey
    round: int = 1
    n_mc: int = 1


@dataclass
class SiloState:
    silo_id: int
    data: Silo = field(repr=False)
    eta_L: LocalVarParams = field(repr=False)
    opt: AdamState = field(repr=False)
    units: np.ndarray = field(repr=False)
    global_diagonal: bool = False
    round: int = 1


@dataclass
class TrainingTrace:
    rows: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    @property
    def elbo(self) -> np.ndarray:
        return np.array([r["elbo"] for r in self.rows])

    def to_csv(self, path, columns=TRACE_COLUMNS) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in columns])


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# noise


MC = "mc"


def _stream(key: RngKey, rnd: int, kind: str, sample: int) -> RngKey:
    return key.derive(rnd, kind) if sample == 0 else key.derive(rnd, kind, MC, sample)


def global_noise(key: RngKey, rnd: int, n_G: int, sample: int = 0) -> np.ndarray:
    return std_normal(_stream(key, rnd, GLOBAL, sample), n_G)


def local_noise(key: RngKey, rnd: int, units: np.ndarray, unit_dim: int, sample: int = 0) -> np.ndarray:
    return std_normal_rows(_stream(key, rnd, LOCAL, sample), units, unit_dim).reshape(-1)


def mc_mean(values):
    """Average over Monte Carlo samples; a single sample passes through untouched."""
    return values[0] if len(values) == 1 else np.mean(values, axis=0)


# ---------------------------------------------------------------------------
# construction


def init_server(model: Model, config: RunConfig, theta=None, eta_G: GlobalVarParams | None = None) -> ServerState:
    theta = model.init_theta() if theta is None else np.asarray(theta, dtype=float)
    if eta_G is None:
        eta_G = GlobalVarParams.init(model.n_global, config.diagonal, config.init_log_sigma)
    return ServerState(
        theta,
        eta_G,
        config.adam(model.n_theta, config.lr_theta),
        config.adam(eta_G.n_params),
        RngKey(config.seed),
        n_mc=config.n_mc,
    )


def init_silo(model: Model, silo: Silo, config: RunConfig, eta_L: LocalVarParams | None = None) -> SiloState:
    model.validate_silo(silo)
    if eta_L is None:
        eta_L = LocalVarParams.init(
            model.n_local(silo), model.n_global, model.local_blocks(silo), config.init_log_sigma
        )
    return SiloState(
        silo.silo_id,
        silo,
        eta_L,
        config.adam(eta_L.n_params, config.lr_local),
        model.local_units(silo),
        config.diagonal,
    )


# ---------------------------------------------------------------------------
# rounds


def broadcast(server: ServerState, model: Model) -> ServerBroadcast:
    eps_G = np.stack([global_noise(server.key, server.round, model.n_global, s) for s in range(server.n_mc)])
    return ServerBroadcast(server.round, server.theta.copy(), server.eta_G.flat(), eps_G)


def silo_round(state: SiloState, b: ServerBroadcast, model: Model, key: RngKey) -> SiloGradReport:
    """One silo step: sample, update ``eta_L`` in place, report global gradients.

    The latents are sampled once; the local update uses them with the
    pre-update parameters, and the reported ``eta_G`` contribution is then
    evaluated at the same latents with the updated local parameters. Every
    quantity is averaged over the broadcast's Monte Carlo samples.
    """
    if b.round != state.round:
        raise ValueError(f"silo {state.silo_id} expected round {state.round}, got {b.round}")
    g = GlobalVarParams.from_flat(b.eta_G, model.n_global, state.global_diagonal)
    noise = [(e, local_noise(key, b.round, state.units, model.unit_dim, s)) for s, e in enumerate(b.eps_G)]
    pre = [silo_terms(model, state.data, b.theta, g, state.eta_L, eG, eL) for eG, eL in noise]
    state.opt, flat = adam_step(state.opt, state.eta_L.flat(), mc_mean([t.g_eta_L for t in pre]))
    state.eta_L = state.eta_L.with_flat(flat)
    post = [
        silo_terms(model, state.data, b.theta, g, state.eta_L, eG, eL, z=(t.z_G, t.z_L))
        for (eG, eL), t in zip(noise, pre)
    ]
    state.round += 1
    return SiloGradReport(
        state.silo_id,
        b.round,
        mc_mean([t.g_theta for t in post]),
        mc_mean([t.g_eta_G for t in post]),
        float(mc_mean([t.elbo_term for t in pre])),
    )


@dataclass(frozen=True)
class RoundStats:
    round: int
    elbo: float
    grad_norm_theta: float
    grad_norm_etaG: float


def server_round(
    server: ServerState, b: ServerBroadcast, reports, model: Model, expected_ids
) -> tuple[ServerBroadcast, RoundStats]:
    """Aggregate one round of reports, step ``theta`` and ``eta_G``, broadcast the next round."""
    if any(r.round != b.round for r in reports):
        raise ValueError("report from a different round")
    sts = [server_terms(model, b.theta, server.eta_G, e) for e in b.eps_G]
    g_eta = server_global_grad(mc_mean([t.g_eta_G for t in sts]), reports, expected_ids)
    g_theta = server_theta_grad(mc_mean([t.g_theta for t in sts]), reports, expected_ids)
    elbo = mc_mean([t.elbo_term for t in sts]) + sum(r.elbo_term for r in sorted(reports, key=lambda r: r.silo_id))
    if model.n_theta:
        server.opt_theta, server.theta = adam_step(server.opt_theta, server.theta, g_theta)
    server.opt_eta_G, flat = adam_step(server.opt_eta_G, server.eta_G.flat(), g_eta)
    server.eta_G = GlobalVarParams.from_flat(flat, model.n_global, server.eta_G.diagonal)
    server.round += 1
    stats = RoundStats(b.round, float(elbo), float(np.linalg.norm(g_theta)), float(np.linalg.norm(g_eta)))
    return broadcast(server, model), stats


def evaluate_state(model: Model, theta, g: GlobalVarParams, silos: list[SiloState], key: RngKey, rnd: int) -> RoundStats:
    """ELBO estimate and gradient norms at ``(theta, g, silo eta_L)`` under the noise of round ``rnd``."""
    eps_G = global_noise(key, rnd, model.n_global)
    st = server_terms(model, theta, g, eps_G)
    elbo, g_eta, g_theta = st.elbo_term, st.g_eta_G.copy(), st.g_theta.copy()
    for s in sorted(silos, key=lambda s: s.silo_id):
        t = silo_terms(model, s.data, theta, g, s.eta_L, eps_G, local_noise(key, rnd, s.units, model.unit_dim))
        elbo += t.elbo_term
        g_eta = g_eta + t.g_eta_G
        g_theta = g_theta + t.g_theta
    return RoundStats(rnd, float(elbo), float(np.linalg.norm(g_theta)), float(np.linalg.norm(g_eta)))


def evaluate_round(server: ServerState, silos: list[SiloState], model: Model, rnd: int) -> RoundStats:
    """Evaluate the current state without updating anything."""
    return evaluate_state(model, server.theta, server.eta_G, silos, server.key, rnd)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class SFVIResult:
    server: ServerState
    silos: list[SiloState]
    trace: TrainingTrace

    @property
    def theta(self) -> np.ndarray:
        return self.server.theta

    @property
    def eta_G(self) -> GlobalVarParams:
        return self.server.eta_G

    def local_params(self) -> dict[int, LocalVarParams]:
        return {s.silo_id: s.eta_L for s in self.silos}


def _row(stats: RoundStats, t0: float) -> dict:
    return {
        "round": stats.round,
        "elbo": stats.elbo,
        "grad_norm_theta": stats.grad_norm_theta,
        "grad_norm_etaG": stats.grad_norm_etaG,
        "wall_ms": 1e3 * (time.perf_counter() - t0),
    }


def _snapshot(server: ServerState) -> dict:
    return {"round": server.round - 1, "theta": server.theta.tolist(), "eta_G": server.eta_G.flat().tolist()}


def run_sfvi(
    model: Model,
    dataset: Dataset,
    config: RunConfig,
    server: ServerState | None = None,
    silos: list[SiloState] | None = None,
    callback=None,
) -> SFVIResult:
    """Run ``config.n_iter`` SFVI rounds over all silos of ``dataset``.

    Row 0 of the trace evaluates the initial state; row ``i`` carries the ELBO
    estimate drawn in round ``i`` (before that round's update).
    """
    model.validate(dataset)
    server = init_server(model, config) if server is None else server
    silos = [init_silo(model, s, config) for s in dataset.silos] if silos is None else silos
    ids = [s.silo_id for s in silos]
    trace = TrainingTrace()
    t0 = time.perf_counter()
    if server.round == 1:
        trace.rows.append(_row(evaluate_round(server, silos, model, 0), t0))
    pool = ThreadPoolExecutor(config.n_workers) if config.n_workers > 1 else None
    try:
        b = broadcast(server, model)
        last = server.round + config.n_iter - 1
        while b.round <= last:
            if pool is None:
                reports = [silo_round(s, b, model, server.key) for s in silos]
            else:
                reports = list(pool.map(lambda s: silo_round(s, b, model, server.key), silos))
            b, stats = server_round(server, b, reports, model, ids)
            if stats.round % config.log_every == 0 or stats.round == last:
                trace.rows.append(_row(stats, t0))
            if config.snapshot_every and stats.round % config.snapshot_every == 0:
                trace.snapshots.append(_snapshot(server))
            if callback is not None:
                callback(stats, server, silos)
    finally:
        if pool is not None:
            pool.shutdown()
    return SFVIResult(server, silos, trace)
