"""JSON checkpoints of SFVI and SFVI-Avg runs.

Floats are written with ``repr`` precision so a reload is bit-exact. Silo
sections hold local parameters and therefore never leave the machine that
runs the simulation; nothing here is sent through the message types.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState
from .rng import RngKey
from .vfamily import GlobalVarParams, LocalVarParams

VERSION = 1


@dataclass
class SiloCheckpoint:
    silo_id: int
    eta_L: list[float]
    dim: int
    blocks: list[int]
    opt: dict
    extra_opts: dict = field(default_factory=dict)

    def local_params(self, n_global: int) -> LocalVarParams:
        return LocalVarParams.from_flat(np.asarray(self.eta_L), self.dim, n_global, tuple(self.blocks))


@dataclass
class Checkpoint:
    algorithm: str
    model_id: str
    model_kwargs: dict
    round: int
    theta: list[float]
    eta_G: list[float]
    diagonal: bool
    n_global: int
    silos: list[SiloCheckpoint]
    server_opts: dict
    rng_seed: int
    rng_stream: list[int]
    version: int = VERSION

    def global_params(self) -> GlobalVarParams:
        return GlobalVarParams.from_flat(np.asarray(self.eta_G), self.n_global, self.diagonal)

    def local_params(self) -> dict[int, LocalVarParams]:
        return {s.silo_id: s.local_params(self.n_global) for s in self.silos}

    def rng_key(self) -> RngKey:
        return RngKey(self.rng_seed, tuple(self.rng_stream))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "silos"}
        d["silos"] = [s.__dict__.copy() for s in self.silos]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        d = dict(d)
        if d.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        d["silos"] = [SiloCheckpoint(**s) for s in d["silos"]]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def from_sfvi(result, model_id: str, model_kwargs: dict) -> Checkpoint:
    server = result.server
    silos = [
        SiloCheckpoint(s.silo_id, _floats(s.eta_L.flat()), s.eta_L.dim, list(s.eta_L.blocks), s.opt.to_dict())
        for s in result.silos
    ]
    return Checkpoint(
        "sfvi", model_id, dict(model_kwargs), server.round - 1,
        _floats(server.theta), _floats(server.eta_G.flat()), server.eta_G.diagonal, server.eta_G.dim,
        silos, {"theta": server.opt_theta.to_dict(), "eta_G": server.opt_eta_G.to_dict()},
        server.key.seed, list(server.key.stream),
    )


def from_sfvi_avg(result, model_id: str, model_kwargs: dict) -> Checkpoint:
    silos = []
    for s in result.silos:
        p = s.local.eta_L
        silos.append(SiloCheckpoint(
            s.silo_id, _floats(p.flat()), p.dim, list(p.blocks), s.local.opt.to_dict(),
            {"theta": s.opt_theta.to_dict(), "eta_G": s.opt_eta_G.to_dict()},
        ))
    return Checkpoint(
        "sfvi_avg", model_id, dict(model_kwargs), result.round,
        _floats(result.theta), _floats(result.eta_G.flat()), result.eta_G.diagonal, result.eta_G.dim,
        silos, {}, result.key.seed, list(result.key.stream),
    )


def restore_sfvi(ck: Checkpoint, model, dataset, config):
    """Rebuild ``(ServerState, [SiloState])`` so :func:`run_sfvi` can resume."""
    from .federation import ServerState, init_silo

    if ck.algorithm != "sfvi":
        raise ValueError("checkpoint is not from an SFVI run")
    locals_ = ck.local_params()
    by_id = {s.silo_id: s for s in ck.silos}
    if set(by_id) != {s.silo_id for s in dataset.silos}:
        raise ValueError("checkpoint silos do not match the dataset")
    silos = []
    for silo in dataset.silos:
        st = init_silo(model, silo, config, locals_[silo.silo_id])
        st.opt = AdamState.from_dict(by_id[silo.silo_id].opt)
        st.round = ck.round + 1
        silos.append(st)
    server = ServerState(
        np.asarray(ck.theta, dtype=float), ck.global_params(),
        AdamState.from_dict(ck.server_opts["theta"]), AdamState.from_dict(ck.server_opts["eta_G"]),
        ck.rng_key(), ck.round + 1, config.n_mc,
    )
    return server, silos


def restore_sfvi_avg(ck: Checkpoint, model, dataset, config):
    """Rebuild ``(theta, eta_G, [AvgSiloState], start_round)`` for :func:`run_sfvi_avg`."""
    from .averaging import AvgSiloState
    from .federation import init_silo

    if ck.algorithm != "sfvi_avg":
        raise ValueError("checkpoint is not from an SFVI-Avg run")
    locals_ = ck.local_params()
    by_id = {s.silo_id: s for s in ck.silos}
    if set(by_id) != {s.silo_id for s in dataset.silos}:
        raise ValueError("checkpoint silos do not match the dataset")
    silos = []
    for silo in dataset.silos:
        c = by_id[silo.silo_id]
        st = init_silo(model, silo, config, locals_[silo.silo_id])
        st.opt = AdamState.from_dict(c.opt)
        st.round = ck.round * config.m + 1
        silos.append(AvgSiloState(st, AdamState.from_dict(c.extra_opts["theta"]), AdamState.from_dict(c.extra_opts["eta_G"])))
    return np.asarray(ck.theta, dtype=float), ck.global_params(), silos, ck.round
