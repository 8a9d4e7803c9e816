"""Experiment runner: data ingestion, training, metrics and artifacts.

``run_experiment`` writes into the output directory:

* ``trace.csv``: per-round ``round,elbo,grad_norm_theta,grad_norm_etaG,wall_ms``
* ``metrics.csv``: ``round,elbo`` plus model-specific columns; ``null`` marks
  values not computed for a row
* ``bary.csv``: ``round,bary_iters,bary_residual`` (SFVI-Avg only)
* ``checkpoint.json`` and ``manifest.json`` (config, seed, versions, hashes)

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .averaging import BARY_COLUMNS, BarycenterError, init_avg_silo, run_sfvi_avg
from .checkpoint import Checkpoint, from_sfvi, from_sfvi_avg
from .config import ConfigError, ExperimentConfig, load_config
from .estimator import NonFiniteError
from .federation import TRACE_COLUMNS, init_server, init_silo, run_sfvi
from .models import (
    ConjugateGaussianModel,
    Dataset,
    Model,
    contiguous_assignment,
    gen_conjugate,
    gen_glmm,
    gen_heterogeneous_classification,
    make_model,
    partition_by_group,
    read_classification_csv,
    read_glmm_csv,
)
from .rng import RngKey, std_normal
from .vfamily import GlobalVarParams, LocalVarParams, sample_global, sample_local

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
NULL = "null"
CLASSIFIERS = ("multinom", "hierbnn")


# ---------------------------------------------------------------------------
# data


def _generate(cfg: ExperimentConfig, model: Model) -> tuple[Dataset, Dataset | None]:
    spec, p = cfg.data, dict(cfg.data.params)
    key = RngKey(cfg.seed if spec.seed is None else spec.seed).derive("data")
    if spec.generator == "conjugate":
        if not isinstance(model, ConjugateGaussianModel):
            raise ConfigError("the conjugate generator needs the conjugate model")
        return gen_conjugate(key, int(p.pop("N", 200)), int(p.pop("J", 1)), model.tau, model.lam, model.s), None
    if spec.generator == "glmm":
        n_subjects = int(p.pop("n_subjects", 537))
        J = int(p.pop("J", 1))
        silo_of = contiguous_assignment(n_subjects, J)
        return gen_glmm(key, n_subjects, subject_silo=silo_of, **p), None
    if model.name not in CLASSIFIERS:
        raise ConfigError("the classification generator needs a classification model")
    J, N_j = int(p.pop("J", 5)), int(p.pop("N_j", 100))
    n_test = int(p.pop("N_test_j", N_j))
    skew = float(p.pop("skew", 0.9))
    common = dict(J=J, d=model.d, K=model.K, skew=skew, **p)
    train = gen_heterogeneous_classification(key, N_j=N_j, split="train", **common)
    test = gen_heterogeneous_classification(key, N_j=n_test, split="test", **common)
    return train, test


def load_data(cfg: ExperimentConfig, model: Model) -> tuple[Dataset, Dataset | None]:
    """Training data and an optional held-out set; raises ``ConfigError`` on mismatch."""
    spec = cfg.data
    try:
        if spec.generator is not None:
            train, test = _generate(cfg, model)
        elif spec.format == "glmm":
            J = int(spec.params.get("J", 1))
            train = read_glmm_csv(spec.path)
            n_subj = int(train.pooled().groups.max()) + 1
            train = partition_by_group(train, contiguous_assignment(n_subj, J))
            test = None
        else:
            train = read_classification_csv(spec.path)
            test = None if spec.test_path is None else read_classification_csv(spec.test_path)
        model.validate(train)
        if test is not None:
            model.validate(test)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot build data: {exc}") from exc
    return train, test


# ---------------------------------------------------------------------------
# prediction


def predictive_proba(
    model: Model, g: GlobalVarParams, locals_: dict, data: Dataset, n_samples: int = 100, seed: int = 0
) -> dict[int, np.ndarray]:
    """Monte Carlo posterior-predictive class probabilities per silo.

    Averages softmax outputs over ``n_samples`` joint draws from ``q``. For
    models with silo-local latents each test silo uses the local posterior of
    the training silo with the same id.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not hasattr(model, "predict_proba"):
        raise ValueError(f"model {model.name!r} does not predict classes")
    if g.dim != model.n_global:
        raise ValueError("variational parameters do not match the model dimensions")
    key = RngKey(seed).derive("predict")
    out = {}
    for silo in data.silos:
        model.validate_silo(silo)
        p = None
        if model.unit_dim:
            if silo.silo_id not in locals_:
                raise ValueError(f"no local posterior for silo {silo.silo_id}")
            p = locals_[silo.silo_id]
        acc = np.zeros((silo.n_obs, model.K))
        for s in range(n_samples):
            z_G = sample_global(g, std_normal(key.derive(s, "global"), model.n_global))
            if p is None:
                acc += model.predict_proba(z_G, silo.X)
            else:
                z_L = sample_local(p, g.mu, z_G, std_normal(key.derive(s, "local", silo.silo_id), p.dim))
                acc += model.predict_proba(z_G, z_L, silo.X)
        out[silo.silo_id] = acc / n_samples
    return out


def posterior_predict(ck: Checkpoint, data: Dataset, n_samples: int = 100, seed: int = 0) -> dict[int, np.ndarray]:
    """Posterior-predictive probabilities from a saved checkpoint; see :func:`predictive_proba`."""
    if ck.model_id not in CLASSIFIERS:
        raise ValueError(f"model {ck.model_id!r} does not predict classes")
    model = make_model(ck.model_id, **ck.model_kwargs)
    if ck.n_global != model.n_global:
        raise ValueError("checkpoint does not match the model dimensions")
    locals_ = ck.local_params() if model.unit_dim else {}
    return predictive_proba(model, ck.global_params(), locals_, data, n_samples, seed)


def accuracy(probs: np.ndarray, y, mask=None) -> float:
    pred = np.argmax(probs, axis=1)
    hit = pred == np.asarray(y)
    if mask is not None:
        hit = hit[mask]
    return float(hit.mean()) if hit.size else float("nan")


# ---------------------------------------------------------------------------
# running


@dataclass
class RunOutcome:
    exit_code: int
    out_dir: Path | None
    metrics: list[dict] = field(default_factory=list)
    message: str = ""


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _cell(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return NULL
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _conjugate_metrics(model, data, g: GlobalVarParams, locals_: list[LocalVarParams]) -> dict:
    return {
        "kl_to_exact": model.kl_global_to_exact(data, g),
        "log_evidence_gap": model.log_evidence(data) - model.analytic_elbo(data, g, locals_),
    }


def default_out_dir(cfg: ExperimentConfig) -> Path:
    return Path("runs") / f"{cfg.model_id}-{cfg.algorithm}-seed{cfg.seed}"


def run_experiment(cfg: ExperimentConfig) -> RunOutcome:
    """Train as configured and write all artifacts.

    Data and model are validated before the output directory is created, so a
    configuration error leaves nothing on disk.
    """
    try:
        model = make_model(cfg.model_id, **cfg.model_kwargs)
        train, test = load_data(cfg, model)
    except ConfigError as exc:
        return RunOutcome(EXIT_CONFIG, None, message=str(exc))
    out = cfg.out if cfg.out is not None else default_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)

    conj = isinstance(model, ConjugateGaussianModel)
    extras: dict[int, dict] = {}
    status, message = "ok", ""
    try:
        if cfg.algorithm == "sfvi":
            log_every, last = cfg.run.log_every, cfg.run.n_iter

            def cb(stats, server, silos):
                if conj and (stats.round % log_every == 0 or stats.round == last):
                    extras[stats.round] = _conjugate_metrics(model, train, server.eta_G, [s.eta_L for s in silos])

            if conj:
                server = init_server(model, cfg.run)
                silos = [init_silo(model, s, cfg.run) for s in train.silos]
                extras[0] = _conjugate_metrics(model, train, server.eta_G, [s.eta_L for s in silos])
                result = run_sfvi(model, train, cfg.run, server, silos, callback=cb)
            else:
                result = run_sfvi(model, train, cfg.run)
            ck = from_sfvi(result, cfg.model_id, cfg.model_kwargs)
        else:
            log_every, last = cfg.run.log_every, cfg.run.R

            def cb(r, theta, eta_G, silos):
                if conj and (r % log_every == 0 or r == last):
                    extras[r] = _conjugate_metrics(model, train, eta_G, [s.local.eta_L for s in silos])

            result = run_sfvi_avg(model, train, cfg.run, callback=cb)
            if conj:
                init = [init_avg_silo(model, s, cfg.run).local.eta_L for s in train.silos]
                g0 = GlobalVarParams.init(model.n_global, cfg.run.diagonal, cfg.run.init_log_sigma)
                extras[0] = _conjugate_metrics(model, train, g0, init)
            ck = from_sfvi_avg(result, cfg.model_id, cfg.model_kwargs)
    except (NonFiniteError, BarycenterError, FloatingPointError) as exc:
        status, message = "diverged", str(exc)
        log.error("run diverged: %s", exc)
        _write_manifest(out, cfg, status, message, [])
        return RunOutcome(EXIT_DIVERGED, out, message=message)

    rows = []
    for r in result.trace.rows:
        row = {"round": r["round"], "elbo": r["elbo"]}
        row.update(extras.get(r["round"], {}))
        rows.append(row)
    columns = ["round", "elbo"]
    if conj:
        columns += ["kl_to_exact", "log_evidence_gap"]
    if model.name in CLASSIFIERS and test is not None:
        probs = posterior_predict(ck, test, cfg.n_samples, seed=cfg.seed)
        ys = {s.silo_id: s.y for s in test.silos}
        hits = np.concatenate([np.argmax(probs[j], axis=1) == ys[j] for j in sorted(probs)])
        rows[-1]["test_accuracy"] = float(hits.mean())
        columns.append("test_accuracy")
        for j in sorted(probs):
            name = f"test_accuracy_silo{j}"
            rows[-1][name] = accuracy(probs[j], ys[j])
            columns.append(name)

    files = ["trace.csv", "metrics.csv", "checkpoint.json"]
    result.trace.to_csv(out / "trace.csv", TRACE_COLUMNS)
    _write_csv(out / "metrics.csv", columns, rows)
    if cfg.algorithm == "sfvi_avg":
        _write_csv(out / "bary.csv", BARY_COLUMNS, result.trace.rows[1:] if len(result.trace.rows) > 1 else [])
        files.append("bary.csv")
    ck.save(out / "checkpoint.json")
    _write_manifest(out, cfg, status, message, files)
    return RunOutcome(EXIT_OK, out, rows)


def _write_manifest(out: Path, cfg: ExperimentConfig, status: str, message: str, files: list[str]) -> None:
    manifest = {
        "fedvar_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "status": status,
        "message": message,
        "seed": cfg.seed,
        "config_source": None if cfg.source is None else str(cfg.source),
        "config": cfg.to_dict(),
        "artifacts": {f: _sha256(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def run_from_path(path, seed: int | None = None, out=None) -> RunOutcome:
    try:
        cfg = load_config(path, seed, out)
    except ConfigError as exc:
        return RunOutcome(EXIT_CONFIG, None, message=str(exc))
    return run_experiment(cfg)
