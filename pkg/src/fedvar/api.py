"""scikit-learn style estimators wrapping SFVI and SFVI-Avg.

``fit`` takes a :class:`~fedvar.models.Dataset` (its silos are the
federation); prediction methods take a dataset whose silo ids match the
training silos. Fitted attributes end in an underscore as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .averaging import AvgConfig, run_sfvi_avg
from .federation import RunConfig, run_sfvi
from .harness import CLASSIFIERS, predictive_proba
from .models import Dataset, make_model
from .vfamily import DEFAULT_LOG_SIGMA


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a fedvar Dataset, got {type(X).__name__}")
    if not X.silos:
        raise ValueError("dataset has no silos")
    return X


def _labels(X: Dataset) -> np.ndarray:
    return np.concatenate([s.y for s in X.silos])


class SFVI(BaseEstimator):
    """Structured federated VI with one server step per round.

    Parameters mirror :class:`~fedvar.federation.RunConfig`; ``model`` is a
    model id and ``model_kwargs`` its constructor arguments.
    """

    def __init__(
        self,
        model: str = "conjugate",
        model_kwargs: dict | None = None,
        n_iter: int = 1000,
        lr: float = 1e-3,
        lr_local: float | None = None,
        lr_theta: float | None = None,
        diagonal: bool = False,
        init_log_sigma: float = DEFAULT_LOG_SIGMA,
        seed: int = 0,
        n_workers: int = 1,
        n_samples: int = 100,
        n_mc: int = 1,
    ):
        self.model = model
        self.model_kwargs = model_kwargs
        self.n_iter = n_iter
        self.lr = lr
        self.lr_local = lr_local
        self.lr_theta = lr_theta
        self.diagonal = diagonal
        self.init_log_sigma = init_log_sigma
        self.seed = seed
        self.n_workers = n_workers
        self.n_samples = n_samples
        self.n_mc = n_mc

    def _make_model(self):
        return make_model(self.model, **(self.model_kwargs or {}))

    def _config(self):
        return RunConfig(
            n_iter=self.n_iter, seed=self.seed, lr=self.lr, lr_local=self.lr_local, lr_theta=self.lr_theta,
            diagonal=self.diagonal, init_log_sigma=self.init_log_sigma, n_workers=self.n_workers, n_mc=self.n_mc,
        )

    def _run(self, model, X, config):
        r = run_sfvi(model, X, config)
        return r.theta, r.eta_G, r.local_params(), r.trace

    def fit(self, X, y=None):
        X = check_dataset(X)
        model = self._make_model()
        self.theta_, self.eta_G_, self.local_params_, self.trace_ = self._run(model, X, self._config())
        self.model_ = model
        self.silo_ids_ = [s.silo_id for s in X.silos]
        self.elbo_ = float(self.trace_.rows[-1]["elbo"])
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Posterior-predictive probabilities, rows ordered silo by silo."""
        check_is_fitted(self, "eta_G_")
        X = check_dataset(X)
        if self.model not in CLASSIFIERS:
            raise ValueError(f"model {self.model!r} is not a classifier")
        probs = predictive_proba(self.model_, self.eta_G_, self.local_params_, X, self.n_samples, self.seed)
        return np.concatenate([probs[s.silo_id] for s in X.silos])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None) -> float:
        """Mean accuracy; labels come from ``X`` unless ``y`` is given."""
        X = check_dataset(X)
        y = _labels(X) if y is None else np.asarray(y)
        return float(np.mean(self.predict(X) == y))


class SFVIAvg(SFVI):
    """SFVI-Avg: ``R`` rounds of ``m`` local steps with barycentric averaging."""

    def __init__(
        self,
        model: str = "conjugate",
        model_kwargs: dict | None = None,
        R: int = 10,
        m: int = 100,
        mode: str = "diagonal",
        tol: float = 1e-9,
        max_iter: int = 200,
        weighted: bool = False,
        lr: float = 1e-3,
        lr_local: float | None = None,
        lr_theta: float | None = None,
        init_log_sigma: float = DEFAULT_LOG_SIGMA,
        seed: int = 0,
        n_workers: int = 1,
        n_samples: int = 100,
        n_mc: int = 1,
    ):
        self.model = model
        self.model_kwargs = model_kwargs
        self.R = R
        self.m = m
        self.mode = mode
        self.tol = tol
        self.max_iter = max_iter
        self.weighted = weighted
        self.lr = lr
        self.lr_local = lr_local
        self.lr_theta = lr_theta
        self.init_log_sigma = init_log_sigma
        self.seed = seed
        self.n_workers = n_workers
        self.n_samples = n_samples
        self.n_mc = n_mc

    def _config(self):
        return AvgConfig(
            R=self.R, m=self.m, mode=self.mode, tol=self.tol, max_iter=self.max_iter, weighted=self.weighted,
            seed=self.seed, lr=self.lr, lr_local=self.lr_local, lr_theta=self.lr_theta,
            init_log_sigma=self.init_log_sigma, n_workers=self.n_workers, n_mc=self.n_mc,
        )

    def _run(self, model, X, config):
        r = run_sfvi_avg(model, X, config)
        return r.theta, r.eta_G, r.local_params(), r.trace
