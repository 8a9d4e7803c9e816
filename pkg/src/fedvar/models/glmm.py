"""Bayesian logistic mixed model with a random intercept per subject.

    logit p_ik = b0 + b1 smoke_i + b2 age_ik + b3 smoke_i age_ik + b_i
    b_k ~ N(0, 10^2),  omega ~ N(0, 10^2),  b_i | omega ~ N(0, exp(-2 omega))

``z_G = (b0, b1, b2, b3, omega)``; the local latents are the intercepts of
the subjects held by the silo, in increasing subject order.
"""

from __future__ import annotations

import numpy as np

from .base import LOG_2PI, LogDensity, Model, normal_logpdf
from .data import Silo

PRIOR_VAR = 100.0


def _design(X: np.ndarray) -> np.ndarray:
    smoke, age = X[:, 0], X[:, 1]
    return np.column_stack([np.ones_like(smoke), smoke, age, smoke * age])


class LogisticMixedModel(Model):
    name = "glmm"
    n_global = 5
    n_theta = 0
    unit_dim = 1

    def local_units(self, silo: Silo) -> np.ndarray:
        return np.unique(silo.groups)

    def validate_silo(self, silo: Silo) -> None:
        if silo.groups is None or silo.X is None or silo.X.shape[1] != 2:
            raise ValueError("GLMM silos need subject groups and (smoke, age_c) columns")
        if not np.all(np.isin(silo.y, (0, 1))):
            raise ValueError("GLMM labels must be 0 or 1")

    def log_prior_global(self, theta, z_G) -> LogDensity:
        value = float(np.sum(normal_logpdf(z_G, 0.0, PRIOR_VAR)))
        return LogDensity(value, np.zeros(0), -z_G / PRIOR_VAR)

    def log_local_joint(self, silo, theta, z_G, z_L) -> LogDensity:
        if not np.all(np.isin(silo.y, (0, 1))):
            raise ValueError("GLMM labels must be 0 or 1")
        beta, omega = z_G[:4], z_G[4]
        units = self.local_units(silo)
        pos = np.searchsorted(units, silo.groups)
        D = _design(silo.X)
        eta = D @ beta + z_L[pos]
        y = silo.y.astype(float)
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        resid = y - 1.0 / (1.0 + np.exp(-eta))
        prec = np.exp(2.0 * omega)
        n = z_L.shape[0]
        lp = n * (omega - 0.5 * LOG_2PI) - 0.5 * prec * (z_L @ z_L)
        d_beta = D.T @ resid
        d_omega = n - prec * (z_L @ z_L)
        d_b = np.bincount(pos, weights=resid, minlength=n) - prec * z_L
        return LogDensity(float(ll + lp), np.zeros(0), np.concatenate([d_beta, [d_omega]]), d_b)
