"""Multinomial (softmax) regression with empirical-Bayes prior scales.

``z_G = (vec(W), b)`` with ``W`` of shape ``(K, d)`` stacked by columns;
``theta = (log sigma_W^2, log sigma_b^2)``. There are no local latents.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax

from .base import LOG_2PI, LogDensity, Model
from .data import Silo


def _log_normal_logvar(x, log_var):
    """``sum log N(x; 0, exp(log_var))`` and its derivatives in ``x`` and ``log_var``."""
    inv = np.exp(-log_var)
    value = -0.5 * (x.size * (LOG_2PI + log_var) + inv * (x @ x))
    return value, -x * inv, -0.5 * x.size + 0.5 * inv * (x @ x)


class MultinomRegModel(Model):
    name = "multinom"
    unit_dim = 0

    def __init__(self, d: int, K: int):
        if K < 2:
            raise ValueError("need at least two classes")
        self.d, self.K = int(d), int(K)
        self.n_global = self.K * self.d + self.K
        self.n_theta = 2

    def unpack(self, z_G):
        W = z_G[: self.K * self.d].reshape((self.K, self.d), order="F")
        return W, z_G[self.K * self.d :]

    def validate_silo(self, silo: Silo) -> None:
        if silo.X is None or silo.X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features")
        if silo.n_obs and (silo.y.min() < 0 or silo.y.max() >= self.K):
            raise ValueError("label out of range")

    def log_prior_global(self, theta, z_G) -> LogDensity:
        nW = self.K * self.d
        vw, gw, tw = _log_normal_logvar(z_G[:nW], theta[0])
        vb, gb, tb = _log_normal_logvar(z_G[nW:], theta[1])
        return LogDensity(float(vw + vb), np.array([tw, tb]), np.concatenate([gw, gb]))

    def logits(self, z_G, X):
        W, b = self.unpack(z_G)
        return X @ W.T + b

    def log_local_joint(self, silo, theta, z_G, z_L) -> LogDensity:
        self.validate_silo(silo)
        logp = log_softmax(self.logits(z_G, silo.X), axis=1)
        y = silo.y.astype(int)
        value = float(logp[np.arange(silo.n_obs), y].sum())
        G = -np.exp(logp)
        G[np.arange(silo.n_obs), y] += 1.0
        dW = G.T @ silo.X
        d_z_G = np.concatenate([dW.ravel(order="F"), G.sum(axis=0)])
        return LogDensity(value, np.zeros(2), d_z_G, np.zeros(0))

    def predict_proba(self, z_G, X) -> np.ndarray:
        return np.exp(log_softmax(self.logits(z_G, X), axis=1))
