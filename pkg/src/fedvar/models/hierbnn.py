"""Toy hierarchical Bayesian neural network with silo-personalised first layers.

First-layer weights use a non-centred parameterisation shared across silos::

    W1_j = mu + sigma * E_j,   mu_ik ~ N(0, 1),  E_j,ik ~ N(0, 1),  sigma ~ N+(0, 1)
    f_j(x) = softmax(W2_j relu(W1_j x)),  W2_j,ik ~ N(0, 1)

``z_G = (vec(mu), log sigma)`` and each silo has one local unit
``(vec(E_j), vec(W2_j))``; matrices are flattened row-major. The half-normal
prior on ``sigma`` is expressed in ``log sigma`` with its Jacobian.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax

from .base import LOG_2PI, LogDensity, Model
from .data import Silo

LOG_2 = float(np.log(2.0))


class ToyHierBNNModel(Model):
    name = "hierbnn"
    n_theta = 0
    local_full_cov = False

    def __init__(self, d: int = 4, hidden: int = 8, K: int = 4):
        if d > 8 or hidden > 16 or K > 4:
            raise ValueError("toy scale only: d <= 8, hidden <= 16, K <= 4")
        self.d, self.H, self.K = int(d), int(hidden), int(K)
        self.n_global = self.H * self.d + 1
        self.unit_dim = self.H * self.d + self.K * self.H

    def local_units(self, silo: Silo) -> np.ndarray:
        return np.array([silo.silo_id], dtype=np.int64)

    def validate_silo(self, silo: Silo) -> None:
        if silo.X is None or silo.X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features")
        if silo.n_obs and (silo.y.min() < 0 or silo.y.max() >= self.K):
            raise ValueError("label out of range")

    def unpack(self, z_G, z_L):
        if z_G.shape != (self.n_global,) or z_L.shape != (self.unit_dim,):
            raise ValueError("dimension mismatch for hierarchical BNN latents")
        hd = self.H * self.d
        mu = z_G[:hd].reshape(self.H, self.d)
        E = z_L[:hd].reshape(self.H, self.d)
        W2 = z_L[hd:].reshape(self.K, self.H)
        return mu, z_G[hd], E, W2

    def log_prior_global(self, theta, z_G) -> LogDensity:
        mu, log_sigma = z_G[:-1], z_G[-1]
        sigma2 = np.exp(2 * log_sigma)
        value = -0.5 * (mu.size * LOG_2PI + mu @ mu)
        value += LOG_2 - 0.5 * LOG_2PI - 0.5 * sigma2 + log_sigma
        return LogDensity(float(value), np.zeros(0), np.concatenate([-mu, [1.0 - sigma2]]))

    def _forward(self, z_G, z_L, X):
        mu, log_sigma, E, W2 = self.unpack(z_G, z_L)
        sigma = np.exp(log_sigma)
        W1 = mu + sigma * E
        a = X @ W1.T
        h = np.maximum(a, 0.0)
        return sigma, E, W1, W2, a, h, h @ W2.T

    def log_local_joint(self, silo, theta, z_G, z_L) -> LogDensity:
        self.validate_silo(silo)
        sigma, E, W1, W2, a, h, logits = self._forward(z_G, z_L, silo.X)
        logp = log_softmax(logits, axis=1)
        y = silo.y.astype(int)
        rows = np.arange(silo.n_obs)
        ll = logp[rows, y].sum()
        G = -np.exp(logp)
        G[rows, y] += 1.0
        dW2 = G.T @ h
        da = (G @ W2) * (a > 0)
        dW1 = da.T @ silo.X
        prior = -0.5 * (z_L.size * LOG_2PI + z_L @ z_L)
        d_z_G = np.concatenate([dW1.ravel(), [sigma * np.sum(dW1 * E)]])
        d_z_L = np.concatenate([(sigma * dW1).ravel(), dW2.ravel()]) - z_L
        return LogDensity(float(ll + prior), np.zeros(0), d_z_G, d_z_L)

    def preactivations(self, z_G, z_L, X) -> np.ndarray:
        return self._forward(z_G, z_L, X)[4]

    def predict_proba(self, z_G, z_L, X) -> np.ndarray:
        logits = self._forward(z_G, z_L, X)[-1]
        return np.exp(log_softmax(logits, axis=1))
