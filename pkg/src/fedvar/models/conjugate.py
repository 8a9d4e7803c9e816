"""Three-level Gaussian model with a closed-form posterior.

    z_G ~ N(0, tau^2),  z_Lk | z_G ~ N(z_G, lam^2),  y_k | z_Lk ~ N(z_Lk, s^2)

There is one local unit per observation. Because the joint is Gaussian and
the structured family contains the exact posterior, this model is the
reference for every closed-form check in the test-suite.
"""

from __future__ import annotations

import numpy as np

from ..vfamily import GlobalVarParams, LocalVarParams, joint_mean_cov
from .base import LOG_2PI, LogDensity, Model, normal_logpdf
from .data import Dataset, Silo


class ConjugateGaussianModel(Model):
    name = "conjugate"
    n_global = 1
    n_theta = 0
    unit_dim = 1

    def __init__(self, tau: float = 1.0, lam: float = 1.0, s: float = 1.0):
        if min(tau, lam, s) <= 0:
            raise ValueError("tau, lam and s must be positive")
        self.tau, self.lam, self.s = float(tau), float(lam), float(s)

    def local_units(self, silo: Silo) -> np.ndarray:
        return np.sort(silo.index)

    def _positions(self, silo):
        return np.searchsorted(self.local_units(silo), silo.index)

    def log_prior_global(self, theta, z_G) -> LogDensity:
        v = self.tau**2
        return LogDensity(float(normal_logpdf(z_G[0], 0.0, v)), np.zeros(0), np.array([-z_G[0] / v]))

    def log_local_joint(self, silo, theta, z_G, z_L) -> LogDensity:
        lam2, s2 = self.lam**2, self.s**2
        y = np.zeros(z_L.shape[0])
        y[self._positions(silo)] = silo.y
        dev = z_L - z_G[0]
        res = z_L - y
        value = np.sum(normal_logpdf(z_L, z_G[0], lam2)) + np.sum(normal_logpdf(y, z_L, s2))
        d_z_L = -dev / lam2 - res / s2
        d_z_G = np.array([np.sum(dev) / lam2])
        return LogDensity(float(value), np.zeros(0), d_z_G, d_z_L)

    # --- closed forms -----------------------------------------------------

    def _all_y(self, dataset: Dataset) -> np.ndarray:
        return dataset.pooled().y.astype(float) if dataset.silos else np.zeros(0)

    def exact_global_posterior(self, dataset: Dataset) -> tuple[float, float]:
        """Mean and variance of ``z_G | y``."""
        y = self._all_y(dataset)
        v = self.lam**2 + self.s**2
        prec = 1.0 / self.tau**2 + y.size / v
        return float(y.sum() / v / prec), float(1.0 / prec)

    def exact_posterior(self, dataset: Dataset) -> tuple[GlobalVarParams, list[LocalVarParams]]:
        """Variational parameters that reproduce the exact joint posterior."""
        mean, var = self.exact_global_posterior(dataset)
        g = GlobalVarParams(np.array([mean]), np.array([0.5 * np.log(var)]), np.zeros(0))
        lam2, s2 = self.lam**2, self.s**2
        prec = 1.0 / lam2 + 1.0 / s2
        locals_ = []
        for silo in dataset.silos:
            y = np.zeros(self.n_local(silo))
            y[self._positions(silo)] = silo.y
            n = y.size
            C = np.full((n, 1), (1.0 / lam2) / prec)
            mu_bar = (mean / lam2 + y / s2) / prec
            locals_.append(
                LocalVarParams(mu_bar, C, np.full(n, -0.5 * np.log(prec)), np.zeros(0), self.local_blocks(silo))
            )
        return g, locals_

    def log_evidence(self, dataset: Dataset) -> float:
        y = self._all_y(dataset)
        n = y.size
        v = self.lam**2 + self.s**2
        t2 = self.tau**2
        logdet = (n - 1) * np.log(v) + np.log(v + n * t2) if n else 0.0
        quad = (y @ y - t2 * y.sum() ** 2 / (v + n * t2)) / v if n else 0.0
        return float(-0.5 * (n * LOG_2PI + logdet + quad))

    def analytic_elbo(self, dataset: Dataset, g: GlobalVarParams, locals_: list[LocalVarParams]) -> float:
        """Exact ELBO for a Gaussian q, via the dense joint mean and covariance."""
        m, S = joint_mean_cov(g, locals_)
        lam2, s2, t2 = self.lam**2, self.s**2, self.tau**2
        total = -0.5 * (LOG_2PI + np.log(t2) + (m[0] ** 2 + S[0, 0]) / t2)
        off = 1
        for silo, p in zip(dataset.silos, locals_):
            y = np.zeros(p.dim)
            y[self._positions(silo)] = silo.y
            idx = off + np.arange(p.dim)
            mk, Skk, Sk0 = m[idx], S[idx, idx], S[idx, 0]
            e_prior = (mk - m[0]) ** 2 + Skk - 2 * Sk0 + S[0, 0]
            e_lik = (y - mk) ** 2 + Skk
            total += np.sum(-0.5 * (LOG_2PI + np.log(lam2) + e_prior / lam2))
            total += np.sum(-0.5 * (LOG_2PI + np.log(s2) + e_lik / s2))
            off += p.dim
        _, logdet = np.linalg.slogdet(S)
        entropy = 0.5 * (S.shape[0] * (1.0 + LOG_2PI) + logdet)
        return float(total + entropy)

    def kl_global_to_exact(self, dataset: Dataset, g: GlobalVarParams) -> float:
        """``KL(q(z_G) || p(z_G | y))``."""
        mean, var = self.exact_global_posterior(dataset)
        v1 = float(np.exp(2 * g.log_sigma[0]))
        m1 = float(g.mu[0])
        return 0.5 * (np.log(var / v1) + (v1 + (m1 - mean) ** 2) / var - 1.0)
