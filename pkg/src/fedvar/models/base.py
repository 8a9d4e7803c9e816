"""Model interface shared by every hierarchical model in the package."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import NamedTuple

import numpy as np

from .data import Dataset, Silo

LOG_2PI = float(np.log(2.0 * np.pi))


class LogDensity(NamedTuple):
    """A log-density value with its gradients.

    ``d_z_L`` is ``None`` for terms that do not involve local latents.
    """

    value: float
    d_theta: np.ndarray
    d_z_G: np.ndarray
    d_z_L: np.ndarray | None = None


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


class Model(ABC):
    """Hierarchical model ``p(z_G) prod_j p(y_j, z_Lj | z_G)``.

    Local latents come in *units* of ``unit_dim`` coordinates; each unit has
    a global id (an observation, a subject, a silo) that is stable under any
    re-partitioning of the data, which is what keys its noise stream.
    """

    name: str = "model"
    n_global: int
    n_theta: int = 0
    unit_dim: int = 0
    local_full_cov: bool = True  # False: L_L restricted to identity within each unit

    # --- structure -------------------------------------------------------

    def local_units(self, silo: Silo) -> np.ndarray:
        """Sorted global ids of the local latent units held by ``silo``."""
        return np.zeros(0, dtype=np.int64)

    def n_local(self, silo: Silo) -> int:
        return int(len(self.local_units(silo)) * self.unit_dim)

    def local_blocks(self, silo: Silo) -> tuple[int, ...]:
        n_units = len(self.local_units(silo))
        if self.local_full_cov:
            return (self.unit_dim,) * n_units
        return (1,) * (n_units * self.unit_dim)

    def init_theta(self) -> np.ndarray:
        return np.zeros(self.n_theta)

    def validate(self, dataset: Dataset) -> None:
        for s in dataset.silos:
            self.validate_silo(s)

    def validate_silo(self, silo: Silo) -> None:  # noqa: B027 - optional hook
        pass

    # --- densities -------------------------------------------------------

    @abstractmethod
    def log_prior_global(self, theta: np.ndarray, z_G: np.ndarray) -> LogDensity:
        """``log p_theta(z_G)`` with gradients in ``theta`` and ``z_G``."""

    @abstractmethod
    def log_local_joint(self, silo: Silo, theta: np.ndarray, z_G: np.ndarray, z_L: np.ndarray) -> LogDensity:
        """``log p_theta(y_j, z_Lj | z_G)`` for one silo, with all gradients."""

    def log_joint(self, dataset: Dataset, theta, z_G, z_Ls) -> float:
        total = self.log_prior_global(theta, z_G).value
        for silo, z_L in zip(dataset.silos, z_Ls):
            total += self.log_local_joint(silo, theta, z_G, z_L).value
        return total
