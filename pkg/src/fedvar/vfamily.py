"""Structured Gaussian variational family.

Global block::

    z_G = mu_G + sigma_G * (L_G @ eps_G)

Local block for one silo, conditional on the global draw::

    z_L = mu_bar + C @ (z_G - mu_G) + sigma_L * (L_L @ eps_L)

``L_G`` and ``L_L`` are lower-unitriangular, ``sigma = exp(log_sigma)``.
``L_L`` may be restricted to a block-diagonal pattern (one block per local
unit, e.g. one random intercept per subject); entries outside the blocks are
identically zero and are not parameters.

Flat layouts (used by optimizers, messages and checkpoints):

* global: ``(mu_G, log_sigma_G, strict-lower(L_G))``; the last part is empty
  for diagonal families.
* local: ``(mu_bar, log_sigma, strict-lower(L_L) block by block, vec(C))``
  where ``vec`` stacks columns.

All log-density gradients here are taken with respect to ``z`` with the
variational parameters held fixed, which is what the sticking-the-landing
estimator needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from .linalg import DimensionError, LowerUnitriangular, dense_from_unitri, strict_lower_count

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_LOG_SIGMA = float(np.log(0.1))


@lru_cache(maxsize=64)
def _tril(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(n, -1)


@lru_cache(maxsize=256)
def _strict_total(blocks: tuple[int, ...]) -> int:
    return sum(strict_lower_count(b) for b in blocks)


def _check_len(v: np.ndarray, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise DimensionError(f"{what}: expected shape ({n},), got {v.shape}")
    return v


# ---------------------------------------------------------------------------
# block-diagonal unitriangular helpers


@dataclass(frozen=True)
class _SizeGroup:
    size: int
    rows: np.ndarray  # (n_blocks, size) positions in the vector
    entries: np.ndarray  # (n_blocks, size*(size-1)/2) positions in the strict array
    tril: tuple[np.ndarray, np.ndarray]


@lru_cache(maxsize=256)
def _block_layout(blocks: tuple[int, ...]) -> tuple[_SizeGroup, ...]:
    starts = np.concatenate([[0], np.cumsum(blocks)[:-1]]).astype(int)
    counts = [strict_lower_count(b) for b in blocks]
    estarts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    groups = []
    for size in sorted(set(blocks)):
        sel = [i for i, b in enumerate(blocks) if b == size]
        rows = starts[sel][:, None] + np.arange(size)[None, :]
        m = strict_lower_count(size)
        entries = estarts[sel][:, None] + np.arange(m)[None, :]
        groups.append(_SizeGroup(size, rows, entries, _tril(size)))
    return tuple(groups)


def _block_mats(blocks, strict, group: _SizeGroup) -> np.ndarray:
    nb, s = group.rows.shape
    mats = np.broadcast_to(np.eye(s), (nb, s, s)).copy()
    if s > 1:
        mats[:, group.tril[0], group.tril[1]] = strict[group.entries]
    return mats


def block_unitri_apply(blocks, strict, x, transpose=False, inverse=False) -> np.ndarray:
    """Apply a block-diagonal unitriangular matrix (or its inverse/transpose)."""
    out = np.array(x, dtype=float, copy=True)
    for g in _block_layout(tuple(blocks)):
        if g.size == 1:
            continue
        mats = _block_mats(blocks, strict, g)
        if transpose:
            mats = np.swapaxes(mats, 1, 2)
        xb = x[g.rows]
        if inverse:
            yb = np.linalg.solve(mats, xb[..., None])[..., 0]
        else:
            yb = np.einsum("bij,bj->bi", mats, xb)
        out[g.rows] = yb
    return out


def block_unitri_entry_grad(blocks, n_strict, a, b) -> np.ndarray:
    """Gradient of ``a^T L b`` with respect to the strict entries of ``L``."""
    out = np.zeros(n_strict)
    for g in _block_layout(tuple(blocks)):
        if g.size == 1:
            continue
        outer = a[g.rows][:, :, None] * b[g.rows][:, None, :]
        out[g.entries] = outer[:, g.tril[0], g.tril[1]]
    return out


def block_strict_positions(blocks) -> tuple[np.ndarray, np.ndarray]:
    """Matrix (row, col) of every strict entry, in flat storage order."""
    n_strict = _strict_total(blocks)
    rows = np.zeros(n_strict, dtype=int)
    cols = np.zeros(n_strict, dtype=int)
    for g in _block_layout(tuple(blocks)):
        if g.size == 1:
            continue
        rows[g.entries] = g.rows[:, g.tril[0]]
        cols[g.entries] = g.rows[:, g.tril[1]]
    return rows, cols


def block_unitri_dense(blocks, strict) -> np.ndarray:
    n = int(sum(blocks))
    out = np.eye(n)
    for g in _block_layout(tuple(blocks)):
        if g.size == 1:
            continue
        mats = _block_mats(blocks, strict, g)
        for rows, m in zip(g.rows, mats):
            out[np.ix_(rows, rows)] = m
    return out


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class GlobalVarParams:
    mu: np.ndarray
    log_sigma: np.ndarray
    L_strict: np.ndarray
    diagonal: bool = False

    def __post_init__(self):
        n = np.asarray(self.mu).shape[0]
        object.__setattr__(self, "mu", _check_len(self.mu, n, "mu_G"))
        object.__setattr__(self, "log_sigma", _check_len(self.log_sigma, n, "log_sigma_G"))
        m = 0 if self.diagonal else strict_lower_count(n)
        object.__setattr__(self, "L_strict", _check_len(self.L_strict, m, "L_G"))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @cached_property
    def L(self) -> np.ndarray:
        if self.diagonal:
            return np.eye(self.dim)
        return dense_from_unitri(LowerUnitriangular(self.L_strict, self.dim))

    @property
    def n_params(self) -> int:
        return flat_size_global(self.dim, self.diagonal)

    def cov(self) -> np.ndarray:
        s = self.sigma[:, None] * self.L
        return s @ s.T

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_sigma, self.L_strict])

    @classmethod
    def from_flat(cls, vec, dim: int, diagonal: bool = False) -> "GlobalVarParams":
        vec = _check_len(vec, flat_size_global(dim, diagonal), "flat eta_G")
        return cls(vec[:dim].copy(), vec[dim : 2 * dim].copy(), vec[2 * dim :].copy(), diagonal)

    @classmethod
    def init(cls, dim: int, diagonal: bool = False, log_sigma: float = DEFAULT_LOG_SIGMA):
        m = 0 if diagonal else strict_lower_count(dim)
        return cls(np.zeros(dim), np.full(dim, log_sigma), np.zeros(m), diagonal)


def flat_size_global(dim: int, diagonal: bool = False) -> int:
    return 2 * dim + (0 if diagonal else strict_lower_count(dim))


@dataclass(frozen=True)
class LocalVarParams:
    """Variational parameters of ``q(z_L | z_G)`` for one silo.

    ``blocks`` gives the sizes of the independent sub-blocks of ``L``; the
    default is a single full block.
    """

    mu_bar: np.ndarray
    C: np.ndarray
    log_sigma: np.ndarray
    L_strict: np.ndarray
    blocks: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        n = np.asarray(self.mu_bar).shape[0]
        if self.blocks is None:
            blocks = (n,)
        elif isinstance(self.blocks, tuple) and all(type(b) is int for b in self.blocks):
            blocks = self.blocks
        else:
            blocks = tuple(int(b) for b in self.blocks)
        if n and (sum(blocks) != n or min(blocks) < 1):
            raise DimensionError(f"block sizes {blocks} do not partition dimension {n}")
        if not n:
            blocks = ()
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "mu_bar", _check_len(self.mu_bar, n, "mu_bar"))
        object.__setattr__(self, "log_sigma", _check_len(self.log_sigma, n, "log_sigma_L"))
        m = _strict_total(blocks)
        object.__setattr__(self, "L_strict", _check_len(self.L_strict, m, "L_L"))
        C = np.asarray(self.C, dtype=float)
        if C.ndim != 2 or C.shape[0] != n:
            raise DimensionError(f"C must have {n} rows, got shape {C.shape}")
        object.__setattr__(self, "C", C)

    @property
    def dim(self) -> int:
        return self.mu_bar.shape[0]

    @property
    def n_global(self) -> int:
        return self.C.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @cached_property
    def L(self) -> np.ndarray:
        return block_unitri_dense(self.blocks, self.L_strict)

    def cov(self) -> np.ndarray:
        s = self.sigma[:, None] * self.L
        return s @ s.T

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu_bar, self.log_sigma, self.L_strict, self.C.ravel(order="F")])

    @property
    def n_params(self) -> int:
        return flat_size_local(self.dim, self.n_global, self.blocks)

    @classmethod
    def from_flat(cls, vec, dim: int, n_global: int, blocks=None) -> "LocalVarParams":
        blocks = (dim,) if blocks is None else tuple(blocks)
        if not dim:
            blocks = ()
        vec = _check_len(vec, flat_size_local(dim, n_global, blocks), "flat eta_L")
        m = _strict_total(blocks)
        i = 2 * dim + m
        C = vec[i:].reshape((dim, n_global), order="F").copy()
        return cls(vec[:dim].copy(), C, vec[dim : 2 * dim].copy(), vec[2 * dim : i].copy(), blocks)

    @classmethod
    def init(cls, dim: int, n_global: int, blocks=None, log_sigma: float = DEFAULT_LOG_SIGMA):
        blocks = (dim,) if blocks is None else tuple(blocks)
        if not dim:
            blocks = ()
        m = _strict_total(blocks)
        return cls(np.zeros(dim), np.zeros((dim, n_global)), np.full(dim, log_sigma), np.zeros(m), blocks)

    def with_flat(self, vec) -> "LocalVarParams":
        return LocalVarParams.from_flat(vec, self.dim, self.n_global, self.blocks)


def flat_size_local(dim: int, n_global: int, blocks=None) -> int:
    blocks = (dim,) if blocks is None else tuple(blocks)
    return 2 * dim + _strict_total(blocks) + dim * n_global


# ---------------------------------------------------------------------------
# sampling and densities


def _global_Lv(p: GlobalVarParams, v: np.ndarray) -> np.ndarray:
    return v if p.diagonal else p.L @ v


def sample_global(p: GlobalVarParams, eps_G) -> np.ndarray:
    eps_G = _check_len(eps_G, p.dim, "eps_G")
    return p.mu + p.sigma * _global_Lv(p, eps_G)


def sample_local(p: LocalVarParams, mu_G, z_G, eps_L) -> np.ndarray:
    mu_G = _check_len(mu_G, p.n_global, "mu_G")
    z_G = _check_len(z_G, p.n_global, "z_G")
    eps_L = _check_len(eps_L, p.dim, "eps_L")
    return p.mu_bar + p.C @ (z_G - mu_G) + p.sigma * block_unitri_apply(p.blocks, p.L_strict, eps_L)


def _global_whiten(p: GlobalVarParams, z) -> np.ndarray:
    r = (z - p.mu) / p.sigma
    if p.diagonal:
        return r
    return solve_triangular(p.L, r, lower=True, unit_diagonal=True, check_finite=False)


def logq_global(p: GlobalVarParams, z_G) -> float:
    z_G = _check_len(z_G, p.dim, "z_G")
    u = _global_whiten(p, z_G)
    return float(-0.5 * u @ u - p.log_sigma.sum() - 0.5 * p.dim * LOG_2PI)


def grad_logq_global_wrt_z(p: GlobalVarParams, z_G) -> np.ndarray:
    z_G = _check_len(z_G, p.dim, "z_G")
    u = _global_whiten(p, z_G)
    if not p.diagonal:
        u = solve_triangular(p.L, u, lower=True, unit_diagonal=True, trans="T", check_finite=False)
    return -u / p.sigma


def _local_whiten(p: LocalVarParams, mu_G, z_G, z_L) -> np.ndarray:
    r = (z_L - p.mu_bar - p.C @ (z_G - mu_G)) / p.sigma
    return block_unitri_apply(p.blocks, p.L_strict, r, inverse=True)


def logq_local(p: LocalVarParams, mu_G, z_G, z_L) -> float:
    mu_G = _check_len(mu_G, p.n_global, "mu_G")
    z_G = _check_len(z_G, p.n_global, "z_G")
    z_L = _check_len(z_L, p.dim, "z_L")
    u = _local_whiten(p, mu_G, z_G, z_L)
    return float(-0.5 * u @ u - p.log_sigma.sum() - 0.5 * p.dim * LOG_2PI)


def grad_logq_local_wrt_z(p: LocalVarParams, mu_G, z_G, z_L) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``log q(z_L | z_G)`` with respect to ``(z_G, z_L)``."""
    mu_G = _check_len(mu_G, p.n_global, "mu_G")
    z_G = _check_len(z_G, p.n_global, "z_G")
    z_L = _check_len(z_L, p.dim, "z_L")
    u = _local_whiten(p, mu_G, z_G, z_L)
    g_L = -block_unitri_apply(p.blocks, p.L_strict, u, transpose=True, inverse=True) / p.sigma
    return -p.C.T @ g_L, g_L


# ---------------------------------------------------------------------------
# vector-Jacobian products of the sampling maps


def _vjp_scale_and_tri_global(p: GlobalVarParams, eps_G, cot) -> tuple[np.ndarray, np.ndarray]:
    Le = _global_Lv(p, eps_G)
    d_log_sigma = cot * p.sigma * Le
    if p.diagonal:
        return d_log_sigma, np.zeros(0)
    rows, cols = _tril(p.dim)
    d_L = (cot * p.sigma)[rows] * eps_G[cols]
    return d_log_sigma, d_L


def jacobian_vjp_global(p: GlobalVarParams, eps_G, cotangent) -> np.ndarray:
    """``(d sample_global / d eta_G)^T @ cotangent`` in the flat global layout."""
    eps_G = _check_len(eps_G, p.dim, "eps_G")
    cot = _check_len(cotangent, p.dim, "cotangent")
    d_log_sigma, d_L = _vjp_scale_and_tri_global(p, eps_G, cot)
    return np.concatenate([cot, d_log_sigma, d_L])


def jacobian_vjp_local(
    p: LocalVarParams, g: GlobalVarParams, eps_G, eps_L, cotangent
) -> tuple[np.ndarray, np.ndarray]:
    """VJPs of the local sampling map ``(eta_G, eta_L, eps_G, eps_L) -> z_L``.

    Returns ``(grad over flat eta_L, grad over flat eta_G)``. The global part
    flows through ``z_G - mu_G = sigma_G * (L_G @ eps_G)``; the explicit
    ``mu_G`` in the local map cancels the ``mu_G`` inside ``z_G``, so the
    ``mu_G`` slot is always zero.
    """
    eps_G = _check_len(eps_G, g.dim, "eps_G")
    eps_L = _check_len(eps_L, p.dim, "eps_L")
    cot = _check_len(cotangent, p.dim, "cotangent")
    if p.n_global != g.dim:
        raise DimensionError("local C does not match the global dimension")
    dz_G = g.sigma * _global_Lv(g, eps_G)
    Le = block_unitri_apply(p.blocks, p.L_strict, eps_L)
    d_L = block_unitri_entry_grad(p.blocks, p.L_strict.size, cot * p.sigma, eps_L)
    d_C = np.outer(cot, dz_G)
    own = np.concatenate([cot, cot * p.sigma * Le, d_L, d_C.ravel(order="F")])
    d_log_sigma_G, d_L_G = _vjp_scale_and_tri_global(g, eps_G, p.C.T @ cot)
    glob = np.concatenate([np.zeros(g.dim), d_log_sigma_G, d_L_G])
    return own, glob


def joint_mean_cov(g: GlobalVarParams, locals_: list[LocalVarParams]) -> tuple[np.ndarray, np.ndarray]:
    """Dense mean and covariance of ``(z_G, z_L1, ..., z_LJ)`` under q."""
    S_GG = g.cov()
    means = [g.mu]
    for p in locals_:
        means.append(p.mu_bar)
    n = sum(m.shape[0] for m in means)
    cov = np.zeros((n, n))
    nG = g.dim
    cov[:nG, :nG] = S_GG
    offs = np.cumsum([nG] + [p.dim for p in locals_])
    for j, p in enumerate(locals_):
        a, b = offs[j], offs[j + 1]
        cov[a:b, :nG] = p.C @ S_GG
        cov[:nG, a:b] = S_GG @ p.C.T
        for k, p2 in enumerate(locals_):
            c, d = offs[k], offs[k + 1]
            cov[a:b, c:d] = p.C @ S_GG @ p2.C.T
        cov[a:b, a:b] += p.cov()
    return np.concatenate(means), cov
