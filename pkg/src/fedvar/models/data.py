"""Silo-partitioned datasets, synthetic generators and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from ..rng import RngKey, std_normal, std_normal_rows


@dataclass
class Silo:
    """Observations held by one silo.

    ``index`` holds the global observation indices of the rows. ``groups``
    optionally maps each row to a global grouping unit (e.g. a subject).
    """

    silo_id: int
    index: np.ndarray
    y: np.ndarray
    X: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.y = np.asarray(self.y)
        n = self.index.shape[0]
        if self.y.shape[0] != n:
            raise ValueError("y and index lengths differ")
        if self.X is not None:
            self.X = np.asarray(self.X, dtype=float)
            if self.X.ndim != 2 or self.X.shape[0] != n:
                raise ValueError("X must be a 2-D array with one row per observation")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise ValueError("groups must have one entry per observation")

    @property
    def n_obs(self) -> int:
        return int(self.index.shape[0])

    def take(self, rows) -> "Silo":
        rows = np.asarray(rows)
        return Silo(
            self.silo_id,
            self.index[rows],
            self.y[rows],
            None if self.X is None else self.X[rows],
            None if self.groups is None else self.groups[rows],
        )

    def standalone(self) -> "Dataset":
        """This silo alone as a dataset, rows renumbered ``0..n-1`` in index order."""
        s = self.take(np.argsort(self.index, kind="stable"))
        s.index = np.arange(s.n_obs)
        return Dataset([s])


@dataclass
class Dataset:
    silos: list[Silo] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.silo_id for s in self.silos]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate silo ids")
        self.silos = sorted(self.silos, key=lambda s: s.silo_id)
        if self.silos:
            idx = np.concatenate([s.index for s in self.silos])
            if not np.array_equal(np.sort(idx), np.arange(idx.size)):
                raise ValueError("global observation indices must be a permutation of 0..N-1")

    @property
    def J(self) -> int:
        return len(self.silos)

    @property
    def N(self) -> int:
        return sum(s.n_obs for s in self.silos)

    @property
    def sizes(self) -> list[int]:
        return [s.n_obs for s in self.silos]

    def pooled(self) -> Silo:
        """All observations in one silo (id 0), ordered by global index."""
        parts = self.silos
        idx = np.concatenate([s.index for s in parts])
        order = np.argsort(idx, kind="stable")
        cat = lambda xs: None if xs[0] is None else np.concatenate(xs)[order]  # noqa: E731
        return Silo(
            0,
            idx[order],
            np.concatenate([s.y for s in parts])[order],
            cat([s.X for s in parts]),
            cat([s.groups for s in parts]),
        )

    def repartition(self, assignment) -> "Dataset":
        """Re-split the pooled rows; ``assignment[k]`` is the silo of observation ``k``."""
        pooled = self.pooled()
        assignment = np.asarray(assignment)
        if assignment.shape != (pooled.n_obs,):
            raise ValueError("assignment needs one silo id per observation")
        silos = []
        for j in np.unique(assignment):
            s = pooled.take(np.flatnonzero(assignment == j))
            s.silo_id = int(j)
            silos.append(s)
        return Dataset(silos)


def contiguous_assignment(n: int, J: int) -> np.ndarray:
    """Silo id for each of ``n`` items, split into ``J`` nearly equal runs."""
    if J < 1 or J > n:
        raise ValueError("need 1 <= J <= n")
    return np.repeat(np.arange(J), [len(a) for a in np.array_split(np.arange(n), J)])


def random_assignment(key: RngKey, n: int, J: int) -> np.ndarray:
    order = np.argsort(std_normal(key, n), kind="stable")
    out = np.empty(n, dtype=int)
    out[order] = contiguous_assignment(n, J)
    return out


def partition_by_group(dataset: Dataset, group_assignment) -> Dataset:
    """Re-split so each group (``Silo.groups``) lands whole in one silo."""
    pooled = dataset.pooled()
    if pooled.groups is None:
        raise ValueError("dataset has no groups")
    group_assignment = np.asarray(group_assignment)
    return dataset.repartition(group_assignment[pooled.groups])


# ---------------------------------------------------------------------------
# generators


def _uniform(key: RngKey, n: int) -> np.ndarray:
    return ndtr(std_normal(key, n))


def gen_conjugate(key: RngKey, N: int, J: int = 1, tau=1.0, lam=1.0, s=1.0) -> Dataset:
    """Draw from the three-level Gaussian model and split contiguously into ``J`` silos."""
    z_G = tau * std_normal(key.derive("z_G"), 1)[0]
    z_L = z_G + lam * std_normal(key.derive("z_L"), N)
    y = z_L + s * std_normal(key.derive("y"), N)
    pooled = Dataset([Silo(0, np.arange(N), y)])
    return pooled.repartition(contiguous_assignment(N, J))


def gen_glmm(
    key: RngKey,
    n_subjects: int = 537,
    n_visits: int = 4,
    beta=(-1.2, 0.3, -0.2, 0.05),
    omega: float = -0.6,
    subject_silo=None,
) -> Dataset:
    """Synthetic longitudinal binary data with the wheeze-study schema.

    Columns of ``X`` are ``(smoke, age_c)``; ``groups`` is the subject. Ages
    are centred at nine for visits at ages 7..10.
    """
    smoke = (_uniform(key.derive("smoke"), n_subjects) < 0.35).astype(float)
    b = np.exp(-omega) * std_normal(key.derive("b"), n_subjects)
    subj = np.repeat(np.arange(n_subjects), n_visits)
    age = np.tile(np.arange(7, 7 + n_visits) - 9.0, n_subjects)
    sm = smoke[subj]
    eta = beta[0] + beta[1] * sm + beta[2] * age + beta[3] * sm * age + b[subj]
    y = (_uniform(key.derive("y"), subj.size) < 1.0 / (1.0 + np.exp(-eta))).astype(int)
    X = np.column_stack([sm, age])
    data = Dataset([Silo(0, np.arange(subj.size), y, X, subj)])
    if subject_silo is not None:
        data = partition_by_group(data, subject_silo)
    return data


def gen_heterogeneous_classification(
    key: RngKey,
    J: int,
    N_j: int,
    d: int,
    K: int,
    skew: float,
    split: str = "train",
    separation: float = 1.5,
    noise: float = 1.0,
) -> Dataset:
    """Gaussian-blob classification where silo ``j`` is dominated by class ``j % K``.

    Each observation belongs to the dominant class with probability ``skew``
    and otherwise to one of the other classes uniformly. Class centres depend
    only on ``key``, so ``split="test"`` yields a matching held-out set.
    """
    if K < 2:
        raise ValueError("need at least two classes")
    if not (1.0 / K - 1e-12 <= skew <= 1.0):
        raise ValueError(f"skew must lie in [1/K, 1], got {skew}")
    centres = separation * std_normal(key.derive("centres"), K * d).reshape(K, d)
    base = key.derive(split)
    N = J * N_j
    u = _uniform(base.derive("dominant"), N)
    other = np.minimum((_uniform(base.derive("other"), N) * (K - 1)).astype(int), K - 2)
    silo = np.repeat(np.arange(J), N_j)
    dom = silo % K
    # skip over the dominant class when picking among the others
    alt = other + (other >= dom)
    if skew <= 1.0 / K + 1e-12:
        labels = np.minimum((_uniform(base.derive("uniform"), N) * K).astype(int), K - 1)
    else:
        labels = np.where(u < skew, dom, alt)
    X = centres[labels] + noise * std_normal_rows(base.derive("x"), np.arange(N), d)
    pooled = Dataset([Silo(0, np.arange(N), labels, X)])
    return pooled.repartition(silo)


# ---------------------------------------------------------------------------
# CSV


CLASSIFICATION_HEADER = ["silo_id", "global_index", "label"]
GLMM_HEADER = ["subject", "visit", "smoke", "age_c", "y"]


def write_classification_csv(dataset: Dataset, path) -> None:
    d = dataset.silos[0].X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLASSIFICATION_HEADER + [f"x{i}" for i in range(d)])
        for s in dataset.silos:
            for k in range(s.n_obs):
                w.writerow([s.silo_id, int(s.index[k]), int(s.y[k])] + [repr(float(v)) for v in s.X[k]])


def read_classification_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != CLASSIFICATION_HEADER:
            raise ValueError(f"{path}: expected header starting with {CLASSIFICATION_HEADER}")
        rows = [row for row in r if row]
    silo = np.array([int(row[0]) for row in rows])
    idx = np.array([int(row[1]) for row in rows])
    y = np.array([int(row[2]) for row in rows])
    X = np.array([[float(v) for v in row[3:]] for row in rows]).reshape(len(rows), len(header) - 3)
    silos = []
    for j in np.unique(silo):
        m = silo == j
        silos.append(Silo(int(j), idx[m], y[m], X[m]))
    return Dataset(silos)


def write_glmm_csv(dataset: Dataset, path) -> None:
    pooled = dataset.pooled()
    visit = np.zeros(pooled.n_obs, dtype=int)
    seen: dict[int, int] = {}
    for k, g in enumerate(pooled.groups):
        visit[k] = seen.get(int(g), 0)
        seen[int(g)] = visit[k] + 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GLMM_HEADER)
        for k in range(pooled.n_obs):
            w.writerow(
                [int(pooled.groups[k]), int(visit[k]), int(pooled.X[k, 0]), repr(float(pooled.X[k, 1])), int(pooled.y[k])]
            )


def read_glmm_csv(path, subject_silo=None) -> Dataset:
    """Load the GLMM schema; rows become observations in file order."""
    with open(Path(path), newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != GLMM_HEADER:
            raise ValueError(f"{path}: expected header {GLMM_HEADER}")
        rows = list(r)
    subj = np.array([int(row["subject"]) for row in rows])
    X = np.array([[float(row["smoke"]), float(row["age_c"])] for row in rows])
    y = np.array([int(row["y"]) for row in rows])
    data = Dataset([Silo(0, np.arange(len(rows)), y, X.reshape(len(rows), 2), subj)])
    if subject_silo is not None:
        data = partition_by_group(data, subject_silo)
    return data
