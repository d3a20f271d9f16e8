"""Trajectory-buffer PCA and removal of low-variance gradient directions.

A full buffer of ``tau`` post-update tokens is standardized per feature
(population standard deviation), its ``tau x tau`` Gram matrix is
eigendecomposed, and ``i*`` is the smallest index whose cumulative explained
variance exceeds ``1 - nu``.  Components ``1..i*`` are kept and components
``i*+1..tau`` are removed from later gradient estimates::

    g' = g - (g P^T) P

Directions with ``lambda <= 1e-12 * lambda_1`` were never visited by the
trajectory and are left alone unless ``remove_null_dims`` is set, in which
case everything outside the kept span is removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import symmetric_eigen

NULL_RATIO = 1e-12


class TrajectoryBuffer:
    """``tau x d`` ring of token snapshots; requires ``d > tau``."""

    def __init__(self, tau: int, d: int):
        if tau < 2:
            raise ValueError(f"tau must be >= 2, got {tau}")
        if not d > tau:
            raise ValueError(f"trajectory buffer needs d > tau, got d={d}, tau={tau}")
        self.tau, self.d = tau, d
        self.rows = np.zeros((tau, d))
        self.fill = 0

    @property
    def full(self) -> bool:
        return self.fill == self.tau

    def write(self, row: int, theta) -> None:
        if row != self.fill:
            raise IndexError(f"rows must be written in order: expected {self.fill}, got {row}")
        self.rows[row] = theta
        self.fill += 1

    def push(self, theta) -> None:
        self.write(self.fill, theta)

    def clear(self) -> None:
        self.rows[:] = 0.0
        self.fill = 0


@dataclass(frozen=True)
class Standardized:
    matrix: np.ndarray     # B-bar
    mean: np.ndarray
    std: np.ndarray        # 1 where the column was constant
    constant: np.ndarray   # bool mask


def normalize_buffer(buffer) -> Standardized:
    if isinstance(buffer, TrajectoryBuffer):
        if not buffer.full:
            raise ValueError(f"buffer holds {buffer.fill} of {buffer.tau} rows")
        b = buffer.rows
    else:
        b = np.asarray(buffer, dtype=np.float64)
    mean = b.mean(axis=0)
    std = b.std(axis=0)
    constant = std < 1e-12
    std = np.where(constant, 1.0, std)
    return Standardized((b - mean) / std, mean, std, constant)


def select_i_star(lam, nu: float) -> int:
    """Smallest 1-based ``i`` with ``sum(lam[:i]) / sum(lam) > 1 - nu``."""
    lam = np.asarray(lam, dtype=np.float64)
    total = lam.sum()
    if total <= 0:
        return lam.size
    hits = np.nonzero(np.cumsum(lam) / total > 1.0 - nu)[0]
    return int(hits[0]) + 1 if hits.size else lam.size


@dataclass(frozen=True)
class ProjectionBasis:
    tau: int
    i_star: int
    spectrum: np.ndarray
    removed_rows: np.ndarray           # (k, d); empty means no projection
    kept_rows: np.ndarray | None = None  # set when the complement of the kept span is removed

    @property
    def removed_fraction(self) -> float:
        return (self.tau - self.i_star) / self.tau

    @property
    def stored_rows(self) -> int:
        return self.removed_rows.shape[0] if self.kept_rows is None else self.kept_rows.shape[0]

    @property
    def empty(self) -> bool:
        return self.kept_rows is None and self.removed_rows.shape[0] == 0

    def removed_matrix(self) -> np.ndarray:
        """Orthonormal rows spanning everything this basis removes."""
        if self.kept_rows is None:
            return self.removed_rows
        return _complement(self.kept_rows)

    def project(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if self.kept_rows is not None:
            return (g @ self.kept_rows.T) @ self.kept_rows
        if self.removed_rows.shape[0] == 0:
            return g.copy()
        p = self.removed_rows
        return g - (g @ p.T) @ p


def empty_basis(tau: int, d: int) -> ProjectionBasis:
    return ProjectionBasis(tau=tau, i_star=tau, spectrum=np.zeros(tau), removed_rows=np.zeros((0, d)))


def _complement(rows: np.ndarray) -> np.ndarray:
    """Orthonormal complement of ``rows`` by Gram-Schmidt over the unit vectors."""
    k, d = rows.shape
    out = []
    basis = [r for r in rows]
    for j in range(d):
        v = np.zeros(d)
        v[j] = 1.0
        for _ in range(2):
            for b in basis:
                v -= (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            v /= nv
            basis.append(v)
            out.append(v)
        if len(out) == d - k:
            break
    return np.array(out).reshape(-1, d)


def compute_basis(bbar, nu: float, remove_null_dims: bool = False) -> ProjectionBasis:
    """Build P_nu from a standardized buffer (array or ``Standardized``)."""
    if not 0.0 < nu < 1.0:
        raise ValueError(f"nu must be in (0, 1), got {nu}")
    b = bbar.matrix if isinstance(bbar, Standardized) else np.asarray(bbar, dtype=np.float64)
    tau, d = b.shape
    eig = symmetric_eigen(b @ b.T)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    if lam[0] <= 0.0:
        return empty_basis(tau, d)
    i_star = select_i_star(lam, nu)
    live = lam > NULL_RATIO * lam[0]
    u = eig.eigenvectors[:, live]
    v = (b.T @ u) / np.sqrt(lam[live])   # feature-space eigenvectors as columns
    idx = np.nonzero(live)[0]
    if remove_null_dims:
        kept = v[:, idx < i_star].T
        return ProjectionBasis(tau, i_star, lam, np.zeros((0, d)), kept_rows=np.ascontiguousarray(kept))
    removed = v[:, idx >= i_star].T
    return ProjectionBasis(tau, i_star, lam, np.ascontiguousarray(removed))


def project_gradient(g_hat, basis: ProjectionBasis) -> np.ndarray:
    return basis.project(g_hat)


# ---------------------------------------------------------------------------
# retention analysis


@dataclass(frozen=True)
class PcaBasis:
    components: np.ndarray   # (r, d) orthonormal, by descending variance
    variances: np.ndarray


def trajectory_basis(snapshots) -> PcaBasis:
    """Centered (not standardized) PCA of a stack of token snapshots."""
    x = np.asarray(snapshots, dtype=np.float64)
    x = x - x.mean(axis=0)
    eig = symmetric_eigen(x @ x.T)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    if lam[0] <= 0.0:
        return PcaBasis(np.zeros((0, x.shape[1])), np.zeros(0))
    live = lam > NULL_RATIO * lam[0]
    comps = (x.T @ eig.eigenvectors[:, live]) / np.sqrt(lam[live])
    return PcaBasis(np.ascontiguousarray(comps.T), lam[live])


@dataclass(frozen=True)
class RetentionRecord:
    k: int
    relative_residual: float   # ||theta_k - theta_final|| / ||theta_final - theta_init||
    loss_k: float
    loss_final: float

    @property
    def loss_ratio(self) -> float:
        return self.loss_k / self.loss_final if self.loss_final > 0 else float("inf")


def retained_token(theta_init, theta_final, basis: PcaBasis, k: int) -> np.ndarray:
    """``theta_init`` plus the ``k`` basis components of the delta with the largest change."""
    if k < 0:
        raise ValueError("k must be non-negative")
    theta_init = np.asarray(theta_init, dtype=np.float64)
    delta = np.asarray(theta_final, dtype=np.float64) - theta_init
    coeff = basis.components @ delta
    top = np.argsort(-np.abs(coeff), kind="stable")[:k]
    return theta_init + coeff[top] @ basis.components[top]


def subspace_retention_report(theta_init, theta_final, basis: PcaBasis, k: int, loss) -> RetentionRecord:
    theta_k = retained_token(theta_init, theta_final, basis, k)
    delta = np.linalg.norm(np.asarray(theta_final) - np.asarray(theta_init))
    resid = np.linalg.norm(theta_k - theta_final) / delta if delta > 0 else 0.0
    return RetentionRecord(k, float(resid), float(loss(theta_k)), float(loss(theta_final)))
