"""Projection onto the instrument space without forming the n x n matrix.

All quadratic forms are computed from ``Q'X`` where ``Q`` is an orthonormal
basis of col(Z): ``X'P_Z X = (Q'X)'(Q'X)`` and ``X'M_Z X = X'X - X'P_Z X``.
Leverages are the squared row norms of ``Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IVDataset, numerical_rank
from .errors import RankError


class ProjectionBasis:
    """Orthonormal basis ``Q`` (n x K) of the instrument column space."""

    def __init__(self, Q):
        Q = np.array(Q, dtype=float)
        Q.setflags(write=False)
        self.Q = Q
        self.n, self.K = Q.shape

    def qt(self, X):
        """Return ``Q'X``."""
        return self.Q.T @ X

    def project(self, X):
        """Return ``P_Z X = Q(Q'X)``."""
        return self.Q @ self.qt(X)

    def leverages(self):
        # row norms of an orthonormal Q can exceed 1 by rounding
        return np.minimum(np.einsum("ij,ij->i", self.Q, self.Q), 1.0)


class GroupProjectionBasis(ProjectionBasis):
    """Basis for a full set of group dummies, stored as group labels.

    Column ``g`` of ``Q`` is the indicator of group ``g`` divided by
    ``sqrt(n_g)``, so ``Q'x`` is a vector of scaled group sums. Nothing of
    size n x K is ever allocated unless ``Q`` is requested explicitly.
    """

    def __init__(self, groups):
        groups = np.asarray(groups)
        if groups.ndim != 1:
            raise ValueError("groups must be a 1-d label array")
        labels, codes = np.unique(groups, return_inverse=True)
        self.codes = codes
        self.n = codes.shape[0]
        self.K = labels.shape[0]
        self.sizes = np.bincount(codes, minlength=self.K).astype(float)
        self._scale = 1.0 / np.sqrt(self.sizes)

    @property
    def Q(self):
        Q = np.zeros((self.n, self.K))
        Q[np.arange(self.n), self.codes] = self._scale[self.codes]
        return Q

    def qt(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return np.bincount(self.codes, weights=X, minlength=self.K) * self._scale
        out = np.empty((self.K, X.shape[1]))
        for j in range(X.shape[1]):
            out[:, j] = np.bincount(self.codes, weights=X[:, j], minlength=self.K)
        return out * self._scale[:, None]

    def project(self, X):
        X = np.asarray(X, dtype=float)
        qx = self.qt(X)
        if X.ndim == 1:
            return (qx * self._scale)[self.codes]
        return (qx * self._scale[:, None])[self.codes]

    def leverages(self):
        return 1.0 / self.sizes[self.codes]


def decompose(ds: IVDataset) -> ProjectionBasis:
    """Thin QR basis of col(Z). Reuses the factorization from construction."""
    q = ds._q
    if q is None:
        rank, q = numerical_rank(ds.Z)
        if rank < ds.K:
            raise RankError(rank, ds.K)
    return ProjectionBasis(q)


@dataclass(frozen=True)
class ProjectionSummary:
    """Quadratic forms of (y, Y) under P_Z and M_Z, plus leverage statistics.

    ``QtY`` and ``Qty`` are kept so that forms in derived vectors (for
    example B2SLS residuals) can be evaluated without the basis.
    """

    n: int
    K: int
    YPY: np.ndarray
    YMY: np.ndarray
    YY: np.ndarray
    yPy: float
    yMy: float
    yy: float
    YPy: np.ndarray
    YMy: np.ndarray
    Yy: np.ndarray
    leverages: np.ndarray
    alpha_hat: float
    omega_hat: float
    QtY: np.ndarray
    Qty: np.ndarray

    @property
    def p(self) -> int:
        return self.YPY.shape[0]

    @classmethod
    def from_products(cls, QtY, Qty, YY, Yy, yy, leverages, n, omega_hat=None):
        """Assemble a summary from ``Q'Y``, ``Q'y`` and raw cross products."""
        QtY = np.asarray(QtY, dtype=float)
        if QtY.ndim == 1:
            QtY = QtY[:, None]
        Qty = np.asarray(Qty, dtype=float)
        YY = np.atleast_2d(np.asarray(YY, dtype=float))
        Yy = np.atleast_1d(np.asarray(Yy, dtype=float))
        K = QtY.shape[0]
        YPY = QtY.T @ QtY
        YPY = 0.5 * (YPY + YPY.T)
        YMY = YY - YPY
        YMY = 0.5 * (YMY + YMY.T)
        YPy = QtY.T @ Qty
        yPy = float(Qty @ Qty)
        if omega_hat is None:
            omega_hat = float(np.mean(leverages**2))
        return cls(
            n=int(n),
            K=int(K),
            YPY=YPY,
            YMY=YMY,
            YY=YY,
            yPy=yPy,
            yMy=float(yy) - yPy,
            yy=float(yy),
            YPy=YPy,
            YMy=Yy - YPy,
            Yy=Yy,
            leverages=leverages,
            alpha_hat=K / n,
            omega_hat=float(omega_hat),
            QtY=QtY,
            Qty=Qty,
        )


def summarize(basis: ProjectionBasis, ds: IVDataset) -> ProjectionSummary:
    if basis.n != ds.n or basis.K != ds.K:
        raise ValueError("basis does not match dataset dimensions")
    QtY = basis.qt(ds.Y)
    Qty = basis.qt(ds.y)
    return ProjectionSummary.from_products(
        QtY=QtY,
        Qty=Qty,
        YY=ds.Y.T @ ds.Y,
        Yy=ds.Y.T @ ds.y,
        yy=float(ds.y @ ds.y),
        leverages=basis.leverages(),
        n=ds.n,
    )


def first_stage_residuals(basis: ProjectionBasis, ds: IVDataset) -> np.ndarray:
    """Return ``M_Z Y`` (n x p)."""
    return ds.Y - basis.project(ds.Y)
