"""IV regression data: the (y, Y, Z) triple, CSV interchange, and validation."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DimensionError, ParseError, RankError

MANY_IV_THRESHOLD = 0.05


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def numerical_rank(Z):
    """Rank of ``Z`` from a column-pivoted QR.

    The tolerance is ``n * eps * max_j ||Z[:, j]||``.

    Returns
    -------
    rank : int
    q : ndarray of shape (n, K)
        Orthonormal factor of the pivoted QR. Its first ``rank`` columns
        span col(Z).
    """
    n = Z.shape[0]
    q, r, _ = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    col_norm = np.max(np.linalg.norm(Z, axis=0)) if Z.size else 0.0
    tol = n * np.finfo(float).eps * col_norm
    diag = np.abs(np.diag(r))
    return int(np.count_nonzero(diag > tol)), q


@dataclass(frozen=True)
class IVDataset:
    """Observations for the model ``y = Y beta + u``, ``Y = Z Pi + V``.

    Arrays are copied and made read-only. Construction checks shapes,
    finiteness and the column rank of ``Z``.

    Parameters
    ----------
    y : array of shape (n,)
    Y : array of shape (n,) or (n, p)
    Z : array of shape (n,) or (n, K)
    """

    y: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    _q: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Z.ndim == 1:
            Z = Z[:, None]
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1 or Y.ndim != 2 or Z.ndim != 2:
            raise DimensionError(
                f"expected y (n,), Y (n, p), Z (n, K); got {y.shape}, {Y.shape}, {Z.shape}"
            )
        n = y.shape[0]
        if Y.shape[0] != n or Z.shape[0] != n:
            raise DimensionError(
                f"row counts differ: y {n}, Y {Y.shape[0]}, Z {Z.shape[0]}"
            )
        K, p = Z.shape[1], Y.shape[1]
        if K < 1 or p < 1:
            raise DimensionError("need at least one instrument and one endogenous variable")
        if n <= K:
            raise DimensionError(f"need n > K, got n={n}, K={K}")
        if n <= p:
            raise DimensionError(f"need n > p, got n={n}, p={p}")
        for name, a in (("y", y), ("Y", Y), ("Z", Z)):
            if not np.all(np.isfinite(a)):
                raise DimensionError(f"{name} contains NaN or Inf")
        rank, q = numerical_rank(Z)
        if rank < K:
            raise RankError(rank, K)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "Z", _frozen(Z))
        object.__setattr__(self, "_q", _frozen(q))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.Z.shape[1]

    @property
    def p(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class DatasetMeta:
    n: int
    K: int
    p: int
    alpha_hat: float
    many_iv_flag: bool


def validate(ds: IVDataset) -> DatasetMeta:
    """Dimension summary of ``ds``, re-checking the instrument rank."""
    rank, _ = numerical_rank(ds.Z)
    if rank < ds.K:
        raise RankError(rank, ds.K)
    alpha = ds.K / ds.n
    return DatasetMeta(
        n=ds.n, K=ds.K, p=ds.p, alpha_hat=alpha, many_iv_flag=alpha >= MANY_IV_THRESHOLD
    )


_Y_COL = re.compile(r"^Y(\d+)$")
_Z_COL = re.compile(r"^Z(\d+)$")


def _parse_header(header, p):
    names = [h.strip() for h in header]
    if not names or names[0] != "y":
        raise ParseError("first column must be named 'y'", row=0)
    ys, zs = [], []
    for name in names[1:]:
        if (m := _Y_COL.match(name)) and not zs:
            ys.append(int(m.group(1)))
        elif m := _Z_COL.match(name):
            zs.append(int(m.group(1)))
        else:
            raise ParseError(f"unexpected column name {name!r}", row=0)
    if ys != list(range(1, len(ys) + 1)) or zs != list(range(1, len(zs) + 1)):
        raise ParseError("columns must be y, Y1..Yp, Z1..ZK in order", row=0)
    if p is not None and p != len(ys):
        raise DimensionError(f"p={p} requested but header names {len(ys)} endogenous columns")
    if not ys or not zs:
        raise DimensionError("need at least one Y column and one Z column")
    return len(ys), len(zs)


def load_csv(path, p: int | None = None) -> IVDataset:
    """Read a dataset written with columns ``y, Y1..Yp, Z1..ZK``.

    Parameters
    ----------
    path : path-like
    p : int, optional
        Number of endogenous columns. The header is authoritative; a value
        that disagrees with it raises ``DimensionError``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=0) from None
        p, K = _parse_header(header, p)
        width = 1 + p + K
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", row=i)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", row=i) from None
    if not rows:
        raise DimensionError("no data rows")
    data = np.array(rows, dtype=float)
    n = data.shape[0]
    if n <= K:
        raise DimensionError(f"need n > K, got n={n}, K={K}")
    return IVDataset(y=data[:, 0], Y=data[:, 1 : 1 + p], Z=data[:, 1 + p :])


def write_csv(ds: IVDataset, path) -> None:
    """Write ``ds`` in the ``load_csv`` schema with round-trip float text."""
    header = ["y"] + [f"Y{j}" for j in range(1, ds.p + 1)] + [f"Z{j}" for j in range(1, ds.K + 1)]
    data = np.column_stack([ds.y, ds.Y, ds.Z])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
