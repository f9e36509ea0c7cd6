"""Core types and the closed-form focal/scale triplet solver.

Every correspondence ties an image point (centered pixels), a metric depth and
a canonical object coordinate together.  For two correspondences of the same
object the camera-frame distance depends only on focal length and object
scale, so each pair yields one linear equation in ``[s**2, 1/f**2]``::

    |p_i - p_j|**2 * s**2 - |d_i x_i - d_j x_j|**2 / f**2 = (d_i - d_j)**2

Three correspondences give three pairs and an overdetermined 3x2 system that
is solved in the least-squares sense with a QR factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import DegenerateError, InsufficientCorrespondences


class ImagePoint(NamedTuple):
    """Pixel coordinates with the principal point already subtracted."""

    u: float
    v: float


@dataclass(frozen=True)
class Correspondence:
    x: ImagePoint
    d: float
    p: tuple[float, float, float]

    def __post_init__(self):
        x = ImagePoint(float(self.x[0]), float(self.x[1]))
        p = tuple(float(c) for c in self.p)
        if len(p) != 3:
            raise ValueError(f"canonical point must have 3 components, got {len(p)}")
        d = float(self.d)
        if not np.all(np.isfinite([*x, d, *p])):
            raise ValueError("correspondence components must be finite")
        if d <= 0:
            raise ValueError(f"depth must be positive, got {d}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "d", d)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Array-backed collection of correspondences belonging to one object.

    ``x`` is (n, 2) centered pixels, ``d`` is (n,) meters, ``p`` is (n, 3).
    Arrays are copied and made read-only on construction.
    """

    x: np.ndarray
    d: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64).reshape(-1, 2)
        d = np.array(self.d, dtype=np.float64).reshape(-1)
        p = np.array(self.p, dtype=np.float64).reshape(-1, 3)
        if not (len(x) == len(d) == len(p)):
            raise ValueError(
                f"inconsistent lengths: x={len(x)}, d={len(d)}, p={len(p)}"
            )
        if not (np.isfinite(x).all() and np.isfinite(d).all() and np.isfinite(p).all()):
            raise ValueError("correspondence components must be finite")
        if np.any(d <= 0):
            raise ValueError("all depths must be positive")
        for a in (x, d, p):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_correspondences(cls, corrs: Sequence[Correspondence]) -> "CorrespondenceSet":
        if len(corrs) == 0:
            return cls(np.empty((0, 2)), np.empty(0), np.empty((0, 3)))
        return cls(
            np.array([c.x for c in corrs]),
            np.array([c.d for c in corrs]),
            np.array([c.p for c in corrs]),
        )

    def __len__(self) -> int:
        return len(self.d)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Correspondence(ImagePoint(*self.x[idx]), self.d[idx], tuple(self.p[idx]))
        return CorrespondenceSet(self.x[idx], self.d[idx], self.p[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def to_list(self) -> list[Correspondence]:
        return list(self)


CorrespondenceLike = Union[CorrespondenceSet, Sequence[Correspondence]]


def as_correspondence_set(corrs: CorrespondenceLike) -> CorrespondenceSet:
    if isinstance(corrs, CorrespondenceSet):
        return corrs
    return CorrespondenceSet.from_correspondences(list(corrs))


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    image_width: int = 0
    image_height: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.f) and self.f > 0):
            raise ValueError(f"focal length must be positive, got {self.f}")

    @property
    def K(self) -> np.ndarray:
        """Intrinsic matrix acting on centered coordinates."""
        return np.diag([self.f, self.f, 1.0])

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.image_width / 2.0, self.image_height / 2.0


@dataclass(frozen=True)
class TripletSolution:
    f: float
    s: float
    residual: float


@dataclass(frozen=True)
class DegeneracyTolerances:
    depth_gap: float = 1e-9  # relative to the largest depth in the triplet
    pair_separation: float = 1e-9  # px * m
    max_condition: float = 1e12


DEFAULT_TOLERANCES = DegeneracyTolerances()


@dataclass(frozen=True)
class DegeneracyReport:
    has_distinct_depths: bool
    min_pair_separation: float
    condition_number: float
    min_depth_gap: float = field(default=float("nan"))

    def failure(self, tol: DegeneracyTolerances = DEFAULT_TOLERANCES) -> str | None:
        """Reason the triplet is unusable under ``tol``, or None if it is fine."""
        if not self.has_distinct_depths:
            return f"depths not distinct (min gap {self.min_depth_gap:.3g} m)"
        if not self.min_pair_separation > tol.pair_separation:
            return f"depth-weighted points coincide (separation {self.min_pair_separation:.3g})"
        if not self.condition_number <= tol.max_condition:
            return f"ill-conditioned system (cond {self.condition_number:.3g})"
        return None

    def is_degenerate(self, tol: DegeneracyTolerances = DEFAULT_TOLERANCES) -> bool:
        return self.failure(tol) is not None


# ---------------------------------------------------------------------------
# single-pair / single-triplet API


def _xdp(c: Correspondence) -> tuple[np.ndarray, float, np.ndarray]:
    return np.asarray(c.x, dtype=np.float64), float(c.d), np.asarray(c.p, dtype=np.float64)


def pair_constraint_row(ci: Correspondence, cj: Correspondence) -> tuple[float, float, float]:
    """Coefficients ``(a1, a2, b)`` with ``a1 * s**2 + a2 / f**2 = b``."""
    xi, di, pi = _xdp(ci)
    xj, dj, pj = _xdp(cj)
    dp = pi - pj
    dx = di * xi - dj * xj
    a1 = float(dp @ dp)
    a2 = -float(dx @ dx)
    b = (di - dj) ** 2
    return a1, a2, b


_PAIRS = ((0, 1), (1, 2), (0, 2))


def triplet_system(ci, cj, ck) -> tuple[np.ndarray, np.ndarray]:
    """The 3x2 matrix and right-hand side over pairs (i,j), (j,k), (i,k)."""
    cs = (ci, cj, ck)
    rows = [pair_constraint_row(cs[a], cs[b]) for a, b in _PAIRS]
    A = np.array([[r[0], r[1]] for r in rows])
    b = np.array([r[2] for r in rows])
    return A, b


def check_degeneracy(ci, cj, ck, tol: DegeneracyTolerances = DEFAULT_TOLERANCES) -> DegeneracyReport:
    cs = [_xdp(c) for c in (ci, cj, ck)]
    d = np.array([c[1] for c in cs])
    w = np.array([c[1] * c[0] for c in cs])
    gaps = [abs(d[a] - d[b]) for a, b in _PAIRS]
    seps = [float(np.linalg.norm(w[a] - w[b])) for a, b in _PAIRS]
    A, _ = triplet_system(ci, cj, ck)
    return DegeneracyReport(
        has_distinct_depths=bool(min(gaps) > tol.depth_gap * d.max()),
        min_pair_separation=min(seps),
        condition_number=float(_scaled_condition(A[None])[0]),
        min_depth_gap=float(min(gaps)),
    )


def solve_triplet(ci, cj, ck, tol: DegeneracyTolerances = DEFAULT_TOLERANCES) -> TripletSolution:
    """Closed-form (focal, scale) from three correspondences of one object.

    Raises DegenerateError if the triplet violates the distinct-depth or
    separation conditions, the system is numerically singular, or either
    solved unknown is non-positive.
    """
    report = check_degeneracy(ci, cj, ck, tol)
    reason = report.failure(tol)
    if reason is not None:
        raise DegenerateError(reason)
    A, b = triplet_system(ci, cj, ck)
    sol, res, _ = _lstsq_qr(A[None], b[None])
    s2, inv_f2 = sol[0]
    if not s2 > 0:
        raise DegenerateError(f"non-positive s^2 = {s2:.6g}")
    if not inv_f2 > 0:
        raise DegenerateError(f"non-positive 1/f^2 = {inv_f2:.6g}")
    return TripletSolution(f=float(1.0 / np.sqrt(inv_f2)), s=float(np.sqrt(s2)), residual=float(res[0]))


# ---------------------------------------------------------------------------
# batched kernel


def _scaled_condition(A: np.ndarray) -> np.ndarray:
    """2-norm condition number of each column-equilibrated (m, 3, 2) matrix."""
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        As = np.where(norms > 0, A / np.where(norms > 0, norms, 1.0), 0.0)
        sv = np.linalg.svd(As, compute_uv=False)
        cond = sv[:, 0] / sv[:, -1]
    cond[~np.isfinite(cond)] = np.inf
    return cond


def _lstsq_qr(A: np.ndarray, b: np.ndarray):
    """Least squares for a stack of 3x2 systems via QR on equilibrated columns.

    Returns (solutions (m, 2), residual norms (m,), condition numbers (m,)).
    Singular systems produce non-finite solutions and infinite condition.
    """
    norms = np.linalg.norm(A, axis=1)  # (m, 2)
    safe = np.where(norms > 0, norms, 1.0)
    As = A / safe[:, None, :]
    Q, R = np.linalg.qr(As)
    y = np.einsum("mij,mi->mj", Q, b)
    r00, r01, r11 = R[:, 0, 0], R[:, 0, 1], R[:, 1, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        z1 = y[:, 1] / r11
        z0 = (y[:, 0] - r01 * z1) / r00
        sv = np.linalg.svd(R, compute_uv=False)
        cond = np.abs(sv[:, 0] / sv[:, 1])
    cond[~np.isfinite(cond) | np.any(norms == 0, axis=1)] = np.inf
    sol = np.stack([z0, z1], axis=1) / safe
    with np.errstate(invalid="ignore"):
        res = np.linalg.norm(np.einsum("mij,mj->mi", A, sol) - b, axis=1)
    return sol, res, cond


# rejection codes reported by solve_triplets
OK = 0
REJECT_DEPTH = 1
REJECT_SEPARATION = 2
REJECT_CONDITION = 3
REJECT_SCALE = 4
REJECT_FOCAL = 5


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """Per-triplet outcome of ``solve_triplets``; rows align with the index array."""

    indices: np.ndarray
    f: np.ndarray
    s: np.ndarray
    residual: np.ndarray
    status: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.status == OK

    def solutions(self) -> list[TripletSolution]:
        return [
            TripletSolution(float(f), float(s), float(r))
            for f, s, r in zip(self.f[self.valid], self.s[self.valid], self.residual[self.valid])
        ]


def solve_triplets(
    cset: CorrespondenceLike,
    indices: np.ndarray,
    tol: DegeneracyTolerances = DEFAULT_TOLERANCES,
) -> TripletBatch:
    """Vectorized ``solve_triplet`` over an (m, 3) array of index triples.

    Degenerate or invalid triplets are not raised but flagged in ``status``
    (``OK`` for usable solutions) with NaN focal and scale.
    """
    cset = as_correspondence_set(cset)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1, 3)
    m = len(idx)
    if m and (idx.min() < 0 or idx.max() >= len(cset)):
        raise InsufficientCorrespondences("triplet index out of range")
    x = cset.x[idx]  # (m, 3, 2)
    d = cset.d[idx]  # (m, 3)
    p = cset.p[idx]  # (m, 3, 3)
    w = d[..., None] * x

    A = np.empty((m, 3, 2))
    b = np.empty((m, 3))
    gaps = np.empty((m, 3))
    seps = np.empty((m, 3))
    for r, (i, j) in enumerate(_PAIRS):
        dp = p[:, i] - p[:, j]
        dw = w[:, i] - w[:, j]
        A[:, r, 0] = np.einsum("mk,mk->m", dp, dp)
        A[:, r, 1] = -np.einsum("mk,mk->m", dw, dw)
        b[:, r] = (d[:, i] - d[:, j]) ** 2
        gaps[:, r] = np.abs(d[:, i] - d[:, j])
        seps[:, r] = np.sqrt(-A[:, r, 1])

    status = np.zeros(m, dtype=np.int8)
    f = np.full(m, np.nan)
    s = np.full(m, np.nan)
    residual = np.full(m, np.nan)
    if m == 0:
        return TripletBatch(idx, f, s, residual, status)

    sol, res, cond = _lstsq_qr(A, b)
    s2, inv_f2 = sol[:, 0], sol[:, 1]
    with np.errstate(invalid="ignore"):
        status[~(s2 > 0)] = REJECT_SCALE
        status[~(inv_f2 > 0) & (status == OK)] = REJECT_FOCAL
    # geometric rejections take precedence over sign rejections
    status[~(cond <= tol.max_condition)] = REJECT_CONDITION
    status[~(seps.min(axis=1) > tol.pair_separation)] = REJECT_SEPARATION
    status[~(gaps.min(axis=1) > tol.depth_gap * d.max(axis=1))] = REJECT_DEPTH

    ok = status == OK
    f[ok] = 1.0 / np.sqrt(inv_f2[ok])
    s[ok] = np.sqrt(s2[ok])
    residual[ok] = res[ok]
    return TripletBatch(idx, f, s, residual, status)


# ---------------------------------------------------------------------------
# back-projection


def backproject(x: ImagePoint, d: float, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point ``d * K^-1 [u, v, 1]``."""
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    u, v = x
    return d * np.array([u / K.f, v / K.f, 1.0])


def backproject_points(x: np.ndarray, d: np.ndarray, f: float) -> np.ndarray:
    """Vectorized back-projection of (n, 2) centered pixels with depths (n,)."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.column_stack([d * x[:, 0] / f, d * x[:, 1] / f, d])
