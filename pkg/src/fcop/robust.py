"""Robust focal estimation from many sampled triplets.

Each sampled triplet yields one focal candidate ``f_k``.  The estimate is the
focal value stabbed by the largest number of intervals ``[f_k - eps, f_k + eps]``
(1D consensus maximization), found exactly with a sorted endpoint sweep.
Candidates from several objects in one frame can be pooled before stabbing.

``ransac_focal`` is the hypothesize-and-verify alternative which scores each
triplet hypothesis by 3D residuals in meters.  Those residuals are measured in
a back-projection that itself depends on the hypothesised focal, so a fixed
metric threshold means different things for different hypotheses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EmptyInput,
    InsufficientCorrespondences,
    InvalidConfig,
    NoEligibleObject,
    NoValidTriplet,
)
from .geometry import (
    DEFAULT_TOLERANCES,
    CorrespondenceLike,
    DegeneracyTolerances,
    TripletSolution,
    as_correspondence_set,
    backproject_points,
    solve_triplets,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RobustConfig:
    num_samples_T: int = 200
    noise_bound_eps: float = 5.0  # pixels
    rng_seed: int = 0
    tolerances: DegeneracyTolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        if int(self.num_samples_T) != self.num_samples_T or self.num_samples_T < 1:
            raise InvalidConfig(f"num_samples_T must be a positive integer, got {self.num_samples_T}")
        if not (np.isfinite(self.noise_bound_eps) and self.noise_bound_eps > 0):
            raise InvalidConfig(f"noise_bound_eps must be positive, got {self.noise_bound_eps}")


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True, eq=False)
class FocalEstimate:
    """Robust focal estimate.

    For interval stabbing ``support`` counts stabbed candidate intervals; for
    RANSAC it is the inlier count of the winning hypothesis.  Frame-level
    estimates also carry the per-object estimates (None where an object was
    skipped) and the skipped object indices.
    """

    f: float
    support: int
    candidates: list[TripletSolution]
    num_rejected: int
    method: str = "is"
    per_object: list["FocalEstimate | None"] = field(default_factory=list)
    skipped_objects: list[int] = field(default_factory=list)

    @property
    def candidate_focals(self) -> np.ndarray:
        return np.array([c.f for c in self.candidates], dtype=np.float64)


# ---------------------------------------------------------------------------
# interval stabbing


def stab_intervals(lo, hi) -> tuple[Interval, int]:
    """Deepest segment of a set of closed intervals and its depth.

    Endpoints are swept in ascending order with starts processed before ends at
    equal coordinates, so touching intervals count as overlapping.  Among
    segments of maximal depth the one with the lowest coordinate is returned.
    """
    lo = np.asarray(lo, dtype=np.float64).ravel()
    hi = np.asarray(hi, dtype=np.float64).ravel()
    if lo.size == 0:
        raise EmptyInput("no intervals to stab")
    if lo.shape != hi.shape or np.any(lo > hi):
        raise ValueError("intervals must satisfy lo <= hi")
    coords = np.concatenate([lo, hi])
    # start events sort before end events at the same coordinate
    kind = np.concatenate([np.zeros(lo.size, np.int8), np.ones(hi.size, np.int8)])
    order = np.lexsort((kind, coords))
    coords = coords[order]
    depth = np.cumsum(np.where(kind[order] == 0, 1, -1))
    k = int(np.argmax(depth))
    return Interval(coords[k], coords[k + 1]), int(depth[k])


def interval_stab(focals: Sequence[float], eps: float) -> tuple[float, int]:
    """Focal value pierced by the most ``[f_k - eps, f_k + eps]`` intervals."""
    f = np.asarray(focals, dtype=np.float64).ravel()
    if f.size == 0:
        raise EmptyInput("no focal candidates")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    segment, support = stab_intervals(f - eps, f + eps)
    return segment.midpoint, support


# ---------------------------------------------------------------------------
# triplet sampling


def object_rng(seed: int, object_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(object_index)])


def sample_triplets(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` uniformly random ordered triples of distinct indices in [0, n)."""
    if n < 3:
        raise InsufficientCorrespondences(f"need at least 3 correspondences, got {n}")
    a = rng.integers(0, n, count)
    b = rng.integers(0, n - 1, count)
    c = rng.integers(0, n - 2, count)
    b = b + (b >= a)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.column_stack([a, b, c])


# ---------------------------------------------------------------------------
# interval-stabbing estimators


def _object_candidates(cset, cfg: RobustConfig, object_index: int):
    n = len(cset)
    if n < 3:
        raise InsufficientCorrespondences(f"need at least 3 correspondences, got {n}")
    idx = sample_triplets(n, cfg.num_samples_T, object_rng(cfg.rng_seed, object_index))
    batch = solve_triplets(cset, idx, cfg.tolerances)
    num_rejected = int((~batch.valid).sum())
    if num_rejected == len(idx):
        raise NoValidTriplet(f"all {len(idx)} sampled triplets were degenerate or invalid")
    return batch.solutions(), num_rejected


def estimate_object_focal(
    corrs: CorrespondenceLike, cfg: RobustConfig = RobustConfig(), object_index: int = 0
) -> FocalEstimate:
    """Interval-stabbing focal estimate from one object's correspondences.

    ``object_index`` selects the sampling stream, so that an object evaluated
    alone and the same object inside a frame draw identical triplets.
    """
    cset = as_correspondence_set(corrs)
    cands, rejected = _object_candidates(cset, cfg, object_index)
    f_hat, support = interval_stab([c.f for c in cands], cfg.noise_bound_eps)
    return FocalEstimate(f_hat, support, cands, rejected)


def estimate_frame_focal(objects: Sequence[CorrespondenceLike], cfg: RobustConfig = RobustConfig()) -> FocalEstimate:
    """One focal for the whole frame by stabbing the pooled candidates of all objects."""
    pooled: list[TripletSolution] = []
    per_object: list[FocalEstimate | None] = []
    skipped: list[int] = []
    rejected = 0
    for i, corrs in enumerate(objects):
        try:
            est = estimate_object_focal(corrs, cfg, object_index=i)
        except (InsufficientCorrespondences, NoValidTriplet) as exc:
            log.warning("object %d skipped: %s", i, exc)
            per_object.append(None)
            skipped.append(i)
            continue
        per_object.append(est)
        pooled.extend(est.candidates)
        rejected += est.num_rejected
    if not pooled:
        raise NoEligibleObject(f"none of {len(objects)} objects produced focal candidates")
    f_hat, support = interval_stab([c.f for c in pooled], cfg.noise_bound_eps)
    return FocalEstimate(f_hat, support, pooled, rejected, "is", per_object, skipped)


# ---------------------------------------------------------------------------
# RANSAC baseline


@dataclass(frozen=True, eq=False)
class RansacHypothesis:
    triplet: np.ndarray
    f: float
    s: float
    R: np.ndarray
    t: np.ndarray
    residual: float


def _rigid_batch(src: np.ndarray, dst: np.ndarray):
    """Kabsch alignment for a stack of (m, k, 3) point sets; returns R, t, ok."""
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    ok = sv[:, 1] > 1e-10 * sv[:, 0]
    H = np.einsum("mki,mkj->mij", xd, xs)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    sign[sign == 0] = 1.0
    U = U.copy()
    U[:, :, 2] *= sign[:, None]
    R = U @ Vt
    t = mu_d[:, 0] - np.einsum("mij,mj->mi", R, mu_s[:, 0])
    return R, t, ok


def ransac_hypotheses(
    corrs: CorrespondenceLike,
    iters: int,
    seed: int = 0,
    tol: DegeneracyTolerances = DEFAULT_TOLERANCES,
    object_index: int = 0,
) -> tuple[list[RansacHypothesis], int]:
    """Triplet hypotheses ``(f, s, R, t)`` and the number of unusable samples.

    The pose comes from aligning ``s * p`` of the triplet to its back-projection
    under the triplet's own focal, keeping the scale fixed.
    """
    cset = as_correspondence_set(corrs)
    idx = sample_triplets(len(cset), iters, object_rng(seed, object_index))
    batch = solve_triplets(cset, idx, tol)
    ok = batch.valid
    idx, f, s, res = idx[ok], batch.f[ok], batch.s[ok], batch.residual[ok]
    if len(idx) == 0:
        return [], iters
    x = cset.x[idx]
    d = cset.d[idx]
    dst = np.concatenate([d[..., None] * x / f[:, None, None], d[..., None]], axis=2)
    src = s[:, None, None] * cset.p[idx]
    R, t, good = _rigid_batch(src, dst)
    hyps = [
        RansacHypothesis(idx[m], float(f[m]), float(s[m]), R[m], t[m], float(res[m]))
        for m in np.flatnonzero(good)
    ]
    return hyps, iters - len(hyps)


def ransac_residuals(corrs: CorrespondenceLike, hyp: RansacHypothesis) -> np.ndarray:
    """Per-correspondence 3D residual (meters) under one hypothesis."""
    cset = as_correspondence_set(corrs)
    X = backproject_points(cset.x, cset.d, hyp.f)
    pred = hyp.s * cset.p @ hyp.R.T + hyp.t
    return np.linalg.norm(X - pred, axis=1)


def count_inliers(corrs: CorrespondenceLike, hypotheses: Sequence[RansacHypothesis], threshold_m: float) -> np.ndarray:
    cset = as_correspondence_set(corrs)
    return np.array(
        [int((ransac_residuals(cset, h) < threshold_m).sum()) for h in hypotheses], dtype=np.int64
    )


def ransac_focal(
    corrs: CorrespondenceLike, threshold_m: float, iters: int = 200, seed: int = 0,
    tol: DegeneracyTolerances = DEFAULT_TOLERANCES, object_index: int = 0,
) -> FocalEstimate:
    """Focal of the triplet hypothesis with the most 3D inliers (no refit)."""
    cset = as_correspondence_set(corrs)
    if len(cset) < 4:
        raise InsufficientCorrespondences(f"RANSAC needs at least 4 correspondences, got {len(cset)}")
    hyps, rejected = ransac_hypotheses(cset, iters, seed, tol, object_index)
    if not hyps:
        raise NoValidTriplet(f"all {iters} sampled triplets were degenerate or invalid")
    counts = count_inliers(cset, hyps, threshold_m)
    best = int(np.argmax(counts))
    cands = [TripletSolution(h.f, h.s, h.residual) for h in hyps]
    return FocalEstimate(hyps[best].f, int(counts[best]), cands, rejected, method="ransac")


def ransac_frame_focal(
    objects: Sequence[CorrespondenceLike], threshold_m: float, iters: int = 200, seed: int = 0
) -> FocalEstimate:
    """Per-object RANSAC, fused across the frame by the median focal."""
    per_object: list[FocalEstimate | None] = []
    skipped: list[int] = []
    for i, corrs in enumerate(objects):
        try:
            per_object.append(ransac_focal(corrs, threshold_m, iters, seed, object_index=i))
        except (InsufficientCorrespondences, NoValidTriplet) as exc:
            log.warning("object %d skipped: %s", i, exc)
            per_object.append(None)
            skipped.append(i)
    ests = [e for e in per_object if e is not None]
    if not ests:
        raise NoEligibleObject(f"none of {len(objects)} objects produced a RANSAC estimate")
    return FocalEstimate(
        float(np.median([e.f for e in ests])),
        sum(e.support for e in ests),
        [c for e in ests for c in e.candidates],
        sum(e.num_rejected for e in ests),
        "ransac",
        per_object,
        skipped,
    )
