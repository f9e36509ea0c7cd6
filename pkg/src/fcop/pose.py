"""Similarity pose recovery and pose/focal error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, LengthMismatch, NoConsensus

# relative singular-value floor below which a centered source set is treated
# as collinear
_COLLINEAR_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class SimilarityPose:
    """``dst = s * R @ src + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or not abs(np.linalg.det(R) - 1) < 1e-9:
            raise ValueError("R must be a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.s * np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"s": self.s, "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityPose":
        return cls(d["s"], np.array(d["R"]), np.array(d["t"]))

    @classmethod
    def identity(cls) -> "SimilarityPose":
        return cls(1.0, np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PoseErrors:
    e_f: float  # percent
    e_s: float  # percent
    e_t: float  # percent
    e_R: float  # degrees
    e_t_angular: float  # degrees


def _check_pairs(src, dst) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or dst.ndim != 2 or dst.shape[1] != 3:
        raise ValueError("point sets must be (n, 3)")
    if len(src) != len(dst):
        raise LengthMismatch(f"{len(src)} source points vs {len(dst)} destination points")
    return src, dst


def umeyama(src, dst, with_scale: bool = True) -> SimilarityPose:
    """Least-squares similarity transform taking ``src`` onto ``dst``.

    With ``with_scale=False`` the scale is fixed to 1 (rigid alignment).
    """
    src, dst = _check_pairs(src, dst)
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d

    sv_src = np.linalg.svd(xs, compute_uv=False)
    if sv_src[0] == 0 or sv_src[1] <= _COLLINEAR_RTOL * sv_src[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")

    n = len(src)
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    if with_scale:
        var_s = (xs**2).sum() / n
        s = float((D * S).sum() / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return SimilarityPose(s, R, t)


def similarity_residuals(pose: SimilarityPose, src, dst) -> np.ndarray:
    src, dst = _check_pairs(src, dst)
    return np.linalg.norm(pose.apply(src) - dst, axis=1)


def umeyama_ransac(
    src, dst, threshold_m: float, iters: int = 500, seed: int = 0
) -> tuple[SimilarityPose, np.ndarray]:
    """RANSAC-wrapped Umeyama: 3-point hypotheses, refit on the best inlier set."""
    src, dst = _check_pairs(src, dst)
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need at least 4 point pairs, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(iters):
        sample = rng.choice(n, size=3, replace=False)
        try:
            hyp = umeyama(src[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        mask = similarity_residuals(hyp, src, dst) < threshold_m
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            if count == n:
                break
    if best_mask is None or best_count < 3:
        raise NoConsensus(f"best hypothesis has {best_count} inliers")
    return umeyama(src[best_mask], dst[best_mask]), best_mask


def rotation_angle_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations in degrees.

    Equal to ``arccos((tr(R_est^T R_gt) - 1) / 2)``; evaluated through atan2 of
    the sine and cosine parts so that angles near zero keep full precision.
    """
    M = np.asarray(R_est).T @ np.asarray(R_gt)
    cos_part = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin_part = np.linalg.norm(axis) / 2.0
    return float(np.degrees(np.arctan2(sin_part, cos_part)))


def vector_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # atan2 form of arccos(<a,b> / (|a||b|)), stable near 0 and 180 degrees
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def focal_error_pct(f_est: float, f_gt: float) -> float:
    return abs(f_est - f_gt) / f_gt * 100.0


def pose_errors(est: SimilarityPose, gt: SimilarityPose, f_est: float, f_gt: float) -> PoseErrors:
    t_norm = np.linalg.norm(gt.t)
    e_t = float(np.linalg.norm(est.t - gt.t) / t_norm * 100.0) if t_norm > 0 else float("nan")
    e_t_ang = vector_angle_deg(est.t, gt.t) if t_norm > 0 and np.linalg.norm(est.t) > 0 else float("nan")
    return PoseErrors(
        e_f=focal_error_pct(f_est, f_gt),
        e_s=abs(est.s - gt.s) / gt.s * 100.0,
        e_t=e_t,
        e_R=rotation_angle_deg(est.R, gt.R),
        e_t_angular=e_t_ang,
    )
