"""Synthetic scenes and the simulation experiments built on them.

Scene geometry: canonical points uniform in [-1, 1]^3, a uniformly random
rotation, a scale drawn from ``scale_range`` and a translation uniform in a
ball of radius ``translation_ball_radius`` around the point ``camera_offset_z``
meters in front of the camera.  Image points are exact perspective projections
in centered pixel coordinates; depth and canonical coordinates are then
perturbed by bounded noise and a subset of points is displaced as outliers.

Geometry, outliers and noise each draw from their own child random stream, so
changing a noise bound or the outlier fraction leaves the remaining parts of a
scene unchanged for a fixed seed.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import FcopError, InvalidConfig
from .geometry import CorrespondenceSet, backproject_points, solve_triplets
from .pose import SimilarityPose, focal_error_pct, pose_errors, umeyama
from .robust import RobustConfig, estimate_object_focal, ransac_focal, sample_triplets

Seed = Union[int, Sequence[int]]

METRICS = ("e_f", "e_s", "e_t", "e_R")
LOG_FLOOR = 1e-18
# fixed log10 histogram edges so outputs are comparable across runs
HIST_EDGES = np.arange(-18.0, 3.0 + 1e-9, 0.5)


@dataclass(frozen=True)
class NoiseConfig:
    delta_d: float = 0.0  # meters
    delta_p: float = 0.0  # canonical units

    def __post_init__(self):
        if not (self.delta_d >= 0 and self.delta_p >= 0):
            raise InvalidConfig(f"noise bounds must be non-negative, got {self}")


@dataclass(frozen=True)
class SceneConfig:
    focal_range: tuple[float, float] = (300.0, 1500.0)
    scale_range: tuple[float, float] = (0.2, 1.0)
    translation_ball_radius: float = 2.0
    camera_offset_z: float = 4.0
    num_points: int = 100
    noise: NoiseConfig = NoiseConfig()
    outlier_fraction: float = 0.0
    seed: Seed = 0
    num_objects: int = 1
    min_depth: float = 1e-3

    def __post_init__(self):
        lo, hi = self.focal_range
        if not 0 < lo <= hi:
            raise InvalidConfig(f"bad focal_range {self.focal_range}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidConfig(f"bad scale_range {self.scale_range}")
        if self.translation_ball_radius < 0 or self.camera_offset_z <= 0:
            raise InvalidConfig("translation radius must be >= 0 and camera offset > 0")
        if self.num_points < 3 or self.num_objects < 1:
            raise InvalidConfig("need num_points >= 3 and num_objects >= 1")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidConfig(f"outlier_fraction must be in [0, 1), got {self.outlier_fraction}")
        if not self.min_depth > 0:
            raise InvalidConfig("min_depth must be positive")


@dataclass(frozen=True, eq=False)
class ObjectTruth:
    """Noise-free quantities and the perturbations applied to one object."""

    pose: SimilarityPose
    clean_nocs: np.ndarray
    clean_depth: np.ndarray
    depth_noise: np.ndarray
    noc_noise: np.ndarray
    outlier_displacement: np.ndarray  # zeros for inliers


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    f: float
    objects: list[CorrespondenceSet]
    inlier_masks: list[np.ndarray]
    truth: list[ObjectTruth]
    config: SceneConfig

    @property
    def poses(self) -> list[SimilarityPose]:
        return [t.pose for t in self.truth]


# ---------------------------------------------------------------------------
# sampling helpers


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def uniform_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    return _unit_vectors(rng, n) * (radius * rng.random(n) ** (1.0 / 3.0))[:, None]


def _streams(seed: Seed, num_objects: int):
    ss = np.random.SeedSequence(seed)
    root, *objs = ss.spawn(num_objects + 1)
    return np.random.default_rng(root), [[np.random.default_rng(c) for c in o.spawn(3)] for o in objs]


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    root_rng, obj_rngs = _streams(cfg.seed, cfg.num_objects)
    f = float(root_rng.uniform(*cfg.focal_range))
    n = cfg.num_points
    n_out = int(np.floor(cfg.outlier_fraction * n))
    objects, masks, truth = [], [], []
    for geo, out, noi in obj_rngs:
        p = geo.uniform(-1.0, 1.0, (n, 3))
        R = random_rotation(geo)
        s = float(geo.uniform(*cfg.scale_range))
        t = np.array([0.0, 0.0, cfg.camera_offset_z]) + uniform_ball(geo, 1, cfg.translation_ball_radius)[0]
        X = s * p @ R.T + t
        if np.any(X[:, 2] <= cfg.min_depth):
            raise InvalidConfig("object crosses the camera plane; reduce scale or translation radius")

        disp = np.zeros((n, 3))
        mask = np.ones(n, dtype=bool)
        if n_out:
            idx = np.sort(out.choice(n, n_out, replace=False))
            mask[idx] = False
            radius = s * 2.0 * np.sqrt(3.0)  # diameter of the object's bounding sphere
            o = uniform_ball(out, n_out, radius)
            bad = X[idx, 2] + o[:, 2] <= cfg.min_depth
            while bad.any():
                o[bad] = uniform_ball(out, int(bad.sum()), radius)
                bad = X[idx, 2] + o[:, 2] <= cfg.min_depth
            disp[idx] = o
        Xo = X + disp

        x = project_points(Xo, f)
        depth = Xo[:, 2]
        # unit draws are always consumed so noise scales linearly with the bound
        eps_d = noi.uniform(-1.0, 1.0, n) * cfg.noise.delta_d
        eps_p = _unit_vectors(noi, n) * (noi.random(n) * cfg.noise.delta_p)[:, None]
        bad = depth + eps_d <= cfg.min_depth
        while bad.any():
            eps_d[bad] = noi.uniform(-1.0, 1.0, int(bad.sum())) * cfg.noise.delta_d
            bad = depth + eps_d <= cfg.min_depth

        objects.append(CorrespondenceSet(x, depth + eps_d, p + eps_p))
        masks.append(mask)
        truth.append(ObjectTruth(SimilarityPose(s, R, t), p, depth, eps_d, eps_p, disp))
    return SyntheticScene(f, objects, masks, truth, cfg)


def project_points(X: np.ndarray, f: float) -> np.ndarray:
    """Centered pixel coordinates of camera-frame points."""
    return f * X[:, :2] / X[:, 2:3]


def forward_residual(cset: CorrespondenceSet, f: float, pose: SimilarityPose) -> np.ndarray:
    """|d K^-1 x~ - (s R p + t)| per correspondence."""
    return np.linalg.norm(backproject_points(cset.x, cset.d, f) - pose.apply(cset.p), axis=1)


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


def _pmap(fn: Callable, items: Iterable, workers: int) -> list:
    items = list(items)
    if workers is None or workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# ---------------------------------------------------------------------------
# error distributions


def _quantiles(a: np.ndarray) -> dict[str, float]:
    q25, q50, q75 = np.quantile(a, [0.25, 0.5, 0.75])
    return {"q25": float(q25), "median": float(q50), "q75": float(q75)}


@dataclass(eq=False)
class ErrorDistribution:
    """Per-trial errors of the stability experiment, keyed by metric name."""

    errors: dict[str, np.ndarray]
    failures: int = 0

    @property
    def trials(self) -> int:
        return len(next(iter(self.errors.values())))

    def quantiles(self, metric: str) -> dict[str, float]:
        return _quantiles(self.errors[metric])

    def log10_errors(self, metric: str) -> np.ndarray:
        return np.log10(np.maximum(self.errors[metric], LOG_FLOOR))

    def log10_quantiles(self, metric: str) -> dict[str, float]:
        return _quantiles(self.log10_errors(metric))

    def histogram(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        vals = np.clip(self.log10_errors(metric), HIST_EDGES[0], HIST_EDGES[-1])
        counts, edges = np.histogram(vals, bins=HIST_EDGES)
        return counts, edges

    def quantiles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "trials", "failures", "median", "q25", "q75",
                    "log10_median", "log10_q25", "log10_q75"])
        for m in self.errors:
            q = self.quantiles(m)
            lq = self.log10_quantiles(m)
            w.writerow([m, self.trials, self.failures, _fmt(q["median"]), _fmt(q["q25"]), _fmt(q["q75"]),
                        _fmt(lq["median"]), _fmt(lq["q25"]), _fmt(lq["q75"])])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "log10_lo", "log10_hi", "count"])
        for m in self.errors:
            counts, edges = self.histogram(m)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([m, _fmt(lo), _fmt(hi), int(c)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _stability_trial(trial: int, seed: int, num_points: int) -> tuple[float, float, float, float]:
    scene = generate_scene(SceneConfig(num_points=num_points, seed=(seed, trial)))
    cset = scene.objects[0]
    rng = np.random.default_rng([seed, trial, 1])
    for _ in range(100):
        batch = solve_triplets(cset, sample_triplets(len(cset), 1, rng))
        if batch.valid[0]:
            break
    else:
        return (np.inf,) * 4
    f_est = float(batch.f[0])
    X = backproject_points(cset.x, cset.d, f_est)
    pose = umeyama(cset.p, X)
    err = pose_errors(pose, scene.poses[0], f_est, scene.f)
    return err.e_f, err.e_s, err.e_t, err.e_R


def run_stability_experiment(trials: int, seed: int = 0, num_points: int = 100, workers: int = 1) -> ErrorDistribution:
    """Noise-free trials: one random valid triplet, then Umeyama with the estimated focal."""
    if trials < 1:
        raise InvalidConfig(f"trials must be >= 1, got {trials}")
    rows = _pmap(partial(_stability_trial, seed=seed, num_points=num_points), range(trials), workers)
    arr = np.array(rows, dtype=np.float64).reshape(trials, 4)
    failures = int((~np.isfinite(arr[:, 0])).sum())
    return ErrorDistribution({m: arr[:, i] for i, m in enumerate(METRICS)}, failures)


# ---------------------------------------------------------------------------
# noise sweeps


@dataclass(frozen=True)
class SweepRow:
    delta_d: float
    delta_p: float
    trials: int
    failures: int
    e_f_median: float
    e_f_q25: float
    e_f_q75: float


@dataclass(eq=False)
class SweepTable:
    axis: str
    rows: list[SweepRow] = field(default_factory=list)
    errors: list[np.ndarray] = field(default_factory=list)

    @property
    def medians(self) -> np.ndarray:
        return np.array([r.e_f_median for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta_d", "delta_p", "trials", "failures", "e_f_median", "e_f_q25", "e_f_q75"])
        for r in self.rows:
            w.writerow([_fmt(r.delta_d), _fmt(r.delta_p), r.trials, r.failures,
                        _fmt(r.e_f_median), _fmt(r.e_f_q25), _fmt(r.e_f_q75)])
        return buf.getvalue()


def _focal_trial(trial: int, seed: int, base: SceneConfig, robust: RobustConfig) -> float:
    scene = generate_scene(replace(base, seed=(seed, trial)))
    try:
        est = estimate_object_focal(scene.objects[0], replace(robust, rng_seed=trial_seed(seed, trial)))
    except FcopError:
        return np.inf
    return focal_error_pct(est.f, scene.f)


def focal_errors(
    trials: int, seed: int, base: SceneConfig = SceneConfig(), robust: RobustConfig = RobustConfig(), workers: int = 1
) -> np.ndarray:
    """Percent focal errors of the interval-stabbing estimator over independent trials.

    Trial ``k`` uses scene seed ``(seed, k)`` whatever the noise level, so
    sweeps compare identical geometry under scaled perturbations.
    """
    fn = partial(_focal_trial, seed=seed, base=base, robust=robust)
    return np.array(_pmap(fn, range(trials), workers), dtype=np.float64)


def run_noise_sweep(
    axis: str,
    levels: Sequence[float],
    trials_per_level: int,
    seed: int = 0,
    levels_p: Sequence[float] | None = None,
    base: SceneConfig = SceneConfig(),
    robust: RobustConfig = RobustConfig(),
    workers: int = 1,
) -> SweepTable:
    """Focal error statistics as a function of the depth and/or NOC noise bound.

    ``axis`` is ``depth``, ``nocs`` or ``both``; for ``both`` the grid is
    ``levels`` (depth) x ``levels_p`` (NOCs, defaults to ``levels``).
    """
    levels = [float(v) for v in levels]
    if axis not in ("depth", "nocs", "both"):
        raise InvalidConfig(f"unknown axis {axis!r}")
    if not levels or any(v < 0 for v in levels) or levels != sorted(levels):
        raise InvalidConfig("levels must be non-empty, non-negative and sorted")
    if trials_per_level < 1:
        raise InvalidConfig("trials_per_level must be >= 1")
    if axis == "depth":
        grid = [(v, 0.0) for v in levels]
    elif axis == "nocs":
        grid = [(0.0, v) for v in levels]
    else:
        lp = levels if levels_p is None else [float(v) for v in levels_p]
        if not lp or any(v < 0 for v in lp) or lp != sorted(lp):
            raise InvalidConfig("levels_p must be non-empty, non-negative and sorted")
        grid = [(d, p) for d in levels for p in lp]

    table = SweepTable(axis)
    for dd, dp in grid:
        cfg = replace(base, noise=NoiseConfig(dd, dp))
        err = focal_errors(trials_per_level, seed, cfg, robust, workers)
        q = _quantiles(err)
        table.rows.append(SweepRow(dd, dp, trials_per_level, int((~np.isfinite(err)).sum()),
                                   q["median"], q["q25"], q["q75"]))
        table.errors.append(err)
    return table


# ---------------------------------------------------------------------------
# robust estimator comparison


def _compare_trial(trial: int, seed: int, base: SceneConfig, robust: RobustConfig,
                   threshold_m: float, ransac_iters: int) -> tuple[float, float]:
    scene = generate_scene(replace(base, seed=(seed, trial)))
    cset = scene.objects[0]
    rs = trial_seed(seed, trial)
    try:
        e_is = focal_error_pct(estimate_object_focal(cset, replace(robust, rng_seed=rs)).f, scene.f)
    except FcopError:
        e_is = np.inf
    try:
        e_ransac = focal_error_pct(ransac_focal(cset, threshold_m, ransac_iters, rs).f, scene.f)
    except FcopError:
        e_ransac = np.inf
    return e_is, e_ransac


def compare_robust_methods(
    trials: int,
    seed: int = 0,
    base: SceneConfig = SceneConfig(),
    robust: RobustConfig = RobustConfig(),
    threshold_m: float = 0.02,
    ransac_iters: int | None = None,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Percent focal errors of interval stabbing and RANSAC on the same scenes.

    Both methods draw the same number of triplets from the same stream.
    """
    iters = robust.num_samples_T if ransac_iters is None else ransac_iters
    fn = partial(_compare_trial, seed=seed, base=base, robust=robust, threshold_m=threshold_m, ransac_iters=iters)
    arr = np.array(_pmap(fn, range(trials), workers), dtype=np.float64).reshape(trials, 2)
    return {"is": arr[:, 0], "ransac": arr[:, 1]}
