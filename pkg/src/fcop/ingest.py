"""Dataset ingestion: manifest + PNG maps -> per-object correspondence sets.

File formats (manifest ``format_version`` 1):

* depth map: 16-bit single-channel PNG, value * ``depth_scale_m`` = meters
  (default 0.001, i.e. millimeters); 0 marks invalid pixels.
* NOC map: 8-bit RGB PNG, per-axis ``c / noc_scale + noc_offset`` (default
  ``c / 255 - 0.5``), so canonical coordinates live in the unit cube centred at
  the origin.  An all-zero pixel is treated as "no prediction".
* instance mask: 8-bit single-channel PNG, 0 = background, k = instance k.

The NOC cube here is ``[-0.5, 0.5]^3`` while the synthetic generator uses
``[-1, 1]^3``.  The focal solver does not care: any fixed scaling of the
canonical frame is absorbed by the object scale.

Manifest layout::

    {
      "format_version": 1,
      "depth_scale_m": 0.001,
      "noc_encoding": {"scale": 255.0, "offset": -0.5},
      "frames": [
        {"frame_id": "0000", "scene": "scene_1",
         "depth": "depth/0000.png", "nocs": "nocs/0000.png", "mask": "mask/0000.png",
         "width": 640, "height": 480, "gt_focal": 590.0,
         "objects": [{"instance_id": 1, "category": "box",
                      "gt_pose": {"s": 0.4, "R": [[...]], "t": [...]}}]}
      ]
    }

Paths are relative to the manifest's directory.  ``objects`` is optional; when
absent every non-zero mask label becomes an object of category "unknown".
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, EmptyObject, FcopError, InvalidConfig, UnreadableFile
from .geometry import CorrespondenceSet, backproject_points
from .pose import SimilarityPose, focal_error_pct, pose_errors, umeyama_ransac
from .robust import RobustConfig, estimate_frame_focal, ransac_frame_focal

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_MAX_POINTS = 1000


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True, eq=False)
class RLEMask:
    """Run-length encoded binary mask over the row-major flattened image."""

    shape: tuple[int, int]
    runs: np.ndarray  # (k, 2) start, length

    @classmethod
    def from_bool(cls, mask: np.ndarray) -> "RLEMask":
        mask = np.asarray(mask, dtype=bool)
        flat = np.concatenate([[False], mask.ravel(), [False]])
        edges = np.flatnonzero(flat[1:] != flat[:-1])
        starts, ends = edges[0::2], edges[1::2]
        return cls(tuple(mask.shape), np.column_stack([starts, ends - starts]).astype(np.int64))

    def to_bool(self) -> np.ndarray:
        flat = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        for start, length in self.runs:
            flat[start:start + length] = True
        return flat.reshape(self.shape)

    @property
    def area(self) -> int:
        return int(self.runs[:, 1].sum()) if len(self.runs) else 0


@dataclass(frozen=True, eq=False)
class ObjectRecord:
    instance_id: int
    category: str
    mask: RLEMask
    correspondences: CorrespondenceSet
    pixels: np.ndarray  # (n, 2) integer (row, col) of each correspondence
    gt_pose: SimilarityPose | None = None


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: str
    image_size: tuple[int, int]  # (width, height)
    objects: list[ObjectRecord]
    gt_focal: float | None = None
    gt_poses: list[SimilarityPose | None] | None = None
    scene: str = "default"
    skipped: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    depth: str
    nocs: str
    mask: str
    scene: str = "default"
    width: int | None = None
    height: int | None = None
    gt_focal: float | None = None
    objects: list[dict] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    frames: list[FrameEntry]
    depth_scale_m: float = 0.001
    noc_scale: float = 255.0
    noc_offset: float = -0.5
    format_version: int = FORMAT_VERSION

    def frame(self, frame_id: str) -> FrameEntry:
        for e in self.frames:
            if e.frame_id == frame_id:
                return e
        raise KeyError(f"frame {frame_id!r} not in manifest")

    def to_dict(self) -> dict:
        frames = []
        for e in self.frames:
            d = {k: v for k, v in asdict(e).items() if v is not None}
            frames.append(d)
        return {
            "format_version": self.format_version,
            "depth_scale_m": self.depth_scale_m,
            "noc_encoding": {"scale": self.noc_scale, "offset": self.noc_offset},
            "frames": frames,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot read manifest {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise InvalidConfig(f"unsupported manifest format_version {version!r}")
    enc = doc.get("noc_encoding", {})
    known = set(FrameEntry.__dataclass_fields__)
    frames = []
    for raw in doc.get("frames", []):
        missing = {"frame_id", "depth", "nocs", "mask"} - set(raw)
        if missing:
            raise InvalidConfig(f"frame entry missing fields {sorted(missing)}")
        frames.append(FrameEntry(**{k: v for k, v in raw.items() if k in known}))
    return DatasetManifest(
        root=path.parent,
        frames=frames,
        depth_scale_m=float(doc.get("depth_scale_m", 0.001)),
        noc_scale=float(enc.get("scale", 255.0)),
        noc_offset=float(enc.get("offset", -0.5)),
    )


# ---------------------------------------------------------------------------
# decoding


def _read_png(path: Path, kind: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if kind == "depth":
                if im.mode not in ("I;16", "I;16B", "I", "L"):
                    raise UnreadableFile(f"{path}: depth map must be single-channel, got mode {im.mode}")
                arr = np.array(im).astype(np.int64)
            elif kind == "nocs":
                if im.mode == "RGBA":
                    im = im.convert("RGB")
                if im.mode != "RGB":
                    raise UnreadableFile(f"{path}: NOC map must be RGB, got mode {im.mode}")
                arr = np.array(im)
            else:
                if im.mode not in ("L", "P"):
                    raise UnreadableFile(f"{path}: mask must be 8-bit single-channel, got mode {im.mode}")
                arr = np.array(im)
    except UnreadableFile:
        raise
    except (OSError, ValueError) as exc:
        raise UnreadableFile(f"cannot read {kind} map {path}: {exc}") from exc
    return arr


def decode_depth(raw: np.ndarray, depth_scale_m: float = 0.001) -> np.ndarray:
    """Meters, with NaN where the raw value is 0."""
    d = raw.astype(np.float64) * depth_scale_m
    d[raw == 0] = np.nan
    return d


def decode_nocs(raw: np.ndarray, scale: float = 255.0, offset: float = -0.5) -> np.ndarray:
    return raw.astype(np.float64) / scale + offset


def center_pixels(rows: np.ndarray, cols: np.ndarray, width: int, height: int) -> np.ndarray:
    """(row, col) pixel indices -> centered (u, v) with the principal point at the image center."""
    return np.column_stack([cols - width / 2.0, rows - height / 2.0])


def load_frame(manifest: DatasetManifest, entry: FrameEntry | str) -> FrameRecord:
    if isinstance(entry, str):
        entry = manifest.frame(entry)
    raw_d = _read_png(manifest.root / entry.depth, "depth")
    raw_n = _read_png(manifest.root / entry.nocs, "nocs")
    labels = _read_png(manifest.root / entry.mask, "mask")
    h, w = raw_d.shape
    if raw_n.shape[:2] != (h, w) or labels.shape != (h, w):
        raise DimensionMismatch(
            f"frame {entry.frame_id}: depth {raw_d.shape}, nocs {raw_n.shape[:2]}, mask {labels.shape}"
        )
    if (entry.width is not None and entry.width != w) or (entry.height is not None and entry.height != h):
        raise DimensionMismatch(f"frame {entry.frame_id}: manifest says {entry.width}x{entry.height}, files are {w}x{h}")

    depth = decode_depth(raw_d, manifest.depth_scale_m)
    nocs = decode_nocs(raw_n, manifest.noc_scale, manifest.noc_offset)
    valid = (raw_d > 0) & np.any(raw_n != 0, axis=2)

    if entry.objects is not None:
        specs = entry.objects
    else:
        specs = [{"instance_id": int(k)} for k in np.unique(labels) if k != 0]

    objects: list[ObjectRecord] = []
    poses: list[SimilarityPose | None] = []
    skipped: list[tuple[int, str]] = []
    for spec in specs:
        k = int(spec["instance_id"])
        inst = labels == k
        rows, cols = np.nonzero(inst & valid)
        if len(rows) < 3:
            msg = f"instance {k} has {len(rows)} valid pixels"
            log.warning("frame %s: %s", entry.frame_id, EmptyObject(msg))
            skipped.append((k, msg))
            continue
        cset = CorrespondenceSet(center_pixels(rows, cols, w, h), depth[rows, cols], nocs[rows, cols])
        pose = SimilarityPose.from_dict(spec["gt_pose"]) if "gt_pose" in spec else None
        objects.append(ObjectRecord(k, spec.get("category", "unknown"), RLEMask.from_bool(inst),
                                    cset, np.column_stack([rows, cols]), pose))
        poses.append(pose)
    return FrameRecord(
        frame_id=entry.frame_id,
        image_size=(w, h),
        objects=objects,
        gt_focal=entry.gt_focal,
        gt_poses=poses if any(p is not None for p in poses) else None,
        scene=entry.scene,
        skipped=skipped,
    )


def subsample_object(obj: ObjectRecord, max_points: int, seed: int = 0) -> ObjectRecord:
    """Uniform subsample without replacement down to ``max_points`` correspondences."""
    if max_points < 3:
        raise InvalidConfig(f"max_points must be >= 3, got {max_points}")
    n = len(obj.correspondences)
    if n <= max_points:
        return obj
    idx = np.sort(np.random.default_rng(seed).choice(n, max_points, replace=False))
    return replace(obj, correspondences=obj.correspondences[idx], pixels=obj.pixels[idx])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class FrameResult:
    frame_id: str
    scene: str
    status: str  # "ok" or "error"
    f_hat: float | None = None
    support: int | None = None
    gt_focal: float | None = None
    e_f: float | None = None
    num_objects: int = 0
    message: str = ""
    # per object with a ground-truth pose: instance_id, e_s, e_t, e_R, e_t_angular
    pose_errors: list[dict] = field(default_factory=list)


@dataclass
class DatasetReport:
    method: str
    config: dict[str, Any]
    frames: list[FrameResult]

    def _scored(self, scene: str | None = None) -> list[float]:
        return [r.e_f for r in self.frames
                if r.status == "ok" and r.e_f is not None and (scene is None or r.scene == scene)]

    @property
    def scenes(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.frames:
            seen.setdefault(r.scene)
        return list(seen)

    def scene_median(self, scene: str) -> float | None:
        e = self._scored(scene)
        return float(np.median(e)) if e else None

    @property
    def overall_median(self) -> float | None:
        e = self._scored()
        return float(np.median(e)) if e else None

    @property
    def num_failed(self) -> int:
        return sum(r.status != "ok" for r in self.frames)

    def pose_medians(self) -> dict[str, float | None]:
        """Median of each pose error over every scored object of every frame."""
        rows = [e for r in self.frames if r.status == "ok" for e in r.pose_errors]
        out: dict[str, float | None] = {}
        for key in POSE_METRICS:
            vals = [e[key] for e in rows if e[key] is not None and np.isfinite(e[key])]
            out[key] = float(np.median(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "frames": [asdict(r) for r in self.frames],
            "scenes": {s: {"median_e_f": self.scene_median(s), "num_scored": len(self._scored(s))}
                       for s in self.scenes},
            "overall": {"median_e_f": self.overall_median, "num_frames": len(self.frames),
                        "num_scored": len(self._scored()), "num_failed": self.num_failed,
                        "pose_median": self.pose_medians()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table_csv(self) -> str:
        """Median focal error (%) per scene and overall, one row per method."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *self.scenes, "all"])
        cells = [self.scene_median(s) for s in self.scenes] + [self.overall_median]
        w.writerow([self.method, *("" if c is None else f"{c:.4f}" for c in cells)])
        return buf.getvalue()

    def frames_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_id", "scene", "status", "f_hat", "support", "gt_focal", "e_f", "num_objects", "message"])
        for r in self.frames:
            w.writerow([r.frame_id, r.scene, r.status, "" if r.f_hat is None else repr(r.f_hat),
                        "" if r.support is None else r.support, "" if r.gt_focal is None else r.gt_focal,
                        "" if r.e_f is None else repr(r.e_f), r.num_objects, r.message])
        return buf.getvalue()


POSE_METRICS = ("e_s", "e_t", "e_R", "e_t_angular")


def _subsampled(frame: FrameRecord, seed: int, max_points: int, frame_index: int) -> list[ObjectRecord]:
    return [
        subsample_object(o, max_points, seed=int(np.random.SeedSequence([seed, frame_index, i]).generate_state(1)[0]))
        for i, o in enumerate(frame.objects)
    ]


def estimate_frame(
    frame: FrameRecord,
    cfg: RobustConfig = RobustConfig(),
    method: str = "is",
    threshold_m: float = 0.02,
    ransac_iters: int = 200,
    max_points: int = DEFAULT_MAX_POINTS,
    frame_index: int = 0,
):
    """Run the chosen robust estimator on one loaded frame."""
    sets = [o.correspondences for o in _subsampled(frame, cfg.rng_seed, max_points, frame_index)]
    if method == "is":
        return estimate_frame_focal(sets, cfg)
    if method == "ransac":
        return ransac_frame_focal(sets, threshold_m, ransac_iters, cfg.rng_seed)
    raise InvalidConfig(f"unknown robust method {method!r}")


def object_pose_errors(
    frame: FrameRecord, f_hat: float, threshold_m: float = 0.02, iters: int = 200, seed: int = 0,
    max_points: int = DEFAULT_MAX_POINTS, frame_index: int = 0,
) -> list[dict]:
    """Recover each object's pose under ``f_hat`` and score it against its ground truth.

    NOCs are aligned to the back-projected points with RANSAC-wrapped Umeyama;
    objects without a ground-truth pose or without consensus are left out.
    """
    out = []
    for obj in _subsampled(frame, seed, max_points, frame_index):
        if obj.gt_pose is None:
            continue
        cs = obj.correspondences
        try:
            pose, _ = umeyama_ransac(cs.p, backproject_points(cs.x, cs.d, f_hat), threshold_m, iters, seed)
        except (FcopError, ValueError) as exc:
            log.warning("frame %s instance %d: no pose (%s)", frame.frame_id, obj.instance_id, exc)
            continue
        err = pose_errors(pose, obj.gt_pose, f_hat, frame.gt_focal or f_hat)
        out.append({"instance_id": obj.instance_id, **{k: getattr(err, k) for k in POSE_METRICS}})
    return out


def _evaluate_one(item, manifest, cfg, method, threshold_m, ransac_iters, max_points) -> FrameResult:
    index, entry = item
    try:
        frame = load_frame(manifest, entry)
        est = estimate_frame(frame, cfg, method, threshold_m, ransac_iters, max_points, index)
    except (FcopError, KeyError) as exc:
        log.warning("frame %s failed: %s", entry.frame_id, exc)
        return FrameResult(entry.frame_id, entry.scene, "error", gt_focal=entry.gt_focal,
                           message=f"{type(exc).__name__}: {exc}")
    e_f = focal_error_pct(est.f, frame.gt_focal) if frame.gt_focal else None
    poses = object_pose_errors(frame, est.f, threshold_m, ransac_iters, cfg.rng_seed, max_points, index)
    return FrameResult(entry.frame_id, entry.scene, "ok", est.f, est.support, frame.gt_focal, e_f,
                       len(frame.objects), pose_errors=poses)


def evaluate_dataset(
    manifest: DatasetManifest,
    cfg: RobustConfig = RobustConfig(),
    method: str = "is",
    threshold_m: float = 0.02,
    ransac_iters: int = 200,
    max_points: int = DEFAULT_MAX_POINTS,
    workers: int = 1,
) -> DatasetReport:
    """Estimate every frame; failures are recorded per frame and do not stop the run."""
    if method not in ("is", "ransac"):
        raise InvalidConfig(f"unknown robust method {method!r}")
    fn = partial(_evaluate_one, manifest=manifest, cfg=cfg, method=method, threshold_m=threshold_m,
                 ransac_iters=ransac_iters, max_points=max_points)
    items = list(enumerate(manifest.frames))
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(fn, items))
    else:
        results = [fn(it) for it in items]
    config = {
        "method": method,
        "num_samples_T": cfg.num_samples_T,
        "noise_bound_eps": cfg.noise_bound_eps,
        "rng_seed": cfg.rng_seed,
        "threshold_m": threshold_m,
        "ransac_iters": ransac_iters,
        "max_points": max_points,
    }
    return DatasetReport(method, config, results)


# ---------------------------------------------------------------------------
# synthetic rendering


def render_boxes(f: float, poses: Sequence[SimilarityPose], width: int, height: int):
    """Ray-cast canonical cubes ``[-1, 1]^3`` placed by ``poses`` into a pinhole image.

    Returns (depth in meters with NaN background, NOCs in the ``[-0.5, 0.5]``
    convention, uint8 instance labels starting at 1).  Nearer surfaces win.
    """
    rows, cols = np.mgrid[0:height, 0:width]
    uv = center_pixels(rows.ravel(), cols.ravel(), width, height)
    dirs = np.column_stack([uv / f, np.ones(len(uv))])  # camera z-component 1, so lambda = depth
    best = np.full(len(uv), np.inf)
    nocs = np.zeros((len(uv), 3))
    labels = np.zeros(len(uv), dtype=np.uint8)
    for k, pose in enumerate(poses, start=1):
        a = dirs @ pose.R / pose.s  # object-frame ray direction (rows of R^T applied)
        b = -(pose.R.T @ pose.t) / pose.s
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-1.0 - b) / a
            t2 = (1.0 - b) / a
            near = np.minimum(t1, t2).max(axis=1)
            far = np.maximum(t1, t2).min(axis=1)
        hit = (near <= far) & (near > 0) & (near < best)
        best[hit] = near[hit]
        nocs[hit] = np.clip(0.5 * (near[hit, None] * a[hit] + b), -0.5, 0.5)
        labels[hit] = k
    depth = np.where(np.isfinite(best), best, np.nan)
    return depth.reshape(height, width), nocs.reshape(height, width, 3), labels.reshape(height, width)


def encode_depth(depth_m: np.ndarray, depth_scale_m: float = 0.001) -> np.ndarray:
    raw = np.zeros(depth_m.shape, dtype=np.uint16)
    ok = np.isfinite(depth_m)
    raw[ok] = np.clip(np.rint(depth_m[ok] / depth_scale_m), 1, 65535).astype(np.uint16)
    return raw


def encode_nocs(nocs: np.ndarray, scale: float = 255.0, offset: float = -0.5) -> np.ndarray:
    return np.clip(np.rint((nocs - offset) * scale), 0, 255).astype(np.uint8)


def write_frame_pngs(root: Path, frame_id: str, depth_m, nocs, labels) -> dict[str, str]:
    paths = {"depth": f"depth/{frame_id}.png", "nocs": f"nocs/{frame_id}.png", "mask": f"mask/{frame_id}.png"}
    for sub in ("depth", "nocs", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    raw_n = encode_nocs(nocs)
    raw_n[labels == 0] = 0
    Image.fromarray(encode_depth(depth_m)).save(root / paths["depth"])
    Image.fromarray(raw_n).save(root / paths["nocs"])
    Image.fromarray(labels).save(root / paths["mask"])
    return paths


def write_synthetic_dataset(
    root: str | Path,
    num_frames: int,
    seed: int = 0,
    focal: float = 590.0,
    objects_per_frame: int = 2,
    num_scenes: int = 6,
    width: int = 640,
    height: int = 480,
    scale_range: tuple[float, float] = (0.15, 0.4),
    min_pixels: int = 300,
) -> Path:
    """Render cube objects from random scene poses and write a manifest + PNG dataset.

    Poses follow ``generate_scene`` sampling; layouts with an object covering
    fewer than ``min_pixels`` pixels are redrawn.
    """
    from .synth import SceneConfig, generate_scene

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(num_frames):
        for attempt in range(1000):
            cfg = SceneConfig(focal_range=(focal, focal), scale_range=scale_range, num_points=3,
                              num_objects=objects_per_frame, seed=(seed, i, attempt))
            poses = generate_scene(cfg).poses
            depth, nocs, labels = render_boxes(focal, poses, width, height)
            counts = np.bincount(labels.ravel(), minlength=objects_per_frame + 1)[1:]
            if counts.min() >= min_pixels:
                break
        else:
            raise RuntimeError(f"could not place {objects_per_frame} visible objects for frame {i}")
        fid = f"{i:04d}"
        paths = write_frame_pngs(root, fid, depth, nocs, labels)
        objects = [
            {"instance_id": k, "category": "box",
             # canonical cube halves under the NOCS convention, so the scale doubles
             "gt_pose": SimilarityPose(2.0 * p.s, p.R, p.t).to_dict()}
            for k, p in enumerate(poses, start=1)
        ]
        entries.append(FrameEntry(fid, paths["depth"], paths["nocs"], paths["mask"],
                                  scene=f"scene_{i % num_scenes + 1}", width=width, height=height,
                                  gt_focal=focal, objects=objects))
    manifest = DatasetManifest(root, entries)
    return manifest.save(root / "manifest.json")
