import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from fcop.errors import DimensionMismatch, InvalidConfig, UnreadableFile
from fcop.geometry import CorrespondenceSet
from fcop.ingest import (
    DatasetManifest,
    FrameEntry,
    ObjectRecord,
    RLEMask,
    center_pixels,
    decode_depth,
    decode_nocs,
    encode_depth,
    encode_nocs,
    evaluate_dataset,
    load_frame,
    load_manifest,
    render_boxes,
    subsample_object,
    write_frame_pngs,
    write_synthetic_dataset,
)
from fcop.pose import SimilarityPose
from fcop.robust import RobustConfig


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return write_synthetic_dataset(root, 4, seed=3, num_scenes=2)


def write_custom_frame(root, fid, depth_raw, noc_raw, labels, **entry_kw):
    (root / "depth").mkdir(exist_ok=True)
    (root / "nocs").mkdir(exist_ok=True)
    (root / "mask").mkdir(exist_ok=True)
    Image.fromarray(depth_raw).save(root / f"depth/{fid}.png")
    Image.fromarray(noc_raw).save(root / f"nocs/{fid}.png")
    Image.fromarray(labels).save(root / f"mask/{fid}.png")
    return FrameEntry(fid, f"depth/{fid}.png", f"nocs/{fid}.png", f"mask/{fid}.png", **entry_kw)


class TestDecoding:
    def test_depth_millimeters(self):
        d = decode_depth(np.array([[4000, 0]], dtype=np.int64))
        assert d[0, 0] == pytest.approx(4.0)
        assert np.isnan(d[0, 1])

    def test_noc_decoding(self):
        p = decode_nocs(np.array([[[255, 128, 0]]], dtype=np.uint8))[0, 0]
        np.testing.assert_allclose(p, [0.5, 128 / 255 - 0.5, -0.5])
        assert p[1] == pytest.approx(0.00196, abs=1e-5)

    def test_centering(self):
        uv = center_pixels(np.array([240, 0]), np.array([320, 0]), 640, 480)
        np.testing.assert_array_equal(uv, [[0, 0], [-320, -240]])

    def test_encode_roundtrip(self, rng):
        depth = rng.uniform(0.5, 6.0, (10, 10))
        nocs = rng.uniform(-0.5, 0.5, (10, 10, 3))
        assert np.abs(decode_depth(encode_depth(depth).astype(np.int64)) - depth).max() <= 0.0005 + 1e-12
        assert np.abs(decode_nocs(encode_nocs(nocs)) - nocs).max() <= 1 / 510 + 1e-12


class TestRLE:
    def test_roundtrip(self, rng):
        for _ in range(20):
            m = rng.random((13, 17)) < rng.random()
            r = RLEMask.from_bool(m)
            np.testing.assert_array_equal(r.to_bool(), m)
            assert r.area == m.sum()

    def test_empty_and_full(self):
        assert RLEMask.from_bool(np.zeros((3, 3), bool)).area == 0
        assert RLEMask.from_bool(np.ones((3, 3), bool)).area == 9


class TestRender:
    def test_single_cube_depth(self):
        pose = SimilarityPose(0.5, np.eye(3), [0, 0, 3.0])
        depth, nocs, labels = render_boxes(50.0, [pose], 64, 48)
        # the front face of an axis-aligned cube sits at z = 3 - 0.5
        assert depth[24, 32] == pytest.approx(2.5)
        np.testing.assert_allclose(nocs[24, 32], [0, 0, -0.5], atol=1e-12)
        assert labels[24, 32] == 1 and labels[0, 0] == 0
        assert np.isnan(depth[0, 0])

    def test_occlusion_nearest_wins(self):
        near = SimilarityPose(0.3, np.eye(3), [0, 0, 2.0])
        far = SimilarityPose(0.6, np.eye(3), [0, 0, 5.0])
        depth, _, labels = render_boxes(500.0, [far, near], 64, 48)
        assert labels[24, 32] == 2
        assert depth[24, 32] == pytest.approx(1.7)


class TestLoadFrame:
    def test_roundtrip_matches_render(self, small_dataset):
        manifest = load_manifest(small_dataset)
        entry = manifest.frames[0]
        frame = load_frame(manifest, entry)
        poses = [SimilarityPose(o["gt_pose"]["s"] / 2, np.array(o["gt_pose"]["R"]), np.array(o["gt_pose"]["t"]))
                 for o in entry.objects]
        depth, nocs, labels = render_boxes(entry.gt_focal, poses, entry.width, entry.height)
        assert frame.image_size == (640, 480)
        assert len(frame.objects) == 2
        for obj in frame.objects:
            r, c = obj.pixels.T
            cs = obj.correspondences
            assert np.all(labels[r, c] == obj.instance_id)
            assert np.abs(cs.d - depth[r, c]).max() <= 0.0005 + 1e-9
            assert np.abs(cs.p - nocs[r, c]).max() <= 1 / 510 + 1e-9
            # un-centering recovers the pixel indices
            np.testing.assert_array_equal(cs.x + [320, 240], np.column_stack([c, r]))
            np.testing.assert_array_equal(obj.mask.to_bool(), labels == obj.instance_id)

    def test_lookup_by_id(self, small_dataset):
        manifest = load_manifest(small_dataset)
        assert load_frame(manifest, "0001").frame_id == "0001"
        with pytest.raises(KeyError):
            load_frame(manifest, "nope")

    def test_dimension_mismatch(self, tmp_path):
        e = write_custom_frame(tmp_path, "a", np.ones((4, 5), np.uint16), np.ones((4, 6, 3), np.uint8),
                               np.ones((4, 5), np.uint8))
        with pytest.raises(DimensionMismatch):
            load_frame(DatasetManifest(tmp_path, [e]), e)

    def test_manifest_size_mismatch(self, tmp_path):
        e = write_custom_frame(tmp_path, "a", np.ones((4, 5), np.uint16), np.ones((4, 5, 3), np.uint8),
                               np.ones((4, 5), np.uint8), width=6, height=4)
        with pytest.raises(DimensionMismatch):
            load_frame(DatasetManifest(tmp_path, [e]), e)

    def test_missing_file(self, tmp_path):
        e = FrameEntry("a", "depth/a.png", "nocs/a.png", "mask/a.png")
        with pytest.raises(UnreadableFile):
            load_frame(DatasetManifest(tmp_path, [e]), e)

    def test_small_object_skipped(self, tmp_path):
        labels = np.zeros((6, 6), np.uint8)
        labels[:3, :3] = 1
        labels[5, 5] = 2  # single pixel instance
        noc = np.full((6, 6, 3), 100, np.uint8)
        e = write_custom_frame(tmp_path, "a", np.full((6, 6), 1000, np.uint16), noc, labels)
        frame = load_frame(DatasetManifest(tmp_path, [e]), e)
        assert [o.instance_id for o in frame.objects] == [1]
        assert [k for k, _ in frame.skipped] == [2]

    def test_invalid_pixels_dropped(self, tmp_path):
        depth = np.full((4, 4), 1500, np.uint16)
        depth[0, 0] = 0
        noc = np.full((4, 4, 3), 50, np.uint8)
        noc[0, 1] = 0
        e = write_custom_frame(tmp_path, "a", depth, noc, np.ones((4, 4), np.uint8))
        obj = load_frame(DatasetManifest(tmp_path, [e]), e).objects[0]
        assert len(obj.correspondences) == 14
        assert np.all(np.isfinite(obj.correspondences.d))


class TestManifest:
    def test_save_load_roundtrip(self, small_dataset):
        m = load_manifest(small_dataset)
        assert len(m.frames) == 4
        assert m.frames[0].scene == "scene_1" and m.frames[1].scene == "scene_2"
        again = load_manifest(m.save(small_dataset.parent / "copy.json"))
        assert again.frames == m.frames

    def test_bad_version(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"format_version": 7, "frames": []}))
        with pytest.raises(InvalidConfig):
            load_manifest(p)

    def test_unreadable(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(UnreadableFile):
            load_manifest(tmp_path / "m.json")
        with pytest.raises(UnreadableFile):
            load_manifest(tmp_path / "missing.json")


def _object(n, seed=0):
    rng = np.random.default_rng(seed)
    cs = CorrespondenceSet(rng.normal(size=(n, 2)), rng.uniform(1, 2, n), rng.normal(size=(n, 3)))
    pixels = np.column_stack([np.arange(n), np.arange(n)])
    return ObjectRecord(1, "box", RLEMask.from_bool(np.ones((1, 1), bool)), cs, pixels)


class TestSubsample:
    def test_small_unchanged(self):
        obj = _object(50)
        assert subsample_object(obj, 100) is obj

    def test_exact_count_from_original(self):
        obj = _object(10_000)
        sub = subsample_object(obj, 500, seed=4)
        assert len(sub.correspondences) == 500
        idx = sub.pixels[:, 0]
        assert len(np.unique(idx)) == 500
        np.testing.assert_array_equal(sub.correspondences.d, obj.correspondences.d[idx])

    def test_seeded(self):
        obj = _object(2000)
        a = subsample_object(obj, 100, seed=1).pixels
        np.testing.assert_array_equal(a, subsample_object(obj, 100, seed=1).pixels)
        assert not np.array_equal(a, subsample_object(obj, 100, seed=2).pixels)


class TestEvaluate:
    def test_synthetic_accuracy_and_schema(self, small_dataset):
        report = evaluate_dataset(load_manifest(small_dataset), RobustConfig(rng_seed=0))
        assert report.num_failed == 0
        assert report.overall_median < 0.5
        doc = json.loads(report.to_json())
        assert set(doc) == {"method", "config", "frames", "scenes", "overall"}
        assert doc["overall"]["num_frames"] == 4
        rows = list(csv.reader(io.StringIO(report.table_csv())))
        assert rows[0] == ["method", "scene_1", "scene_2", "all"]
        assert rows[1][0] == "is"
        frames = list(csv.reader(io.StringIO(report.frames_csv())))
        assert len(frames) == 5

    def test_workers_match_serial(self, small_dataset):
        m = load_manifest(small_dataset)
        a = evaluate_dataset(m, RobustConfig(), workers=1)
        b = evaluate_dataset(m, RobustConfig(), workers=2)
        assert a.to_json() == b.to_json()

    def test_empty_manifest(self, tmp_path):
        report = evaluate_dataset(DatasetManifest(tmp_path, []))
        assert report.frames == [] and report.overall_median is None
        assert json.loads(report.to_json())["overall"]["num_frames"] == 0

    def test_corrupt_frame_reported(self, small_dataset, tmp_path):
        m = load_manifest(small_dataset)
        bad = FrameEntry("bad", str(tmp_path / "nope.png"), "x.png", "y.png", gt_focal=590.0)
        report = evaluate_dataset(DatasetManifest(m.root, [*m.frames[:2], bad]))
        assert report.num_failed == 1
        assert report.frames[2].status == "error" and "UnreadableFile" in report.frames[2].message
        assert report.overall_median is not None

    def test_unknown_method(self, tmp_path):
        with pytest.raises(InvalidConfig):
            evaluate_dataset(DatasetManifest(tmp_path, []), method="lmeds")

    def test_ransac_method(self, small_dataset):
        report = evaluate_dataset(load_manifest(small_dataset), method="ransac")
        assert report.method == "ransac" and report.num_failed == 0

    def test_pose_errors_reported(self, small_dataset):
        report = evaluate_dataset(load_manifest(small_dataset))
        for r in report.frames:
            assert [e["instance_id"] for e in r.pose_errors] == [1, 2]
        med = report.pose_medians()
        assert set(med) == {"e_s", "e_t", "e_R", "e_t_angular"}
        # quantization-level errors on rendered cubes
        assert med["e_R"] < 0.5 and med["e_s"] < 1.0 and med["e_t"] < 1.0 and med["e_t_angular"] < 0.5
        assert json.loads(report.to_json())["overall"]["pose_median"] == med
