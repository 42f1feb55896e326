"""Synthetic scene generation: projection, balancing, layout, determinism."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domexperts.errors import DatasetParseError, InvalidInputError
from domexperts.scenes import (
    SceneSpec,
    allocate_quota,
    dataset_digest,
    generate_dataset,
    load_dataset,
    render_scene,
)
from domexperts.schema import DomainDimension, DomainSchema, bin_metadata


def small_spec(**overrides):
    base = dict(image_size=64, focal_length_px=200.0, object_height_m=1.7,
                objects_min=1, objects_max=3, altitude_range=(5.0, 100.0),
                pitch_range=(0.0, 90.0), altitude_cells=3, pitch_cells=1,
                time_mix=0.0, class_count=1, seed=7)
    base.update(overrides)
    return SceneSpec(**base)


def render(spec, altitude, pitch, night=False, seed=0):
    return render_scene(spec, altitude, pitch, night, np.random.default_rng(seed))


class TestProjection:
    def test_low_altitude_projects_large(self):
        # 200 px focal and a 1.7 m object at 5 m: 200 * 1.7 / 5 = 68 px.
        spec = small_spec(image_size=128, objects_min=1, objects_max=1)
        scene = render(spec, altitude=5.0, pitch=0.0)
        heights = [ann.bbox[3] for ann in scene.annotations]
        assert heights
        for h in heights:
            assert abs(h - 68.0) <= 1.5

    def test_high_altitude_projects_small(self):
        # 200 * 1.7 / 100 = 3.4 px, above the 2 px floor.
        spec = small_spec(image_size=128, objects_min=1, objects_max=1)
        scene = render(spec, altitude=100.0, pitch=0.0)
        for ann in scene.annotations:
            assert abs(ann.bbox[3] - 3.4) <= 1.0
            assert ann.bbox[3] >= 2.0

    def test_projection_ratio_tracks_altitude(self):
        spec = small_spec(image_size=128, objects_min=1, objects_max=1)
        h20 = render(spec, 20.0, 0.0).annotations[0].bbox[3]
        h40 = render(spec, 40.0, 0.0, seed=1).annotations[0].bbox[3]
        assert abs(h20 / h40 - 2.0) < 0.35  # 40/20 within rasterization slack

    def test_floor_clamp(self):
        spec = small_spec(image_size=64, focal_length_px=20.0)
        scene = render(spec, 100.0, 45.0)  # 20 * 1.7 / 100 = 0.34 px, clamped
        for ann in scene.annotations:
            assert ann.bbox[3] >= 1.0

    def test_nonpositive_altitude_rejected(self):
        with pytest.raises(InvalidInputError):
            render(small_spec(), 0.0, 10.0)
        with pytest.raises(InvalidInputError):
            render(small_spec(), -5.0, 10.0)


class TestSilhouette:
    def test_side_view_is_tall(self):
        spec = small_spec(image_size=128, objects_min=1, objects_max=1)
        scene = render(spec, altitude=7.0, pitch=0.0)  # ~48.6 px tall
        ann = scene.annotations[0]
        ratio = ann.bbox[3] / ann.bbox[2]
        assert 2.5 <= ratio <= 3.5

    def test_top_down_is_round(self):
        spec = small_spec(image_size=128, objects_min=1, objects_max=1)
        scene = render(spec, altitude=7.0, pitch=90.0)
        ann = scene.annotations[0]
        ratio = ann.bbox[3] / ann.bbox[2]
        assert 0.8 <= ratio <= 1.25

    @settings(max_examples=30, deadline=None)
    @given(alt=st.floats(5.0, 100.0), pitch=st.floats(0.0, 90.0),
           seed=st.integers(0, 1000))
    def test_boxes_inside_bounds_positive_area(self, alt, pitch, seed):
        spec = small_spec()
        scene = render_scene(spec, alt, pitch, False, np.random.default_rng(seed))
        assert scene.image.shape == (1, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        for ann in scene.annotations:
            x, y, w, h = ann.bbox
            assert w > 0 and h > 0
            assert x >= 0 and y >= 0
            assert x + w <= 64 and y + h <= 64

    def test_metadata_preserves_render_inputs(self):
        scene = render(small_spec(), 42.5, 33.25, night=True)
        assert scene.metadata.altitude_m == 42.5
        assert scene.metadata.gimbal_pitch_deg == 33.25
        assert scene.metadata.night is True


class TestNight:
    def test_night_darkens(self):
        spec = small_spec(image_size=64, objects_min=1, objects_max=1)
        day = render(spec, 20.0, 45.0, night=False, seed=3)
        night = render(spec, 20.0, 45.0, night=True, seed=3)
        assert np.median(night.image) < 0.6 * np.median(day.image)

    def test_night_timestamp_outside_day_window(self):
        spec = small_spec()
        day = render(spec, 20.0, 45.0, night=False)
        night = render(spec, 20.0, 45.0, night=True)
        day_hour = (day.metadata.timestamp % 86400) / 3600
        night_hour = (night.metadata.timestamp % 86400) / 3600
        assert 7 <= day_hour < 19
        assert not 7 <= night_hour < 19


class TestQuota:
    def test_exact_split(self):
        assert allocate_quota(600, [1 / 3, 1 / 3, 1 / 3]) == [200, 200, 200]

    def test_documented_imbalance(self):
        assert allocate_quota(1000, [0.7, 0.2, 0.1]) == [700, 200, 100]

    def test_largest_remainder_breaks_toward_bigger_fraction(self):
        assert allocate_quota(100, [1 / 3, 1 / 3, 1 / 3]) == [34, 33, 33]
        assert allocate_quota(10, [0.55, 0.45]) == [6, 4]

    def test_total_preserved(self):
        for total in (1, 7, 99, 1234):
            assert sum(allocate_quota(total, [0.5, 0.3, 0.2])) == total

    @settings(max_examples=100)
    @given(total=st.integers(1, 500),
           raw=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8))
    def test_quota_sums_and_bounds(self, total, raw):
        weights = [r / sum(raw) for r in raw]
        quota = allocate_quota(total, weights)
        assert sum(quota) == total
        for q, w in zip(quota, weights):
            assert abs(q - w * total) < 1.0 + 1e-9


class TestGenerate:
    def test_balanced_counts_exact(self, tmp_path):
        spec = small_spec(image_size=32, altitude_cells=3)
        out = generate_dataset(spec, n_train=30, n_test=9, out_dir=tmp_path / "ds")
        schema = DomainSchema((DomainDimension.equidistant(
            "altitude", "altitude_m", 5.0, 100.0, 3),))
        train = load_dataset(out["train"])
        counts = {}
        for rec in train.records:
            key = str(bin_metadata(rec.metadata, schema))
            counts[key] = counts.get(key, 0) + 1
        assert counts == {"bin0": 10, "bin1": 10, "bin2": 10}

    def test_imbalanced_counts_exact(self, tmp_path):
        spec = small_spec(image_size=32, altitude_cells=3)
        out = generate_dataset(spec, n_train=100, n_test=10, out_dir=tmp_path / "ds",
                               balance="imbalanced", weights=(0.7, 0.2, 0.1))
        schema = DomainSchema((DomainDimension.equidistant(
            "altitude", "altitude_m", 5.0, 100.0, 3),))
        train = load_dataset(out["train"])
        counts = {}
        for rec in train.records:
            key = str(bin_metadata(rec.metadata, schema))
            counts[key] = counts.get(key, 0) + 1
        assert counts == {"bin0": 70, "bin1": 20, "bin2": 10}

    def test_bad_weights_rejected(self, tmp_path):
        spec = small_spec()
        with pytest.raises(InvalidInputError):
            generate_dataset(spec, 10, 5, tmp_path / "x", balance="imbalanced",
                             weights=(0.7, 0.2, 0.2))
        with pytest.raises(InvalidInputError):
            generate_dataset(spec, 10, 5, tmp_path / "y", balance="imbalanced",
                             weights=(0.7, 0.3, 0.0, 0.0))

    def test_night_mix_quota(self, tmp_path):
        spec = small_spec(image_size=32, altitude_cells=1, time_mix=0.25)
        out = generate_dataset(spec, n_train=40, n_test=8, out_dir=tmp_path / "ds")
        train = load_dataset(out["train"])
        nights = sum(1 for rec in train.records if rec.metadata.night)
        assert nights == 10

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = small_spec(image_size=32)
        a = generate_dataset(spec, 12, 6, tmp_path / "a")
        b = generate_dataset(spec, 12, 6, tmp_path / "b")
        assert (a["train"] / "annotations.json").read_bytes() == \
            (b["train"] / "annotations.json").read_bytes()
        assert dataset_digest(a["train"]) == dataset_digest(b["train"])
        assert dataset_digest(a["test"]) == dataset_digest(b["test"])

    def test_different_seed_differs(self, tmp_path):
        a = generate_dataset(small_spec(image_size=32, seed=1), 12, 6, tmp_path / "a")
        b = generate_dataset(small_spec(image_size=32, seed=2), 12, 6, tmp_path / "b")
        assert dataset_digest(a["train"]) != dataset_digest(b["train"])

    def test_train_and_test_differ(self, tmp_path):
        out = generate_dataset(small_spec(image_size=32), 12, 12, tmp_path / "ds")
        assert dataset_digest(out["train"]) != dataset_digest(out["test"])

    def test_positive_counts_required(self, tmp_path):
        with pytest.raises(InvalidInputError):
            generate_dataset(small_spec(), 0, 5, tmp_path / "z")


class TestLoad:
    def test_round_trip_exact(self, tmp_path):
        spec = small_spec(image_size=32)
        out = generate_dataset(spec, 8, 4, tmp_path / "ds")
        first = load_dataset(out["train"])
        second = load_dataset(out["train"])
        assert [r.image_id for r in first.records] == [r.image_id for r in second.records]
        for a, b in zip(first.records, second.records):
            assert a.metadata == b.metadata
            assert [ann.bbox for ann in a.annotations] == [ann.bbox for ann in b.annotations]
            assert np.array_equal(a.image, b.image)

    def test_loaded_metadata_matches_sidecar(self, tmp_path):
        out = generate_dataset(small_spec(image_size=32), 6, 3, tmp_path / "ds")
        sidecar = json.loads((out["train"] / "metadata.json").read_text())
        loaded = load_dataset(out["train"])
        by_id = {entry["image_id"]: entry for entry in sidecar}
        for rec in loaded.records:
            entry = by_id[rec.image_id]
            assert rec.metadata.altitude_m == entry["altitude_m"]
            assert rec.metadata.gimbal_pitch_deg == entry["gimbal_pitch_deg"]
            assert rec.metadata.timestamp == entry["timestamp"]

    def test_missing_index_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DatasetParseError):
            load_dataset(tmp_path / "empty")

    def test_missing_image_file_named(self, tmp_path):
        out = generate_dataset(small_spec(image_size=32), 4, 2, tmp_path / "ds")
        victim = sorted((out["train"] / "images").iterdir())[0]
        victim.unlink()
        with pytest.raises(DatasetParseError) as exc:
            load_dataset(out["train"])
        assert victim.stem in str(exc.value)

    def test_sidecar_id_mismatch_named(self, tmp_path):
        out = generate_dataset(small_spec(image_size=32), 4, 2, tmp_path / "ds")
        meta_path = out["train"] / "metadata.json"
        doc = json.loads(meta_path.read_text())
        doc[0]["image_id"] = "train_99999"
        meta_path.write_text(json.dumps(doc))
        with pytest.raises(DatasetParseError) as exc:
            load_dataset(out["train"])
        assert "train_99999" in str(exc.value) or "train_00000" in str(exc.value)

    def test_malformed_box_named(self, tmp_path):
        out = generate_dataset(small_spec(image_size=32), 4, 2, tmp_path / "ds")
        ann_path = out["train"] / "annotations.json"
        doc = json.loads(ann_path.read_text())
        doc["annotations"][0]["bbox"] = [1.0, 1.0, -3.0, 2.0]
        ann_path.write_text(json.dumps(doc))
        with pytest.raises(DatasetParseError) as exc:
            load_dataset(out["train"])
        assert doc["annotations"][0]["image_id"] in str(exc.value)

    def test_empty_image_list_rejected(self, tmp_path):
        d = tmp_path / "ds"
        (d / "images").mkdir(parents=True)
        (d / "annotations.json").write_text(
            '{"images": [], "annotations": [], "categories": []}')
        (d / "metadata.json").write_text("[]")
        with pytest.raises(DatasetParseError):
            load_dataset(d)


class TestSpecValidation:
    def test_image_size_floor(self):
        with pytest.raises(InvalidInputError):
            small_spec(image_size=16)

    def test_altitude_range_positive(self):
        with pytest.raises(InvalidInputError):
            small_spec(altitude_range=(0.0, 100.0))
        with pytest.raises(InvalidInputError):
            small_spec(altitude_range=(50.0, 50.0))

    def test_time_mix_bounds(self):
        with pytest.raises(InvalidInputError):
            small_spec(time_mix=1.5)

    def test_round_trips_through_dict(self):
        spec = small_spec(time_mix=0.25, class_count=2)
        assert SceneSpec.from_dict(spec.to_dict()) == spec
