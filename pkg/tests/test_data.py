import numpy as np
import pytest

from roigate.data import (
    Dataset, SynthSpec, generate_dataset, generate_image, image_to_input,
    load_dataset, read_annotations, read_pnm, save_dataset,
    write_annotations, write_pgm,
)
from roigate.evaluation import DEFAULT_SUBSETS, GroundTruthBox, subset_filter


def tiny_spec(**kw):
    base = dict(image_size=(64, 128), objects_range=(1, 3),
                height_range=(20.0, 55.0),
                height_buckets=((20.0, 50.0, 0.5), (50.0, 55.0, 0.5)),
                distractors_range=(1, 3))
    base.update(kw)
    return SynthSpec(**base)


class TestPnm:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        assert np.array_equal(read_pnm(path), img)

    def test_ppm_reads_as_grayscale(self, tmp_path):
        path = tmp_path / "x.ppm"
        pixels = np.zeros((2, 2, 3), np.uint8)
        pixels[0, 0] = (30, 60, 90)
        with open(path, "wb") as fh:
            fh.write(b"P6\n2 2\n255\n" + pixels.tobytes())
        img = read_pnm(path)
        assert img.shape == (2, 2)
        assert img[0, 0] == 60

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        body = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + body)
        img = read_pnm(path)
        assert img.shape == (2, 3)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pnm"
        path.write_bytes(b"P3\n1 1\n255\n0")
        with pytest.raises(ValueError, match="magic"):
            read_pnm(path)

    def test_image_to_input_shape_and_range(self):
        img = np.array([[0, 255], [127, 128]], np.uint8)
        arr = image_to_input(img)
        assert arr.shape == (3, 2, 2)
        assert arr.min() == -1.0 and arr.max() == 1.0
        assert np.array_equal(arr[0], arr[2])


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        from roigate.boxes import RoiBox
        entries = [
            ("a.pgm", [GroundTruthBox(RoiBox(1, 2, 11, 52), 50.0, 0.8),
                       GroundTruthBox(RoiBox(30, 2, 40, 62), 60.0, 1.0, True)]),
            ("b.pgm", []),
        ]
        path = tmp_path / "ann.txt"
        write_annotations(path, entries)
        back = read_annotations(path)
        assert [e[0] for e in back] == ["a.pgm", "b.pgm"]
        assert back[0][1][0].vis == 0.8
        assert back[0][1][1].ignore is True
        assert back[1][1] == []

    def test_malformed_record_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a.pgm 1 2 3 4\n")
        with pytest.raises(ValueError, match="7 fields"):
            read_annotations(path)


class TestGenerator:
    def test_same_seed_is_byte_identical(self):
        a = generate_dataset(tiny_spec(), 4, seed=5)
        b = generate_dataset(tiny_spec(), 4, seed=5)
        for ia, ib in zip(a.images, b.images):
            assert ia.tobytes() == ib.tobytes()
        assert a.annotations == b.annotations

    def test_different_seed_differs(self):
        a = generate_dataset(tiny_spec(), 2, seed=5)
        b = generate_dataset(tiny_spec(), 2, seed=6)
        assert any(not np.array_equal(x, y) for x, y in zip(a.images, b.images))

    def test_zero_occluder_probability_gives_full_visibility(self):
        ds = generate_dataset(tiny_spec(occluder_prob=0.0), 6, seed=1)
        for gts in ds.annotations:
            assert all(g.vis == 1.0 for g in gts)

    def test_annotations_carry_consistent_height(self):
        ds = generate_dataset(tiny_spec(), 6, seed=2)
        for gts in ds.annotations:
            for g in gts:
                assert g.hgt == g.box.height
                assert abs(g.box.width / g.box.height - 0.41) < 1e-9

    def test_all_four_subsets_populated_and_match_filter_oracle(self):
        spec = SynthSpec()  # full-size default spec
        ds = generate_dataset(spec, 40, seed=3)
        all_gts = [g for gts in ds.annotations for g in gts]
        counts = {}
        for spec_ in DEFAULT_SUBSETS:
            kept = [g for g in subset_filter(all_gts, spec_) if not g.ignore]
            counts[spec_.name] = len(kept)
            # direct filter oracle
            oracle = 0
            for g in all_gts:
                lo, hi = spec_.hgt_range
                vlo, vhi = spec_.vis_range
                if lo <= g.hgt <= hi and vlo <= g.vis <= vhi:
                    oracle += 1
            assert counts[spec_.name] == oracle
        assert all(v > 0 for v in counts.values()), counts

    def test_infeasible_spec_rejected(self):
        spec = SynthSpec(image_size=(64, 128), height_range=(20.0, 200.0))
        with pytest.raises(ValueError, match="fit"):
            generate_dataset(spec, 1, seed=0)

    def test_pedestrians_inside_image(self):
        ds = generate_dataset(tiny_spec(), 8, seed=4)
        h, w = tiny_spec().image_size
        for gts in ds.annotations:
            for g in gts:
                assert 0 <= g.box.x1 < g.box.x2 <= w
                assert 0 <= g.box.y1 < g.box.y2 <= h

    def test_save_load_round_trip(self, tmp_path):
        ds = generate_dataset(tiny_spec(), 3, seed=7)
        ann = save_dataset(ds, tmp_path / "split")
        back = load_dataset(ann)
        assert len(back) == 3
        for a, b in zip(ds.images, back.images):
            assert np.array_equal(a, b)
        for ga, gb in zip(ds.annotations, back.annotations):
            assert len(ga) == len(gb)
            for x, y in zip(ga, gb):
                assert abs(x.box.x1 - y.box.x1) < 1e-3
                assert abs(x.vis - y.vis) < 1e-6
