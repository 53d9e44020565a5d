import struct

import numpy as np
import pytest

from srl import synthdata as D


def cfg(**kw):
    return D.GeneratorConfig(**kw)


class TestGenerate:
    def test_shapes_and_ranges(self):
        s = D.generate(cfg(seed=3))
        assert s.frames.shape == (4, 56, 56, 3) and s.frames.dtype == np.float32
        assert s.gt_masks.shape == (4, 56, 56) and s.gt_masks.dtype == np.uint16
        assert 0.0 <= s.frames.min() and s.frames.max() <= 1.0
        assert 2 <= s.num_objects <= 4
        assert set(np.unique(s.gt_masks)) <= set(range(s.num_objects + 1))

    def test_deterministic(self):
        a, b = D.generate(cfg(seed=11)), D.generate(cfg(seed=11))
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.gt_masks, b.gt_masks)

    def test_seed_matters(self):
        assert not np.array_equal(D.generate(cfg(seed=1)).frames, D.generate(cfg(seed=2)).frames)

    def test_static_scene(self):
        s = D.generate(cfg(max_speed=0.0, seed=4))
        for t in range(1, 4):
            np.testing.assert_array_equal(s.frames[t], s.frames[0])
            np.testing.assert_array_equal(s.gt_masks[t], s.gt_masks[0])

    def test_single_disk_area(self):
        c = cfg(min_objects=1, max_objects=1, shapes=("disk",), background_level=0.0, texture_amplitude=0.0, seed=7)
        s = D.generate(c)
        rng = np.random.default_rng(7)
        rng.integers(1, 2)
        rng.choice(c.palette_size, size=1, replace=False)
        r = rng.uniform(c.min_size, c.max_size)
        rng.uniform(c.min_speed, c.max_speed)
        rng.uniform(0, 2 * np.pi)
        rng.choice(["disk"])
        cy, cx = rng.uniform(r, 56 - r), rng.uniform(r, 56 - r)
        yy, xx = np.mgrid[0:56, 0:56]
        area = int((((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r).sum())
        assert int((s.gt_masks[0] == 1).sum()) == area
        assert np.all(s.frames[0][s.gt_masks[0] == 0] == 0.0)

    @pytest.mark.parametrize("shape", D.SHAPES)
    def test_integer_translation_conserves_area(self, shape):
        base = D.rasterize(shape, 20.3, 18.7, 6.4, 56, 56).sum()
        for dy, dx in [(1, 0), (0, 3), (-2, 5), (7, -4)]:
            assert D.rasterize(shape, 20.3 + dy, 18.7 + dx, 6.4, 56, 56).sum() == base

    @pytest.mark.parametrize("seed", range(5))
    def test_pixels_match_mask_colors(self, seed):
        s = D.generate(cfg(texture_amplitude=0.0, seed=seed))
        for k, color in enumerate(s.meta["colors"], start=1):
            sel = s.gt_masks == k
            np.testing.assert_allclose(s.frames[sel], np.broadcast_to(D.PALETTE[color], (sel.sum(), 3)), atol=1e-7)
        np.testing.assert_allclose(s.frames[s.gt_masks == 0], 0.25, atol=1e-7)

    def test_later_objects_occlude(self):
        overlaps = 0
        for seed in range(20):
            a = D.generate(cfg(occlusion=True, seed=seed, max_speed=0.0))
            b = D.generate(cfg(occlusion=False, seed=seed, max_speed=0.0))
            diff = a.gt_masks != b.gt_masks
            overlaps += int(diff.any())
            assert np.all(a.gt_masks[diff] > b.gt_masks[diff])
        assert overlaps > 0

    def test_object_ids_stable(self):
        s = D.generate(cfg(max_speed=1.0, seed=9))
        first = np.unique(s.gt_masks[0])
        for m in s.gt_masks[1:]:
            assert set(np.unique(m)) <= set(range(s.num_objects + 1))
        assert set(first) - {0}

    @pytest.mark.parametrize(
        "bad",
        [dict(H=50), dict(max_size=30.0), dict(min_objects=0), dict(shapes=("star",)), dict(palette_size=0)],
    )
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            D.generate(cfg(**bad))

    def test_generate_many_seeds(self):
        samples = D.generate_many(cfg(seed=100), 3)
        assert [s.seed for s in samples] == [100, 101, 102]
        assert np.array_equal(samples[1].frames, D.generate(cfg(seed=101)).frames)


class TestRasterize:
    def test_square_count(self):
        m = D.rasterize("square", 10.0, 10.0, 3.0, 20, 20)
        assert m.sum() == 36

    def test_unknown(self):
        with pytest.raises(ValueError):
            D.rasterize("hexagon", 1, 1, 1, 4, 4)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        samples = D.generate_many(cfg(seed=2), 3)
        D.write_dataset(samples, tmp_path / "d.bin")
        back = D.read_dataset(tmp_path / "d.bin")
        assert len(back) == 3
        for a, b in zip(samples, back):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert a.gt_masks.tobytes() == b.gt_masks.tobytes()
            assert a.seed == b.seed and a.num_objects == b.num_objects

    def test_empty(self, tmp_path):
        D.write_dataset([], tmp_path / "e.bin")
        assert D.read_dataset(tmp_path / "e.bin") == []
        assert (tmp_path / "e.bin").stat().st_size == 16

    def test_header_layout(self, tmp_path):
        D.write_dataset(D.generate_many(cfg(seed=2), 2), tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        assert struct.unpack_from("<8sII", raw) == (D.DATASET_MAGIC, 1, 2)
        assert struct.unpack_from("<IIII", raw, 16) == (4, 56, 56, D.generate(cfg(seed=2)).num_objects)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "d.bin"
        D.write_dataset([], path)
        raw = bytearray(path.read_bytes())
        raw[8] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(D.DatasetFormatError, match="version"):
            D.read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"NOTAFILE" + bytes(8))
        with pytest.raises(D.DatasetFormatError, match="offset 0"):
            D.read_dataset(path)

    def test_truncation_names_offset(self, tmp_path):
        path = tmp_path / "d.bin"
        D.write_dataset(D.generate_many(cfg(seed=0), 1), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(D.DatasetFormatError, match=r"mask payload at offset \d+"):
            D.read_dataset(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "d.bin"
        D.write_dataset([], path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(D.DatasetFormatError, match="offset 16"):
            D.read_dataset(path)
