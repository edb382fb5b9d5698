"""Data pipeline tests: generators, resize, crops, augmentation, file formats."""

import numpy as np
import pytest

from patchdet import pretext as P


def checker(h=64, w=64):
    ys, xs = np.mgrid[0:h, 0:w]
    img = ((ys // 8 + xs // 8) % 2 * 200 + 20).astype(np.uint8)
    return np.stack([img, img // 2, 255 - img], axis=-1)


class TestSynthImage:
    def test_deterministic_per_seed(self):
        a = P.synth_image(123)
        b = P.synth_image(123)
        assert np.array_equal(a.image, b.image)
        assert a.objects == b.objects

    def test_full_canvas_square(self):
        spec = P.SynthSpec(shapes=("square",), min_shapes=1, max_shapes=1,
                           size_range=(1.0, 1.0))
        sample = P.synth_image(5, spec)
        cls, (cx, cy, w, h) = sample.objects[0]
        assert cls == 0
        assert np.allclose([cx, cy, w, h], [0.5, 0.5, 1.0, 1.0])

    def test_boxes_inside_unit_square(self):
        for seed in range(1000):
            sample = P.synth_image(seed)
            assert 1 <= len(sample.objects) <= 6
            for _, (cx, cy, w, h) in sample.objects:
                assert w > 0 and h > 0
                assert 0 <= cx - w / 2 and cx + w / 2 <= 1
                assert 0 <= cy - h / 2 and cy + h / 2 <= 1

    def test_shape_pixels_land_inside_gt_box(self):
        spec = P.SynthSpec(bg_range=(0, 0), fg_range=(255, 255),
                           min_shapes=1, max_shapes=1)
        for seed in range(50):
            sample = P.synth_image(seed, spec)
            _, (cx, cy, w, h) = sample.objects[0]
            c = spec.canvas
            ys, xs = np.nonzero(sample.image[:, :, 0] == 255)
            assert len(ys) > 0
            assert xs.min() + 0.5 >= (cx - w / 2) * c - 1e-9
            assert xs.max() + 0.5 <= (cx + w / 2) * c + 1e-9
            assert ys.min() + 0.5 >= (cy - h / 2) * c - 1e-9
            assert ys.max() + 0.5 <= (cy + h / 2) * c + 1e-9


class TestResize:
    def test_identity(self):
        img = checker()
        out = P.resize_bilinear(img, 64, 64)
        assert np.array_equal(out, img)

    def test_double_constant(self):
        img = np.full((8, 8, 3), 77, dtype=np.uint8)
        out = P.resize_bilinear(img, 16, 16)
        assert out.shape == (16, 16, 3)
        assert np.all(out == 77)

    def test_downsample_averages(self):
        # 2x2 blocks of a two-valued image average to the midpoint
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        img[:, 2:] = 200
        out = P.resize_bilinear(img, 2, 2)
        assert np.all(out[:, 0] == 0) and np.all(out[:, 1] == 200)

    def test_policy_range_membership(self):
        img = checker()
        for seed in range(30):
            out = P.resize_policy(img, (32, 48), 60, seed)
            assert 32 <= min(out.shape[:2]) <= 48
            assert out.shape[0] == out.shape[1]

    def test_policy_long_side_cap(self):
        img = checker(16, 64)  # 4:1 aspect
        for seed in range(30):
            out = P.resize_policy(img, (32, 48), 60, seed)
            assert max(out.shape[:2]) <= 60

    def test_policy_validates_range(self):
        with pytest.raises(ValueError):
            P.resize_policy(checker(), (48, 32), 60, 0)


class TestCropQueries:
    def test_full_image_crop(self):
        img = checker()
        patches, boxes = P.crop_queries(img, 3, 0, patch_side=16, min_frac=1.0)
        assert np.allclose(boxes, [[0.5, 0.5, 1.0, 1.0]] * 3)
        assert all(p.shape == (16, 16, 3) for p in patches)

    def test_deterministic(self):
        img = checker()
        a = P.crop_queries(img, 4, 99)
        b = P.crop_queries(img, 4, 99)
        assert np.array_equal(a[1], b[1])
        assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))

    def test_boxes_contained_and_min_side(self):
        img = checker(48, 64)
        _, boxes = P.crop_queries(img, 500, 7)
        assert np.all(boxes[:, 0] - boxes[:, 2] / 2 >= -1e-9)
        assert np.all(boxes[:, 1] - boxes[:, 3] / 2 >= -1e-9)
        assert np.all(boxes[:, 0] + boxes[:, 2] / 2 <= 1 + 1e-9)
        assert np.all(boxes[:, 1] + boxes[:, 3] / 2 <= 1 + 1e-9)
        assert np.all(boxes[:, 2] >= 0.125 - 1e-9)
        assert np.all(boxes[:, 3] >= 0.125 - 1e-9)

    def test_centers_cover_all_quadrants(self):
        img = checker()
        rng = np.random.default_rng(11)
        _, boxes = P.crop_queries(img, 10_000, rng)
        left = boxes[:, 0] < 0.5
        top = boxes[:, 1] < 0.5
        for quadrant in (left & top, left & ~top, ~left & top, ~left & ~top):
            assert quadrant.mean() >= 0.15

    def test_capacity_error(self):
        with pytest.raises(ValueError, match="capacity"):
            P.crop_queries(checker(), 5, 0, max_queries=4)


class TestAugment:
    def test_zero_strength_identity(self):
        img = checker(16, 16)
        out = P.augment(img, 3, jitter=0.0, gray_p=0.0)
        assert np.array_equal(out, img)

    def test_grayscale_channels_equal(self):
        img = checker(16, 16)
        out = P.augment(img, 3, jitter=0.0, gray_p=1.0)
        assert np.array_equal(out[:, :, 0], out[:, :, 1])
        assert np.array_equal(out[:, :, 1], out[:, :, 2])

    def test_deterministic(self):
        img = checker(16, 16)
        assert np.array_equal(P.augment(img, 42), P.augment(img, 42))

    def test_no_horizontal_flip(self):
        # an asymmetric gradient stays monotone left-to-right under any seed
        img = np.tile(np.arange(0, 160, 10, dtype=np.uint8)[None, :, None],
                      (16, 1, 3))
        for seed in range(50):
            out = P.augment(img, seed).astype(np.int64)
            row = out[0, :, 0]
            assert np.all(np.diff(row) >= 0)
            assert row[0] <= row[-1]


class TestPatchDropout:
    def test_rate_zero(self):
        patches = [checker(16, 16) for _ in range(10)]
        out, dropped = P.patch_dropout(patches, 0.0, 1)
        assert not dropped.any()
        assert all(np.array_equal(a, b) for a, b in zip(out, patches))

    def test_dropped_patches_are_zero(self):
        patches = [checker(16, 16) for _ in range(100)]
        out, dropped = P.patch_dropout(patches, 0.5, 2)
        for p, hit in zip(out, dropped):
            if hit:
                assert p.sum() == 0
            else:
                assert p.sum() > 0

    def test_empirical_rate(self):
        rng = np.random.default_rng(3)
        patches = [np.ones((1, 1, 3), dtype=np.uint8)] * 100_000
        _, dropped = P.patch_dropout(patches, 0.1, rng)
        assert abs(dropped.mean() - 0.1) < 0.01

    def test_rejects_rate_one(self):
        with pytest.raises(ValueError):
            P.patch_dropout([checker(16, 16)], 1.0, 0)


class TestPretextSample:
    def test_pure_function_of_seed(self):
        img = checker()
        a = P.make_pretext_sample(img, 4, seed=77)
        b = P.make_pretext_sample(img, 4, seed=77)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.gt_boxes, b.gt_boxes)
        assert np.array_equal(a.dropped, b.dropped)
        assert all(np.array_equal(x, y) for x, y in zip(a.patches, b.patches))

    def test_shapes_and_ranges(self):
        img = checker()
        s = P.make_pretext_sample(img, 4, seed=5, patch_side=16)
        assert len(s.patches) == 4 and s.gt_boxes.shape == (4, 4)
        assert all(p.shape == (16, 16, 3) for p in s.patches)
        assert np.all(s.gt_boxes >= 0) and np.all(s.gt_boxes <= 1)
        for p, hit in zip(s.patches, s.dropped):
            assert (p.sum() == 0) == bool(hit)

    def test_sample_seed_is_stable_and_distinct(self):
        seeds = [P.sample_seed(42, i) for i in range(1000)]
        assert seeds == [P.sample_seed(42, i) for i in range(1000)]
        assert len(set(seeds)) == 1000
        assert all(0 <= s < 2 ** 64 for s in seeds)


class TestPpmRoundTrip:
    def test_bit_exact(self, tmp_path):
        img = checker(23, 41)
        path = tmp_path / "img.ppm"
        P.write_ppm(path, img)
        back = P.read_ppm(path)
        assert np.array_equal(back, img)

    def test_header_comments(self, tmp_path):
        img = checker(4, 5)
        path = tmp_path / "c.ppm"
        raw = b"P6\n# a comment\n5 4\n# another\n255\n" + img.tobytes()
        path.write_bytes(raw)
        assert np.array_equal(P.read_ppm(path), img)

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError, match="P6"):
            P.read_ppm(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ValueError, match="truncated"):
            P.read_ppm(path)


class TestDatasetLayout:
    def test_round_trip(self, tmp_path):
        samples = P.build_synth_dataset(tmp_path, 5, global_seed=9)
        back = P.read_detection_dataset(tmp_path)
        assert len(back) == 5
        for orig, loaded in zip(samples, back):
            assert np.array_equal(orig.image, loaded.image)
            assert len(orig.objects) == len(loaded.objects)
            for (c0, b0), (c1, b1) in zip(orig.objects, loaded.objects):
                assert c0 == c1
                assert np.allclose(b0, b1, atol=5e-7)  # 6-decimal text files

    def test_ground_truth_file_format(self, tmp_path):
        P.build_synth_dataset(tmp_path, 2, global_seed=1)
        lines = (tmp_path / "boxes.txt").read_text().strip().splitlines()
        for line in lines:
            parts = line.split()
            assert len(parts) == 6
            assert parts[0].startswith("images/") and parts[0].endswith(".ppm")
            int(parts[1])
            for v in parts[2:]:
                assert len(v.split(".")[1]) == 6

    def test_deterministic_build(self, tmp_path):
        P.build_synth_dataset(tmp_path / "a", 3, global_seed=4)
        P.build_synth_dataset(tmp_path / "b", 3, global_seed=4)
        for name in ["manifest.txt", "boxes.txt", "images/000001.ppm"]:
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()
