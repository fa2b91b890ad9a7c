import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from c2crop.data import (
    Batch,
    CropBox,
    GeneratorConfig,
    ManifestDataset,
    Sample,
    SyntheticDataset,
    batch_iter,
    box_from_targets,
    generate_box,
    generate_sample,
    load_manifest,
    random_crop_augment,
    read_ppm,
    split_dataset,
    targets_from_box,
    transform_box,
    write_ppm,
)


class TestCropBox:
    def test_valid(self):
        box = CropBox(0.1, 0.2, 0.9, 0.8)
        assert box.size_ratio == pytest.approx(0.48)

    @pytest.mark.parametrize(
        "fields",
        [(0.5, 0.1, 0.5, 0.9), (0.6, 0.1, 0.5, 0.9), (-0.1, 0.1, 0.5, 0.9), (0.1, 0.3, 0.5, 0.2)],
    )
    def test_invalid_rejected(self, fields):
        with pytest.raises(ValueError):
            CropBox(*fields)

    def test_targets_roundtrip(self):
        box = CropBox(0.1, 0.2, 0.9, 0.8)
        assert box_from_targets(targets_from_box(box)) == box

    def test_target_order_is_lrtb(self):
        t = targets_from_box(CropBox(left=0.1, top=0.2, right=0.9, bottom=0.8))
        assert np.array_equal(t, [0.1, 0.9, 0.2, 0.8])


class TestGenerator:
    def test_deterministic_bit_identical(self, tiny_gen):
        a = generate_sample(tiny_gen, 3)
        b = generate_sample(tiny_gen, 3)
        assert np.array_equal(a.image, b.image)
        assert a.box == b.box

    def test_different_indices_differ(self, tiny_gen):
        a = generate_sample(tiny_gen, 0)
        b = generate_sample(tiny_gen, 1)
        assert not np.array_equal(a.image, b.image)

    def test_box_matches_rendered_sample(self, tiny_gen):
        assert generate_box(tiny_gen, 5) == generate_sample(tiny_gen, 5).box

    def test_image_range_and_shape(self, tiny_gen):
        s = generate_sample(tiny_gen, 2)
        assert s.image.shape == (3, 32, 32)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_beta_mean(self):
        cfg = GeneratorConfig(train_size=10_000, val_size=0)
        ratios = np.array([generate_box(cfg, i).size_ratio for i in range(10_000)])
        assert abs(ratios.mean() - 5.0 / 7.0) < 0.01

    def test_box_invariants_bulk(self):
        cfg = GeneratorConfig(train_size=10_000, val_size=0)
        for i in range(10_000):
            box = generate_box(cfg, i)  # CropBox validates in __post_init__
            assert 0.0 < box.size_ratio <= 1.0

    def test_size_ratio_matches_beta_ks(self):
        cfg = GeneratorConfig(train_size=10_000, val_size=0)
        ratios = [generate_box(cfg, i).size_ratio for i in range(10_000)]
        result = stats.kstest(ratios, lambda x: stats.beta.cdf(x, cfg.beta_a, cfg.beta_b))
        assert result.pvalue > 0.01

    def test_boxes_contain_center(self, tiny_gen):
        for i in range(200):
            box = generate_box(tiny_gen, i)
            m = tiny_gen.center_margin
            assert box.left <= 0.5 - m and box.right >= 0.5 + m
            assert box.top <= 0.5 - m and box.bottom >= 0.5 + m

    def test_out_of_range_index(self, tiny_gen):
        with pytest.raises(IndexError):
            generate_sample(tiny_gen, tiny_gen.total_size)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(beta_a=0.0)
        with pytest.raises(ValueError):
            GeneratorConfig(image_size=4)
        with pytest.raises(ValueError):
            GeneratorConfig(subject_scale=0.5)


class TestSplit:
    def test_partition(self, tiny_gen):
        train, val = split_dataset(tiny_gen)
        assert len(train) + len(val) == tiny_gen.total_size
        assert len(val) == tiny_gen.val_size
        assert not set(train) & set(val)

    def test_same_seed_same_split(self, tiny_gen):
        assert split_dataset(tiny_gen) == split_dataset(tiny_gen)

    def test_different_seeds_differ(self, tiny_gen):
        differing = 0
        for seed in range(10):
            cfg = dataclasses.replace(tiny_gen, master_seed=seed)
            if split_dataset(cfg)[1] != split_dataset(tiny_gen)[1]:
                differing += 1
        assert differing >= 9


class TestAugment:
    def _sample(self, box: CropBox, size=32) -> Sample:
        rng = np.random.default_rng(0)
        return Sample(
            image=rng.uniform(size=(3, size, size)),
            box=box,
            size_ratio=box.size_ratio,
            source="test",
        )

    def test_transform_box_example(self):
        # window = left half of the image
        window = CropBox(0.0, 0.0, 0.5, 1.0)
        out = transform_box(CropBox(0.1, 0.1, 0.4, 0.4), window)
        assert out.left == pytest.approx(0.2)
        assert out.top == pytest.approx(0.1)
        assert out.right == pytest.approx(0.8)
        assert out.bottom == pytest.approx(0.4)

    def test_full_box_is_identity(self, rng):
        sample = self._sample(CropBox(0.0, 0.0, 1.0, 1.0))
        out = random_crop_augment(sample, rng)
        assert out is sample

    def test_box_survives_and_stays_valid(self, tiny_gen):
        rng = np.random.default_rng(7)
        sample = generate_sample(tiny_gen, 1)
        for _ in range(300):
            out = random_crop_augment(sample, rng)
            assert 0.0 <= out.box.left < out.box.right <= 1.0
            assert 0.0 <= out.box.top < out.box.bottom <= 1.0
            assert out.image.shape == sample.image.shape

    def test_bulk_validity_cheap_boxes(self):
        # augment draws on many distinct generated samples
        cfg = GeneratorConfig(image_size=16, train_size=200, val_size=0)
        rng = np.random.default_rng(3)
        for i in range(200):
            out = random_crop_augment(generate_sample(cfg, i), rng)
            assert 0.0 < out.size_ratio <= 1.0

    def test_deterministic_given_rng_state(self, tiny_gen):
        sample = generate_sample(tiny_gen, 0)
        a = random_crop_augment(sample, np.random.default_rng(42))
        b = random_crop_augment(sample, np.random.default_rng(42))
        assert a.box == b.box
        assert np.array_equal(a.image, b.image)


class TestPPM:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.uniform(size=(3, 5, 7))
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        img = read_ppm(path)
        assert img.shape == (3, 1, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ValueError, match="P6"):
            read_ppm(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "trunc.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(ValueError, match="truncated"):
            read_ppm(path)


class TestManifest:
    def _write(self, tmp_path, lines):
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_empty_file(self, tmp_path):
        path = self._write(tmp_path, [])
        assert len(load_manifest(path)) == 0

    def test_valid_record(self, tmp_path, rng):
        write_ppm(tmp_path / "img.ppm", rng.uniform(size=(3, 8, 8)))
        path = self._write(
            tmp_path, [json.dumps({"image": "img.ppm", "box": [0.1, 0.2, 0.9, 0.8]})]
        )
        ds = load_manifest(path, image_size=16)
        assert len(ds) == 1
        sample = ds[0]
        assert sample.size_ratio == pytest.approx(0.48)
        assert sample.image.shape == (3, 16, 16)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = self._write(
            tmp_path,
            [json.dumps({"image": "a.ppm", "box": [0.1, 0.2, 0.9, 0.8]}), "{not json"],
        )
        with pytest.raises(ValueError, match=":2:"):
            load_manifest(path)

    def test_invalid_box_rejected(self, tmp_path):
        path = self._write(
            tmp_path, [json.dumps({"image": "a.ppm", "box": [0.9, 0.2, 0.1, 0.8]})]
        )
        with pytest.raises(ValueError, match=":1:"):
            load_manifest(path)

    def test_unknown_field_rejected(self, tmp_path):
        path = self._write(
            tmp_path,
            [json.dumps({"image": "a.ppm", "box": [0.1, 0.2, 0.9, 0.8], "extra": 1})],
        )
        with pytest.raises(ValueError, match="fields"):
            load_manifest(path)

    def test_missing_image_errors_at_materialization(self, tmp_path):
        path = self._write(
            tmp_path, [json.dumps({"image": "gone.ppm", "box": [0.1, 0.2, 0.9, 0.8]})]
        )
        ds = load_manifest(path)
        with pytest.raises(OSError):
            ds[0]


class TestBatchIter:
    def test_batch_sizes(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(10))
        sizes = [len(b.targets) for b in batch_iter(ds, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(10))
        a = [b.indices for b in batch_iter(ds, 4, seed=5)]
        b = [b.indices for b in batch_iter(ds, 4, seed=5)]
        assert a == b

    def test_partition_property(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(16))
        seen = [i for b in batch_iter(ds, 5, seed=1) for i in b.indices]
        assert sorted(seen) == list(range(16))

    def test_epoch_changes_order(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(16))
        e0 = [i for b in batch_iter(ds, 16, seed=1, epoch=0) for i in b.indices]
        e1 = [i for b in batch_iter(ds, 16, seed=1, epoch=1) for i in b.indices]
        assert e0 != e1

    def test_batch_contents(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(6))
        batch = next(batch_iter(ds, 6, seed=0))
        assert isinstance(batch, Batch)
        assert batch.images.shape == (6, 3, 32, 32)
        assert batch.targets.shape == (6, 4)
        assert batch.size_ratios.shape == (6,)
        i = batch.indices[0]
        assert np.array_equal(batch.targets[0], targets_from_box(ds[i].box))

    def test_augment_changes_targets_not_partition(self, tiny_gen):
        ds = SyntheticDataset(tiny_gen, range(8))
        plain = next(batch_iter(ds, 8, seed=2, augment=False))
        aug = next(batch_iter(ds, 8, seed=2, augment=True))
        assert plain.indices == aug.indices
        assert not np.array_equal(plain.targets, aug.targets)
