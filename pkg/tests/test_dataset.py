import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facecloak.config import SyntheticConfig
from facecloak.dataset import (
    BoundingBox,
    LabeledImage,
    crop_largest_face,
    generate_synthetic_identities,
    identity_parameters,
    load_dataset,
    reserve_target_images,
    split_dataset,
    write_dataset,
)


def _items(n_ids, per_id):
    return [LabeledImage(np.zeros((4, 4, 3)), i, j) for i in range(n_ids) for j in range(per_id)]


class TestCrop:
    def test_largest_box_wins(self):
        img = np.random.default_rng(0).random((40, 40, 3))
        small, big = BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 25, 25)
        out = crop_largest_face(img, [small, big])
        assert out.shape == (20, 20, 3)
        assert np.array_equal(out, img[5:25, 5:25])

    def test_full_box_returns_input(self):
        img = np.random.default_rng(1).random((12, 9, 3))
        assert np.array_equal(crop_largest_face(img, [BoundingBox(0, 0, 9, 12)]), img)

    def test_box_past_right_edge_is_clipped(self):
        img = np.random.default_rng(2).random((20, 20, 3))
        out = crop_largest_face(img, [BoundingBox(10, 2, 25, 12)])
        assert np.array_equal(out, img[2:12, 10:20])

    def test_tie_broken_by_position(self):
        img = np.random.default_rng(3).random((20, 20, 3))
        a, b = BoundingBox(8, 0, 12, 4), BoundingBox(2, 5, 6, 9)
        assert np.array_equal(crop_largest_face(img, [a, b]), img[5:9, 2:6])

    def test_errors(self):
        img = np.zeros((10, 10, 3))
        with pytest.raises(ValueError):
            crop_largest_face(img, [])
        with pytest.raises(ValueError):
            crop_largest_face(img, [BoundingBox(20, 20, 30, 30)])


class TestSynthetic:
    def test_count(self):
        data = generate_synthetic_identities(SyntheticConfig(num_identities=20, images_per_identity=10, seed=0))
        assert len(data) == 200
        assert {d.identity_id for d in data} == set(range(20))

    def test_deterministic(self):
        cfg = SyntheticConfig(num_identities=3, images_per_identity=3, seed=7)
        a, b = generate_synthetic_identities(cfg), generate_synthetic_identities(cfg)
        assert all(np.array_equal(x.image, y.image) and x.boxes == y.boxes for x, y in zip(a, b))

    def test_distinct_identities_have_distinct_parameters(self):
        params = [identity_parameters(0, i) for i in range(30)]
        for i in range(30):
            for j in range(i + 1, 30):
                assert not np.array_equal(params[i], params[j])

    def test_images_in_range_and_shaped(self):
        data = generate_synthetic_identities(SyntheticConfig(num_identities=2, images_per_identity=2, seed=1,
                                                             channels=1))
        for d in data:
            assert d.image.shape == (32, 32, 1)
            assert d.image.min() >= 0 and d.image.max() <= 1

    def test_same_identity_varies_only_by_nuisance(self):
        cfg = SyntheticConfig(num_identities=2, images_per_identity=2, seed=0,
                              nuisance={"lighting_range": 0, "shift_range_px": 0, "noise_sigma": 0})
        a, b = generate_synthetic_identities(cfg)[:2]
        # background is the only remaining nuisance: the face region is identical
        box = a.boxes[0]
        inner = (slice(box.y0 + 4, box.y1 - 4), slice(box.x0 + 4, box.x1 - 4))
        assert np.allclose(a.image[inner], b.image[inner], atol=0.05)


class TestSplit:
    def test_all_train(self):
        data = _items(5, 3)
        tr, va, te = split_dataset(data, (1.0, 0.0, 0.0), seed=0)
        assert len(tr) == 15 and not va and not te

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 25), st.integers(1, 5), st.integers(0, 1000), st.sampled_from(["identity", "image"]))
    def test_disjoint_exhaustive(self, n_ids, per_id, seed, mode):
        data = _items(n_ids, per_id)
        if mode == "image" and n_ids * per_id < 3:
            return
        parts = split_dataset(data, (0.6, 0.2, 0.2), seed=seed, mode=mode)
        keys = [d.key for p in parts for d in p]
        assert sorted(keys) == sorted(d.key for d in data)
        assert len(set(keys)) == len(keys)
        if mode == "identity":
            owners = [{d.identity_id for d in p} for p in parts]
            assert not (owners[0] & owners[1] or owners[0] & owners[2] or owners[1] & owners[2])

    def test_deterministic(self):
        data = _items(12, 2)
        a = split_dataset(data, (0.5, 0.25, 0.25), seed=4)
        b = split_dataset(data, (0.5, 0.25, 0.25), seed=4)
        assert [[d.key for d in p] for p in a] == [[d.key for d in p] for p in b]

    def test_too_few_identities(self):
        with pytest.raises(ValueError):
            split_dataset(_items(2, 4), (0.6, 0.2, 0.2), seed=0)


class TestReserve:
    def test_first_k_by_image_id(self):
        data = _items(3, 6)[::-1]
        targets, rest = reserve_target_images(data, 1, 4)
        assert [d.image_id for d in targets] == [0, 1, 2, 3]
        assert all(d.identity_id == 1 for d in targets)
        assert len(targets) + len(rest) == len(data)
        assert not {d.key for d in targets} & {d.key for d in rest}

    def test_zero(self):
        data = _items(2, 3)
        targets, rest = reserve_target_images(data, 0, 0)
        assert targets == [] and len(rest) == len(data)

    def test_insufficient(self):
        with pytest.raises(ValueError):
            reserve_target_images(_items(2, 3), 0, 4)


def test_write_and_load_roundtrip(tmp_path):
    cfg = SyntheticConfig(num_identities=5, images_per_identity=3, seed=2)
    scenes = generate_synthetic_identities(cfg)
    tr, va, te = split_dataset(scenes, (0.6, 0.2, 0.2), seed=0)
    targets, te = reserve_target_images(te, te[0].identity_id, 2)
    splits = {"train": tr, "val": va, "test": te, "targets": targets}
    path = write_dataset(tmp_path / "a", cfg, scenes, splits, targets[0].identity_id)
    path2 = write_dataset(tmp_path / "b", cfg, scenes, splits, targets[0].identity_id)
    assert hashlib.sha256(path.read_bytes()).digest() == hashlib.sha256(path2.read_bytes()).digest()
    manifest = json.loads(path.read_text())
    assert len(manifest["images"]) == 15
    ds = load_dataset(tmp_path / "a")
    assert len(ds.train) == len(tr) and len(ds.val) == len(va) and len(ds.test) == len(te)
    assert len(ds.targets) == 2 and ds.target_identity == targets[0].identity_id
    for d in ds.train:
        assert d.image.shape == (32, 32, 3)
