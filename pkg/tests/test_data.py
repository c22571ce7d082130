import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.linear_model import LogisticRegression

from diffclass.data import (
    DataError,
    Dataset,
    generate_gaussian_dataset,
    generate_shapes_dataset,
    haar_dwt,
    haar_idwt,
    load_dataset,
    load_image_folder,
    load_splits,
    save_dataset,
    save_splits,
    stratified_split,
)
from diffclass.denoiser import GaussianClassModel


class TestGaussianDataset:
    def test_zero_variance_gives_means(self):
        m = GaussianClassModel(np.array([[[[0.2, -0.4]]], [[[0.7, 0.1]]]]), 1e-30)
        ds = generate_gaussian_dataset(m, 5, seed=0)
        assert np.allclose(ds.images[ds.labels == 0], m.means[0], atol=1e-6)
        assert np.allclose(ds.images[ds.labels == 1], m.means[1], atol=1e-6)

    def test_sample_mean_within_three_standard_errors(self):
        m = GaussianClassModel.symmetric_pair((1, 2, 2), 0.5, 2.0)
        ds = generate_gaussian_dataset(m, 10_000, seed=1)
        se = np.sqrt(2.0 / 10_000)
        for c in range(2):
            mean = ds.images[ds.labels == c].mean(axis=0)
            assert np.all(np.abs(mean - m.means[c]) < 3 * se)

    def test_reproducible_bytes(self):
        m = GaussianClassModel.symmetric_pair()
        a = generate_gaussian_dataset(m, 20, seed=3)
        b = generate_gaussian_dataset(m, 20, seed=3)
        assert a.images.tobytes() == b.images.tobytes() and a.fingerprint() == b.fingerprint()

    def test_no_clipping_by_default(self):
        m = GaussianClassModel.symmetric_pair(variance=4.0)
        ds = generate_gaussian_dataset(m, 50, seed=0)
        assert np.abs(ds.images).max() > 1
        assert np.abs(generate_gaussian_dataset(m, 50, seed=0, clip=True).images).max() <= 1

    def test_oracle_metadata(self):
        m = GaussianClassModel.symmetric_pair()
        meta = generate_gaussian_dataset(m, 2, seed=0).metadata
        assert GaussianClassModel.from_dict(meta["oracle"]).means.shape == m.means.shape


class TestShapesDataset:
    @pytest.fixture(scope="class")
    @classmethod
    def shapes(cls):
        return generate_shapes_dataset(16, 2000, seed=0)

    def test_range_and_labels(self, shapes):
        assert shapes.images.shape == (4000, 1, 16, 16)
        assert shapes.images.min() >= -1 and shapes.images.max() <= 1
        assert shapes.metadata["class_counts"] == [2000, 2000]

    def test_blob_centre_brighter_than_periphery(self):
        # noise-free render so the construction itself is checked
        ds = generate_shapes_dataset(32, 20, seed=4, background_noise=0.0)
        for img in ds.images[ds.labels == 0][:, 0]:
            cy, cx = np.unravel_index(np.argmax(img), img.shape)
            assert img[cy, cx] > img[0, 0] and img[cy, cx] > img[-1, -1]

    def test_ring_has_darker_centre_than_blob(self):
        ds = generate_shapes_dataset(32, 200, seed=5, background_noise=0.0)
        centre_mass = lambda imgs: np.array([
            img[(img > -0.99)].size for img in imgs[:, 0]])
        assert centre_mass(ds.images[ds.labels == 0]).mean() > centre_mass(ds.images[ds.labels == 1]).mean()

    def test_linear_baseline_learns(self, shapes):
        split = stratified_split(shapes.labels, seed=0)
        flat = shapes.images.reshape(len(shapes), -1)
        clf = LogisticRegression(max_iter=2000).fit(flat[split["train"]], shapes.labels[split["train"]])
        held_out = split["val"] + split["test"]
        assert clf.score(flat[held_out], shapes.labels[held_out]) > 0.7

    def test_reproducible(self):
        a, b = generate_shapes_dataset(8, 10, 7), generate_shapes_dataset(8, 10, 7)
        assert a.images.tobytes() == b.images.tobytes()

    def test_resolution_check(self):
        with pytest.raises(ValueError):
            generate_shapes_dataset(12, 2, 0)


class TestHaar:
    def test_constant_block(self):
        x = np.full((1, 1, 2, 2), 0.3)
        c = haar_dwt(x)
        assert np.allclose(c[0, :, 0, 0], [0.6, 0, 0, 0])

    def test_layout(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 8, 6))
        c = haar_dwt(x)
        assert c.shape == (2, 12, 4, 3)
        # channel k's bands sit at 4k..4k+3, LL first
        for k in range(3):
            ll = (x[:, k, 0::2, 0::2] + x[:, k, 0::2, 1::2] + x[:, k, 1::2, 0::2] + x[:, k, 1::2, 1::2]) / 2
            assert np.allclose(c[:, 4 * k], ll)

    def test_round_trip_and_parseval_random(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h, w = 2 * rng.integers(1, 9, size=2)
            x = rng.standard_normal((2, int(rng.integers(1, 4)), h, w))
            c = haar_dwt(x)
            assert np.max(np.abs(haar_idwt(c) - x)) < 1e-6
            assert abs((c ** 2).sum() - (x ** 2).sum()) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-1e3, 1e3)))
    def test_round_trip_property(self, x):
        c = haar_dwt(x)
        assert np.allclose(haar_idwt(c), x, atol=1e-6 * max(1.0, np.abs(x).max()))

    def test_torch_matches_numpy(self):
        x = np.random.default_rng(2).standard_normal((3, 1, 4, 4))
        assert np.allclose(haar_dwt(torch.from_numpy(x)).numpy(), haar_dwt(x))
        assert np.allclose(haar_idwt(torch.from_numpy(haar_dwt(x))).numpy(), x)

    def test_odd_dimensions(self):
        with pytest.raises(ValueError):
            haar_dwt(np.zeros((1, 1, 3, 4)))


class TestSplits:
    def test_disjoint_exhaustive_stratified(self):
        labels = np.repeat([0, 1, 2], [100, 50, 30])
        s = stratified_split(labels, seed=0)
        all_idx = s["train"] + s["val"] + s["test"]
        assert sorted(all_idx) == list(range(180))
        for c, n in ((0, 100), (1, 50), (2, 30)):
            assert np.sum(labels[s["train"]] == c) == round(0.8 * n)
            assert np.sum(labels[s["val"]] == c) == round(0.1 * n)

    def test_fractions_must_sum(self):
        with pytest.raises(ValueError):
            stratified_split([0, 1], (0.5, 0.2, 0.2))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_shapes_dataset(8, 6, seed=1)
        save_dataset(ds, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin")
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
        assert back.metadata["class_names"] == ["blob", "ring"]

    def test_header_layout(self, tmp_path):
        ds = generate_shapes_dataset(8, 3, seed=1)
        save_dataset(ds, tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:4] == b"DCDS"
        assert np.frombuffer(raw[4:28], "<u4").tolist() == [1, 6, 2, 1, 8, 8]

    def test_bad_magic_and_version(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(DataError, match="not a dataset"):
            load_dataset(tmp_path / "x.bin")
        ds = generate_shapes_dataset(8, 1, seed=1)
        save_dataset(ds, tmp_path / "d.bin")
        raw = bytearray((tmp_path / "d.bin").read_bytes())
        raw[4] = 9
        (tmp_path / "d.bin").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="version"):
            load_dataset(tmp_path / "d.bin")

    def test_truncated(self, tmp_path):
        ds = generate_shapes_dataset(8, 2, seed=1)
        save_dataset(ds, tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "d.bin").write_bytes(raw[:100])
        with pytest.raises(DataError):
            load_dataset(tmp_path / "d.bin")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.bin")

    def test_splits_round_trip(self, tmp_path):
        s = stratified_split(np.repeat([0, 1], 10))
        save_splits(s, tmp_path / "s.json")
        assert load_splits(tmp_path / "s.json") == s

    def test_dataset_validation(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0]))
        with pytest.raises(DataError):
            Dataset(np.full((1, 1, 2, 2), np.nan), np.array([0]))


def test_image_folder(tmp_path):
    from PIL import Image

    for name, value in (("a", 0), ("b", 255)):
        (tmp_path / name).mkdir()
        for i in range(2):
            Image.fromarray(np.full((10, 10), value, dtype=np.uint8)).save(tmp_path / name / f"{i}.png")
    ds = load_image_folder(tmp_path, resolution=8)
    assert ds.images.shape == (4, 1, 8, 8)
    assert ds.labels.tolist() == [0, 0, 1, 1]
    assert ds.images[0].max() == pytest.approx(-1.0) and ds.images[-1].min() == pytest.approx(1.0)
