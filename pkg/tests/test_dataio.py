import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aspcnet.dataio import (FormatError, HsiCube, LabelRaster, PatchDataset, PatchExtractor, apply_pca,
                            batch_iterator, check_compatible, class_quota, default_palette, export_map,
                            extract_patch, fit_pca, invert_palette, load_cube, load_labels, load_palette,
                            load_split, make_synthetic_scene, ramp_colors, read_ppm, save_cube, save_labels,
                            save_palette, save_split, stratified_split, write_ppm)

SALINAS_POPULATIONS = [2009, 3726, 1976, 1394, 2678, 3959, 3579, 11271, 6203, 3278, 1068, 1927, 916, 1070,
                       7268, 1807]


def jacobi_eigh(a, sweeps=100):
    """Cyclic Jacobi eigensolver for a symmetric matrix; columns are eigenvectors."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off < 1e-14:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a), v


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

class TestCubeFiles:
    def test_minimal_round_trip(self, tmp_path):
        cube = HsiCube(np.array([1.5, -2.0, 3.25, 1e-7], np.float32).reshape(1, 2, 2))
        save_cube(cube, tmp_path / "c.hsi")
        np.testing.assert_array_equal(load_cube(tmp_path / "c.hsi").data, cube.data)

    def test_band_sequential_layout(self, tmp_path):
        data = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
        save_cube(HsiCube(data), tmp_path / "c.hsi")
        raw = (tmp_path / "c.hsi").read_bytes()
        assert raw.startswith(b"HSICUBE1 2 2 3\n")
        np.testing.assert_array_equal(np.frombuffer(raw[15:], "<f4"), np.arange(12))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.hsi").write_bytes(b"CUBE 1 1 1\n\0\0\0\0")
        with pytest.raises(FormatError, match="magic"):
            load_cube(tmp_path / "c.hsi")

    def test_truncated(self, tmp_path):
        (tmp_path / "c.hsi").write_bytes(b"HSICUBE1 2 2 1\n" + b"\0" * 12)
        with pytest.raises(FormatError, match="payload"):
            load_cube(tmp_path / "c.hsi")

    def test_non_finite(self, tmp_path):
        (tmp_path / "c.hsi").write_bytes(b"HSICUBE1 1 1 1\n" + np.array([np.nan], "<f4").tobytes())
        with pytest.raises(FormatError, match="non-finite"):
            load_cube(tmp_path / "c.hsi")

    def test_pixels_order(self):
        cube = HsiCube(np.arange(12, dtype=np.float32).reshape(3, 2, 2))
        np.testing.assert_array_equal(cube.pixels()[1], [1, 5, 9])
        np.testing.assert_array_equal(cube.channels_last()[0, 1], [1, 5, 9])


class TestLabelFiles:
    def test_round_trip(self, tmp_path):
        lab = LabelRaster(np.array([[0, 1], [2, 3]]), 3)
        save_labels(lab, tmp_path / "l.gt")
        got = load_labels(tmp_path / "l.gt")
        np.testing.assert_array_equal(got.labels, lab.labels)
        assert got.classes == 3

    def test_stray_class_rejected(self, tmp_path):
        (tmp_path / "l.gt").write_bytes(b"HSIGT1 1 2 3\n" + np.array([1, 4], "<u2").tobytes())
        with pytest.raises(FormatError, match="exceeds"):
            load_labels(tmp_path / "l.gt")

    def test_in_memory_validation(self):
        with pytest.raises(ValueError):
            LabelRaster(np.array([[0, 5]]), 4)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            check_compatible(HsiCube(np.zeros((1, 2, 3))), LabelRaster(np.zeros((3, 2), int), 2))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

class TestPca:
    def test_signal_recovery(self, rng):
        signal = rng.normal(size=(20, 20))
        noise = 1e-3 * rng.normal(size=(20, 20))
        cube = HsiCube(np.stack([signal, signal, noise]))
        out = apply_pca(fit_pca(cube, 1), cube).data[0]
        assert abs(np.corrcoef(out.ravel(), signal.ravel())[0, 1]) >= 0.999

    def test_full_rank_reconstruction(self, rng):
        cube = HsiCube(rng.normal(size=(5, 8, 9)))
        model = fit_pca(cube, 5)
        X = cube.pixels().astype(np.float64)
        proj = model.transform(X) * model.out_std + model.out_mean
        np.testing.assert_allclose(proj @ model.components.T, X - model.mean, atol=1e-4)

    def test_matches_jacobi_oracle(self, rng):
        mix = rng.normal(size=(6, 6))
        cube = HsiCube(np.einsum("ij,jhw->ihw", mix, rng.normal(size=(6, 10, 10))))
        model = fit_pca(cube, 6)
        X = cube.pixels().astype(np.float64)
        cov = np.cov(X, rowvar=False)
        evals, evecs = jacobi_eigh(cov)
        order = np.argsort(evals)[::-1]
        np.testing.assert_allclose(model.explained_variance, evals[order], rtol=1e-6, atol=1e-9)
        for k in range(6):
            ref = evecs[:, order[k]]
            ref = ref * np.sign(ref[np.argmax(np.abs(ref))])
            np.testing.assert_allclose(model.components[:, k], ref, atol=1e-6)

    def test_orthonormal_and_ordered(self, rng):
        cube = HsiCube(rng.normal(size=(8, 12, 12)) * np.arange(1, 9)[:, None, None])
        model = fit_pca(cube, 5)
        np.testing.assert_allclose(model.components.T @ model.components, np.eye(5), atol=1e-6)
        assert np.all(np.diff(model.explained_variance) <= 0)
        assert np.all(model.components[np.argmax(np.abs(model.components), axis=0), range(5)] > 0)

    def test_standardized_over_fitted_pixels(self, rng, small_labels):
        cube = HsiCube(rng.normal(size=(6, 20, 30)) * 5 + 2)
        mask = small_labels.labels > 0
        reduced = apply_pca(fit_pca(cube, 4, mask=mask), cube).channels_last()[mask]
        np.testing.assert_allclose(reduced.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(reduced.std(axis=0), 1.0, atol=1e-4)

    def test_too_many_components(self):
        with pytest.raises(ValueError):
            fit_pca(HsiCube(np.zeros((3, 4, 4))), 4)

    def test_band_mismatch_on_apply(self, rng):
        model = fit_pca(HsiCube(rng.normal(size=(3, 4, 4))), 2)
        with pytest.raises(ValueError):
            apply_pca(model, HsiCube(rng.normal(size=(4, 4, 4))))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

class TestPatches:
    def test_interior_is_plain_slice(self, rng):
        img = rng.normal(size=(9, 9, 2))
        np.testing.assert_array_equal(extract_patch(img, 4, 5, 5), img[2:7, 3:8])

    def test_corner_mirrored(self):
        img = np.arange(9.0).reshape(3, 3, 1)
        expected = np.array([[4, 3, 4], [1, 0, 1], [4, 3, 4]], dtype=float)
        np.testing.assert_array_equal(extract_patch(img, 0, 0, 3)[..., 0], expected)

    def test_from_cube(self):
        cube = HsiCube(np.arange(18, dtype=np.float32).reshape(2, 3, 3))
        np.testing.assert_array_equal(extract_patch(cube, 1, 1, 1)[0, 0], [4, 13])

    @given(st.integers(0, 7), st.integers(0, 5), st.sampled_from([1, 3, 5, 9]))
    @settings(max_examples=60, deadline=None)
    def test_centre_identity(self, row, col, m):
        img = np.random.default_rng(row * 10 + col).normal(size=(8, 6, 3))
        p = extract_patch(img, row, col, m)
        assert p.shape == (m, m, 3) and np.all(np.isfinite(p))
        np.testing.assert_array_equal(p[m // 2, m // 2], img[row, col])

    def test_out_of_bounds(self):
        with pytest.raises(IndexError):
            extract_patch(np.zeros((4, 4, 1)), 4, 0, 3)

    def test_even_window(self):
        with pytest.raises(ValueError):
            PatchExtractor(np.zeros((4, 4, 1)), 4)


# ---------------------------------------------------------------------------
# splits and batching
# ---------------------------------------------------------------------------

class TestSplit:
    def test_per_class_total(self, small_labels):
        split = stratified_split(small_labels, per_class=40, seed=7)
        assert split.n_train == 360
        assert len(split.test) == 540 - 360
        counts = np.bincount(small_labels.labels[tuple(split.train.T)], minlength=10)
        np.testing.assert_array_equal(counts[1:], 40)

    def test_pavia_protocol(self):
        pops = [6631, 18649, 2099, 3064, 1345, 5029, 1330, 3682, 947]
        lab = np.repeat(np.arange(1, 10), pops).reshape(1, -1)
        assert stratified_split(LabelRaster(lab, 9), per_class=200, seed=0).n_train == 1800

    def test_fraction_on_hundred(self):
        assert class_quota(100, None, 0.02) == 2
        assert class_quota(10, None, 0.02) == 1
        assert class_quota(125, None, 0.02) == 3

    def test_salinas_fraction(self):
        lab = np.repeat(np.arange(1, 17), SALINAS_POPULATIONS).reshape(1, -1)
        split = stratified_split(LabelRaster(lab, 16), fraction=0.02, seed=0)
        expected = sum(int(np.floor(0.02 * p + 0.5)) for p in SALINAS_POPULATIONS)
        assert split.n_train == expected == 1083
        assert abs(split.n_train - 1024) <= 0.1 * 1024

    def test_disjoint_and_labeled(self, small_labels):
        split = stratified_split(small_labels, per_class=13, seed=3)
        train = {tuple(p) for p in split.train}
        test = {tuple(p) for p in split.test}
        assert not train & test
        assert len(train | test) == 540
        assert all(small_labels.labels[p] > 0 for p in train | test)

    def test_seed_determinism(self, small_labels):
        a = stratified_split(small_labels, per_class=5, seed=11)
        b = stratified_split(small_labels, per_class=5, seed=11)
        c = stratified_split(small_labels, per_class=5, seed=12)
        np.testing.assert_array_equal(a.train, b.train)
        assert not np.array_equal(a.train, c.train)

    def test_clamp_with_warning(self, small_labels, caplog):
        split = stratified_split(small_labels, per_class=100, seed=0)
        assert split.n_train == 540 and len(split.test) == 0
        assert "fewer than" in caplog.text

    def test_absent_class(self):
        with pytest.raises(ValueError, match="class 3"):
            stratified_split(LabelRaster(np.array([[1, 2]]), 3), per_class=1)

    def test_exactly_one_mode(self, small_labels):
        with pytest.raises(ValueError):
            stratified_split(small_labels)
        with pytest.raises(ValueError):
            stratified_split(small_labels, per_class=1, fraction=0.1)

    def test_file_round_trip(self, tmp_path, small_labels):
        split = stratified_split(small_labels, per_class=4, seed=2)
        save_split(split, tmp_path / "s.txt")
        assert (tmp_path / "s.txt").read_text().startswith("HSISPLIT1 2 36\n")
        got = load_split(tmp_path / "s.txt", small_labels)
        np.testing.assert_array_equal(got.train, split.train)
        np.testing.assert_array_equal(got.test, split.test)

    def test_file_rejects_unlabeled_pixel(self, tmp_path, small_labels):
        (tmp_path / "s.txt").write_text("HSISPLIT1 0 1\n0 0\n")
        with pytest.raises(FormatError, match="unlabeled"):
            load_split(tmp_path / "s.txt", small_labels)

    def test_file_count_mismatch(self, tmp_path, small_labels):
        (tmp_path / "s.txt").write_text("HSISPLIT1 0 2\n1 0\n")
        with pytest.raises(FormatError):
            load_split(tmp_path / "s.txt", small_labels)


class TestBatchIterator:
    @pytest.fixture
    def dataset(self, small_labels):
        image = np.random.default_rng(0).normal(size=(20, 30, 2))
        split = stratified_split(small_labels, per_class=12, seed=0)
        positions = split.train[:100]
        return PatchDataset.from_split(image, small_labels, positions, 3)

    def test_partial_batch_kept(self, dataset):
        assert [len(t) for _, t in batch_iterator(dataset, 96, 0, 0)] == [96, 4]

    def test_epoch_orders(self, dataset):
        order = lambda e: np.concatenate([t for _, t in batch_iterator(dataset, 7, 3, e)])
        first = [p[:, 1, 1, 0] for p, _ in batch_iterator(dataset, 100, 3, 0)][0]
        again = [p[:, 1, 1, 0] for p, _ in batch_iterator(dataset, 100, 3, 0)][0]
        other = [p[:, 1, 1, 0] for p, _ in batch_iterator(dataset, 100, 3, 1)][0]
        np.testing.assert_array_equal(first, again)
        assert not np.array_equal(first, other)
        assert sorted(order(0)) == sorted(order(1))

    def test_exact_coverage(self, dataset):
        centres = np.concatenate([p[:, 1, 1, :] for p, _ in batch_iterator(dataset, 9, 1, 4)])
        expected = dataset.extractor.image[dataset.positions[:, 0], dataset.positions[:, 1]]
        assert sorted(map(tuple, centres)) == sorted(map(tuple, expected))

    def test_targets_zero_based(self, dataset, small_labels):
        np.testing.assert_array_equal(dataset.targets + 1, small_labels.labels[tuple(dataset.positions.T)])


# ---------------------------------------------------------------------------
# palettes and maps
# ---------------------------------------------------------------------------

class TestMaps:
    PALETTE = {1: (255, 0, 0), 2: (0, 255, 0)}

    def test_two_by_two(self, tmp_path):
        export_map(np.array([[1, 1], [2, 0]]), self.PALETTE, tmp_path / "m.ppm")
        raw = (tmp_path / "m.ppm").read_bytes()
        assert raw == b"P6\n2 2\n255\n" + bytes([255, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 0])

    def test_header_uses_width_then_height(self, tmp_path):
        write_ppm(np.zeros((3, 5, 3)), tmp_path / "r.ppm")
        assert (tmp_path / "r.ppm").read_bytes().startswith(b"P6\n5 3\n255\n")

    def test_inverse_palette_round_trip(self, tmp_path, rng):
        pred = rng.integers(0, 3, (6, 7))
        export_map(pred, self.PALETTE, tmp_path / "m.ppm")
        np.testing.assert_array_equal(invert_palette(read_ppm(tmp_path / "m.ppm"), self.PALETTE), pred)

    def test_missing_palette_entry(self, tmp_path):
        with pytest.raises(ValueError, match="palette"):
            export_map(np.array([[3]]), self.PALETTE, tmp_path / "m.ppm")

    def test_palette_file(self, tmp_path):
        pal = default_palette(5)
        save_palette(pal, tmp_path / "p.txt")
        assert load_palette(tmp_path / "p.txt") == pal
        assert len(set(pal.values())) == 5

    def test_palette_bad_line(self, tmp_path):
        (tmp_path / "p.txt").write_text("1,255,0\n")
        with pytest.raises(FormatError):
            load_palette(tmp_path / "p.txt")

    def test_ramp_endpoints(self):
        rgb = ramp_colors(np.array([0.0, 1.0, 0.5]))
        assert tuple(rgb[0]) == (255, 0, 0) and tuple(rgb[1]) == (0, 0, 255)
        assert tuple(rgb[2]) == (128, 0, 128)


class TestSyntheticScene:
    def test_shape_and_classes(self, scene):
        cube, labels = scene
        assert (cube.bands, cube.height, cube.width) == (10, 48, 48)
        assert labels.classes == 4
        assert set(np.unique(labels.labels)) == {1, 2, 3, 4}

    def test_signal_to_noise(self):
        cube, labels = make_synthetic_scene(snr_db=20.0, seed=5)
        clean, _ = make_synthetic_scene(snr_db=200.0, seed=5)
        noise = cube.data.astype(np.float64) - clean.data
        ratio = 10 * np.log10(np.mean(clean.data.astype(np.float64) ** 2) / np.mean(noise ** 2))
        assert ratio == pytest.approx(20.0, abs=0.3)

    def test_blocked_regions(self):
        _, labels = make_synthetic_scene(block=12, seed=2)
        tiles = labels.labels.reshape(4, 12, 4, 12)
        assert np.all(tiles == tiles[:, :1, :, :1])

    def test_seeded(self):
        a, _ = make_synthetic_scene(seed=3)
        b, _ = make_synthetic_scene(seed=3)
        np.testing.assert_array_equal(a.data, b.data)
