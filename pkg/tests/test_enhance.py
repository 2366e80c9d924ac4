import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_average, naive_clahe, naive_compensate
from octpipe.enhance import (
    DigitalEnhancer,
    EnhanceConfig,
    clahe,
    compensate,
    digital_enhance,
    enhance_volume,
    spatial_average,
)

images = arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
                elements=st.floats(0.0, 1.0, allow_nan=False))


# ---------------------------------------------------------------------------


class TestSpatialAverage:
    def test_constant(self):
        np.testing.assert_allclose(spatial_average(np.full((5, 7), 0.3)), 0.3, atol=1e-15)

    def test_isolated_centre_vanishes(self):
        img = np.zeros((3, 3))
        img[1, 1] = 1.0
        out = spatial_average(img)
        assert out[1, 1] == 0.0
        np.testing.assert_allclose(out, naive_average(img))

    def test_include_center_is_box_mean(self):
        img = np.zeros((3, 3))
        img[1, 1] = 1.0
        assert spatial_average(img, "include_center")[1, 1] == pytest.approx(1 / 9)

    @pytest.mark.parametrize("mode", ["exclude_center", "include_center"])
    def test_matches_double_loop(self, rng, mode):
        img = rng.random((8, 8))
        np.testing.assert_allclose(spatial_average(img, mode),
                                   naive_average(img, mode == "include_center"), atol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            spatial_average(np.zeros((2, 2)), "cross_frame")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12).flatmap(lambda n: arrays(
        np.float64, (n, n), elements=st.floats(0.0, 1.0, allow_nan=False))))
    def test_commutes_with_transpose(self, img):
        np.testing.assert_allclose(spatial_average(img.T), spatial_average(img).T, atol=1e-15)


class TestCompensate:
    def test_constant_column_closed_form(self):
        out = compensate(np.full((4, 1), 0.7), 2.0)
        np.testing.assert_allclose(out[:, 0], [1 / 8, 1 / 6, 1 / 4, 1 / 2], atol=1e-12)

    def test_zero_column(self):
        np.testing.assert_array_equal(compensate(np.zeros((6, 3))), 0.0)

    def test_matches_summation(self, rng):
        img = rng.random((8, 8))
        np.testing.assert_allclose(compensate(img), naive_compensate(img), atol=1e-6)

    @pytest.mark.parametrize("n", [1.0, 2.0, 3.5])
    def test_exponent_oracle(self, rng, n):
        img = rng.random((6, 5))
        np.testing.assert_allclose(compensate(img, n), naive_compensate(img, n), atol=1e-6)

    def test_strictly_increasing_for_constant_columns(self):
        out = compensate(np.full((16, 2), 0.4))
        assert np.all(np.diff(out[:, 0]) > 0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (8, 3), elements=st.floats(0.05, 1.0)), st.floats(0.1, 1.0))
    def test_column_scale_invariance(self, img, lam):
        np.testing.assert_allclose(compensate(img * lam), compensate(img), rtol=1e-9, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(images)
    def test_unit_range(self, img):
        out = compensate(img)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestClahe:
    def test_constant_image_stays_constant(self):
        # a flat histogram redistributes its clipped excess, so the level moves,
        # but every pixel moves together
        for c in (0.0, 0.2, 0.5, 1.0):
            out = clahe(np.full((32, 32), c))
            assert np.ptp(out) == 0.0

    def test_single_tile_without_clipping_is_global_equalisation(self, rng):
        img = rng.integers(0, 256, (20, 24)) / 255.0
        out = clahe(img, clip=1e6, tiles=(1, 1))
        q = np.rint(img * 255).astype(int)
        cdf = np.cumsum(np.bincount(q.ravel(), minlength=256))
        expected = np.rint(cdf[q] * 255 / q.size) / 255
        np.testing.assert_array_equal(out, expected)

    def test_two_tiles_gradient(self, rng):
        y, x = np.mgrid[0:16, 0:32]
        img = np.clip((x * 6 + y * 3 + rng.integers(0, 12, (16, 32))) / 255.0, 0, 1)
        np.testing.assert_allclose(clahe(img, 2.0, (1, 2)), naive_clahe(img, 2.0, (1, 2)),
                                   atol=1 / 255)

    def test_matches_opencv(self, rng):
        cv2 = pytest.importorskip("cv2")
        for shape, tiles in [((16, 16), (2, 2)), ((64, 48), (8, 8)), ((17, 13), (4, 4))]:
            u = rng.integers(0, 256, shape).astype(np.uint8)
            ref = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(tiles[1], tiles[0])).apply(u)
            np.testing.assert_allclose(clahe(u / 255.0, 2.0, tiles) * 255, ref, atol=0.5 + 1e-9)

    @settings(max_examples=30, deadline=None)
    @given(images, st.floats(1.0, 5.0), st.integers(1, 4), st.integers(1, 4))
    def test_unit_range(self, img, clip, tr, tc):
        out = clahe(img, clip, (tr, tc))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestDigitalEnhance:
    def test_is_the_composition(self, rng):
        img = rng.random((24, 20))
        cfg = EnhanceConfig(2.0, 2.0, (4, 4))
        chained = clahe(compensate(spatial_average(img), 2.0), 2.0, (4, 4))
        np.testing.assert_array_equal(digital_enhance(img, cfg), chained)

    def test_full_size_against_chained_references(self):
        img = np.random.default_rng(448).random((448, 352))
        stage2 = naive_compensate(naive_average(img))
        out = digital_enhance(img)
        np.testing.assert_allclose(out, clahe(stage2), atol=1e-6 + 1 / 255)

    def test_deterministic(self, rng):
        img = rng.random((32, 32))
        assert digital_enhance(img).tobytes() == digital_enhance(img.copy()).tobytes()

    def test_volume_is_per_bscan(self, rng):
        vol = rng.random((3, 16, 16))
        out = enhance_volume(vol)
        for d in range(3):
            np.testing.assert_array_equal(out[d], digital_enhance(vol[d]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EnhanceConfig(contrast_exponent=0.5)
        with pytest.raises(ValueError):
            EnhanceConfig(clahe_clip=0.5)
        with pytest.raises(ValueError):
            EnhanceConfig(clahe_tiles=(0, 2))
        with pytest.raises(ValueError):
            EnhanceConfig(averaging_mode="median")


class TestDigitalEnhancerEstimator:
    def test_params_round_trip(self):
        est = DigitalEnhancer(clahe_clip=3.0)
        assert est.get_params()["clahe_clip"] == 3.0
        assert est.set_params(clahe_tiles=(2, 2)).clahe_tiles == (2, 2)

    def test_clone(self):
        from sklearn.base import clone
        est = clone(DigitalEnhancer(contrast_exponent=3.0))
        assert est.contrast_exponent == 3.0

    def test_transform_matches_function(self, rng):
        X = rng.random((2, 16, 16))
        out = DigitalEnhancer(clahe_tiles=(2, 2)).fit(X).transform(X)
        np.testing.assert_array_equal(out[1], digital_enhance(X[1], EnhanceConfig(clahe_tiles=(2, 2))))

    def test_invalid_config_fails_at_fit(self):
        with pytest.raises(ValueError):
            DigitalEnhancer(averaging_mode="bogus").fit(np.zeros((4, 4)))
