import numpy as np
import pytest
from scipy import ndimage

from lgt.affine import (
    AFFINE_KINDS,
    COEFF_RANGES,
    PatchGrid,
    affine_chain,
    circular_translation_generator,
    circular_translation_generator_2d,
    diagonalizable_operator,
    fft_shift_image,
    make_affine_generator,
    sample_affine_coeffs,
    spectral_translation_chain,
    synth_affine_batch,
    synth_translation_batch,
    texture_patch,
    warp_oracle,
)
from lgt.data_eval import psnr
from lgt.operator import Coefficients, apply_chain, apply_exact, make_operator


class TestPatchGrid:
    def test_centered_coordinates(self):
        g = PatchGrid(5, 3, "zero")
        xs, ys = g.coords()
        assert xs[0] == -2.0 and ys[0] == -1.0
        assert xs[g.n - 1] == 2.0 and ys[g.n - 1] == 1.0
        assert g.n == 15

    def test_one_dimensional_grids_are_allowed(self):
        g = PatchGrid(16, 1, "periodic")
        assert g.n == 16

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            PatchGrid(2, 5, "zero")
        with pytest.raises(ValueError):
            PatchGrid(5, 2, "zero")

    def test_unknown_boundary_rejected(self):
        with pytest.raises(ValueError):
            PatchGrid(5, 5, "mirror")


class TestGenerators:
    def test_translation_eigenvalues_match_stencil_transform(self):
        # central differences on a ring diagonalize in the Fourier basis
        # with eigenvalues +- i sin(2 pi k / n)
        n = 16
        g = PatchGrid(n, 1, "periodic")
        a = make_affine_generator("translate_h", g)
        got = np.sort(np.linalg.eigvals(a).imag)
        want = np.sort(np.concatenate([np.sin(2 * np.pi * np.arange(n) / n) * s for s in (1.0,)]))
        want = np.sort(-np.sin(2 * np.pi * np.arange(n) / n))
        assert np.allclose(got, np.sort(want), atol=1e-12)
        assert np.max(np.abs(np.linalg.eigvals(a).real)) < 1e-12

    def test_zero_coefficient_is_identity(self, rng):
        g = PatchGrid(9, 9, "zero")
        x = rng.standard_normal(81)
        for kind in AFFINE_KINDS:
            op = diagonalizable_operator(make_affine_generator(kind, g))
            assert np.max(np.abs(apply_exact(op, 0.0, x) - x)) < 1e-10

    def test_rotation_by_quarter_turn_on_plus_pattern(self):
        g = PatchGrid(11, 11, "zero")
        op = diagonalizable_operator(make_affine_generator("rotate", g))
        plus = np.zeros((11, 11))
        plus[5, 2:9] = 1.0
        plus[2:9, 5] = 1.0
        plus = ndimage.gaussian_filter(plus, 1.0)
        got = apply_exact(op, np.pi / 2.0, plus.ravel())
        want = np.rot90(plus).ravel()
        assert psnr(got, want) > 25.0

    def test_rotation_full_turn_returns_input(self, rng):
        # discretization is meaningful for band-limited content away from
        # the corners; a windowed smooth texture comes back after 2 pi
        size = 31
        g = PatchGrid(size, size, "periodic")
        op = make_operator(make_affine_generator("rotate", g))
        yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
        window = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * 3.5 ** 2))
        x = (texture_patch(rng, size, size, blur=3.0, periodic=True) * window).ravel()
        assert psnr(apply_exact(op, 2.0 * np.pi, x), x) > 30.0

    def test_translations_commute_exactly(self):
        g = PatchGrid(8, 8, "periodic")
        ah = make_affine_generator("translate_h", g)
        av = make_affine_generator("translate_v", g)
        assert np.linalg.norm(ah @ av - av @ ah, "fro") < 1e-10

    def test_generator_matches_oracle_for_small_coefficients(self, rng):
        # each kind alone, |c| <= 0.5 units, smooth tapered content
        g = PatchGrid(11, 11, "zero")
        for kind in AFFINE_KINDS:
            op = diagonalizable_operator(make_affine_generator(kind, g))
            for _ in range(3):
                img = texture_patch(rng, 11, 11, blur=1.5, taper=True)
                c = float(rng.uniform(-0.5, 0.5))
                params = np.zeros(6)
                params[AFFINE_KINDS.index(kind)] = c
                got = apply_exact(op, c, img.ravel())
                want = warp_oracle(params, img, g).ravel()
                assert psnr(got, want) > 30.0, kind

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            make_affine_generator("shear_v", PatchGrid(5, 5, "zero"))


class TestSpectralTranslation:
    def test_exact_integer_shift_1d(self):
        op = circular_translation_generator(12)
        x = np.arange(12.0)
        got = apply_exact(op, 4.0, x)
        assert np.max(np.abs(got - np.roll(x, 4))) < 1e-10

    def test_exact_integer_shift_2d(self, rng):
        img = rng.random((8, 8))
        oph = circular_translation_generator_2d(8, 8, "h")
        got = apply_exact(oph, 3.0, img.ravel()).reshape(8, 8)
        assert np.max(np.abs(got - np.roll(img, 3, axis=1))) < 1e-10
        opv = circular_translation_generator_2d(8, 8, "v")
        got = apply_exact(opv, 2.0, img.ravel()).reshape(8, 8)
        assert np.max(np.abs(got - np.roll(img, 2, axis=0))) < 1e-10

    def test_fft_shift_image_matches_roll(self, rng):
        img = rng.random((6, 9))
        assert np.max(np.abs(fft_shift_image(img, 2.0, 1.0) - np.roll(img, (1, 2), (0, 1)))) < 1e-10

    def test_chain_matches_fft_shift_subpixel(self, rng):
        chain = spectral_translation_chain(9, 9)
        img = texture_patch(rng, 9, 9, blur=1.0, periodic=True)
        got, _ = apply_chain(chain, Coefficients([1.3, -0.4], [0.0, 0.0]), img.ravel())
        want = fft_shift_image(img, 1.3, -0.4).ravel()
        assert np.max(np.abs(got - want)) < 1e-8


class TestWarpOracle:
    def test_zero_parameters_keep_image(self, rng):
        g = PatchGrid(9, 9, "zero")
        img = rng.random((9, 9))
        assert np.array_equal(warp_oracle(np.zeros(6), img, g), img)

    def test_integer_translation_on_periodic_grid(self, rng):
        g = PatchGrid(8, 8, "periodic")
        img = rng.random((8, 8))
        params = np.zeros(6)
        params[0] = 2.0
        assert np.max(np.abs(warp_oracle(params, img, g) - np.roll(img, 2, axis=1))) < 1e-12

    def test_half_turn_flips_both_axes(self, rng):
        g = PatchGrid(9, 9, "zero")
        img = rng.random((9, 9))
        params = np.zeros(6)
        params[2] = np.pi
        assert np.max(np.abs(warp_oracle(params, img, g) - img[::-1, ::-1])) < 1e-12

    def test_flat_input_shape_is_preserved(self, rng):
        g = PatchGrid(7, 7, "zero")
        img = rng.random(49)
        out = warp_oracle(np.zeros(6), img, g)
        assert out.shape == (49,)


class TestSampling:
    def test_ranges_and_moments(self):
        rng = np.random.default_rng(3)
        draws = np.stack([sample_affine_coeffs(rng) for _ in range(10_000)])
        for j, kind in enumerate(AFFINE_KINDS):
            lo, hi = COEFF_RANGES[kind]
            assert draws[:, j].min() >= lo and draws[:, j].max() <= hi
            center = 0.5 * (lo + hi)
            se = (hi - lo) / np.sqrt(12.0) / np.sqrt(10_000)
            assert abs(draws[:, j].mean() - center) < 3.0 * se

    def test_scaling_range_is_log_scale(self):
        assert COEFF_RANGES["scale_h"] == (np.log(0.5), np.log(1.5))

    def test_seeded_draws_reproduce(self):
        a = sample_affine_coeffs(np.random.default_rng(11))
        b = sample_affine_coeffs(np.random.default_rng(11))
        assert np.array_equal(a, b)

    def test_rotation_coverage(self):
        rng = np.random.default_rng(5)
        rot = np.array([sample_affine_coeffs(rng)[2] for _ in range(1000)])
        assert rot.max() - rot.min() > 0.95 * 2.0 * np.pi


class TestSynthBatches:
    def test_affine_batch_shapes(self, rng):
        pairs, truth = synth_affine_batch(4, rng)
        assert len(pairs) == 4 and truth.shape == (4, 6)
        assert pairs[0].n == 121

    def test_translation_batch_fixed_shift(self, rng):
        pairs, truth = synth_translation_batch(3, rng, width=16, height=1, fixed_shift=(3.0, 0.0))
        assert np.array_equal(truth[:, 0], [3.0, 3.0, 3.0])
        for p in pairs:
            assert np.max(np.abs(p.x_tgt - np.roll(p.x_src, 3))) < 1e-10

    def test_translation_batch_brightness(self, rng):
        pairs, truth = synth_translation_batch(5, rng, brightness_range=0.3)
        assert truth.shape == (5, 3)
        assert np.all(np.abs(truth[:, 2]) <= 0.3)
