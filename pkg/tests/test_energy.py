import numpy as np
import pytest

from conftest import random_chain, random_operator
from lgt.affine import circular_translation_generator
from lgt.energy import (
    EnergyConfig,
    EnergyReport,
    PatchPair,
    energy_total,
    fd_coeff_grads,
    fd_operator_grads,
    grad_U_lambda,
    grad_mu_sigma,
    gradcheck,
    manifold_distance,
    pair_energy,
    reconstruction_error,
)
from lgt.learning import rescale_degeneracy
from lgt.operator import Coefficients, TransformChain, apply_chain, apply_chain_complex


def model_pair(chain, coeffs, x_src, pair_id=0):
    """Target generated by the chain itself."""
    y, _ = apply_chain(chain, coeffs, x_src)
    return PatchPair(x_src, y, id=pair_id)


class TestReconstructionError:
    def test_zero_coefficients_give_masked_difference(self, rng):
        chain = random_chain(rng, 8, 2)
        pair = PatchPair(rng.standard_normal(8), rng.standard_normal(8))
        mask = np.array([True] * 5 + [False] * 3)
        residual, sq = reconstruction_error(chain, Coefficients.zeros(2), pair, mask)
        want = np.where(mask, pair.x_tgt - pair.x_src, 0.0)
        assert np.max(np.abs(residual - want)) < 1e-12
        assert sq == pytest.approx(float(want @ want))

    def test_perfect_coefficients(self, rng):
        chain = random_chain(rng, 8, 2)
        coeffs = Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0, 0.5, 2))
        pair = model_pair(chain, coeffs, rng.standard_normal(8))
        _, sq = reconstruction_error(chain, coeffs, pair, np.ones(8, dtype=bool))
        assert sq < 1e-12

    def test_blur_removes_local_minima_in_shift_sweep(self, rng):
        # reconstruction error vs coefficient for a 3-px shift of white noise:
        # rough landscape sharp, single valley once smoothed
        n = 32
        op = circular_translation_generator(n)
        chain = TransformChain((op,))
        x = rng.standard_normal(n)
        pair = PatchPair(x, np.roll(x, 3))
        mask = np.ones(n, dtype=bool)

        def sweep(sigma):
            mus = np.arange(-6.0, 6.01, 0.25)
            return [
                reconstruction_error(chain, Coefficients([m], [sigma]), pair, mask)[1]
                for m in mus
            ]

        def count_minima(vals):
            return sum(
                1
                for i in range(1, len(vals) - 1)
                if vals[i] < vals[i - 1] and vals[i] < vals[i + 1]
            )

        assert count_minima(sweep(0.0)) >= 2
        assert count_minima(sweep(2.0)) == 1


class TestManifoldDistance:
    def test_zero_coefficients(self, rng):
        chain = random_chain(rng, 6, 2)
        x = rng.standard_normal(6)
        coeffs = Coefficients.zeros(2)
        _, inter = apply_chain_complex(chain, coeffs, x)
        assert manifold_distance(chain, coeffs, inter) == 0.0

    def test_matches_path_length_quadrature(self):
        # midpoint linearization vs 64-node quadrature of the true path length
        n = 16
        op = circular_translation_generator(n)
        chain = TransformChain((op,))
        x = np.zeros(n)
        x[4] = 1.0
        nodes, weights = np.polynomial.legendre.leggauss(64)
        from lgt.operator import apply_exact_complex

        a_mat = (op.u * op.lam) @ op.u_inv
        for s in (0.5, 1.0, 2.0):
            coeffs = Coefficients([s], [0.0])
            _, inter = apply_chain_complex(chain, coeffs, x)
            approx = manifold_distance(chain, coeffs, inter)
            # integral over [0, s] of ||A e^{A tau} x||
            taus = 0.5 * s * (nodes + 1.0)
            vals = [
                np.linalg.norm(a_mat @ apply_exact_complex(op, t, x)) for t in taus
            ]
            exact = 0.5 * s * float(np.dot(weights, vals))
            assert approx == pytest.approx(exact, rel=0.10)

    def test_additive_over_operators(self, rng):
        chain2 = random_chain(rng, 6, 2)
        x = rng.standard_normal(6)
        coeffs = Coefficients([0.7, 0.0], [0.0, 0.0])
        _, inter = apply_chain_complex(chain2, coeffs, x)
        both = manifold_distance(chain2, coeffs, inter)
        chain1 = TransformChain((chain2.ops[0],))
        c1 = Coefficients([0.7], [0.0])
        # second operator is inert, so operator 0 sees the raw patch
        _, inter1 = apply_chain_complex(chain1, c1, x)
        assert both == pytest.approx(manifold_distance(chain1, c1, inter1), rel=1e-12)


class TestEnergyTotal:
    def test_perfect_fit_with_reconstruction_only(self, rng):
        chain = random_chain(rng, 8, 2)
        coeffs = Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0, 0.3, 2))
        pair = model_pair(chain, coeffs, rng.standard_normal(8))
        config = EnergyConfig(eta_n=1.0, eta_d=0.0, eta_sigma=0.0)
        report = energy_total(chain, [coeffs], [pair], config)
        assert report.total < 1e-12

    def test_default_weights(self):
        config = EnergyConfig()
        assert config.eta_n == 1.0
        assert config.eta_d == 0.005
        assert config.eta_sigma == 0.01

    def test_total_is_exact_composition(self, rng):
        chain = random_chain(rng, 6, 2)
        coeffs = [Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.5, 2)) for _ in range(3)]
        pairs = [PatchPair(rng.standard_normal(6), rng.standard_normal(6), id=i) for i in range(3)]
        config = EnergyConfig()
        report = energy_total(chain, coeffs, pairs, config)
        resum = (
            config.eta_n * report.recon_term
            + config.eta_d * report.manifold_term
            + config.eta_sigma * report.sigma_term
        )
        assert report.total == resum

    def test_pixels_outside_mask_have_no_effect(self, rng):
        chain = random_chain(rng, 8, 1)
        coeffs = Coefficients([0.3], [0.2])
        mask = np.array([True] * 4 + [False] * 4)
        config = EnergyConfig(mask=mask)
        x_src = rng.standard_normal(8)
        x_tgt = rng.standard_normal(8)
        base = energy_total(chain, [coeffs], [PatchPair(x_src, x_tgt)], config)
        x_tgt2 = x_tgt.copy()
        x_tgt2[4:] += rng.standard_normal(4)
        moved = energy_total(chain, [coeffs], [PatchPair(x_src, x_tgt2)], config)
        assert moved.recon_term == base.recon_term
        assert moved.total == base.total

    def test_invariant_under_degeneracy_rescale(self, rng):
        chain = random_chain(rng, 6, 2)
        coeffs = [Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.5, 2))]
        pairs = [PatchPair(rng.standard_normal(6), rng.standard_normal(6))]
        config = EnergyConfig()
        before = energy_total(chain, coeffs, pairs, config).total
        # unbalance one operator then rescale it; energy must not move
        op = chain.ops[0]
        skew = op.with_u(op.u * np.array([10.0, 0.1, 3.0, 1.0, 0.2, 1.0])[None, :])
        rescaled = rescale_degeneracy(skew)
        chain2 = TransformChain((rescaled, chain.ops[1]))
        after = energy_total(chain2, coeffs, pairs, config).total
        assert abs(after - before) < 1e-9 * max(abs(before), 1.0)

    def test_csv_line(self, rng):
        chain = random_chain(rng, 4, 1)
        report = energy_total(
            chain,
            [Coefficients([0.2], [0.1])],
            [PatchPair(rng.standard_normal(4), rng.standard_normal(4))],
            EnergyConfig(),
        )
        fields = report.csv_line().split(",")
        assert len(fields) == len(EnergyReport.csv_header().split(","))
        assert float(fields[0]) == pytest.approx(report.total)


class TestCoefficientGradients:
    def test_zero_at_perfect_fit(self, rng):
        chain = random_chain(rng, 8, 2)
        coeffs = Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.3, 2))
        pair = model_pair(chain, coeffs, rng.standard_normal(8))
        config = EnergyConfig(eta_n=1.0, eta_d=0.0, eta_sigma=0.0)
        g_mu, g_sigma = grad_mu_sigma(chain, coeffs, pair, config)
        assert np.max(np.abs(g_mu)) < 1e-8
        assert np.max(np.abs(g_sigma)) < 1e-8

    def test_matches_finite_differences_two_operators(self, rng):
        chain = random_chain(rng, 8, 2)
        coeffs = Coefficients(rng.uniform(-1, 1, 2), rng.uniform(0.1, 0.9, 2))
        pair = PatchPair(rng.standard_normal(8), rng.standard_normal(8))
        config = EnergyConfig()
        g_mu, g_sigma = grad_mu_sigma(chain, coeffs, pair, config)
        fd_mu, fd_sigma = fd_coeff_grads(chain, coeffs, pair, config)
        assert np.max(np.abs(g_mu - fd_mu) / np.maximum(np.abs(fd_mu), 1e-10)) < 1e-5
        assert np.max(np.abs(g_sigma - fd_sigma) / np.maximum(np.abs(fd_sigma), 1e-10)) < 1e-5

    def test_sigma_regularizer_gradient_is_exact(self, rng):
        chain = random_chain(rng, 6, 2)
        sigma = np.array([0.7, 1.3])
        coeffs = Coefficients(np.zeros(2), sigma)
        pair = PatchPair(rng.standard_normal(6), rng.standard_normal(6))
        config = EnergyConfig(eta_n=0.0, eta_d=0.0, eta_sigma=0.01)
        _, g_sigma = grad_mu_sigma(chain, coeffs, pair, config)
        assert np.array_equal(g_sigma, 2.0 * 0.01 * sigma)


class TestOperatorGradients:
    def test_zero_at_zero_residual_without_distance_term(self, rng):
        chain = random_chain(rng, 6, 1)
        coeffs = Coefficients([0.4], [0.2])
        pair = model_pair(chain, coeffs, rng.standard_normal(6))
        config = EnergyConfig(eta_n=1.0, eta_d=0.0, eta_sigma=0.01)
        g_u, g_lam = grad_U_lambda(chain, [coeffs], [pair], config)
        assert np.max(np.abs(g_u[0])) < 1e-8
        assert np.max(np.abs(g_lam[0])) < 1e-8

    def test_matches_finite_differences(self, rng):
        chain = random_chain(rng, 6, 1)
        coeffs = [Coefficients(rng.uniform(-1, 1, 1), rng.uniform(0.1, 0.9, 1))]
        pairs = [PatchPair(rng.standard_normal(6), rng.standard_normal(6))]
        config = EnergyConfig()
        g_u, g_lam = grad_U_lambda(chain, coeffs, pairs, config)
        fd_u, fd_lam = fd_operator_grads(chain, coeffs, pairs, config)

        def max_rel(a, f):
            a = np.asarray(a, complex).ravel().view(np.float64)
            f = np.asarray(f, complex).ravel().view(np.float64)
            scale = np.maximum(np.abs(a), np.abs(f))
            keep = scale > 1e-10
            return float(np.max(np.abs(a - f)[keep] / scale[keep]))

        assert max_rel(g_u[0], fd_u[0]) < 1e-5
        assert max_rel(g_lam[0], fd_lam[0]) < 1e-5

    def test_termwise_eigenvalue_gradient_forms_agree(self, rng):
        # the term-by-term eigenvalue derivative (each exponential factor
        # differentiated alone, cross factor dropped) written in matrix
        # notation must equal its per-eigenvalue loop form exactly;
        # the exact product-rule derivative used by the package differs
        # from this form and is validated against finite differences
        n = 6
        op = random_operator(rng, n)
        mu, sigma = 0.7, 0.4
        err = rng.standard_normal(n)
        x = rng.standard_normal(n)

        kernel_mu = np.exp(mu * op.lam)
        kernel_blur = np.exp(0.5 * op.lam ** 2 * sigma ** 2)
        c = op.u_inv @ x.astype(complex)
        t1 = op.u.conj().T @ err.astype(complex)

        termwise = mu * kernel_mu + sigma ** 2 * op.lam * kernel_blur
        matrix_form = -2.0 * np.conj(t1) * termwise * c
        loop_form = np.zeros(n, dtype=complex)
        for j in range(n):
            d_j = mu * np.exp(mu * op.lam[j]) + sigma ** 2 * op.lam[j] * np.exp(
                0.5 * op.lam[j] ** 2 * sigma ** 2
            )
            loop_form[j] = -2.0 * np.conj(t1[j]) * d_j * c[j]
        assert np.max(np.abs(matrix_form - loop_form)) < 1e-12

    def test_small_step_along_negative_gradient_decreases_energy(self, rng):
        chain = random_chain(rng, 6, 2)
        coeffs = [Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.5, 2))]
        pairs = [PatchPair(rng.standard_normal(6), rng.standard_normal(6))]
        config = EnergyConfig()
        report = energy_total(chain, coeffs, pairs, config)
        step = 1e-7
        new_ops = []
        for k, op in enumerate(chain.ops):
            u_new = op.u - step * report.g_u[k]
            lam_new = op.lam - step * report.g_lambda[k]
            new_ops.append(op.from_matrices(u_new, lam_new))
        c_new = [
            Coefficients(
                coeffs[0].mu - step * report.g_mu[0],
                np.maximum(coeffs[0].sigma - step * report.g_sigma[0], 0.0),
            )
        ]
        after = energy_total(TransformChain(tuple(new_ops)), c_new, pairs, config)
        assert after.total < report.total


class TestGradcheckSuite:
    def test_small_run_passes(self):
        report = gradcheck(n_instances=6, seed=11)
        assert report.passed
        assert report.n_components > 0

    def test_pair_energy_matches_report(self, rng):
        chain = random_chain(rng, 5, 2)
        coeffs = Coefficients(rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.4, 2))
        pair = PatchPair(rng.standard_normal(5), rng.standard_normal(5))
        config = EnergyConfig()
        total, g_mu, g_sigma = pair_energy(chain, coeffs, pair, config)
        report = energy_total(chain, [coeffs], [pair], config)
        assert total == pytest.approx(report.total)
        assert np.allclose(g_mu, report.g_mu[0])
        assert np.allclose(g_sigma, report.g_sigma[0])
