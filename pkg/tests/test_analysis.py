"""Band attribution, uncertainty, certificates, and spectral surgery."""

import numpy as np
import pytest

from specreason import analysis as an
from specreason import filters as ft
from specreason import graph as gr
from specreason.taskgen import random_gnp


def p2_basis():
    return gr.eigendecompose(gr.build_laplacian(
        gr.Graph(node_count=2, edges=((0, 1, 1.0),))))


def random_basis(n=20, p=0.3, seed=0):
    return gr.eigendecompose(gr.build_laplacian(random_gnp(n, p, seed=seed)))


class TestBandPartition:
    def test_band_of_frozen_map(self):
        part = an.BandPartition(edges=np.array([0.0, 1.0, 2.0, 3.0]))
        # half-open bands, last band closed on top
        assert part.band_of([0.5, 1.0, 3.0]).tolist() == [0, 1, 2]
        assert part.band_of([0.0, 2.0]).tolist() == [0, 2]

    def test_edges_validated(self):
        with pytest.raises(ValueError, match="first edge"):
            an.BandPartition(edges=np.array([0.5, 1.0]))
        with pytest.raises(ValueError, match="strictly"):
            an.BandPartition(edges=np.array([0.0, 1.0, 1.0]))
        with pytest.raises(ValueError, match="two edges"):
            an.BandPartition(edges=np.array([0.0]))

    def test_default_three_band(self):
        part = an.default_three_band(3.0)
        assert part.n_bands == 3
        assert np.allclose(part.edges, [0.0, 1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            an.default_three_band(0.0)


class TestBandEnergy:
    def test_parseval_split(self):
        basis = random_basis(seed=1)
        y = np.random.default_rng(2).standard_normal(20)
        report = an.band_energy(basis, y, an.default_three_band(basis.lambda_max))
        assert report.total_energy == pytest.approx(float(y @ y), rel=1e-12)
        assert report.fractions.sum() == pytest.approx(1.0, abs=1e-12)

    def test_p2_constant_is_pure_low(self):
        basis = p2_basis()
        report = an.band_energy(basis, np.array([1.0, 1.0]),
                                an.default_three_band(basis.lambda_max))
        assert report.fractions.tolist() == [1.0, 0.0, 0.0]

    def test_p2_alternating_is_pure_high(self):
        basis = p2_basis()
        report = an.band_energy(basis, np.array([1.0, -1.0]),
                                an.default_three_band(basis.lambda_max))
        assert report.fractions.tolist() == [0.0, 0.0, 1.0]

    def test_zero_signal_degenerate(self):
        basis = p2_basis()
        report = an.band_energy(basis, np.zeros(2), an.default_three_band(2.0))
        assert report.degenerate and report.fractions.tolist() == [0.0, 0.0, 0.0]

    def test_partition_must_cover(self):
        basis = p2_basis()
        with pytest.raises(ValueError, match="cover"):
            an.band_energy(basis, np.ones(2), an.BandPartition(edges=np.array([0.0, 1.0])))


class TestDirichletEnergy:
    def test_p2_alternating(self):
        lap = gr.build_laplacian(gr.Graph(node_count=2, edges=((0, 1, 1.0),)))
        assert an.dirichlet_energy(lap, np.array([1.0, -1.0])) == 4.0

    def test_constant_is_zero(self):
        lap = gr.build_laplacian(random_gnp(15, 0.4, seed=3))
        assert an.dirichlet_energy(lap, np.ones(15)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_spectral_form(self):
        g = random_gnp(18, 0.3, seed=4)
        lap = gr.build_laplacian(g)
        basis = gr.eigendecompose(lap)
        y = np.random.default_rng(5).standard_normal(18)
        yhat = basis.eigenvectors.T @ y
        spectral = float(basis.eigenvalues @ yhat ** 2)
        assert an.dirichlet_energy(lap, y) == pytest.approx(spectral, rel=1e-10)


class TestProofBandAgreement:
    def test_mean_allowed_fraction(self):
        basis = p2_basis()
        part = an.default_three_band(basis.lambda_max)
        low = an.band_energy(basis, np.array([1.0, 1.0]), part)
        high = an.band_energy(basis, np.array([1.0, -1.0]), part)
        assert an.proof_band_agreement([(low, (0,)), (high, (0,))]) == pytest.approx(0.5)
        assert an.proof_band_agreement([(low, (0,)), (high, (2,))]) == 1.0

    def test_degenerate_reports_skipped(self):
        basis = p2_basis()
        part = an.default_three_band(basis.lambda_max)
        zero = an.band_energy(basis, np.zeros(2), part)
        low = an.band_energy(basis, np.array([1.0, 1.0]), part)
        assert an.proof_band_agreement([(zero, (0,)), (low, (0,))]) == 1.0
        with pytest.raises(ValueError):
            an.proof_band_agreement([(zero, (0,))])

    def test_bad_band_index(self):
        basis = p2_basis()
        report = an.band_energy(basis, np.ones(2), an.default_three_band(2.0))
        with pytest.raises(ValueError):
            an.proof_band_agreement([(report, (7,))])


class TestSpectralCovariance:
    def test_zero_variances_zero_covariance(self):
        basis = random_basis(n=10, seed=6)
        x = np.random.default_rng(7).standard_normal(10)
        cov = an.spectral_covariance(basis, np.zeros(10), x, materialize=True)
        assert np.max(np.abs(cov.vertex_matrix)) == 0.0
        assert cov.total_variance == 0.0

    def test_single_mode_outer_product(self):
        basis = random_basis(n=8, seed=8)
        u0 = basis.eigenvectors[:, 0]
        variances = np.zeros(8)
        variances[0] = 1.0
        cov = an.spectral_covariance(basis, variances, u0, materialize=True)
        xhat0 = float(basis.eigenvectors[:, 0] @ u0)
        assert np.allclose(cov.vertex_matrix, np.outer(u0, u0) * xhat0 ** 2, atol=1e-12)

    def test_trace_identity_and_psd(self):
        rng = np.random.default_rng(9)
        for seed in range(5):
            basis = random_basis(n=12, seed=seed)
            variances = np.abs(rng.standard_normal(12))
            x = rng.standard_normal(12)
            cov = an.spectral_covariance(basis, variances, x, materialize=True)
            assert abs(np.trace(cov.vertex_matrix) - cov.total_variance) <= 1e-10
            assert np.linalg.eigvalsh(cov.vertex_matrix).min() > -1e-12

    def test_negative_variance_rejected(self):
        basis = p2_basis()
        with pytest.raises(ValueError):
            an.spectral_covariance(basis, np.array([-1.0, 0.0]), np.ones(2))

    def test_vertex_variances_match_materialized_diagonal(self):
        basis = random_basis(n=10, seed=3)
        variances = np.linspace(0.0, 1.0, 10)
        x = np.random.default_rng(4).standard_normal(10)
        cov = an.spectral_covariance(basis, variances, x, materialize=True)
        assert np.allclose(cov.vertex_variances(), np.diag(cov.vertex_matrix), atol=1e-12)


class TestThetaResponseVariance:
    def test_constant_coefficient_noise(self):
        # only theta_0 noisy: Var[h] = var_0 * T_0^2 = var_0 everywhere
        out = an.theta_response_variance(np.array([0.25]), np.array([0.0, 1.0, 2.0]), 2.0)
        assert out.tolist() == [0.25, 0.25, 0.25]

    def test_t1_squared_profile(self):
        # only theta_1 noisy: Var[h](lam) = T_1(2 lam / lmax - 1)^2
        out = an.theta_response_variance(np.array([0.0, 1.0]), np.array([0.0, 1.0, 2.0]), 2.0)
        assert np.allclose(out, [1.0, 0.0, 1.0], atol=1e-14)

    def test_feeds_covariance(self):
        basis = random_basis(n=10, seed=2)
        var_h = an.theta_response_variance(np.array([0.1, 0.2, 0.3]),
                                           basis.eigenvalues, basis.lambda_max)
        cov = an.spectral_covariance(basis, var_h, np.ones(10))
        assert np.all(cov.diagonal_spectral >= 0)


class TestRobustnessCertificate:
    def test_diffusion_closed_form(self):
        cert = an.robustness_certificate(ft.diffusion(1.0), 2.0)
        assert cert.bound == pytest.approx(1.05, abs=1e-12)
        assert cert.closed_form

    def test_identity_closed_form(self):
        assert an.robustness_certificate(ft.identity(), 5.0).bound == pytest.approx(1.05)

    def test_highpass_closed_form(self):
        cert = an.robustness_certificate(ft.highpass(1.0), 2.0)
        assert cert.bound == pytest.approx((2.0 / 3.0) * 1.05, rel=1e-12)

    def test_grid_bound_dominates_grid_values(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            theta = rng.standard_normal(6)
            f = ft.ChebyshevFilter(theta=theta, lambda_max=2.0)
            cert = an.robustness_certificate(f, 2.0, grid_points=301)
            grid = np.linspace(0.0, 2.0, 301)
            values = np.abs(ft.response_eval(f, grid))
            assert np.all(cert.bound >= values)

    def test_grid_needs_two_points(self):
        with pytest.raises(ValueError):
            an.robustness_certificate(ft.identity(), 2.0, grid_points=1)


class TestSpectralPerturb:
    def test_norm_equals_magnitude(self):
        basis = random_basis(seed=11)
        x = np.random.default_rng(12).standard_normal(20)
        for magnitude in (0.1, 1.0, 7.5):
            out = np.asarray(an.spectral_perturb(basis, x, band=1,
                                                 magnitude=magnitude, seed=3))
            assert abs(np.linalg.norm(out - x) - magnitude) <= 1e-10

    def test_only_target_band_moves(self):
        basis = random_basis(seed=13)
        part = an.default_three_band(basis.lambda_max)
        x = np.random.default_rng(14).standard_normal(20)
        out = np.asarray(an.spectral_perturb(basis, x, band=0, magnitude=0.5,
                                             partition=part, seed=4))
        diff_hat = basis.eigenvectors.T @ (out - x)
        outside = part.band_of(basis.eigenvalues) != 0
        assert np.max(np.abs(diff_hat[outside])) <= 1e-12

    def test_zero_magnitude_no_op(self):
        basis = p2_basis()
        x = np.array([0.3, -0.7])
        out = np.asarray(an.spectral_perturb(basis, x, band=0, magnitude=0.0))
        assert np.array_equal(out, x)

    def test_empty_band_errors_with_name(self):
        basis = p2_basis()
        # nothing lives in [3, 4)
        part = an.BandPartition(edges=np.array([0.0, 3.0, 4.0, 5.0]))
        with pytest.raises(ValueError, match="band 1"):
            an.spectral_perturb(basis, np.ones(2), band=1, magnitude=0.1, partition=part)

    def test_seeded_and_deterministic(self):
        basis = random_basis(seed=15)
        x = np.zeros(20)
        a = np.asarray(an.spectral_perturb(basis, x, band=2, magnitude=1.0, seed=5))
        b = np.asarray(an.spectral_perturb(basis, x, band=2, magnitude=1.0, seed=5))
        c = np.asarray(an.spectral_perturb(basis, x, band=2, magnitude=1.0, seed=6))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSpectralEdit:
    def test_gain_two_quadruples_band_energy(self):
        basis = random_basis(seed=16)
        part = an.default_three_band(basis.lambda_max)
        x = np.random.default_rng(17).standard_normal(20)
        before = an.band_energy(basis, x, part)
        out = np.asarray(an.spectral_edit(basis, x, {1: 2.0}, partition=part))
        after = an.band_energy(basis, out, part)
        assert after.energies[1] == pytest.approx(4.0 * before.energies[1], rel=1e-10)
        assert after.energies[0] == pytest.approx(before.energies[0], rel=1e-10)
        assert after.energies[2] == pytest.approx(before.energies[2], rel=1e-10)

    def test_edits_compose_multiplicatively(self):
        basis = random_basis(seed=18)
        x = np.random.default_rng(19).standard_normal(20)
        twice = an.spectral_edit(basis, np.asarray(an.spectral_edit(basis, x, {0: 2.0})),
                                 {0: 3.0})
        once = an.spectral_edit(basis, x, {0: 6.0})
        assert np.allclose(np.asarray(twice), np.asarray(once), atol=1e-12)

    def test_zero_gain_silences_band(self):
        basis = random_basis(seed=20)
        part = an.default_three_band(basis.lambda_max)
        x = np.random.default_rng(21).standard_normal(20)
        out = np.asarray(an.spectral_edit(basis, x, {2: 0.0}, partition=part))
        assert an.band_energy(basis, out, part).energies[2] == pytest.approx(0.0, abs=1e-20)

    def test_duplicate_band_rejected(self):
        basis = p2_basis()
        with pytest.raises(ValueError, match="twice"):
            an.spectral_edit(basis, np.ones(2), [(0, 2.0), (0, 3.0)])

    def test_non_finite_gain_rejected(self):
        basis = p2_basis()
        with pytest.raises(ValueError, match="finite"):
            an.spectral_edit(basis, np.ones(2), {0: float("inf")})


class TestCospectral:
    def test_zero_on_identical_profiles(self):
        a = np.array([1.0, 2.0, 3.0])
        assert an.cospectral_loss(a, a) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(22)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        assert an.cospectral_loss(a, b) == an.cospectral_loss(b, a)

    def test_unit_basis_vectors(self):
        e0 = np.array([1.0, 0.0])
        e1 = np.array([0.0, 1.0])
        assert an.cospectral_loss(e0, e1) == 2.0

    def test_parallelogram_identity(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            a, b = rng.standard_normal(6), rng.standard_normal(6)
            lhs = an.cospectral_loss(a + b, np.zeros(6)) + an.cospectral_loss(a - b, np.zeros(6))
            rhs = 2.0 * (an.cospectral_loss(a, np.zeros(6)) + an.cospectral_loss(b, np.zeros(6)))
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_profile_conserves_energy(self):
        basis = random_basis(n=16, seed=24)
        x = np.random.default_rng(25).standard_normal(16)
        xhat = basis.eigenvectors.T @ x
        profile = an.cospectral_profile(basis.eigenvalues, xhat, points=32)
        assert profile.sum() == pytest.approx(float(xhat @ xhat), rel=1e-12)

    def test_cross_size_loss_finite(self):
        a_basis = random_basis(n=12, seed=26)
        b_basis = random_basis(n=30, seed=27)
        rng = np.random.default_rng(28)
        pa = an.cospectral_profile(a_basis.eigenvalues, rng.standard_normal(12), points=24)
        pb = an.cospectral_profile(b_basis.eigenvalues, rng.standard_normal(30), points=24)
        loss = an.cospectral_loss(pa, pb)
        assert np.isfinite(loss) and loss >= 0


class TestRobustnessDrop:
    def test_low_pass_hurt_more_by_low_band_noise(self):
        from specreason import taskgen as tg
        instances = [tg.gen_community_task(n=80, intra_p=0.2, inter_p=0.02,
                                           seed_fraction=0.1, noise=0.05, seed=s)
                     for s in range(4)]
        model = ft.diffusion(1.0)
        low = an.robustness_drop(model, instances,
                                 an.PerturbConfig(band=0, magnitude=3.0, seed=1))
        high = an.robustness_drop(model, instances,
                                  an.PerturbConfig(band=2, magnitude=3.0, seed=1))
        assert high <= low
