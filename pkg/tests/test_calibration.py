import os

import numpy as np
import pytest

from helpers import exact_phi
from pcmd.calibration import (CalibrationDesign, CalibrationDomain, DrfPolynomial,
                              calibrate_drf, default_design, fit_drf, load_calibration,
                              measure_drf, save_calibration, slab_scan_protocol)
from pcmd.errors import NumericError, PhotonStarvationError
from pcmd.geometry import ScanGeometry


def test_measure_drf_equal_split_gives_log_k():
    k = 8
    counts = np.full((1, k), 1000.0 / k)
    phi = measure_drf(counts, air_total=1000.0)
    assert np.allclose(phi, np.log(k), atol=1e-14)


def test_measure_drf_uniform_attenuation():
    c = 2.7
    counts = 5000.0 * np.exp(-c) * np.ones((4, 6))
    assert np.allclose(measure_drf(counts, 5000.0), c, atol=1e-14)


def test_measure_drf_zero_counts_names_the_pair():
    counts = np.ones((3, 4))
    counts[2, 1] = 0.0
    with pytest.raises(PhotonStarvationError, match=r"\(2, 1\)"):
        measure_drf(counts, 100.0)


def test_measured_samples_match_direct_recomputation(default_spectrum, basis_materials,
                                                     single_channel_geometry):
    design = default_design(points_per_axis=(5, 5))
    scans = slab_scan_protocol(default_spectrum, basis_materials, design,
                               single_channel_geometry, noise=False)
    phi_hat = measure_drf(scans.mean_counts, scans.air_total)
    oracle = exact_phi(default_spectrum, basis_materials, scans.points[0])
    assert np.abs(phi_hat[0] - oracle).max() < 1e-12


def test_fit_recovers_exact_polynomial():
    rng = np.random.default_rng(8)
    domain = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))
    truth = fit_drf(rng.uniform([0, 0], [40, 5], (40, 2)),
                    rng.normal(size=(40, 3)), order=2, domain=domain)
    pts = rng.uniform([0, 0], [40, 5], (60, 2))
    samples = truth.eval(pts, channel=0)
    refit = fit_drf(pts, samples, order=2, domain=domain)
    assert np.abs(refit.theta - truth.theta).max() < 1e-8
    assert refit.fit_residual < 1e-8


def test_fit_idempotence_to_1e10(noiseless_drf):
    # refit on a fresh design grid; the scaled monomial basis keeps this
    # conditioned well below the 1e-10 target (raw cm monomials do not)
    g0 = np.linspace(0.0, 40.0, 12)
    g1 = np.linspace(0.0, 5.0, 12)
    pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    samples = noiseless_drf.eval(pts, channel=0)
    refit = fit_drf(pts, samples, order=noiseless_drf.order, domain=noiseless_drf.domain)
    assert np.abs(refit.theta[0] - noiseless_drf.theta[0]).max() < 1e-10


def test_too_few_points_is_rank_error():
    domain = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))
    with pytest.raises(NumericError, match="cannot determine"):
        fit_drf(np.random.default_rng(0).uniform(size=(10, 2)), np.zeros((10, 2)),
                order=4, domain=domain)


def test_collinear_points_are_rank_deficient():
    domain = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))
    pts = np.stack([np.linspace(0, 40, 30), np.zeros(30)], axis=1)  # all on one axis
    with pytest.raises(NumericError, match="rank-deficient"):
        fit_drf(pts, np.zeros((30, 2)), order=2, domain=domain)


def test_constant_drf_has_zero_gradient():
    domain = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))
    theta = np.zeros((1, 4, 9))
    theta[0, :, 0] = 1.5
    drf = DrfPolynomial(theta=theta, order=2, n_materials=2, domain=domain,
                        basis_scale=np.array([40.0, 5.0]))
    p = np.array([[3.0, 1.0], [10.0, 4.0]])
    assert np.allclose(drf.eval(p), 1.5, atol=1e-15)
    assert not drf.grad(p).any()


def test_linear_drf_gradient_rows():
    # phi = 0.2*p0 + 0.9*p1 + 0.1 per bin, expressed in the scaled basis
    domain = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))
    theta = np.zeros((1, 3, 4))  # order 1 -> powers (0,0),(0,1),(1,0),(1,1)
    theta[0, :, 0] = 0.1
    theta[0, :, 1] = 0.9 * 5.0
    theta[0, :, 2] = 0.2 * 40.0
    drf = DrfPolynomial(theta=theta, order=1, n_materials=2, domain=domain,
                        basis_scale=np.array([40.0, 5.0]))
    g = drf.grad(np.array([7.0, 2.0]))
    assert np.allclose(g, np.tile([0.2, 0.9], (3, 1)), atol=1e-14)


def test_gradient_matches_central_differences(noiseless_drf):
    rng = np.random.default_rng(10)
    p = rng.uniform([0.5, 0.1], [39.5, 4.9], size=(200, 2))
    g = noiseless_drf.grad(p, channel=0)
    h = 1e-5
    for l in range(2):
        e = np.zeros(2)
        e[l] = h
        fd = (noiseless_drf.eval(p + e, 0) - noiseless_drf.eval(p - e, 0)) / (2 * h)
        rel = np.abs(fd - g[:, :, l]) / np.maximum(np.abs(g[:, :, l]), 1e-12)
        assert rel.max() < 1e-6


def test_dense_grid_validation_residual(default_spectrum, basis_materials, noiseless_drf):
    g0 = np.linspace(0.0, 40.0, 81)
    g1 = np.linspace(0.0, 5.0, 81)
    pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    fitted = noiseless_drf.eval(pts, channel=0)
    oracle = exact_phi(default_spectrum, basis_materials, pts)
    assert np.abs(fitted - oracle).max() < 1e-3


def test_response_nearly_affine_in_pathlength(noiseless_drf):
    # narrow bins: quadratic-and-higher coefficients stay small next to linear
    powers = noiseless_drf._powers
    total = powers.sum(axis=1)
    theta = noiseless_drf.theta[0]
    lin = np.linalg.norm(theta[:, total == 1], axis=1)
    high = np.linalg.norm(theta[:, total >= 2], axis=1)
    assert np.all(high <= 0.1 * lin)


def test_air_point_properties(noiseless_drf):
    phi0 = noiseless_drf.eval(np.zeros(2), channel=0)
    assert np.all(phi0 >= 0.0)
    resid = abs(np.exp(-phi0).sum() - 1.0)
    assert resid < max(10 * noiseless_drf.fit_residual, 1e-8)


def test_slab_effective_pathlength_center_and_60_degrees():
    # flat fan detector laid out so an off-center channel sits at gamma = 60 deg
    sdd = 10.0
    offset = np.tan(np.pi / 3.0) * sdd
    geo = ScanGeometry(mode="fan", n_views=1, n_channels=3, spacing=offset,
                       sid=5.0, sdd=sdd)
    gamma = geo.fan_angles()
    assert np.allclose(gamma, [-np.pi / 3, 0.0, np.pi / 3], atol=1e-12)
    design = CalibrationDesign(pathlength_points=np.array([[4.0, 1.0]]), repeats_per_point=1)
    from pcmd.spectrum import filtered_kramers
    from pcmd.materials import load_material

    scans = slab_scan_protocol(filtered_kramers(),
                               [load_material("polyethylene"), load_material("pvc")],
                               design, geo, noise=False)
    assert np.allclose(scans.points[1, 0], [4.0, 1.0], atol=1e-14)       # center channel
    assert np.allclose(scans.points[2, 0], [8.0, 2.0], atol=1e-12)       # 1/cos(60deg) = 2
    assert np.allclose(scans.points[0, 0], scans.points[2, 0], atol=1e-12)


def test_noisy_slab_protocol_within_three_sigma(default_spectrum, basis_materials,
                                                single_channel_geometry):
    design = default_design(repeats=100)
    noiseless = slab_scan_protocol(default_spectrum, basis_materials, design,
                                   single_channel_geometry, air_counts_total=1.0e6,
                                   noise=False)
    noisy = slab_scan_protocol(default_spectrum, basis_materials, design,
                               single_channel_geometry, air_counts_total=1.0e6,
                               noise=True, seed=31)
    phi_ref = measure_drf(noiseless.mean_counts, noiseless.air_total)
    phi_hat = measure_drf(noisy.mean_counts, noisy.air_total)
    # delta method: var(-log(mean)) ~ 1 / (total counts over repeats)
    sigma = 1.0 / np.sqrt(design.repeats_per_point * noiseless.mean_counts)
    assert np.all(np.abs(phi_hat - phi_ref) <= 3.0 * sigma)


def test_parallel_channels_share_coefficients(default_spectrum, basis_materials):
    geo = ScanGeometry(mode="parallel", n_views=1, n_channels=3, spacing=0.1)
    drf = calibrate_drf(default_spectrum, basis_materials,
                        default_design(points_per_axis=(6, 6)), geo, noise=False)
    assert drf.n_channels == 3
    assert np.abs(drf.theta - drf.theta[0]).max() < 1e-12


def test_fan_channels_differ_then_match_after_cos_correction(default_spectrum, basis_materials):
    geo = ScanGeometry(mode="fan", n_views=1, n_channels=5, spacing=4.0, sid=20.0, sdd=40.0)
    drf = calibrate_drf(default_spectrum, basis_materials,
                        default_design(points_per_axis=(6, 6)), geo, noise=False)
    # off-center channel coefficients differ from the center's
    assert np.abs(drf.theta[0] - drf.theta[2]).max() > 1e-6


def test_calibration_container_roundtrip(tmp_path, noiseless_drf):
    path = os.path.join(tmp_path, "cal.pcmdcal")
    save_calibration(path, noiseless_drf)
    back = load_calibration(path)
    assert np.array_equal(back.theta, noiseless_drf.theta)
    assert back.order == noiseless_drf.order
    assert np.array_equal(back.basis_scale, noiseless_drf.basis_scale)
    assert np.array_equal(back.domain.lower, noiseless_drf.domain.lower)
    assert np.array_equal(back.domain.upper, noiseless_drf.domain.upper)
    assert np.array_equal(back.bin_edges, noiseless_drf.bin_edges)
    assert back.fit_residual == noiseless_drf.fit_residual
