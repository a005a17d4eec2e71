"""
Tests for propagation, composed channels, LS estimation and measurement noise
"""

import numpy as np
import pytest

from channel_model import (ChannelModel, EstimationError, SingularityError, check_target_image,
                           comm_channel, complex_to_real_operator, f_phy, ls_estimate, pilot_matrix,
                           propagation_matrix, sensing_channel, simulate_measurement, stack_real, vec,
                           write_complex_csv)
from scene_geometry import Element, SceneConfig, element_positions


def green(a, b):
    d = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return np.exp(-2j * np.pi * d) / (np.sqrt(4 * np.pi) * d)


def random_scene(rng) -> SceneConfig:
    axis = rng.normal(size=3)
    return SceneConfig(
        tx_position=tuple(rng.uniform(10, 30, size=3)),
        tx_axis=tuple(axis / np.linalg.norm(axis)),
        n_tx=int(rng.integers(1, 4)),
        rx_position=tuple(rng.uniform(10, 30, size=3) + np.array([0.0, 40.0, 0.0])),
        n_rx=int(rng.integers(1, 4)),
        ris_rows=int(rng.integers(1, 4)),
        ris_cols=int(rng.integers(1, 4)),
        roi_center=(float(rng.uniform(15, 25)), float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5))),
        roi_side_voxels=int(rng.integers(1, 4)),
        ue_position=tuple(rng.uniform(-30, -10, size=3)),
    )


def oracle_channels(scene, sigma, omega):
    """Path-by-path summation of every propagation path"""
    tx = element_positions(scene, Element.TX)
    rx = element_positions(scene, Element.RX)
    ris = element_positions(scene, Element.RIS)
    roi = element_positions(scene, Element.ROI)
    ue = element_positions(scene, Element.UE)[0]

    h_com = np.zeros(len(tx), dtype=complex)
    for t, p_t in enumerate(tx):
        total = green(p_t, ue)
        for s, p_s in enumerate(ris):
            total += green(p_t, p_s) * omega[s] * green(p_s, ue)
        for i, p_i in enumerate(roi):
            total += green(p_t, p_i) * sigma[i] * green(p_i, ue)
            for s, p_s in enumerate(ris):
                total += green(p_t, p_i) * sigma[i] * green(p_i, p_s) * omega[s] * green(p_s, ue)
                total += green(p_t, p_s) * omega[s] * green(p_s, p_i) * sigma[i] * green(p_i, ue)
        h_com[t] = total

    H_sen = np.zeros((len(rx), len(tx)), dtype=complex)
    for r, p_r in enumerate(rx):
        for t, p_t in enumerate(tx):
            total = 0j
            for s, p_s in enumerate(ris):
                total += green(p_r, p_s) * omega[s] * green(p_s, p_t)
            for i, p_i in enumerate(roi):
                total += green(p_r, p_i) * sigma[i] * green(p_i, p_t)
                for s, p_s in enumerate(ris):
                    total += green(p_r, p_i) * sigma[i] * green(p_i, p_s) * omega[s] * green(p_s, p_t)
                    total += green(p_r, p_s) * omega[s] * green(p_s, p_i) * sigma[i] * green(p_i, p_t)
            H_sen[r, t] = total
    return h_com, H_sen


def random_inputs(scene, rng):
    sigma = rng.uniform(0, scene.max_scattering, size=scene.n_voxels)
    omega = np.exp(1j * rng.uniform(0, 2 * np.pi, size=scene.n_ris))
    return sigma, omega


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_propagation_matrix_entry():
    dst = np.array([[0.0, 0.0, 0.0]])
    src = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.25]])
    H = propagation_matrix(dst, src)
    assert H.shape == (1, 2)
    assert H[0, 0] == pytest.approx(np.exp(-2j * np.pi * 5.0) / (np.sqrt(4 * np.pi) * 5.0), rel=1e-14)
    assert abs(H[0, 1]) == pytest.approx(1 / (np.sqrt(4 * np.pi) * 2.25), rel=1e-14)


def test_propagation_reciprocity():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)) + 10
    np.testing.assert_allclose(propagation_matrix(a, b), propagation_matrix(b, a).T, rtol=1e-14)


def test_coincident_points_raise():
    points = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    with pytest.raises(SingularityError, match="destination 0 and source 0"):
        propagation_matrix(points[:1], points)


def test_composed_channels_match_path_oracle():
    rng = np.random.default_rng(42)
    for _ in range(50):
        scene = random_scene(rng)
        sigma, omega = random_inputs(scene, rng)
        h_oracle, H_oracle = oracle_channels(scene, sigma, omega)
        assert rel_err(comm_channel(scene, sigma, omega), h_oracle) < 1e-12
        assert rel_err(sensing_channel(scene, sigma, omega), H_oracle) < 1e-12


def test_f_phy_is_column_major_vec():
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3, n_tx=2, n_rx=3)
    sigma, omega = random_inputs(scene, np.random.default_rng(1))
    H = sensing_channel(scene, sigma, omega)
    h = f_phy(sigma, omega, scene)
    assert h.shape == (6,)
    # index t * N_r + r
    assert h[1 * 3 + 2] == H[2, 1]
    np.testing.assert_array_equal(h, vec(H))


def test_f_phy_linear_in_sigma_beyond_the_ris_path():
    scene = SceneConfig(ris_rows=3, ris_cols=3, roi_side_voxels=3)
    rng = np.random.default_rng(2)
    sigma1, omega = random_inputs(scene, rng)
    sigma2, _ = random_inputs(scene, rng)
    sigma1, sigma2 = 0.5 * sigma1, 0.5 * sigma2
    base = f_phy(np.zeros(scene.n_voxels), omega, scene)

    def g(sigma):
        return f_phy(sigma, omega, scene) - base

    combo = g(0.3 * sigma1 + 1.7 * sigma2)
    expected = 0.3 * g(sigma1) + 1.7 * g(sigma2)
    assert rel_err(combo, expected) < 1e-10


def test_f_phy_affine_in_omega():
    scene = SceneConfig(ris_rows=3, ris_cols=3, roi_side_voxels=3)
    rng = np.random.default_rng(3)
    sigma, omega1 = random_inputs(scene, rng)
    _, omega2 = random_inputs(scene, rng)
    a = 0.25
    mixed = f_phy(sigma, a * omega1 + (1 - a) * omega2, scene)
    expected = a * f_phy(sigma, omega1, scene) + (1 - a) * f_phy(sigma, omega2, scene)
    assert rel_err(mixed, expected) < 1e-10


def test_affine_terms_reproduce_f_phy():
    scene = SceneConfig(n_tx=2, n_rx=3, ris_rows=2, ris_cols=3, roi_side_voxels=3)
    rng = np.random.default_rng(4)
    model = ChannelModel(scene)
    sigmas = rng.uniform(0, scene.max_scattering, size=(5, scene.n_voxels))
    omegas = np.exp(1j * rng.uniform(0, 2 * np.pi, size=(5, scene.n_ris)))
    A, c = model.sensing_affine_terms(sigmas)
    assert A.shape == (5, 6, 6) and c.shape == (5, 6)
    for b in range(5):
        assert rel_err(A[b] @ omegas[b] + c[b], model.f_phy(sigmas[b], omegas[b])) < 1e-12


def test_affine_terms_without_ris_keep_only_roi_path():
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3)
    model = ChannelModel(scene)
    sigma = np.random.default_rng(5).uniform(0, 1, size=scene.n_voxels)
    A, c = model.sensing_affine_terms(sigma[None, :], include_ris=False)
    assert not np.any(A)
    direct = model.H_roi_rx @ (sigma[:, None] * model.H_tx_roi)
    assert rel_err(c[0], vec(direct)) < 1e-12


def test_real_operator_matches_complex_product():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(3, 4, 5)) + 1j * rng.normal(size=(3, 4, 5))
    x = rng.normal(size=(3, 5)) + 1j * rng.normal(size=(3, 5))
    real = np.einsum('bmn,bn->bm', complex_to_real_operator(A), stack_real(x))
    np.testing.assert_allclose(real, stack_real(np.einsum('bmn,bn->bm', A, x)), rtol=0, atol=1e-12)


@pytest.mark.parametrize("scheme", ["identity", "dft"])
def test_ls_estimate_exact_without_noise(scheme):
    rng = np.random.default_rng(7)
    H = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    pilots = pilot_matrix(scheme, 4)
    power = 0.1
    received = np.sqrt(power) * H @ pilots
    assert rel_err(ls_estimate(received, pilots, power), H) < 1e-12


def test_ls_estimate_rejects_singular_pilots():
    with pytest.raises(EstimationError):
        ls_estimate(np.ones((2, 2)), np.ones((2, 2)), 1.0)


def test_dft_pilots_have_unit_norm_columns():
    pilots = pilot_matrix('dft', 4)
    np.testing.assert_allclose(np.linalg.norm(pilots, axis=0), 1.0)


@pytest.mark.slow
@pytest.mark.parametrize("pilots", ["identity", "dft"])
def test_estimation_noise_variance(pilots):
    # P_t = 30 dBm (1 W), noise -80 dBm -> per-entry variance 1e-11
    scene = SceneConfig(tx_power_dbm=30.0, rx_noise_dbm=-80.0, ris_rows=2, ris_cols=2,
                        roi_side_voxels=2, pilots=pilots)
    noise = ChannelModel(scene).estimation_noise(np.random.default_rng(8), 100000)
    assert noise.shape == (100000, 4)
    assert np.mean(np.abs(noise) ** 2) == pytest.approx(1e-11, rel=0.02)
    assert abs(np.mean(noise)) < 1e-7


def test_noise_free_measurement_equals_f_phy():
    scene = SceneConfig(rx_noise_dbm=float('-inf'), ris_rows=2, ris_cols=2, roi_side_voxels=3)
    sigma, omega = random_inputs(scene, np.random.default_rng(9))
    measurement = simulate_measurement(scene, sigma, omega, rng_seed=1)
    np.testing.assert_array_equal(measurement.h_hat, f_phy(sigma, omega, scene))
    np.testing.assert_array_equal(measurement.omega_used, omega)


def test_measurement_is_seed_deterministic():
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3)
    sigma, omega = random_inputs(scene, np.random.default_rng(10))
    a = simulate_measurement(scene, sigma, omega, rng_seed=[3, 1])
    b = simulate_measurement(scene, sigma, omega, rng_seed=[3, 1])
    c = simulate_measurement(scene, sigma, omega, rng_seed=[3, 2])
    np.testing.assert_array_equal(a.h_hat, b.h_hat)
    assert not np.array_equal(a.h_hat, c.h_hat)


def test_dimension_mismatch_rejected():
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3)
    with pytest.raises(ValueError):
        sensing_channel(scene, np.zeros(8), np.ones(4))
    with pytest.raises(ValueError):
        comm_channel(scene, np.zeros(9), np.ones(5))


@pytest.mark.parametrize("value", [-1.0, 4.0 * np.pi * 1.01, np.nan])
def test_out_of_range_target_image_rejected(value):
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3)
    sigma = np.full(scene.n_voxels, 1.0)
    sigma[4] = value
    omega = np.ones(scene.n_ris)
    with pytest.raises(ValueError, match="Target image"):
        f_phy(sigma, omega, scene)
    with pytest.raises(ValueError, match="Target image"):
        comm_channel(scene, sigma, omega)
    with pytest.raises(ValueError, match="Target image"):
        ChannelModel(scene).sensing_affine_terms(np.stack([np.ones(scene.n_voxels), sigma]))
    with pytest.raises(ValueError, match="Target image"):
        simulate_measurement(scene, sigma, omega, rng_seed=0)


def test_target_image_bounds_are_inclusive():
    scene = SceneConfig(ris_rows=2, ris_cols=2, roi_side_voxels=3)
    edge = np.zeros(scene.n_voxels)
    edge[0] = scene.max_scattering
    np.testing.assert_array_equal(check_target_image(edge, scene), edge)
    assert np.all(np.isfinite(f_phy(edge, np.ones(scene.n_ris), scene)))


def test_write_complex_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_complex_csv(str(path), np.array([[1 + 2j, 0.5 - 0.5j]]))
    assert path.read_text().strip() == '"1,2","0.5,-0.5"'
