"""
Channel Model Module
Pairwise Green's-function propagation, cascaded communication and sensing
channels, LS channel estimation and noisy measurement simulation
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from scene_geometry import Element, PointSet, SceneConfig, element_positions

logger = logging.getLogger(__name__)

# TargetImage: real (N_i,) scattering coefficients; PhaseConfig: complex (N_s,)
TargetImage = np.ndarray
PhaseConfig = np.ndarray


class SingularityError(ValueError):
    """Two points of a propagation pair coincide"""


class EstimationError(ValueError):
    """LS estimation with a singular pilot matrix"""


@dataclass
class Measurement:
    """Vectorized (column-major) estimate of H_sen and the phases it was taken with"""
    h_hat: np.ndarray
    omega_used: PhaseConfig


def check_target_image(sigma: TargetImage, scene: SceneConfig) -> TargetImage:
    """
    Validate length and the [0, 4*pi*S^2/lambda^2] range of a target image.

    A (B, N_i) batch is checked row by row.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim not in (1, 2) or sigma.shape[-1] != scene.n_voxels:
        raise ValueError(f"Target image must have length {scene.n_voxels}, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("Target image holds non-finite entries")
    low, high = sigma.min(initial=0.0), sigma.max(initial=0.0)
    if low < 0 or high > scene.max_scattering * (1 + 1e-12):
        raise ValueError(f"Target image entries must lie in [0, {scene.max_scattering:.6g}], "
                         f"got [{low:.6g}, {high:.6g}]")
    return sigma


def check_unit_modulus(omega: PhaseConfig, tol: float = 1e-12) -> PhaseConfig:
    """Validate |omega_i| = 1 for every RIS element"""
    omega = np.asarray(omega, dtype=complex)
    deviation = np.max(np.abs(np.abs(omega) - 1.0), initial=0.0)
    if deviation > tol:
        raise ValueError(f"RIS phases must be unit-modulus, max deviation {deviation:.3g}")
    return omega


def propagation_matrix(dst: PointSet, src: PointSet, wavelength: float = 1.0) -> np.ndarray:
    """
    Free-space Green's function between two point sets.

    Entry (i, j) = exp(-j*2*pi*d_ij/lambda) / (sqrt(4*pi) * d_ij).

    Args:
        dst: (n_dst, 3) destination points (rows)
        src: (n_src, 3) source points (columns)

    Raises:
        SingularityError: a destination point coincides with a source point
    """
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    src = np.atleast_2d(np.asarray(src, dtype=float))
    distance = np.linalg.norm(dst[:, None, :] - src[None, :, :], axis=-1)

    coincident = np.argwhere(distance < 1e-12)
    if coincident.size:
        i, j = coincident[0]
        raise SingularityError(f"Coincident points: destination {i} and source {j} "
                               f"({len(coincident)} pair(s) in total)")

    return np.exp(-2j * np.pi * distance / wavelength) / (np.sqrt(4 * np.pi) * distance)


def pilot_matrix(scheme: str, n_tx: int) -> np.ndarray:
    """N_t x N_t pilot matrix with unit-norm columns"""
    if scheme == 'identity':
        return np.eye(n_tx, dtype=complex)
    if scheme == 'dft':
        k = np.arange(n_tx)
        return np.exp(-2j * np.pi * np.outer(k, k) / n_tx) / np.sqrt(n_tx)
    raise ValueError(f"Unknown pilot scheme {scheme!r}")


def ls_estimate(received: np.ndarray, pilots: np.ndarray, tx_power_linear: float) -> np.ndarray:
    """
    Least-squares channel estimate from N_t pilot symbols.

    Args:
        received: N_r x N_t received signals, one column per pilot symbol
        pilots: N_t x N_t pilot matrix
        tx_power_linear: P_t in watts

    Returns:
        (1/sqrt(P_t)) * received * pilots^-1

    Raises:
        EstimationError: singular pilot matrix or non-positive power
    """
    if not tx_power_linear > 0:
        raise EstimationError(f"Transmit power must be positive, got {tx_power_linear}")
    pilots = np.asarray(pilots, dtype=complex)
    if pilots.shape[0] != pilots.shape[1] or np.linalg.matrix_rank(pilots) < pilots.shape[0]:
        raise EstimationError(f"Pilot matrix of shape {pilots.shape} is not invertible")
    # received @ inv(pilots) == solve(pilots^T, received^T)^T
    estimate = np.linalg.solve(pilots.T, np.asarray(received, dtype=complex).T).T
    return estimate / np.sqrt(tx_power_linear)


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-major vectorization"""
    return np.asarray(matrix).reshape(-1, order='F')


class ChannelModel:
    """
    Propagation matrices of one scene, with the composed channels of the
    communication link and the sensing link.

    Naming follows H_<from>_<to>: rows index the destination elements,
    columns the source elements.
    """

    def __init__(self, scene: SceneConfig):
        self.scene = scene
        lam = scene.wavelength

        tx = element_positions(scene, Element.TX)
        rx = element_positions(scene, Element.RX)
        ris = element_positions(scene, Element.RIS)
        roi = element_positions(scene, Element.ROI)
        ue = element_positions(scene, Element.UE)

        # Communication link
        self.h_tx_ue = propagation_matrix(tx, ue, lam)[:, 0]        # (N_t,)
        self.H_ris_tx = propagation_matrix(tx, ris, lam)            # (N_t, N_s)
        self.H_roi_tx = propagation_matrix(tx, roi, lam)            # (N_t, N_i)
        self.h_ue_ris = propagation_matrix(ris, ue, lam)[:, 0]      # (N_s,)
        self.h_ue_roi = propagation_matrix(roi, ue, lam)[:, 0]      # (N_i,)

        # RIS <-> ROI
        self.H_ris_roi = propagation_matrix(roi, ris, lam)          # (N_i, N_s)
        self.H_roi_ris = propagation_matrix(ris, roi, lam)          # (N_s, N_i)

        # Sensing link
        self.H_tx_ris = propagation_matrix(ris, tx, lam)            # (N_s, N_t)
        self.H_tx_roi = propagation_matrix(roi, tx, lam)            # (N_i, N_t)
        self.H_ris_rx = propagation_matrix(rx, ris, lam)            # (N_r, N_s)
        self.H_roi_rx = propagation_matrix(rx, roi, lam)            # (N_r, N_i)

        self.pilots = pilot_matrix(scene.pilots, scene.n_tx)

        logger.debug(f"ChannelModel initialized: N_t={scene.n_tx}, N_r={scene.n_rx}, "
                     f"N_s={scene.n_ris}, N_i={scene.n_voxels}")

    def _check_dims(self, sigma: np.ndarray, omega: np.ndarray):
        if np.shape(sigma)[-1] != self.scene.n_voxels:
            raise ValueError(f"sigma has length {np.shape(sigma)[-1]}, expected {self.scene.n_voxels}")
        check_target_image(sigma, self.scene)
        if np.shape(omega)[-1] != self.scene.n_ris:
            raise ValueError(f"omega has length {np.shape(omega)[-1]}, expected {self.scene.n_ris}")

    def comm_channel(self, sigma: TargetImage, omega: PhaseConfig) -> np.ndarray:
        """h_com: LOS + RIS + ROI single-bounce + both twice-bounce paths, length N_t"""
        self._check_dims(sigma, omega)
        sigma = np.asarray(sigma, dtype=float)
        omega = np.asarray(omega, dtype=complex)

        h_tx_ris_ue = self.H_ris_tx @ (omega * self.h_ue_ris)
        h_tx_roi_ue = self.H_roi_tx @ (sigma * self.h_ue_roi)
        h_tx_ris_roi_ue = self.H_roi_tx @ (sigma * (self.H_ris_roi @ (omega * self.h_ue_ris)))
        h_tx_roi_ris_ue = self.H_ris_tx @ (omega * (self.H_roi_ris @ (sigma * self.h_ue_roi)))

        return self.h_tx_ue + h_tx_ris_ue + h_tx_roi_ue + h_tx_ris_roi_ue + h_tx_roi_ris_ue

    def sensing_channel(self, sigma: TargetImage, omega: PhaseConfig) -> np.ndarray:
        """H_sen (N_r x N_t); the direct TX->RX path is removed"""
        self._check_dims(sigma, omega)
        sigma = np.asarray(sigma, dtype=float)
        omega = np.asarray(omega, dtype=complex)

        H_tx_ris_rx = self.H_ris_rx @ (omega[:, None] * self.H_tx_ris)
        H_tx_roi_rx = self.H_roi_rx @ (sigma[:, None] * self.H_tx_roi)
        H_tx_ris_roi_rx = self.H_roi_rx @ (sigma[:, None] * (self.H_ris_roi @ (omega[:, None] * self.H_tx_ris)))
        H_tx_roi_ris_rx = self.H_ris_rx @ (omega[:, None] * (self.H_roi_ris @ (sigma[:, None] * self.H_tx_roi)))

        return H_tx_ris_rx + H_tx_roi_rx + H_tx_ris_roi_rx + H_tx_roi_ris_rx

    def sensing_affine_terms(self, sigma_batch: np.ndarray,
                             include_ris: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """
        Affine decomposition of f_phy in omega for a batch of fixed targets.

        f_phy(sigma_b, omega) = A[b] @ omega + c[b]

        Args:
            sigma_batch: (B, N_i) target images
            include_ris: False drops every RIS-bearing path (no-RIS scene)

        Returns:
            A: (B, N_t*N_r, N_s) complex, c: (B, N_t*N_r) complex, both in
            column-major vec order (index t*N_r + r)
        """
        sigma_batch = check_target_image(np.atleast_2d(np.asarray(sigma_batch, dtype=float)), self.scene)
        B = sigma_batch.shape[0]
        scene = self.scene

        P_sigma = self.H_roi_rx[None, :, :] * sigma_batch[:, None, :]       # (B, N_r, N_i)
        c = P_sigma @ self.H_tx_roi                                          # (B, N_r, N_t)
        c = np.transpose(c, (0, 2, 1)).reshape(B, scene.n_meas)

        if not include_ris:
            return np.zeros((B, scene.n_meas, scene.n_ris), dtype=complex), c

        X = P_sigma @ self.H_ris_roi                                         # (B, N_r, N_s)
        Y = (self.H_roi_ris[None, :, :] * sigma_batch[:, None, :]) @ self.H_tx_roi  # (B, N_s, N_t)

        # A[b, r, t, s] = (R + X_b)[r, s] T[s, t] + R[r, s] Y_b[s, t]
        R = self.H_ris_rx
        T = self.H_tx_ris
        A = np.einsum('brs,st->btrs', R[None] + X, T) + np.einsum('rs,bst->btrs', R, Y)
        return A.reshape(B, scene.n_meas, scene.n_ris), c

    def f_phy(self, sigma: TargetImage, omega: PhaseConfig) -> np.ndarray:
        """vec(H_sen), length N_t*N_r"""
        return vec(self.sensing_channel(sigma, omega))

    def estimation_noise(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        """
        LS estimation error for `count` independent measurements.

        The RX noise N (N_r x N_t per measurement) is circularly-symmetric
        complex Gaussian with the rx_noise_dbm power split evenly between the
        real and imaginary parts; the estimate carries vec(N pilots^-1)/sqrt(P_t).

        Returns:
            (count, N_t*N_r) complex array, all zeros when noise is disabled
        """
        scene = self.scene
        noise_power = scene.rx_noise_watts
        shape = (count, scene.n_rx, scene.n_tx)
        if noise_power == 0:
            return np.zeros((count, scene.n_meas), dtype=complex)

        std = np.sqrt(noise_power / 2.0)
        noise = std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        if scene.pilots == 'identity':
            estimate = noise / np.sqrt(scene.tx_power_watts)
        else:
            estimate = np.stack([ls_estimate(n, self.pilots, scene.tx_power_watts) for n in noise])
        return np.transpose(estimate, (0, 2, 1)).reshape(count, scene.n_meas)


@lru_cache(maxsize=16)
def get_channel_model(scene: SceneConfig) -> ChannelModel:
    """Cached ChannelModel per scene"""
    return ChannelModel(scene)


def comm_channel(scene: SceneConfig, sigma: TargetImage, omega: PhaseConfig) -> np.ndarray:
    """Communication channel h_com(sigma, omega), length N_t"""
    return get_channel_model(scene).comm_channel(sigma, omega)


def sensing_channel(scene: SceneConfig, sigma: TargetImage, omega: PhaseConfig) -> np.ndarray:
    """Sensing channel H_sen(sigma, omega), N_r x N_t"""
    return get_channel_model(scene).sensing_channel(sigma, omega)


def f_phy(sigma: TargetImage, omega: PhaseConfig, scene: SceneConfig) -> np.ndarray:
    """Physical model: vec(H_sen), no learnable parameters"""
    return get_channel_model(scene).f_phy(sigma, omega)


def simulate_measurement(scene: SceneConfig, sigma: TargetImage, omega: PhaseConfig,
                         rng_seed: Optional[int] = None) -> Measurement:
    """
    Noisy LS measurement of the sensing channel, deterministic given the seed.

    h_hat = f_phy(sigma, omega) + vec(N pilots^-1) / sqrt(P_t)
    """
    model = get_channel_model(scene)
    rng = np.random.default_rng(rng_seed)
    clean = model.f_phy(sigma, omega)
    return Measurement(h_hat=clean + model.estimation_noise(rng, 1)[0],
                       omega_used=np.asarray(omega, dtype=complex))


def complex_to_real_operator(A: np.ndarray) -> np.ndarray:
    """
    Real block form of a batch of complex matrices.

    [[Re A, -Im A], [Im A, Re A]] so that the stacked (re, im) vector of A @ x
    equals the block matrix applied to the stacked (re, im) vector of x.
    """
    top = np.concatenate([A.real, -A.imag], axis=-1)
    bottom = np.concatenate([A.imag, A.real], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def stack_real(z: np.ndarray) -> np.ndarray:
    """Stack real parts then imaginary parts along the last axis"""
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1)


def write_complex_csv(path: str, matrix: np.ndarray):
    """Row-major CSV with one "re,im" cell per entry (debug dumps)"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=complex))
    cells = [[f"{v.real:.17g},{v.imag:.17g}" for v in row] for row in matrix]
    pd.DataFrame(cells).to_csv(path, header=False, index=False)
    logger.debug(f"Complex matrix {matrix.shape} written to {path}")
