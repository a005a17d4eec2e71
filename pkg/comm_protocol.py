"""
Comm Protocol Module
Spectral efficiency of the downlink, frame-averaged SE under the
time-division sensing protocol, and the communication phase optimizer
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from channel_model import check_target_image, check_unit_modulus, get_channel_model
from scene_geometry import SceneConfig

logger = logging.getLogger(__name__)

SE_TABLE_COLUMNS = ['ris_size', 'se_com', 'se_sen', 'se_avg', 'se_loss_percent']


@dataclass(frozen=True)
class ProtocolConfig:
    """
    Frame layout: every frame carries n_symbols OFDM symbols, the last
    sensing_symbols of them carry sensing pilots.
    """
    mu: int = 1
    sensing_symbols: int = 2
    frames_per_decision: int = config.DEFAULT_K
    frame_seconds: float = config.FRAME_SECONDS

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"Numerology mu must be >= 0, got {self.mu}")
        if not 0 <= self.sensing_symbols <= self.n_symbols:
            raise ValueError(f"sensing_symbols must lie in [0, {self.n_symbols}], got {self.sensing_symbols}")
        if self.frames_per_decision < 1:
            raise ValueError(f"frames_per_decision must be >= 1, got {self.frames_per_decision}")

    @property
    def n_symbols(self) -> int:
        """N0 = 140 * 2^mu"""
        return config.SYMBOLS_PER_FRAME_MU0 * 2 ** self.mu

    @property
    def sensing_share(self) -> float:
        return self.sensing_symbols / self.n_symbols

    def recognition_time(self, k: Optional[int] = None) -> float:
        """Seconds needed to collect K sensing measurements, one per frame"""
        return (self.frames_per_decision if k is None else k) * self.frame_seconds


@dataclass
class SeReport:
    se_com: float
    se_sen: float
    se_avg: float
    se_loss_fraction: float
    ris_size: str = ''

    @property
    def se_loss_percent(self) -> float:
        return 100.0 * self.se_loss_fraction


@dataclass
class CommPhaseResult:
    """Outcome of the block-coordinate ascent"""
    omega: np.ndarray
    objective: float
    converged: bool
    iterations: int
    trace: List[float] = field(default_factory=list)


def se_from_snr(snr: float) -> float:
    return float(np.log2(1.0 + snr))


def spectral_efficiency(scene: SceneConfig, sigma: np.ndarray, omega: np.ndarray) -> float:
    """log2(1 + P_t * ||h_com||^2 / noise) in bits/s/Hz, powers in watts"""
    h_com = get_channel_model(scene).comm_channel(sigma, omega)
    gain = float(np.vdot(h_com, h_com).real)
    if gain == 0.0:
        return 0.0
    if scene.ue_noise_watts == 0.0:
        raise ValueError("SE is unbounded without UE noise")
    return se_from_snr(scene.tx_power_watts * gain / scene.ue_noise_watts)


def average_se(se_com: float, se_sen: float, protocol: ProtocolConfig, ris_size: str = '') -> SeReport:
    """Symbol-weighted SE of a frame: communication symbols at se_com, sensing symbols at se_sen"""
    if se_com < 0 or se_sen < 0:
        raise ValueError(f"SE values must be >= 0, got {se_com}, {se_sen}")
    share = protocol.sensing_share
    se_avg = (1.0 - share) * se_com + share * se_sen
    loss = (se_com - se_avg) / se_com if se_com > 0 else 0.0
    return SeReport(se_com, se_sen, se_avg, loss, ris_size)


def build_comm_objective(scene: SceneConfig, sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Affine form of the communication channel in the RIS phases.

    h_com(omega) = H_b @ omega + h_a

    Returns:
        (H_b (N_t, N_s), h_a (N_t,))
    """
    model = get_channel_model(scene)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (scene.n_voxels,):
        raise ValueError(f"sigma must have length {scene.n_voxels}, got shape {sigma.shape}")
    check_target_image(sigma, scene)

    scattered_ue = sigma * model.h_ue_roi
    h_a = model.h_tx_ue + model.H_roi_tx @ scattered_ue
    # UE -> RIS directly and via the ROI
    h_c = model.h_ue_ris + model.H_roi_ris @ scattered_ue
    H_a = model.H_roi_tx @ (sigma[:, None] * model.H_ris_roi)
    H_b = model.H_ris_tx * h_c[None, :] + H_a * model.h_ue_ris[None, :]
    return H_b, h_a


def comm_objective(H_b: np.ndarray, h_a: np.ndarray, omega: np.ndarray) -> float:
    """||H_b omega + h_a||^2"""
    h = H_b @ omega + h_a
    return float(np.vdot(h, h).real)


def maximize_unit_modulus(H_b: np.ndarray, h_a: np.ndarray, tol: float = config.BCD_TOLERANCE,
                          max_iters: int = config.BCD_MAX_ITERS,
                          omega0: Optional[np.ndarray] = None) -> CommPhaseResult:
    """
    Element-wise block-coordinate ascent of ||H_b omega + h_a||^2 over |omega_n| = 1.

    With the other elements fixed, element n is set to exp(j*arg(b_n^H r)),
    r being the channel without element n's contribution; an element whose
    b_n^H r vanishes keeps its value. One sweep over all elements is one
    iteration. Stops when the relative improvement of a sweep drops below tol.

    Returns:
        CommPhaseResult; converged is False when max_iters was reached
    """
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    H_b = np.atleast_2d(np.asarray(H_b, dtype=complex))
    h_a = np.asarray(h_a, dtype=complex)
    n_ris = H_b.shape[1]

    omega = np.ones(n_ris, dtype=complex) if omega0 is None else check_unit_modulus(omega0).copy()
    h = H_b @ omega + h_a
    objective = float(np.vdot(h, h).real)
    trace = [objective]
    converged = False

    iteration = 0
    for iteration in range(1, max_iters + 1):
        for n in range(n_ris):
            b_n = H_b[:, n]
            residual = h - b_n * omega[n]
            corr = np.vdot(b_n, residual)
            if corr != 0:
                omega[n] = np.exp(1j * np.angle(corr))
            h = residual + b_n * omega[n]

        # Recompute from scratch so rounding in the running sum does not accumulate
        h = H_b @ omega + h_a
        new_objective = float(np.vdot(h, h).real)
        improvement = (new_objective - objective) / objective if objective > 0 else new_objective
        objective = max(objective, new_objective)
        trace.append(objective)
        if improvement < tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Comm phase optimizer stopped after {max_iters} iterations "
                       f"without reaching tol={tol}")
    return CommPhaseResult(omega=omega, objective=objective, converged=converged,
                           iterations=iteration, trace=trace)


def optimize_comm_phase(scene: SceneConfig, sigma: np.ndarray, tol: float = config.BCD_TOLERANCE,
                        max_iters: int = config.BCD_MAX_ITERS) -> CommPhaseResult:
    """omega_com maximizing the downlink SE for target sigma, starting from all-ones"""
    H_b, h_a = build_comm_objective(scene, sigma)
    result = maximize_unit_modulus(H_b, h_a, tol=tol, max_iters=max_iters)
    logger.info(f"Comm phase optimized: objective {result.objective:.4e} after "
                f"{result.iterations} iterations (converged={result.converged})")
    return result


def se_report(scene: SceneConfig, sigma: np.ndarray, omega_sen_list: Sequence[np.ndarray],
              protocol: ProtocolConfig, omega_com: Optional[np.ndarray] = None) -> SeReport:
    """
    SE(omega_com), mean SE over the sensing configurations and their frame average.

    Raises:
        ValueError: empty sensing phase list
    """
    if len(omega_sen_list) == 0:
        raise ValueError("At least one sensing phase configuration is required")
    if omega_com is None:
        omega_com = optimize_comm_phase(scene, sigma).omega
    se_com = spectral_efficiency(scene, sigma, omega_com)
    se_sen = float(np.mean([spectral_efficiency(scene, sigma, check_unit_modulus(w, 1e-9))
                            for w in omega_sen_list]))
    return average_se(se_com, se_sen, protocol, ris_size=f"{scene.ris_rows}x{scene.ris_cols}")


def se_table(scenes: Sequence[SceneConfig], sigma: np.ndarray,
             omega_sen_lists: Sequence[Sequence[np.ndarray]],
             protocol: ProtocolConfig) -> List[SeReport]:
    """One SeReport per RIS size; scenes and phase lists are paired in order"""
    if len(scenes) != len(omega_sen_lists):
        raise ValueError(f"{len(scenes)} scenes but {len(omega_sen_lists)} phase lists")
    reports = []
    for scene, omegas in zip(scenes, omega_sen_lists):
        report = se_report(scene, sigma, omegas, protocol)
        logger.info(f"RIS {report.ris_size}: se_com={report.se_com:.3f} se_sen={report.se_sen:.3f} "
                    f"se_avg={report.se_avg:.3f} loss={report.se_loss_percent:.3f}%")
        reports.append(report)
    return reports


def se_table_frame(reports: Sequence[SeReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        row = asdict(report)
        row['se_loss_percent'] = report.se_loss_percent
        rows.append(row)
    return pd.DataFrame(rows, columns=SE_TABLE_COLUMNS)


def write_se_table(reports: Sequence[SeReport], path: str):
    se_table_frame(reports).to_csv(path, index=False)
    logger.info(f"SE table with {len(reports)} rows written to {path}")
