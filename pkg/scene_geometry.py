"""
Scene Geometry Module
3D layout of the TX/RX arrays, the RIS, the ROI voxel grid and the UE
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, Tuple

import numpy as np
from dotenv import dotenv_values

import config

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]

# A PointSet is an (n, 3) float array of element centers in wavelength units
PointSet = np.ndarray


class Element(Enum):
    """Arrays and grids that make up the scene"""
    TX = "TX"
    RX = "RX"
    RIS = "RIS"
    ROI = "ROI"
    UE = "UE"


def dbm_to_watts(p_dbm: float) -> float:
    """dBm -> linear watts; -inf maps to 0 W"""
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watts_to_dbm(p_watts: float) -> float:
    """Linear watts -> dBm; 0 W maps to -inf"""
    if p_watts <= 0:
        return float('-inf')
    return 10.0 * math.log10(p_watts) + 30.0


@dataclass(frozen=True)
class SceneConfig:
    """
    Geometry and radio constants of one scene.

    Coordinates are in multiples of the wavelength (wavelength = 1 internally),
    powers in dBm. Frozen and hashable so channel models can be cached per scene.
    """
    wavelength: float = config.DEFAULT_SCENE['wavelength']
    tx_position: Vector3 = config.DEFAULT_SCENE['tx_position']
    tx_axis: Vector3 = config.DEFAULT_SCENE['tx_axis']
    n_tx: int = config.DEFAULT_SCENE['n_tx']
    rx_position: Vector3 = config.DEFAULT_SCENE['rx_position']
    rx_axis: Vector3 = config.DEFAULT_SCENE['rx_axis']
    n_rx: int = config.DEFAULT_SCENE['n_rx']
    ris_origin: Vector3 = config.DEFAULT_SCENE['ris_origin']
    ris_rows: int = config.DEFAULT_SCENE['ris_rows']
    ris_cols: int = config.DEFAULT_SCENE['ris_cols']
    element_pitch: float = config.DEFAULT_SCENE['element_pitch']
    roi_center: Vector3 = config.DEFAULT_SCENE['roi_center']
    roi_side_voxels: int = config.DEFAULT_SCENE['roi_side_voxels']
    voxel_pitch: float = config.DEFAULT_SCENE['voxel_pitch']
    ue_position: Vector3 = config.DEFAULT_SCENE['ue_position']
    tx_power_dbm: float = config.DEFAULT_SCENE['tx_power_dbm']
    ue_noise_dbm: float = config.DEFAULT_SCENE['ue_noise_dbm']
    rx_noise_dbm: float = config.DEFAULT_SCENE['rx_noise_dbm']
    pilots: str = config.DEFAULT_SCENE['pilots']

    def __post_init__(self):
        for name in ('tx_position', 'tx_axis', 'rx_position', 'rx_axis', 'ris_origin',
                     'roi_center', 'ue_position'):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self._validate()

    def _validate(self):
        """Validate the scene invariants"""
        for name in ('n_tx', 'n_rx', 'ris_rows', 'ris_cols', 'roi_side_voxels'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ('wavelength', 'element_pitch', 'voxel_pitch'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ('tx_axis', 'rx_axis'):
            norm = float(np.linalg.norm(getattr(self, name)))
            if abs(norm - 1.0) > 1e-12:
                raise ValueError(f"{name} must have unit norm, got norm {norm}")
        for name in ('tx_position', 'rx_position', 'ris_origin', 'roi_center', 'ue_position',
                     'tx_axis', 'rx_axis'):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} must be a 3-vector")
        if self.pilots not in config.PILOT_SCHEMES:
            raise ValueError(f"pilots must be one of {config.PILOT_SCHEMES}, got {self.pilots!r}")

    @property
    def n_ris(self) -> int:
        """N_s"""
        return self.ris_rows * self.ris_cols

    @property
    def n_voxels(self) -> int:
        """N_i"""
        return self.roi_side_voxels ** 2

    @property
    def n_meas(self) -> int:
        """Length of one vectorized sensing measurement, N_t * N_r"""
        return self.n_tx * self.n_rx

    @property
    def distance(self) -> float:
        """D, distance between the RIS and the ROI center"""
        return float(np.linalg.norm(np.subtract(self.roi_center, self.ris_origin)))

    @property
    def voxel_area(self) -> float:
        """S, in squared wavelengths"""
        return self.voxel_pitch ** 2

    @property
    def max_scattering(self) -> float:
        """Upper bound of a voxel scattering coefficient, 4*pi*S^2/lambda^2"""
        return config.RCS_FACTOR * self.voxel_area ** 2 / self.wavelength ** 2

    @property
    def tx_power_watts(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def ue_noise_watts(self) -> float:
        return dbm_to_watts(self.ue_noise_dbm)

    @property
    def rx_noise_watts(self) -> float:
        return dbm_to_watts(self.rx_noise_dbm)

    def with_distance(self, distance: float) -> 'SceneConfig':
        """Move the ROI to [D, 0, 0] relative to the RIS origin"""
        center = tuple(float(v) for v in np.add(self.ris_origin, (distance, 0.0, 0.0)))
        return replace(self, roi_center=center)

    def with_ris_size(self, side: int) -> 'SceneConfig':
        """Square RIS with side x side elements"""
        return replace(self, ris_rows=int(side), ris_cols=int(side))

    def to_dict(self) -> Dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _ula_positions(center: Vector3, axis: Vector3, count: int) -> PointSet:
    """Center-symmetric ULA with half-wavelength spacing"""
    offsets = (np.arange(count) - (count - 1) / 2.0) * config.ANTENNA_SPACING
    return np.asarray(center, dtype=float)[None, :] + offsets[:, None] * np.asarray(axis, dtype=float)[None, :]


def _planar_positions(center: Vector3, rows: int, cols: int, pitch: float) -> PointSet:
    """Row-major grid in the y-z plane; rows run along z, columns along y"""
    row_offsets = (np.arange(rows) - (rows - 1) / 2.0) * pitch
    col_offsets = (np.arange(cols) - (cols - 1) / 2.0) * pitch
    z, y = np.meshgrid(row_offsets, col_offsets, indexing='ij')
    points = np.zeros((rows * cols, 3))
    points[:, 1] = y.ravel()
    points[:, 2] = z.ravel()
    return points + np.asarray(center, dtype=float)[None, :]


def element_positions(scene: SceneConfig, which) -> PointSet:
    """
    Exact 3D centers of every element of one array or grid.

    Args:
        scene: Scene configuration
        which: Element (or its name) - TX, RX, RIS, ROI or UE

    Returns:
        (n, 3) array of positions in wavelength units
    """
    try:
        which = Element(which.value if isinstance(which, Element) else str(which).upper())
    except ValueError:
        raise ValueError(f"Unknown element set {which!r}; expected one of "
                         f"{[e.value for e in Element]}") from None

    if which is Element.TX:
        return _ula_positions(scene.tx_position, scene.tx_axis, scene.n_tx)
    if which is Element.RX:
        return _ula_positions(scene.rx_position, scene.rx_axis, scene.n_rx)
    if which is Element.RIS:
        return _planar_positions(scene.ris_origin, scene.ris_rows, scene.ris_cols, scene.element_pitch)
    if which is Element.ROI:
        return _planar_positions(scene.roi_center, scene.roi_side_voxels, scene.roi_side_voxels,
                                 scene.voxel_pitch)
    return np.asarray(scene.ue_position, dtype=float)[None, :]


def _parse_value(name: str, raw: str, default):
    """Convert one scene-file value to the type of the field default"""
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.replace('[', '').replace(']', '').split(',') if p.strip()]
        if len(parts) != 3:
            raise ValueError(f"Scene key {name!r} needs 3 comma-separated values, got {raw!r}")
        return tuple(float(p) for p in parts)
    if isinstance(default, bool):
        return raw.strip().lower() in ('1', 'true', 'yes')
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_scene(path: str) -> SceneConfig:
    """
    Read a flat key=value scene file; missing keys fall back to the defaults.

    Raises:
        ValueError: unknown key or malformed value
    """
    values = dotenv_values(path)
    defaults = SceneConfig()
    known = {f.name for f in fields(SceneConfig)}
    overrides = {}

    for key, raw in values.items():
        name = key.strip().lower()
        if name not in known:
            raise ValueError(f"Unknown scene key {key!r} in {path}")
        if raw is None:
            continue
        try:
            overrides[name] = _parse_value(name, raw, getattr(defaults, name))
        except ValueError as e:
            raise ValueError(f"Bad value for scene key {key!r} in {path}: {e}") from None

    scene = replace(defaults, **overrides)
    logger.info(f"Scene loaded from {path}: {len(overrides)} keys overridden, "
                f"RIS {scene.ris_rows}x{scene.ris_cols}, D={scene.distance:.1f}")
    return scene
