"""
Recognizer Module
Adaptive RIS target recognizer: feature extraction, LSTM fusion, classifier
and phase generator, plus the LISP / random-phase / no-RIS baselines.

All episodes run in mini-batches on one tape, one row per target. A single
target is a batch of one.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import config
from channel_model import complex_to_real_operator, get_channel_model, stack_real
from diff_engine import (Tape, Tensor, add, batched_matvec, concat, matmul, mul, phase_map, relu,
                         scale, sigmoid, slice_, softmax, tanh)
from scene_geometry import SceneConfig

logger = logging.getLogger(__name__)

# Tensors that never receive optimizer updates
FROZEN_TENSORS = ('fixed_angles',)


@dataclass
class RecognizerParams:
    """
    Named parameter tensors of one trained model.

    method is one of config.METHODS. Weight matrices are stored (fan_in, fan_out)
    so that layers compute x @ W + b on row batches.
    """
    method: str
    tensors: Dict[str, np.ndarray]
    input_scale: float = 1.0
    phase_mode: str = 'cossin'
    n_steps: int = config.DEFAULT_K

    def __post_init__(self):
        if self.method not in config.METHODS:
            raise ValueError(f"Unknown method {self.method!r}; expected one of {config.METHODS}")
        if self.phase_mode not in config.PHASE_MODES:
            raise ValueError(f"Unknown phase mode {self.phase_mode!r}")
        for name, value in self.tensors.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"Parameter {name} has non-finite entries")

    @property
    def trainable_names(self) -> List[str]:
        return [name for name in self.tensors if name not in FROZEN_TENSORS]

    @property
    def n_classes(self) -> int:
        return int(self.tensors['cla_b2'].shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.tensors['lstm_wh'].shape[0]) if 'lstm_wh' in self.tensors else 0

    @property
    def n_measurements(self) -> int:
        """Measurements taken per target"""
        if self.method == 'adaptive':
            return self.n_steps
        if self.method == 'lisp':
            return int(self.tensors['lisp_angles'].shape[0])
        if self.method == 'random':
            return int(self.tensors['fixed_angles'].shape[0])
        return 1

    @property
    def include_ris(self) -> bool:
        return self.method != 'no-ris'

    def copy(self) -> 'RecognizerParams':
        return RecognizerParams(self.method, {k: v.copy() for k, v in self.tensors.items()},
                                self.input_scale, self.phase_mode, self.n_steps)

    def zeros_like(self) -> 'RecognizerParams':
        """Same layout with every tensor set to zero"""
        return RecognizerParams(self.method, {k: np.zeros_like(v) for k, v in self.tensors.items()},
                                self.input_scale, self.phase_mode, self.n_steps)


@dataclass
class LstmState:
    """hidden is s_k; cell is internal"""
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, state_dim: int, batch: Optional[int] = None) -> 'LstmState':
        shape = (state_dim,) if batch is None else (batch, state_dim)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class EpisodeTrace:
    """Per-step record of one target's episode"""
    omegas: np.ndarray        # (K, N_s) complex
    measurements: np.ndarray  # (K, N_t*N_r) complex
    states: np.ndarray        # (K, B2); (K, 0) for the fixed-phase models
    probs: np.ndarray         # (N_c,)

    @property
    def n_steps(self) -> int:
        return self.omegas.shape[0]


@dataclass
class BatchTrace:
    """Episode records of a batch; index b selects one target"""
    omegas: np.ndarray        # (B, K, N_s)
    measurements: np.ndarray  # (B, K, m)
    states: np.ndarray        # (B, K, B2)
    probs: np.ndarray         # (B, N_c)

    def __len__(self):
        return self.probs.shape[0]

    def trace(self, b: int) -> EpisodeTrace:
        return EpisodeTrace(self.omegas[b], self.measurements[b], self.states[b], self.probs[b])


@dataclass
class PhysicsBatch:
    """
    Physical model of a batch of fixed targets, in stacked real form.

    The clean measurement of target b is operators[b] @ [cos; sin] + offsets[b];
    noise[k, b] is added at step k and carries no gradient.
    """
    operators: Optional[np.ndarray]  # (B, 2m, 2N_s); None without RIS
    offsets: np.ndarray              # (B, 2m)
    noise: np.ndarray                # (K, B, 2m)
    labels: Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_steps(self) -> int:
        return self.noise.shape[0]

    def step_offset(self, step: int) -> np.ndarray:
        return self.offsets + self.noise[step]


def sample_noise(scene: SceneConfig, key: Sequence[int], step: int) -> np.ndarray:
    """
    Estimation noise of one target at one step, complex length N_t*N_r.

    The stream is seeded with (*key, step), the same seed simulate_measurement
    receives for that step.
    """
    rng = np.random.default_rng([int(v) for v in key] + [int(step)])
    return get_channel_model(scene).estimation_noise(rng, 1)[0]


def build_physics(scene: SceneConfig, sigmas: np.ndarray, n_steps: int,
                  noise_keys: Optional[Sequence[Sequence[int]]] = None,
                  include_ris: bool = True, labels: Optional[np.ndarray] = None) -> PhysicsBatch:
    """
    Precompute the affine physical model for a batch of targets.

    Args:
        scene: Scene configuration
        sigmas: (B, N_i) target images
        n_steps: Number of measurements per target
        noise_keys: Per-target integer seed keys; None gives noise-free measurements
        include_ris: False drops every RIS-bearing path
        labels: Optional true labels carried along with the batch
    """
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=float))
    if sigmas.shape[1] != scene.n_voxels:
        raise ValueError(f"Target images must have length {scene.n_voxels}, got {sigmas.shape[1]}")
    if n_steps < 1:
        raise ValueError(f"At least one measurement per target is required, got {n_steps}")

    model = get_channel_model(scene)
    A, c = model.sensing_affine_terms(sigmas, include_ris=include_ris)
    operators = complex_to_real_operator(A) if include_ris else None
    offsets = stack_real(c)

    noise = np.zeros((n_steps,) + offsets.shape)
    if noise_keys is not None and scene.rx_noise_watts > 0:
        if len(noise_keys) != sigmas.shape[0]:
            raise ValueError(f"Got {len(noise_keys)} noise keys for {sigmas.shape[0]} targets")
        for b, key in enumerate(noise_keys):
            for k in range(n_steps):
                noise[k, b] = stack_real(sample_noise(scene, key, k))

    return PhysicsBatch(operators, offsets, noise,
                        None if labels is None else np.asarray(labels, dtype=np.int64))


# Graph building blocks ----------------------------------------------------

def _affine(x: Tensor, p: Mapping[str, Tensor], w: str, b: str) -> Tensor:
    return add(matmul(x, p[w]), p[b])


def _two_layer(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """affine -> ReLU -> affine"""
    hidden = relu(_affine(x, p, f'{prefix}_w1', f'{prefix}_b1'))
    return _affine(hidden, p, f'{prefix}_w2', f'{prefix}_b2')


def _feature(h_real: Tensor, rep: Tensor, p: Mapping[str, Tensor], input_scale: float) -> Tensor:
    measured = _affine(scale(h_real, input_scale), p, 'fea_h_w', 'fea_h_b')
    phase = _affine(rep, p, 'fea_w_w', 'fea_w_b')
    return relu(add(measured, phase))


def _lstm(b: Tensor, hidden: Tensor, cell: Tensor, p: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """One LSTM cell step; gate blocks of lstm_b are ordered input, forget, candidate, output"""
    n = p['lstm_wh'].shape[0]
    z = add(add(matmul(b, p['lstm_wx']), matmul(hidden, p['lstm_wh'])), p['lstm_b'])
    gate_i = sigmoid(slice_(z, 0, n))
    gate_f = sigmoid(slice_(z, n, 2 * n))
    candidate = tanh(slice_(z, 2 * n, 3 * n))
    gate_o = sigmoid(slice_(z, 3 * n, 4 * n))
    cell = add(mul(gate_f, cell), mul(gate_i, candidate))
    hidden = mul(gate_o, tanh(cell))
    return hidden, cell


def _broadcast_rows(tape: Tape, row: Tensor, batch: int) -> Tensor:
    """(1, n) -> (batch, n) with gradient summed over rows"""
    return matmul(tape.constant(np.ones((batch, 1))), row)


def _measure(tape: Tape, omega_real: Optional[Tensor], physics: PhysicsBatch, step: int) -> Tensor:
    offset = tape.constant(physics.step_offset(step))
    if physics.operators is None:
        return offset
    return add(batched_matvec(physics.operators, omega_real), offset)


def _phase_step(theta: Tensor, phase_mode: str) -> Tuple[Tensor, Tensor]:
    """
    Stacked (cos, sin) phases and the phase representation fed to the network.

    In raw mode the angles are wrapped to (-pi, pi], the range feature_extract
    reads from a complex phase; the wrap is a constant shift so gradients pass
    through unchanged.
    """
    cos_t, sin_t = phase_map(theta)
    omega_real = concat([cos_t, sin_t])
    if phase_mode != 'raw':
        return omega_real, omega_real
    shift = np.angle(cos_t.data + 1j * sin_t.data) - theta.data
    return omega_real, add(theta, theta.tape.constant(shift))


def _to_complex(stacked: np.ndarray) -> np.ndarray:
    half = stacked.shape[-1] // 2
    return stacked[..., :half] + 1j * stacked[..., half:]


class ForwardGraph:
    """
    One forward pass of a batch recorded on a fresh tape.

    Trainable tensors become tape leaves; frozen tensors and everything
    else become constants.
    """

    def __init__(self, params: RecognizerParams, trainable: bool = True):
        self.params = params
        self.tape = Tape()
        self.p: Dict[str, Tensor] = {}
        trainable_names = set(params.trainable_names) if trainable else set()
        for name, value in params.tensors.items():
            if name in trainable_names:
                self.p[name] = self.tape.leaf(value, name)
            else:
                self.p[name] = self.tape.constant(value)
        self.logits: Optional[Tensor] = None
        self.omegas: List[np.ndarray] = []
        self.measurements: List[np.ndarray] = []
        self.states: List[np.ndarray] = []

    def run(self, physics: PhysicsBatch) -> Tensor:
        if self.params.method == 'adaptive':
            return self._run_adaptive(physics)
        return self._run_fixed(physics)

    def _run_adaptive(self, physics: PhysicsBatch) -> Tensor:
        params, p, tape = self.params, self.p, self.tape
        batch, n_steps = physics.batch_size, physics.n_steps
        if n_steps < 1:
            raise ValueError("K must be >= 1")

        hidden = tape.constant(np.zeros((batch, params.state_dim)))
        cell = tape.constant(np.zeros((batch, params.state_dim)))
        theta = _broadcast_rows(tape, p['omega1_angles'], batch)

        for k in range(n_steps):
            omega_real, rep = _phase_step(theta, params.phase_mode)
            h_real = _measure(tape, omega_real, physics, k)
            b = _feature(h_real, rep, p, params.input_scale)
            hidden, cell = _lstm(b, hidden, cell, p)

            self.omegas.append(_to_complex(omega_real.data))
            self.measurements.append(_to_complex(h_real.data))
            self.states.append(hidden.data)

            if k < n_steps - 1:
                theta = _two_layer(hidden, p, 'pha')

        self.logits = _two_layer(hidden, p, 'cla')
        return self.logits

    def _run_fixed(self, physics: PhysicsBatch) -> Tensor:
        params, p, tape = self.params, self.p, self.tape
        batch = physics.batch_size
        angles = p.get('lisp_angles', p.get('fixed_angles'))
        n_steps = params.n_measurements
        if physics.n_steps < n_steps:
            raise ValueError(f"Physics batch holds {physics.n_steps} steps, model needs {n_steps}")

        measured = []
        for k in range(n_steps):
            omega_real = None
            if params.include_ris:
                theta = _broadcast_rows(tape, slice_(angles, k, k + 1, axis=0), batch)
                omega_real, _ = _phase_step(theta, 'cossin')
                self.omegas.append(_to_complex(omega_real.data))
            h_real = _measure(tape, omega_real, physics, k)
            measured.append(scale(h_real, params.input_scale))
            self.measurements.append(_to_complex(h_real.data))

        if not params.include_ris:
            self.omegas.append(np.zeros((batch, 0), dtype=complex))
        x = measured[0] if len(measured) == 1 else concat(measured)
        self.logits = _two_layer(x, p, 'cla')
        return self.logits

    def trace(self) -> BatchTrace:
        if self.logits is None:
            raise RuntimeError("Forward pass has not been run")
        batch = self.logits.shape[0]
        states = (np.stack(self.states, axis=1) if self.states
                  else np.zeros((batch, len(self.measurements), 0)))
        return BatchTrace(omegas=np.stack(self.omegas, axis=1),
                          measurements=np.stack(self.measurements, axis=1),
                          states=states,
                          probs=softmax(self.logits.data))


def forward_batch(params: RecognizerParams, physics: PhysicsBatch,
                  trainable: bool = False) -> ForwardGraph:
    """Run the model of params over a physics batch and return the recorded graph"""
    graph = ForwardGraph(params, trainable=trainable)
    graph.run(physics)
    return graph


# Single-target operations -------------------------------------------------

def _constants(tape: Tape, theta: Mapping[str, np.ndarray], names: Sequence[str]) -> Dict[str, Tensor]:
    missing = [n for n in names if n not in theta]
    if missing:
        raise ValueError(f"Missing parameters: {missing}")
    return {n: tape.constant(theta[n]) for n in names}


def _as_rows(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def feature_extract(h_hat: np.ndarray, omega: np.ndarray, theta1: Mapping[str, np.ndarray],
                    input_scale: float = 1.0, phase_mode: str = 'cossin') -> np.ndarray:
    """
    b = ReLU(A * stackreal(h_hat) + C * phaserep(omega) + biases)

    Args:
        h_hat: Complex measurement of length N_t*N_r (or a (B, .) batch)
        omega: Unit-modulus phases of length N_s (or a (B, .) batch)
        theta1: Mapping holding fea_h_w, fea_h_b, fea_w_w, fea_w_b
        input_scale: Fixed factor applied to the stacked measurement
        phase_mode: 'cossin' feeds (cos, sin); 'raw' feeds the angles

    Returns:
        Feature vector of length B1 (or (B, B1))
    """
    h_rows, single = _as_rows(h_hat)
    omega_rows, _ = _as_rows(omega)
    tape = Tape()
    p = _constants(tape, theta1, ('fea_h_w', 'fea_h_b', 'fea_w_w', 'fea_w_b'))
    omega_rows = np.asarray(omega_rows, dtype=complex)
    if phase_mode == 'raw':
        rep = np.angle(omega_rows)
    else:
        rep = np.concatenate([omega_rows.real, omega_rows.imag], axis=-1)
    out = _feature(tape.constant(stack_real(h_rows)), tape.constant(rep), p, input_scale).data
    return out[0] if single else out


def lstm_step(b: np.ndarray, state: LstmState, theta2: Mapping[str, np.ndarray]) -> LstmState:
    """Standard LSTM cell; the returned hidden vector is s_k"""
    b_rows, single = _as_rows(b)
    h_rows, _ = _as_rows(state.hidden)
    c_rows, _ = _as_rows(state.cell)
    tape = Tape()
    p = _constants(tape, theta2, ('lstm_wx', 'lstm_wh', 'lstm_b'))
    hidden, cell = _lstm(tape.constant(b_rows), tape.constant(h_rows), tape.constant(c_rows), p)
    if single:
        return LstmState(hidden.data[0], cell.data[0])
    return LstmState(hidden.data, cell.data)


def classify(s_k: np.ndarray, theta3: Mapping[str, np.ndarray]) -> np.ndarray:
    """Class probabilities p_K = softmax(two-layer map of s_K)"""
    rows, single = _as_rows(s_k)
    tape = Tape()
    p = _constants(tape, theta3, ('cla_w1', 'cla_b1', 'cla_w2', 'cla_b2'))
    probs = softmax(_two_layer(tape.constant(rows), p, 'cla').data)
    return probs[0] if single else probs


def generate_phase(s_k: np.ndarray, theta4: Mapping[str, np.ndarray]) -> np.ndarray:
    """Next RIS configuration exp(j * angles), angles from a linear-output two-layer map"""
    rows, single = _as_rows(s_k)
    tape = Tape()
    p = _constants(tape, theta4, ('pha_w1', 'pha_b1', 'pha_w2', 'pha_b2'))
    angles = _two_layer(tape.constant(rows), p, 'pha').data
    omega = np.exp(1j * angles)
    return omega[0] if single else omega


def run_episode(scene: SceneConfig, sigma: np.ndarray, params: RecognizerParams,
                k: int, rng_seed: int = 0) -> EpisodeTrace:
    """
    K-step adaptive episode for one target.

    Step k measures with noise seeded by (rng_seed, k); the trace is
    reproducible given the same inputs.
    """
    if params.method != 'adaptive':
        raise ValueError(f"run_episode needs adaptive parameters, got {params.method!r}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    physics = build_physics(scene, np.asarray(sigma, dtype=float)[None, :], k,
                            noise_keys=[(rng_seed,)], include_ris=True)
    return forward_batch(params, physics).trace().trace(0)


def run_lisp_episode(scene: SceneConfig, sigma: np.ndarray, params: RecognizerParams,
                     k: Optional[int] = None, rng_seed: int = 0) -> np.ndarray:
    """
    Fixed-phase episode (LISP, random phases or no RIS) for one target.

    Returns:
        Class probabilities of length N_c
    """
    if params.method == 'adaptive':
        raise ValueError("run_lisp_episode needs fixed-phase parameters")
    n_steps = params.n_measurements
    if k is not None and k != n_steps:
        raise ValueError(f"Parameters hold {n_steps} phase configurations, got K={k}")
    physics = build_physics(scene, np.asarray(sigma, dtype=float)[None, :], n_steps,
                            noise_keys=[(rng_seed,)], include_ris=params.include_ris)
    return forward_batch(params, physics).trace().probs[0]


def random_phase_angles(k: int, n_ris: int, rng_seed: int) -> np.ndarray:
    """(K, N_s) i.i.d. uniform angles on [0, 2*pi)"""
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(0.0, 2.0 * np.pi, size=(k, n_ris))


def random_phase_set(k: int, n_ris: int, rng_seed: int) -> List[np.ndarray]:
    """K unit-modulus configurations with i.i.d. uniform phases"""
    return list(np.exp(1j * random_phase_angles(k, n_ris, rng_seed)))


def calibrate_input_scale(scene: SceneConfig, sigmas: np.ndarray, include_ris: bool = True,
                          rng_seed: int = 0, max_samples: int = config.INPUT_SCALE_SAMPLES) -> float:
    """
    1 / RMS of clean stacked measurements under random phases.

    Returns 1.0 when every measurement is zero.
    """
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=float))[:max_samples]
    model = get_channel_model(scene)
    rng = np.random.default_rng([rng_seed, config.STREAM_CALIBRATION])
    omegas = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=(sigmas.shape[0], scene.n_ris)))

    A, c = model.sensing_affine_terms(sigmas, include_ris=include_ris)
    clean = np.einsum('bms,bs->bm', A, omegas) + c
    rms = float(np.sqrt(np.mean(np.abs(clean) ** 2) / 2.0))
    if rms == 0.0:
        logger.warning("Clean measurements are all zero; input scale left at 1")
        return 1.0
    logger.info(f"Input scale calibrated on {sigmas.shape[0]} targets: RMS {rms:.4e}")
    return 1.0 / rms


def parameter_shapes(method: str, n_meas: int, n_ris: int, n_classes: int, k: int,
                     feature_dim: int = config.FEATURE_DIM, state_dim: int = config.STATE_DIM,
                     hidden_units: int = config.HIDDEN_UNITS,
                     phase_mode: str = 'cossin') -> Dict[str, Tuple[int, ...]]:
    """Tensor layout of each method"""
    if method not in config.METHODS:
        raise ValueError(f"Unknown method {method!r}; expected one of {config.METHODS}")
    measure_dim = 2 * n_meas
    if method == 'adaptive':
        phase_dim = n_ris if phase_mode == 'raw' else 2 * n_ris
        return {
            'fea_h_w': (measure_dim, feature_dim), 'fea_h_b': (feature_dim,),
            'fea_w_w': (phase_dim, feature_dim), 'fea_w_b': (feature_dim,),
            'lstm_wx': (feature_dim, 4 * state_dim), 'lstm_wh': (state_dim, 4 * state_dim),
            'lstm_b': (4 * state_dim,),
            'cla_w1': (state_dim, hidden_units), 'cla_b1': (hidden_units,),
            'cla_w2': (hidden_units, n_classes), 'cla_b2': (n_classes,),
            'pha_w1': (state_dim, hidden_units), 'pha_b1': (hidden_units,),
            'pha_w2': (hidden_units, n_ris), 'pha_b2': (n_ris,),
            'omega1_angles': (1, n_ris),
        }

    n_steps = 1 if method == 'no-ris' else k
    shapes = {
        'cla_w1': (n_steps * measure_dim, hidden_units), 'cla_b1': (hidden_units,),
        'cla_w2': (hidden_units, n_classes), 'cla_b2': (n_classes,),
    }
    if method == 'lisp':
        shapes['lisp_angles'] = (k, n_ris)
    elif method == 'random':
        shapes['fixed_angles'] = (k, n_ris)
    return shapes
