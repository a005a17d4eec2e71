"""
Trainer Module
Cross-entropy objective, Adam optimizer and the training loops of the
adaptive recognizer and its fixed-phase baselines
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from data_fetcher import Dataset
from diff_engine import NumericError, backward, softmax_cross_entropy
from recognizer import (BatchTrace, RecognizerParams, build_physics, calibrate_input_scale,
                        forward_batch, parameter_shapes, random_phase_angles)
from scene_geometry import SceneConfig

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'val_eta', 'wall_seconds']


class TrainingError(RuntimeError):
    """Training produced a non-finite loss"""


@dataclass
class TrainConfig:
    """Hyperparameters of one training run"""
    method: str = 'adaptive'
    k: int = config.DEFAULT_K
    batch_size: int = config.BATCH_SIZE
    epochs: int = config.EPOCHS
    learning_rate: float = config.LEARNING_RATE
    rho: float = 1.0
    seed: int = 0
    noise_free: bool = False
    val_fraction: float = config.VALIDATION_FRACTION
    lr_schedule: str = 'constant'
    feature_dim: int = config.FEATURE_DIM
    state_dim: int = config.STATE_DIM
    hidden_units: int = config.HIDDEN_UNITS
    phase_mode: str = 'cossin'
    show_progress: bool = True

    def __post_init__(self):
        if self.method not in config.METHODS:
            raise ValueError(f"Unknown method {self.method!r}; expected one of {config.METHODS}")
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        # 0 freezes the parameters; used to check the loop mechanics
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lr_schedule not in config.LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {config.LR_SCHEDULES}")
        if self.phase_mode not in config.PHASE_MODES:
            raise ValueError(f"phase_mode must be one of {config.PHASE_MODES}")
        for name in ('feature_dim', 'state_dim', 'hidden_units'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def learning_rate_at(self, epoch: int) -> float:
        """Rate used during 0-based epoch"""
        if self.lr_schedule == 'cosine' and self.epochs > 0:
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


class CrossEntropy:
    """
    Mean of -log p[label] over a batch of probability rows.

    True-class probabilities below config.PROB_FLOOR are clamped and counted
    in `clamped` so the loss never becomes infinite.
    """

    def __init__(self, floor: float = config.PROB_FLOOR):
        self.floor = floor
        self.clamped = 0

    def __call__(self, probs: np.ndarray, labels: np.ndarray) -> float:
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        labels = np.asarray(labels, dtype=np.int64)
        if probs.shape[0] != labels.shape[0] or probs.shape[0] == 0:
            raise ValueError(f"{probs.shape[0]} probability rows for {labels.shape[0]} labels")
        picked = probs[np.arange(labels.shape[0]), labels]
        low = picked < self.floor
        if low.any():
            self.clamped += int(low.sum())
            logger.warning(f"Clamped {int(low.sum())} true-class probabilities to {self.floor} "
                           f"({self.clamped} so far)")
            picked = np.maximum(picked, self.floor)
        return float(-np.mean(np.log(picked)))


cross_entropy_loss = CrossEntropy()


@dataclass
class AdamState:
    """First and second moments and the step count of every tensor updated so far"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = config.ADAM_BETA1, beta2: float = config.ADAM_BETA2,
              eps: float = config.ADAM_EPSILON) -> AdamState:
    """
    One bias-corrected Adam update, in place on params.

    Tensors whose gradient is identically zero are left untouched, moments and
    step count included; bias correction uses each tensor's own step count.

    Raises:
        ValueError: gradient shape differs from its parameter
    """
    for name, g in grads.items():
        if name not in params:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"Gradient of {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.any(g):
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
            state.t[name] = 0

        state.t[name] += 1
        bc1 = 1.0 - beta1 ** state.t[name]
        bc2 = 1.0 - beta2 ** state.t[name]

        state.m[name] *= beta1
        state.m[name] += (1.0 - beta1) * g
        state.v[name] *= beta2
        state.v[name] += (1.0 - beta2) * (g * g)

        denom = np.sqrt(state.v[name] / bc2) + eps
        params[name] -= (lr / bc1) * state.m[name] / denom
    return state


class AdamOptimizer:
    """Adam over the trainable tensors of a RecognizerParams"""

    def __init__(self, lr: float = config.LEARNING_RATE):
        self.lr = lr
        self.state = AdamState()

    def step(self, params: RecognizerParams, grads: Dict[str, np.ndarray]):
        trainable = {name: grads[name] for name in params.trainable_names if name in grads}
        adam_step(params.tensors, trainable, self.state, self.lr)


def init_params(method: str, scene: SceneConfig, n_classes: int, train_config: TrainConfig,
                input_scale: float = 1.0) -> RecognizerParams:
    """
    Seed-deterministic initialization.

    Weights i.i.d. uniform on +-1/sqrt(fan_in), biases zero, trainable
    angles uniform on [0, 2*pi). Random-phase models draw their fixed angles
    from random_phase_angles with the run seed.
    """
    shapes = parameter_shapes(method, scene.n_meas, scene.n_ris, n_classes, train_config.k,
                              train_config.feature_dim, train_config.state_dim,
                              train_config.hidden_units, train_config.phase_mode)
    rng = np.random.default_rng([train_config.seed, config.STREAM_INIT])
    tensors = {}
    for name, shape in shapes.items():
        if name == 'fixed_angles':
            tensors[name] = random_phase_angles(shape[0], shape[1], train_config.seed)
        elif name.endswith('_angles'):
            tensors[name] = rng.uniform(0.0, 2.0 * np.pi, size=shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return RecognizerParams(method, tensors, input_scale, train_config.phase_mode, train_config.k)


@dataclass
class Prediction:
    """Outputs of a model over a dataset"""
    probs: np.ndarray
    labels: np.ndarray
    omegas: Optional[np.ndarray]
    wall_seconds: float

    @property
    def mean_inference_ms(self) -> float:
        return 1000.0 * self.wall_seconds / max(len(self.labels), 1)


@dataclass
class TrainResult:
    params: RecognizerParams
    history: pd.DataFrame
    best_epoch: int


class RecognizerTrainer:
    """
    Runs the training loop of one model on one scene.

    Every target draws its measurement noise from a stream keyed by
    (seed, stream tag, epoch, sample index), so results do not depend on
    batch composition.
    """

    def __init__(self, scene: SceneConfig, train_config: TrainConfig):
        self.scene = scene
        self.config = train_config
        self.loss_fn = CrossEntropy()
        logger.info(f"RecognizerTrainer initialized: method={train_config.method}, K={train_config.k}, "
                    f"N_s={scene.n_ris}, batch={train_config.batch_size}, epochs={train_config.epochs}")

    def physics(self, params: RecognizerParams, dataset: Dataset, indices: np.ndarray,
                stream: int, epoch: int):
        keys = None
        if not self.config.noise_free:
            keys = [(self.config.seed, stream, epoch, int(i)) for i in indices]
        return build_physics(self.scene, dataset.targets(indices), params.n_measurements,
                             noise_keys=keys, include_ris=params.include_ris,
                             labels=dataset.labels[indices])

    def train_step(self, params: RecognizerParams, physics, optimizer: AdamOptimizer) -> float:
        """Forward, backward and one optimizer step on one batch; returns the batch loss"""
        graph = forward_batch(params, physics, trainable=True)
        loss = softmax_cross_entropy(graph.logits, physics.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"Non-finite loss {value}")
        grads = backward(loss)
        optimizer.step(params, grads)
        return value

    def predict(self, params: RecognizerParams, dataset: Dataset, stream: int = config.STREAM_TEST,
                epoch: int = 0, keep_phases: bool = False) -> Prediction:
        """Batched inference; phases are kept only on request"""
        start = time.time()
        probs, omegas = [], []
        for indices in dataset.batches(self.config.batch_size):
            trace: BatchTrace = forward_batch(params, self.physics(params, dataset, indices, stream, epoch)).trace()
            probs.append(trace.probs)
            if keep_phases:
                omegas.append(trace.omegas)
        n_classes = params.n_classes
        return Prediction(probs=np.concatenate(probs) if probs else np.zeros((0, n_classes)),
                          labels=dataset.labels.copy(),
                          omegas=np.concatenate(omegas) if omegas else None,
                          wall_seconds=time.time() - start)

    def evaluate(self, params: RecognizerParams, dataset: Dataset, stream: int = config.STREAM_VAL,
                 epoch: int = 0) -> Dict[str, float]:
        """Mean loss and prediction rate over a dataset"""
        if len(dataset) == 0:
            return {'loss': float('nan'), 'eta': float('nan')}
        prediction = self.predict(params, dataset, stream, epoch)
        loss = self.loss_fn(prediction.probs, prediction.labels)
        eta = float(np.mean(np.argmax(prediction.probs, axis=1) == prediction.labels))
        return {'loss': loss, 'eta': eta}

    def _better(self, metrics: Dict[str, float], best: Optional[Dict[str, float]]) -> bool:
        if best is None:
            return True
        if math.isnan(metrics['eta']):
            return True
        if metrics['eta'] != best['eta']:
            return metrics['eta'] > best['eta']
        return metrics['loss'] < best['loss']

    def fit(self, params: RecognizerParams, train_set: Dataset, val_set: Dataset) -> TrainResult:
        """
        Epochs of shuffled mini-batches with one Adam step per batch.

        Returns:
            Best-validation parameters (highest eta, then lowest loss) and the
            per-epoch history

        Raises:
            TrainingError: a batch produced a non-finite value
        """
        cfg = self.config
        if len(train_set) == 0:
            raise ValueError("Training set is empty")

        optimizer = AdamOptimizer(cfg.learning_rate)
        rows = []
        best, best_params, best_epoch = None, params.copy(), 0

        for epoch in tqdm(range(cfg.epochs), desc=f"train {params.method}", disable=not cfg.show_progress):
            epoch_start = time.time()
            optimizer.lr = cfg.learning_rate_at(epoch)
            order = np.random.default_rng([cfg.seed, config.STREAM_TRAIN, epoch]).permutation(len(train_set))

            batch_losses = []
            for batch_no, indices in enumerate(train_set.batches(cfg.batch_size, order)):
                physics = self.physics(params, train_set, indices, config.STREAM_TRAIN, epoch)
                try:
                    batch_losses.append(self.train_step(params, physics, optimizer))
                except NumericError as e:
                    logger.error(f"Epoch {epoch + 1}, batch {batch_no}: {e}")
                    raise TrainingError(f"Non-finite value in epoch {epoch + 1}, batch {batch_no} "
                                        f"(samples {indices[:5].tolist()}...): {e}") from e

            metrics = self.evaluate(params, val_set, config.STREAM_VAL, epoch)
            rows.append({'epoch': epoch + 1,
                         'train_loss': float(np.mean(batch_losses)),
                         'val_loss': metrics['loss'],
                         'val_eta': metrics['eta'],
                         'wall_seconds': time.time() - epoch_start})

            if self._better(metrics, best):
                best, best_params, best_epoch = metrics, params.copy(), epoch + 1
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: train_loss={rows[-1]['train_loss']:.4f} "
                        f"val_loss={metrics['loss']:.4f} val_eta={metrics['eta']:.4f}")

        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        logger.info(f"Training finished; best epoch {best_epoch}"
                    + (f" with val_eta={best['eta']:.4f}" if best else ""))
        return TrainResult(best_params, history, best_epoch)


def _resolve_phases(phases: Optional[Sequence[np.ndarray]], n_ris: int) -> Optional[np.ndarray]:
    if phases is None:
        return None
    phases = np.asarray(list(phases), dtype=complex)
    if phases.ndim != 2 or phases.shape[0] == 0:
        raise ValueError("Fixed-phase classifier needs at least one phase configuration")
    if phases.shape[1] != n_ris:
        raise ValueError(f"Phase configurations have length {phases.shape[1]}, RIS has {n_ris}")
    if np.max(np.abs(np.abs(phases) - 1.0)) > 1e-9:
        raise ValueError("Fixed phase configurations must be unit-modulus")
    return np.mod(np.angle(phases), 2.0 * np.pi)


def train_model(dataset: Dataset, scene: SceneConfig, train_config: TrainConfig,
                phases: Optional[Sequence[np.ndarray]] = None) -> TrainResult:
    """
    Split the rho-fraction pool, calibrate the input scale, initialize and fit
    the model named by train_config.method.
    """
    train_set, val_set = dataset.split(train_config.rho, train_config.val_fraction, train_config.seed)
    angles = _resolve_phases(phases, scene.n_ris)
    if angles is not None:
        train_config = replace(train_config, k=angles.shape[0])

    include_ris = train_config.method != 'no-ris'
    sample = train_set.targets(np.arange(min(len(train_set), config.INPUT_SCALE_SAMPLES)))
    input_scale = calibrate_input_scale(scene, sample, include_ris, train_config.seed)

    params = init_params(train_config.method, scene, dataset.n_classes, train_config, input_scale)
    if angles is not None:
        params.tensors['fixed_angles'] = angles

    return RecognizerTrainer(scene, train_config).fit(params, train_set, val_set)


def train(dataset: Dataset, scene: SceneConfig, train_config: TrainConfig) -> TrainResult:
    """Adaptive recognizer"""
    return train_model(dataset, scene, replace(train_config, method='adaptive'))


def train_lisp(dataset: Dataset, scene: SceneConfig, train_config: TrainConfig) -> TrainResult:
    """K trainable phase configurations shared by every target, plus a classifier"""
    return train_model(dataset, scene, replace(train_config, method='lisp'))


def train_fixed_phase(dataset: Dataset, scene: SceneConfig, train_config: TrainConfig,
                      phases: Optional[Sequence[np.ndarray]] = None) -> TrainResult:
    """
    Classifier on measurements under fixed phases.

    phases defaults to random_phase_set(K, N_s, seed); method 'no-ris'
    takes a single measurement without the RIS paths.

    Raises:
        ValueError: an empty phase list
    """
    method = 'no-ris' if train_config.method == 'no-ris' else 'random'
    phases = None if phases is None else list(phases)
    if method == 'no-ris':
        phases = None
    elif phases is not None and len(phases) == 0:
        raise ValueError("Fixed-phase classifier needs at least one phase configuration (K = 0)")
    return train_model(dataset, scene, replace(train_config, method=method), phases)
