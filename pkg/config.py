"""
Configuration settings for the RIS target recognizer
"""

import math

# Scene defaults (all lengths in wavelengths)
DEFAULT_SCENE = {
    'wavelength': 1.0,
    'tx_position': (30.0, 50.0, 50.0),
    'tx_axis': (0.0, 1.0, 0.0),
    'n_tx': 2,
    'rx_position': (30.0, 52.0, 50.0),  # 2 wavelengths from the TX along y
    'rx_axis': (0.0, 1.0, 0.0),
    'n_rx': 2,
    'ris_origin': (0.0, 0.0, 0.0),
    'ris_rows': 20,
    'ris_cols': 20,
    'element_pitch': 0.5,
    'roi_center': (50.0, 0.0, 0.0),
    'roi_side_voxels': 30,
    'voxel_pitch': 1.0,
    'ue_position': (30.0, -50.0, 0.0),
    'tx_power_dbm': -10.0,
    'ue_noise_dbm': -80.0,
    'rx_noise_dbm': -80.0,
    'pilots': 'identity',
}

ANTENNA_SPACING = 0.5  # ULA pitch in wavelengths
PILOT_SCHEMES = ('identity', 'dft')

# Network dimensions
FEATURE_DIM = 256      # B1
STATE_DIM = 256        # B2
HIDDEN_UNITS = 256     # hidden layer of every FC head
PHASE_MODES = ('cossin', 'raw')

# Training hyperparameters
BATCH_SIZE = 128
EPOCHS = 200
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
VALIDATION_FRACTION = 0.1
DEFAULT_K = 7
LR_SCHEDULES = ('constant', 'cosine')
PROB_FLOOR = 1e-30

# Number of samples used to calibrate the measurement input scale
INPUT_SCALE_SAMPLES = 256

# RNG stream tags, mixed into per-sample seeds so streams never overlap
STREAM_INIT = 11
STREAM_TRAIN = 17
STREAM_VAL = 23
STREAM_TEST = 29
STREAM_SPLIT = 31
STREAM_CALIBRATION = 37

# Methods understood by the trainer, evaluator and sweep runner
METHODS = ('adaptive', 'lisp', 'random', 'no-ris')

# Protocol (5G NR frame accounting)
SYMBOLS_PER_FRAME_MU0 = 140
FRAME_SECONDS = 0.01

# Communication phase optimizer
BCD_TOLERANCE = 1e-10
BCD_MAX_ITERS = 500

# Image normalization: RCS upper bound of a voxel is 4*pi*S^2/lambda^2
RCS_FACTOR = 4.0 * math.pi

# MNIST file names looked up in the data directory (plain or gzipped)
MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}

# Checkpoint format
CHECKPOINT_MAGIC = b"RISCKPT\0"
CHECKPOINT_VERSION = 1

# Output file names
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"
MANIFEST_FILE = "manifest.json"
SWEEP_FILE = "sweep.csv"
SE_TABLE_FILE = "se_table.csv"
LOG_FILE = "ris_recognizer.log"
