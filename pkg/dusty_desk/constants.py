"""Constants and documented defaults for dusty-desk."""

# Sensor distance range in meters (KITTI and MPO share it)
MIN_DISTANCE_M = 0.9
MAX_DISTANCE_M = 120.0

# Normalized inverse depth spans [-1, 1]; drops sit at the maximum distance
NORMALIZED_LOW = -1.0
NORMALIZED_HIGH = 1.0
NORMALIZED_RANGE = NORMALIZED_HIGH - NORMALIZED_LOW
DROP_VALUE = NORMALIZED_LOW

# Raster shapes
DEFAULT_HEIGHT = 16
DEFAULT_WIDTH = 64
RASTER_PRESETS = {
    "desk": (16, 64),
    "large": (32, 128),
    "mpo": (32, 256),
    "kitti": (64, 256),
}

# Synthetic scanner field of view in degrees (HDL-64E-like)
DEFAULT_FOV_UP_DEG = 3.0
DEFAULT_FOV_DOWN_DEG = -25.0
SENSOR_HEIGHT_M = 1.73

# Network
LEAKY_RELU_SLOPE = 0.2
DEFAULT_LATENT_DIM = 512
DEFAULT_BASE_CHANNELS = 8
LOGIT_CLAMP = 15.0

# Output channels per model variant
VARIANT_CHANNELS = {
    "baseline": 1,
    "dusty1": 2,
    "dusty2": 3,
}

# Training recipe
DEFAULT_LEARNING_RATE = 0.002
DEFAULT_BATCH_SIZE = 32
DEFAULT_R1_GAMMA = 1.0
DEFAULT_EMA_DECAY = 0.999
DEFAULT_TEMPERATURE = 1.0
ADAM_BETA1 = 0.0
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8

# DiffAugment ranges
BRIGHTNESS_RANGE = 0.3
CONTRAST_RANGE = (0.5, 1.5)
TRANSLATION_RATIO = 1.0 / 8.0
CUTOUT_RATIO = 0.5

# Evaluation
JSD_BINS = 100
JSD_BOUND_M = 80.0
DEFAULT_EVAL_CLOUDS = 256
DEFAULT_EVAL_POINTS = 256
DEFAULT_EVAL_REPEATS = 5
SWD_LEVELS = 3
SWD_PATCH_SIZE = 7
SWD_PATCHES_PER_IMAGE = 64
SWD_PROJECTIONS = 128
SWD_REPEATS = 4

# Weighted 3D score used to tune the drop tolerance
SCORE_WEIGHTS = {
    "jsd": 10.0,
    "cov": -1.0,
    "mmd": 100.0,
    "one_nna": 1.0,
}
TOLERANCE_BOUNDS = (1e-3, 1e-1)
TOLERANCE_TRIALS = 100
TOLERANCE_POINTS = 512
KITTI_TOLERANCE = 0.008
MPO_TOLERANCE = 0.0065

# Inversion
INVERSION_ITERATIONS = 1000
INVERSION_LEARNING_RATE = 0.1
INVERSION_NOISE_SCALE = 0.05

# Corruption regimes
CORRUPTION_KINDS = ("random-drop", "keep-lines", "noise")
CORRUPTION_PRESETS = {
    "random-drop": {"drop_probability": 0.9},
    "keep-lines": {"keep_lines": 8},
    "noise": {"noise_variance": 0.01},
}

# Named random sub-streams derived from a run seed
SEED_STREAMS = ("data", "gumbel", "augment", "latent", "metrics", "init")

# File formats
RASTER_MAGIC = b"DSTY"
RASTER_BATCH_MAGIC = b"DSTB"
RASTER_VERSION = 1
CHECKPOINT_MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
