from typing import List, Tuple

# Version stamped into every emitted artifact
ARTIFACT_VERSION = '1.0.0'
MODEL_FORMAT_VERSION = 1

# Probabilities are clamped before taking logs so losses stay finite
PROB_CLAMP = 1e-12

# Training budget shared by klm and gbt
MAX_ITER = 1000
EARLY_STOPPING_PATIENCE = 5
EARLY_STOPPING_HOLDOUT = 0.1
EARLY_STOPPING_TOL = 1e-4
# Below this many rows the holdout would be too small to mean anything
EARLY_STOPPING_MIN_ROWS = 20

DEFAULT_KLM_ALPHA = 1e-4
DEFAULT_KLM_LEARNING_RATE = 0.1
DEFAULT_KLM_COMPONENTS = 100
DEFAULT_KLM_BATCH_SIZE = 32

DEFAULT_GBT_L2 = 1.0
DEFAULT_GBT_LEARNING_RATE = 0.1
DEFAULT_GBT_DEPTH = 3
DEFAULT_GBT_MIN_SAMPLES_LEAF = 1

DEFAULT_KNN_NEIGHBORS = 5

# Central finite differences use h_j = FD_STEP * (1 + |x_j|)
FD_STEP = 1e-3

SELF_INFLUENCE_DAMPING = 1e-3

DEFAULT_LOO_CAP = 2000

QUANTILE_GRID: List[float] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
DEFAULT_SEARCH_BUDGET: Tuple[int, int] = (12, 12)
DEFAULT_FRACTIONS: Tuple[float, float, float] = (0.6, 0.2, 0.2)

DEFAULT_NOISE_RATE = 0.3

NORMALIZED_NONE = 200.0
NORMALIZED_SILVER = 100.0
NORMALIZATION_EPS = 1e-9

# Label used for examples no labeling rule voted on
ABSTAIN = -1
UNLABELED = -1

WORKERS_ENV_VAR = 'TRUSTPROBE_WORKERS'
