# config.py
import os

# Network Configuration
DEFAULT_HIDDEN_WIDTHS = (10, 10, 10, 10)
SOFTPLUS_THRESHOLD = 30.0

# Sampling Configuration
N_COLLOCATION = 800
N_BOUNDARY = 800
BOUNDARY_WEIGHT = 1.0
SAMPLING_CHUNK = 4096
MAX_SAMPLING_ROUNDS = 2000
MIN_ACCEPTANCE_RATE = 1e-4
DENSITY_NORMALIZATION_TOL = 1e-6

# Phase Schedule
PRETRAIN_EPOCHS = 500
PRETRAIN_LR = 1e-2
ADAM_EPOCHS = 400
LBFGS_EPOCHS = 100

# Adam Configuration
ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# L-BFGS Configuration
LBFGS_LR = 1.0
LBFGS_HISTORY_SIZE = 10
LBFGS_SUB_ITERATIONS = 20
LBFGS_WOLFE_C1 = 1e-4
LBFGS_WOLFE_C2 = 0.9
LBFGS_MAX_LINE_SEARCH = 25
LBFGS_TOLERANCE_GRAD = 1e-11
LBFGS_TOLERANCE_CHANGE = 1e-14
LBFGS_CURVATURE_EPS = 1e-10
BACKTRACKING_MAX_STEPS = 30

# Reference Map Configuration
TABLE_NODES = 4097
SIMPSON_PANELS = 8192
BISECTION_TOL = 1e-12

# Evaluation Configuration
TEST_POINTS = 10_000
VALIDATION_POINTS = 2_000
ERROR_FIELD_RESOLUTION = 100
HISTOGRAM_SAMPLES = 100_000
HISTOGRAM_BINS = 80
BOUNDARY_CHECK_POINTS = 2_000
CONVEXITY_AUDIT_POINTS = 1_000
CONVEXITY_TOL = 1e-10

# Sensitivity Sweep Defaults
SWEEP_EPOCHS = (10, 25, 50, 75, 100)
SWEEP_COLLOCATION = (50, 100, 200, 400, 800)
SWEEP_RATIO = (0.25, 0.5, 1.0, 2.0, 4.0)
SWEEP_RUNS_PER_VALUE = 10
ENSEMBLE_RUNS = 10

# Output Configuration
OUTPUT_ROOT = os.environ.get("OTPINN_OUTPUT_ROOT", "runs")
SCHEMA_VERSION = 1

# Exit Codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ABORT = 3
EXIT_UNKNOWN_EXPERIMENT = 4

# Logging Configuration
LOG_LEVEL = "INFO"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DIR = "logs"
LOG_FILE = "logs/solver.log"
LOG_EVERY = 10
