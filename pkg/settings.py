"""
Centralized Settings for the Chaotic-SDE Sensitivity Framework
Contains the default parameters, environment keys, output schemas and log
message templates used across engines and the pipeline.
"""

import os

# =============================================================================
# ENVIRONMENT KEYS
# =============================================================================

ENV_SEED = "SDESENS_SEED"
ENV_PATHS = "SDESENS_PATHS"
ENV_WORKERS = "SDESENS_WORKERS"
ENV_BATCH = "SDESENS_BATCH"
ENV_OUT = "SDESENS_OUT"
ENV_LOG_LEVEL = "SDESENS_LOG_LEVEL"
ENV_RUN_SLOW = "SDESENS_RUN_SLOW"

# =============================================================================
# MODEL DEFAULTS
# =============================================================================

LORENZ_THETA = 28.0
LORENZ_SIGMA = 6.0
LORENZ_X0 = (-2.4, -3.7, 14.98)
LORENZ_OBSERVABLE_INDEX = 2

OU_KAPPA = 1.0
OU_MU = 0.0
OU_SIGMA = 0.5
OU_X0 = (1.0,)

# =============================================================================
# SIMULATION DEFAULTS
# =============================================================================

DEFAULT_SEED = 2024
DEFAULT_PATHS = 100_000
DEFAULT_WORKERS = 1
DEFAULT_BATCH = 4096
DEFAULT_T = 10.0
DEFAULT_H = 2.0 ** -9
DEFAULT_DELTA = 2.0 ** -9
ADAPTIVE_FLOOR_FACTOR = 2.0 ** -10
NOISE_BLOCK_STEPS = 256

DEFAULT_SPRING = 10.0
FD_RELATIVE_EPSILON = 0.01
FD_EPSILON_FLOOR = 1e-4

# More than this fraction of blown-up paths fails a run.
BLOWUP_TOLERANCE = 0.01
STANDARD_PS_CLAMP = 1e12
SPRING_GROWTH_WARNING = 2.0

# =============================================================================
# MLMC DEFAULTS
# =============================================================================

MLMC_H0 = 2.0 ** -6
MLMC_EPS = 0.01
MLMC_MAX_LEVELS = 10
MLMC_LEVELS_CAP = 24
MLMC_INITIAL_SAMPLES = 1000
MLMC_MIN_LEVELS = 2
MLMC_ALPHA_FLOOR = 0.5

# =============================================================================
# RICHARDSON-ROMBERG AND ODE DEFAULTS
# =============================================================================

RR_MAX_ORDER = 8
RR_T_REF = 2.0
RR_SIGMA_REF = 15.0
RR_T_MAX = 50.0
ODE_H = 0.001
ODE_T = 300.0
ODE_BURN_IN = 10.0
ODE_REFERENCE_SENSITIVITY = 0.981

# =============================================================================
# HARNESS DEFAULTS
# =============================================================================

ENVELOPE_WINDOW = 10
ENVELOPE_SPACING = 0.25
MOMENT_HORIZON = 20.0

# =============================================================================
# OUTPUT SCHEMAS
# =============================================================================

CSV_HEADERS = {
    "variance-study": ["T", "mean", "variance", "stderr", "n", "blowups"],
    "mlmc": ["level", "N", "mean", "variance", "cost"],
    "weak-sigma": ["sigma", "T", "estimate", "stderr", "weak_error"],
    "lambda-star": ["t", "mean", "envelope"],
    "rr": ["sigma", "weight", "T", "mean", "stderr"],
    "level-variance": ["T", "level", "variance", "variance_no_com"],
    "mlmc-complexity": ["eps", "estimate", "mlmc_cost", "std_mc_cost"],
    "moments": ["t", "moment4"],
    "lambda-sweep": ["sigma", "lambda_star", "r2"],
}

# Optional studies selected with --study, keyed by command.
STUDIES = {
    "simulate": ("moments",),
    "lambda-star": ("sweep",),
    "mlmc": ("levels", "complexity"),
}

COMMANDS = ("simulate", "sens", "variance-study", "lambda-star", "weak-sigma", "mlmc", "rr")

# =============================================================================
# LOG MESSAGES
# =============================================================================

LOG_FORMAT = "[%(name)s] %(message)s"

RUN_START_MESSAGE = "Running {kind} on {model} with N={n}, T={T}, seed={seed}"

BLOWUP_MESSAGE = "{blowups} of {n} paths blew up (non-finite state)"

CLAMP_MESSAGE = "{clamped} of {n} path values clamped at magnitude {limit:g}"

SPRING_WARNING_MESSAGE = (
    "Variation norm grew from {mid:.3g} at t={t_mid:.3g} to {end:.3g} at T={T:.3g}; "
    "spring S={spring:g} may be too small"
)

LEVEL_MESSAGE = "Level {level}: N={n}, mean={mean:.6g}, variance={variance:.4g}, cost={cost:.4g}"

PIPELINE_ERROR_MESSAGE = "Pipeline stopped: {error_message}"


def env_int(key: str, default: int) -> int:
    """Read an integer setting from the environment."""
    value = os.getenv(key)
    return int(value) if value else default


def env_str(key: str, default: str) -> str:
    """Read a string setting from the environment."""
    return os.getenv(key) or default


# =============================================================================
# SETTINGS VALIDATION
# =============================================================================

def validate_settings():
    """Validate that every output schema and message template is defined and non-empty."""
    required_messages = [
        'LOG_FORMAT',
        'RUN_START_MESSAGE',
        'BLOWUP_MESSAGE',
        'CLAMP_MESSAGE',
        'SPRING_WARNING_MESSAGE',
        'LEVEL_MESSAGE',
        'PIPELINE_ERROR_MESSAGE'
    ]

    for message_name in required_messages:
        message = globals().get(message_name)
        if not message or not message.strip():
            raise ValueError(f"Required message {message_name} is missing or empty")

    for command, header in CSV_HEADERS.items():
        if not header:
            raise ValueError(f"CSV header for {command} is empty")

    return True

# Validate settings on import
if __name__ != "__main__":
    validate_settings()
