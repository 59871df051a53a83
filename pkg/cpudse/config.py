"""Configuration settings for the CPU design space exploration toolkit."""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env file for local development
load_dotenv()


def get_setting(key: str, default: str = "") -> str:
    """Get a setting from the environment (a loaded .env counts as environment).

    Every key is looked up with the CPUDSE_ prefix.
    """
    return os.getenv(f"CPUDSE_{key}", default)


def _int(key: str, default: int) -> int:
    return int(get_setting(key, str(default)))


def _float(key: str, default: float) -> float:
    return float(get_setting(key, str(default)))


# Paths
PROJECT_ROOT = Path(__file__).parent.parent
OUTPUTS_DIR = Path(get_setting("OUTPUTS_DIR", str(PROJECT_ROOT / "outputs")))

# Runtime
# ONEDSE_THREADS is the documented cap; CPUDSE_THREADS is read when it is unset
THREADS = max(1, int(os.getenv("ONEDSE_THREADS") or get_setting("THREADS", "1")))
DEFAULT_SEED = _int("SEED", 0)
QUIET = get_setting("QUIET", "0").lower() in ("1", "true", "yes")

# Traces
CHUNK_LEN = _int("CHUNK_LEN", 256)

# Model defaults (desk-scale)
D_MODEL = _int("D_MODEL", 32)
HEADS = _int("HEADS", 4)
ENCODER_LAYERS = _int("ENCODER_LAYERS", 2)
HEAD_LAYERS = _int("HEAD_LAYERS", 3)
WINDOW = _int("WINDOW", 64)
LEARNING_RATE = _float("LEARNING_RATE", 0.001)
EPOCHS = _int("EPOCHS", 10)
BATCH_SIZE = _int("BATCH_SIZE", 16)
VALIDATION_FRACTION = _float("VALIDATION_FRACTION", 0.2)

# Simulator latencies (cycles)
MEMORY_LATENCY = _int("MEMORY_LATENCY", 200)
L2_HIT_LATENCY = _int("L2_HIT_LATENCY", 12)
L3_HIT_LATENCY = _int("L3_HIT_LATENCY", 40)
FLUSH_PENALTY = _int("FLUSH_PENALTY", 12)
TLB_WALK_LATENCY = _int("TLB_WALK_LATENCY", 30)

# Metric-space search
MAST_PATIENCE = _int("MAST_PATIENCE", 10)
MAST_DELTA = _float("MAST_DELTA", 0.01)
MAST_MAX_ITER = _int("MAST_MAX_ITER", 500)
MAST_STEPS_PER_RANGE = 500

# Metaheuristics
GA_POPULATION = _int("GA_POPULATION", 24)
GA_ITERATIONS = _int("GA_ITERATIONS", 50)
GA_TOURNAMENT = _int("GA_TOURNAMENT", 3)
GA_CROSSOVER_RATE = _float("GA_CROSSOVER_RATE", 0.9)
GA_M0 = _float("GA_M0", 0.3)
GA_ALPHA = _float("GA_ALPHA", 0.93)
GA_STAGNATION = _int("GA_STAGNATION", 6)
EXHAUSTIVE_CAP = _int("EXHAUSTIVE_CAP", 10000)
EVAL_CHUNKS = _int("EVAL_CHUNKS", 8)

# Multi-agent fine-tuning
SMART_LAMBDA = _float("SMART_LAMBDA", 0.1)
SMART_SIGMA = _float("SMART_SIGMA", 0.25)
SMART_BASELINE_MOMENTUM = _float("SMART_BASELINE_MOMENTUM", 0.1)
