import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name, "")
    return float(raw) if raw.strip() else default


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, "")
    return int(raw) if raw.strip() else default


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name, "")
    if not raw.strip():
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


# Absolute tolerance for probability row sums in tree descriptions.
# Inputs are human-authored rationals, so this is fixed and tighter than the solver.
RowSumTolerance = 1e-12

# Hitting-probability solver: residual tolerance, iteration cap,
# closed-form seeding of tail quadratics, how often monotonicity is asserted,
# and how many per-depth tail factors are materialised before using the limit
SolverSettings = {
    "tol": _env_float("MARTINLAB_SOLVER_TOL", 1e-12),
    "max_iter": _env_int("MARTINLAB_MAX_ITER", 1_000_000),
    "seed_tails": _env_bool("MARTINLAB_SEED_TAILS", True),
    "monotone_check_every": 100,
    "tail_steps": _env_int("MARTINLAB_TAIL_STEPS", 400),
}

# Mean value property checks: relative residual tolerance, positive-mass threshold,
# number of explicit per-depth classes for geometric tail measures,
# and the depth of the brute-force truncation used to cross-check them
MvpSettings = {
    "tol": _env_float("MARTINLAB_MVP_TOL", 1e-8),
    "mass_threshold": _env_float("MARTINLAB_MASS_THRESHOLD", 1e-12),
    "tail_classes": _env_int("MARTINLAB_TAIL_CLASSES", 64),
    "truncation_depth": 60,
}

# Monte Carlo oracle defaults (overridden by --trials/--horizon/--seed/--depth)
# shards: independent seed streams pooled into one estimate
# workers: thread pool size used to run the shards
OracleSettings = {
    "trials": _env_int("MARTINLAB_TRIALS", 100_000),
    "horizon": _env_int("MARTINLAB_HORIZON", 10_000),
    "seed": _env_int("MARTINLAB_SEED", 42),
    "depth": _env_int("MARTINLAB_DEPTH", 30),
    "shards": _env_int("MARTINLAB_SHARDS", 4),
    "workers": _env_int("MARTINLAB_WORKERS", 4),
}

# Report output: default format ("text" or "json") and the published schema
ReportSettings = {
    "format": os.getenv("MARTINLAB_FORMAT", "text"),
    "schema_version": "1.0",
    "schema_path": str(Path(__file__).parent / "schemas" / "report.schema.json"),
}

# Logging: level name and optional log file (empty = standard error only)
LogSettings = {
    "level": os.getenv("MARTINLAB_LOG_LEVEL", "WARNING"),
    "file": os.getenv("MARTINLAB_LOG_FILE", ""),
}
