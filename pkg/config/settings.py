import os
from dotenv import load_dotenv

load_dotenv()


def _float(name: str, default: str) -> float:
    raw = os.getenv(name, default)
    try:
        return float(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be a number, got {raw!r}")


def _int(name: str, default: str) -> int:
    raw = os.getenv(name, default)
    try:
        return int(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be an integer, got {raw!r}")


LOG_DIR = os.getenv("DELAYLD_LOG_DIR", "logs")
LOG_LEVEL = os.getenv("DELAYLD_LOG_LEVEL", "INFO").upper()

# Worker threads for Monte Carlo ensembles (CLI --threads overrides)
THREADS = _int("DELAYLD_THREADS", "1")

# Sigma is full rank iff s_min > RANK_TOL * s_max
RANK_TOL = _float("DELAYLD_RANK_TOL", "1e-10")

# rho(t,t) with a larger condition number is excluded from scans
COND_LIMIT = _float("DELAYLD_COND_LIMIT", "1e12")

FLOAT_DIGITS = _int("DELAYLD_FLOAT_DIGITS", "17")

SLOW_TESTS = bool(os.getenv("DELAYLD_SLOW_TESTS"))

VERSION = "0.3.0"


if THREADS < 1:
    raise RuntimeError("DELAYLD_THREADS must be at least 1")
if LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR"):
    raise RuntimeError(f"Unknown DELAYLD_LOG_LEVEL {LOG_LEVEL!r}")
