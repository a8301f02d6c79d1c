import os

from django.conf import settings

SWEEPING_DEFAULTS = {
    "FEAS_TOL": 1e-9,
    "ACTIVE_TOL": 1e-6,
    "ATOL": 1e-8,
    "RTOL": 1e-6,
    "H_MIN_FACTOR": 1e-9,
    "INV_TOL_FACTOR": 1e-6,
    "ATOM_THRESH": 0.05,
    "SPIKE_FACTOR": 10.0,
    "DEFAULT_SEED": 0,
    "THREADS": 1,
    "OUTPUT_DIR": "./runs",
    "BOUNDARY_SAMPLES": 256,
    "RECORD_RUNS": True,
    "DEFAULT_DELTA": 1.0,
    "DEFAULT_K_TILDE": 100.0,
    "PROJECTION_MAX_ITERS": 50,
    "SAMPLE_BOX": 3.0,
}


def coerce(raw: str, default):
    """Parse an environment string into the type of ``default``."""
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def env_overrides(defaults=None, environ=None):
    """Defaults with every ``SWEEP_<KEY>`` environment variable applied."""
    defaults = SWEEPING_DEFAULTS if defaults is None else defaults
    environ = os.environ if environ is None else environ
    merged = dict(defaults)
    for key, default in defaults.items():
        raw = environ.get(f"SWEEP_{key}")
        if raw is not None and raw != "":
            merged[key] = coerce(raw, default)
    return merged


def sweep_setting(name: str):
    if name not in SWEEPING_DEFAULTS:
        raise KeyError(f"unknown SWEEPING setting {name!r}")
    block = getattr(settings, "SWEEPING", None) or {}
    return block.get(name, SWEEPING_DEFAULTS[name])
