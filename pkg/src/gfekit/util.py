"""Small shared helpers (deterministic seeding, JSON coercion)."""

from __future__ import annotations

import numpy as np


def seed_list(seed, *extra):
    """Compose a reproducible RNG seed sequence from parts.

    `seed` may be an int or a sequence of ints; `extra` tags
    distinguish independent streams derived from the same base seed.
    """
    if seed is None:
        seed = 0
    if isinstance(seed, (int, np.integer)):
        base = [int(seed)]
    else:
        base = [int(s) for s in seed]
    return base + [int(e) for e in extra]


def jsonable(obj):
    """Recursively convert numpy containers to plain Python."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
