import hashlib

import numpy as np

from errors import DomainError

SQFT_PER_ACRE = 43560.0


def linear_quantile(values, p):
    """Linear-interpolation quantile, index h = (n - 1) * p / 100"""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DomainError("Quantile of an empty list is undefined")
    if not 0 <= p <= 100:
        raise DomainError(f"Percentile must be in [0, 100], got {p}")
    return float(np.percentile(arr, p, method="linear"))


def acres_to_square_feet(acres):
    return acres * SQFT_PER_ACRE


def square_feet_to_acres(square_feet):
    return square_feet / SQFT_PER_ACRE


def derive_seed(seed, stage):
    """Stable per-stage sub-seed: the same (seed, stage) always hashes to the same value"""
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stage_rng(seed, stage):
    return np.random.default_rng(derive_seed(seed, stage))


def relative_difference(a, b):
    scale = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / scale
