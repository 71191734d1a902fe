"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; identical for identical (seed, name)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def truncated_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0, dtype=np.float32):
    """Normal(0, std) resampled until every draw lies within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
