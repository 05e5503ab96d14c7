"""Deterministic stream splitting for every random draw in the toolkit.

One root seed fans out into named substreams via splitmix64 key folding, so
components (data generation, model init, batch shuffles, per-layer probes)
draw from independent reproducible streams and parallel runs never share
state. The derived 64-bit keys seed numpy PCG64 generators for bulk
sampling.

Stream layout used across the package:
    (seed, "latents"), (seed, "expand-user"), (seed, "expand-item"),
    (seed, "pairs"), (seed, "labels"), (seed, "split"),
    (seed, "init", <component>), (seed, "sample"), (seed, "epoch", e),
    (seed, "probe", ...), ...
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_key(seed, *path):
    """Fold a root seed and a path of str/int labels into a 64-bit key."""
    z = _splitmix64(int(seed) & _MASK)
    for part in path:
        if isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(8, "little", signed=True)
        else:
            raise TypeError(f"stream path labels must be str or int, got {type(part)!r}")
        for byte in data:
            z = _splitmix64(z ^ byte)
    return z


def stream(seed, *path):
    """A numpy Generator seeded from the derived key for this path."""
    return np.random.Generator(np.random.PCG64(derive_key(seed, *path)))
