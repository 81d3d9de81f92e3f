"""Small shared helpers: planar rotations, angle wrapping, seeding, canonical JSON."""

from __future__ import annotations

import json

import numpy as np


def rot2d(angle):
    """2x2 counterclockwise rotation matrix. `angle` may be batched."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack(
        [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2
    )


def drot2d(angle):
    """Derivative of rot2d with respect to the angle."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack(
        [np.stack([-s, -c], axis=-1), np.stack([c, -s], axis=-1)], axis=-2
    )


def wrap_to_pi(angle):
    """Wrap angles to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(angle) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def cross2d(a, b):
    """Scalar cross product of 2-D vectors (batched on leading axes)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def make_rng(*key) -> np.random.Generator:
    """Deterministic generator from an integer key tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def canonical_dumps(obj) -> str:
    """JSON with sorted keys and stable float formatting (byte reproducible)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=2)


def as_jsonable(x):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, dict):
        return {k: as_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [as_jsonable(v) for v in x]
    return x
