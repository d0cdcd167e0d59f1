"""Vector helpers and the ray type.

Batched geometry is stored as float64 arrays of shape (N, 3); all helpers
also accept single (3,) vectors.  Directions are unit length unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Ray origins are nudged along the normal by this much to dodge self-hits.
NORMAL_OFFSET = 1e-4


def dot(a: np.ndarray, b: np.ndarray, keepdims: bool = False) -> np.ndarray:
    return np.sum(a * b, axis=-1, keepdims=keepdims)


def norm(v: np.ndarray, keepdims: bool = False) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1, keepdims=keepdims))


def normalize(v: np.ndarray) -> np.ndarray:
    n = norm(v, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot normalize zero-length vector")
    return v / n


def reflect_dir(n: np.ndarray, omega_o: np.ndarray) -> np.ndarray:
    """Mirror direction 2|n.wo| n - wo.

    Requires wo in the front hemisphere of n (n.wo > 0); the absolute value
    only guards against roundoff at grazing angles.
    """
    c = dot(n, omega_o, keepdims=True)
    if np.any(c <= 0.0):
        raise ValueError("omega_o must lie in the front hemisphere of n")
    return 2.0 * np.abs(c) * n - omega_o


def orthonormal_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tangent and bitangent completing n to a right-handed frame.

    Branchless construction; stable for all unit n including the poles.
    """
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    s = np.copysign(1.0, z)
    a = -1.0 / (s + z)
    b = x * y * a
    t = np.stack([1.0 + s * x * x * a, s * b, -s * x], axis=-1)
    u = np.stack([b, s + y * y * a, -y], axis=-1)
    return t, u


def spherical_to_dir(theta: np.ndarray, phi: np.ndarray, frame_n: np.ndarray) -> np.ndarray:
    """Direction at polar angle theta / azimuth phi around the axis frame_n."""
    t, u = orthonormal_basis(frame_n)
    st = np.sin(theta)
    local = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    return (
        local[..., 0:1] * t + local[..., 1:2] * u + local[..., 2:3] * frame_n
    )


@dataclass
class Ray:
    """A batch of rays. origin/dir are (N, 3); t_min/t_max broadcast to (N,)."""

    origin: np.ndarray
    dir: np.ndarray
    t_min: np.ndarray | float = 0.0
    t_max: np.ndarray | float = np.inf

    def __post_init__(self):
        self.origin = np.atleast_2d(np.asarray(self.origin, dtype=np.float64))
        self.dir = np.atleast_2d(np.asarray(self.dir, dtype=np.float64))
        n = self.origin.shape[0]
        self.t_min = np.broadcast_to(np.asarray(self.t_min, dtype=np.float64), (n,)).copy()
        self.t_max = np.broadcast_to(np.asarray(self.t_max, dtype=np.float64), (n,)).copy()

    @property
    def count(self) -> int:
        return self.origin.shape[0]


def offset_ray(x: np.ndarray, n: np.ndarray, d: np.ndarray, t_max=np.inf) -> Ray:
    """Ray leaving a surface point, origin offset along n toward d's side."""
    side = np.sign(dot(n, d, keepdims=True))
    side = np.where(side == 0.0, 1.0, side)
    return Ray(x + NORMAL_OFFSET * side * n, d, 0.0, t_max)
