"""Baked cone apertures for the glossy reflection lobe.

For each roughness the cone half-angle theta_c is the smallest angle whose
cumulative GGX lobe mass reaches a fraction tau of the total over
[0, pi/2].  The default mass is measured in polar angle (integrand D(theta)
alone); `measure="solid"` switches to the sin(theta)-weighted variant.

Tables cover roughness in [0, 0.5] (the glossy dispatch range); lookups
above that clamp to the last entry.  The baked blob is little-endian:
magic "NCRT", version u32, tau f64, count u32, then count pairs of
(roughness f64, theta_c f64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .materials import RHO_GLOSSY_MAX, ndf_ggx

MAGIC = b"NCRT"
VERSION = 1

BISECT_TOL = 1e-6
BISECT_MAX_ITERS = 64


@dataclass(frozen=True)
class ConeTable:
    tau: float
    rho: np.ndarray
    theta_c: np.ndarray

    def __post_init__(self):
        if self.rho.shape != self.theta_c.shape or self.rho.ndim != 1:
            raise ValueError("rho/theta_c must be matching 1-d arrays")
        if np.any(np.diff(self.rho) <= 0.0):
            raise ValueError("rho grid must be strictly increasing")


def _cumulative_lobe_mass(rho, n_theta, measure):
    """Trapezoid cumulative of the lobe integrand on a uniform theta grid.

    rho is a column of roughness values; returns (theta grid, cumulative of
    shape (len(rho), n_theta)).
    """
    theta = np.linspace(0.0, np.pi / 2.0, n_theta)
    d = ndf_ggx(theta[None, :], rho[:, None])
    if measure == "solid":
        d = d * np.sin(theta)[None, :]
    elif measure != "angular":
        raise ValueError(f"unknown lobe measure {measure!r}")
    dt = theta[1] - theta[0]
    cum = np.zeros_like(d)
    np.cumsum((d[:, 1:] + d[:, :-1]) * (0.5 * dt), axis=1, out=cum[:, 1:])
    return theta, cum


def _interp_rows(x, theta, cum):
    # Per-row linear interpolation on the shared theta grid.
    idx = np.clip(np.searchsorted(theta, x) - 1, 0, theta.size - 2)
    w = (x - theta[idx]) / (theta[idx + 1] - theta[idx])
    rows = np.arange(cum.shape[0])
    return (1.0 - w) * cum[rows, idx] + w * cum[rows, idx + 1]


def _bisect_angle(theta, cum, target):
    """Smallest theta where the piecewise-linear cumulative reaches target."""
    lo = np.zeros_like(target)
    hi = np.full_like(target, theta[-1])
    for _ in range(BISECT_MAX_ITERS):
        if np.all(hi - lo <= BISECT_TOL):
            break
        mid = 0.5 * (lo + hi)
        left = _interp_rows(mid, theta, cum) >= target
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
    return 0.5 * (lo + hi)


def bake_cone_table(
    tau: float = 0.99,
    n_rho: int = 256,
    n_theta: int = 2048,
    measure: str = "angular",
) -> ConeTable:
    """Solve the lobe-mass level set for every table roughness.

    Roughness 0 is a delta lobe and gets theta_c = 0 by definition.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if n_rho < 2 or n_theta < 2:
        raise ValueError("table needs at least 2 samples per axis")
    rho = np.linspace(0.0, RHO_GLOSSY_MAX, n_rho)
    theta_c = np.zeros(n_rho)
    theta, cum = _cumulative_lobe_mass(rho[1:], n_theta, measure)
    theta_c[1:] = _bisect_angle(theta, cum, tau * cum[:, -1])
    return ConeTable(float(tau), rho, theta_c)


def lookup_cone_angle(table: ConeTable, rho) -> np.ndarray:
    """Linear interpolation; clamps to the table's roughness range."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0.0) or np.any(~np.isfinite(rho)):
        raise ValueError("roughness must be finite and non-negative")
    return np.interp(rho, table.rho, table.theta_c)


def save_cone_table(table: ConeTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(cone_table_to_bytes(table))


def load_cone_table(path) -> ConeTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    return cone_table_from_bytes(blob)


def cone_table_to_bytes(table: ConeTable) -> bytes:
    n = table.rho.size
    pairs = np.empty((n, 2))
    pairs[:, 0] = table.rho
    pairs[:, 1] = table.theta_c
    return MAGIC + struct.pack("<IdI", VERSION, table.tau, n) + pairs.astype("<f8").tobytes()


def cone_table_from_bytes(blob: bytes) -> ConeTable:
    if blob[:4] != MAGIC:
        raise ValueError("not a cone table blob (bad magic)")
    version, tau, n = struct.unpack_from("<IdI", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported cone table version {version}")
    body = np.frombuffer(blob, dtype="<f8", count=2 * n, offset=4 + struct.calcsize("<IdI"))
    pairs = body.reshape(n, 2)
    return ConeTable(float(tau), pairs[:, 0].copy(), pairs[:, 1].copy())
