"""Materials and the GGX microfacet BSDF.

Material model: four exclusive kinds.  `diffuse` is Lambertian, `conductor`
is a GGX microfacet with Schlick fresnel whose F0 is the albedo tint,
`mirror` is a perfect delta reflector, `emitter` only radiates.  Roughness
doubles as the shading dispatch key downstream: 0 is treated as a perfect
mirror, (0, 0.5) as glossy, [0.5, 1] as diffuse-like.  Diffuse materials
therefore must carry roughness >= 0.5.

All BSDF functions are batched: per-lane material fields (kind, albedo,
roughness) plus geometry arrays of shape (N, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import dot, normalize, orthonormal_basis, reflect_dir

# Dispatch threshold between the glossy and diffuse shading branches.
RHO_GLOSSY_MAX = 0.5

# Conductor draws whose reflected direction lands below the surface are
# reported invalid with zero weight.  Redrawing instead would condition the
# sample on success and inflate importance weights by ~1/(1 - miss rate),
# which measurably breaks the furnace identity for rough lobes.


class MaterialKind(IntEnum):
    DIFFUSE = 0
    CONDUCTOR = 1
    MIRROR = 2
    EMITTER = 3


@dataclass(frozen=True)
class MaterialRecord:
    name: str
    kind: MaterialKind
    albedo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roughness: float = 1.0
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        object.__setattr__(self, "emission", np.asarray(self.emission, dtype=np.float64))
        a, e, r = self.albedo, self.emission, self.roughness
        if a.shape != (3,) or e.shape != (3,):
            raise ValueError(f"material {self.name!r}: albedo/emission must be RGB triples")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(e)) and np.isfinite(r)):
            raise ValueError(f"material {self.name!r}: non-finite field")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValueError(f"material {self.name!r}: albedo outside [0, 1]")
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"material {self.name!r}: roughness {r} outside [0, 1]")
        if np.any(e < 0.0):
            raise ValueError(f"material {self.name!r}: negative emission")
        k = self.kind
        if k == MaterialKind.MIRROR and r != 0.0:
            raise ValueError(f"material {self.name!r}: mirror requires roughness 0")
        if k == MaterialKind.CONDUCTOR and r == 0.0:
            raise ValueError(f"material {self.name!r}: conductor requires roughness > 0 (use mirror)")
        if k == MaterialKind.DIFFUSE and r < RHO_GLOSSY_MAX:
            raise ValueError(
                f"material {self.name!r}: diffuse requires roughness >= {RHO_GLOSSY_MAX}"
            )
        if k == MaterialKind.EMITTER:
            if not np.any(e > 0.0):
                raise ValueError(f"material {self.name!r}: emitter requires emission > 0")
        elif np.any(e > 0.0):
            raise ValueError(f"material {self.name!r}: only emitters may have emission")

    @property
    def is_emissive(self) -> bool:
        return bool(np.any(self.emission > 0.0))


def ndf_ggx(theta, rho):
    """GGX normal distribution over the half-vector polar angle.

    alpha = rho directly; D(0) = 1/(pi rho^2), D(pi/2) = rho^2/pi.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0.0):
        raise ValueError("ndf_ggx requires roughness > 0")
    c2 = np.cos(theta) ** 2
    a2 = rho * rho
    return a2 / (np.pi * ((a2 - 1.0) * c2 + 1.0) ** 2)


def _ndf_from_cos(cos_h, a2):
    return a2 / (np.pi * ((a2 - 1.0) * cos_h * cos_h + 1.0) ** 2)


def _smith_g1(cos_t, a2):
    cos_t = np.maximum(cos_t, 0.0)
    return 2.0 * cos_t / (cos_t + np.sqrt(a2 + (1.0 - a2) * cos_t * cos_t))


def fresnel_schlick(cos_d, f0):
    """Schlick approximation with F0 given by the albedo tint."""
    m = np.clip(1.0 - np.asarray(cos_d, dtype=np.float64), 0.0, 1.0) ** 5
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim > m.ndim:
        m = m[..., None]
    return f0 + (1.0 - f0) * m


def _as_lane_arrays(kind, albedo, roughness, n):
    shape = n.shape[:-1]
    kind = np.broadcast_to(np.asarray(kind, dtype=np.int64), shape)
    albedo = np.broadcast_to(np.asarray(albedo, dtype=np.float64), shape + (3,))
    roughness = np.broadcast_to(np.asarray(roughness, dtype=np.float64), shape)
    return kind, albedo, roughness


def bsdf_eval(kind, albedo, roughness, n, omega_o, omega_i) -> np.ndarray:
    """Scattering value f_s(omega_o, omega_i) per lane, (N, 3).

    Zero off the front hemisphere and for mirror/emitter lanes (delta lobes
    carry no finite density).
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    omega_i = np.atleast_2d(np.asarray(omega_i, dtype=np.float64))
    kind, albedo, roughness = _as_lane_arrays(kind, albedo, roughness, n)

    cos_o = dot(n, omega_o)
    cos_i = dot(n, omega_i)
    front = (cos_o > 0.0) & (cos_i > 0.0)
    out = np.zeros_like(albedo)

    dif = front & (kind == MaterialKind.DIFFUSE)
    if np.any(dif):
        out[dif] = albedo[dif] / np.pi

    con = front & (kind == MaterialKind.CONDUCTOR)
    if np.any(con):
        h = normalize(omega_o[con] + omega_i[con])
        a2 = roughness[con] ** 2
        cos_h = np.clip(dot(n[con], h), 0.0, 1.0)
        cos_d = np.clip(dot(omega_i[con], h), 0.0, 1.0)
        d = _ndf_from_cos(cos_h, a2)
        g = _smith_g1(cos_o[con], a2) * _smith_g1(cos_i[con], a2)
        f0 = albedo[con]
        fr = f0 + (1.0 - f0) * (1.0 - cos_d)[:, None] ** 5
        out[con] = fr * (d * g / (4.0 * cos_o[con] * cos_i[con]))[:, None]
    return out


def bsdf_pdf(kind, roughness, n, omega_o, omega_i) -> np.ndarray:
    """Solid-angle density of bsdf_sample; zero for delta and emitter lanes."""
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    omega_i = np.atleast_2d(np.asarray(omega_i, dtype=np.float64))
    shape = n.shape[:-1]
    kind = np.broadcast_to(np.asarray(kind, dtype=np.int64), shape)
    roughness = np.broadcast_to(np.asarray(roughness, dtype=np.float64), shape)

    cos_o = dot(n, omega_o)
    cos_i = dot(n, omega_i)
    front = (cos_o > 0.0) & (cos_i > 0.0)
    pdf = np.zeros(shape)

    dif = front & (kind == MaterialKind.DIFFUSE)
    pdf[dif] = cos_i[dif] / np.pi

    con = front & (kind == MaterialKind.CONDUCTOR)
    if np.any(con):
        h = normalize(omega_o[con] + omega_i[con])
        a2 = roughness[con] ** 2
        cos_h = np.clip(dot(n[con], h), 0.0, 1.0)
        d = _ndf_from_cos(cos_h, a2)
        pdf[con] = d * cos_h / (4.0 * np.clip(dot(omega_o[con], h), 1e-12, None))
    return pdf


@dataclass
class BsdfSample:
    """Batched importance samples of the scattering lobe.

    weight = f_s |n.omega_i| / pdf, finite for delta lobes too (mirror lanes
    carry weight = albedo with pdf = 1 by convention).
    """

    omega_i: np.ndarray
    pdf: np.ndarray
    f: np.ndarray
    weight: np.ndarray
    is_specular: np.ndarray
    valid: np.ndarray


def _sample_cosine_dirs(n, u1, u2):
    # pdf = cos(theta) / pi
    ct = np.sqrt(1.0 - u1)
    st = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    t, b = orthonormal_basis(n)
    return (
        (st * np.cos(phi))[..., None] * t
        + (st * np.sin(phi))[..., None] * b
        + ct[..., None] * n
    ), ct


def _sample_ggx_half(n, roughness, u1, u2):
    # tan^2(theta_h) = rho^2 u / (1 - u); density D(theta_h) cos(theta_h)
    a2 = roughness * roughness
    ct = np.sqrt((1.0 - u1) / (1.0 - u1 * (1.0 - a2)))
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    t, b = orthonormal_basis(n)
    return (
        (st * np.cos(phi))[..., None] * t
        + (st * np.sin(phi))[..., None] * b
        + ct[..., None] * n
    ), ct


def bsdf_sample(kind, albedo, roughness, n, omega_o, rng: np.random.Generator) -> BsdfSample:
    """Draw one incident direction per lane by lobe-matched importance sampling.

    Conductor draws that land below the surface are flagged invalid and carry
    zero weight, keeping E[weight] equal to the scattering integral.  Emitter
    lanes are always invalid.
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    kind, albedo, roughness = _as_lane_arrays(kind, albedo, roughness, n)
    if np.any(dot(n, omega_o) <= 0.0):
        raise ValueError("omega_o must lie in the front hemisphere of n")

    count = n.shape[0]
    omega_i = np.zeros((count, 3))
    pdf = np.zeros(count)
    f = np.zeros((count, 3))
    weight = np.zeros((count, 3))
    specular = np.zeros(count, dtype=bool)
    valid = np.zeros(count, dtype=bool)

    dif = kind == MaterialKind.DIFFUSE
    if np.any(dif):
        u = rng.random((int(dif.sum()), 2))
        d, ct = _sample_cosine_dirs(n[dif], u[:, 0], u[:, 1])
        omega_i[dif] = d
        pdf[dif] = ct / np.pi
        f[dif] = albedo[dif] / np.pi
        weight[dif] = albedo[dif]
        valid[dif] = ct > 0.0

    mir = kind == MaterialKind.MIRROR
    if np.any(mir):
        wr = reflect_dir(n[mir], omega_o[mir])
        omega_i[mir] = wr
        pdf[mir] = 1.0
        # Delta convention: f folds the 1/cos so that weight = albedo exactly.
        cos_i = np.clip(dot(n[mir], wr), 1e-12, None)
        f[mir] = albedo[mir] / cos_i[:, None]
        weight[mir] = albedo[mir]
        specular[mir] = True
        valid[mir] = True

    con = np.flatnonzero(kind == MaterialKind.CONDUCTOR)
    if con.size:
        u = rng.random((con.size, 2))
        h, _ = _sample_ggx_half(n[con], roughness[con], u[:, 0], u[:, 1])
        wo = omega_o[con]
        wi = 2.0 * dot(wo, h, keepdims=True) * h - wo
        ok = (dot(n[con], wi) > 0.0) & (dot(wo, h) > 0.0)
        good = con[ok]
        omega_i[good] = wi[ok]
        valid[good] = True
    done = con[valid[con]] if con.size else con
    if done.size:
        pdf[done] = bsdf_pdf(
            kind[done], roughness[done], n[done], omega_o[done], omega_i[done]
        )
        f[done] = bsdf_eval(
            kind[done], albedo[done], roughness[done], n[done], omega_o[done], omega_i[done]
        )
        cos_i = dot(n[done], omega_i[done])
        weight[done] = f[done] * (cos_i / np.clip(pdf[done], 1e-300, None))[:, None]

    return BsdfSample(omega_i, pdf, f, weight, specular, valid)
