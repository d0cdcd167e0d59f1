"""Scene model: camera, primitives, parsing, and batched ray intersection.

Scene files are line oriented, one record per line, `#` starts a comment:

    camera pos X Y Z look X Y Z up X Y Z vfov DEG res W H
    environment R G B
    material NAME KIND [albedo R G B] [roughness X] [emission R G B]
    sphere mat NAME center X Y Z radius R
    quad mat NAME corner X Y Z edge_u X Y Z edge_v X Y Z
    mesh mat NAME path FILE.obj

Lengths are meters; angles are degrees in the file, radians in memory.
Quad normals follow cross(edge_u, edge_v).  Meshes are ASCII OBJ, `v`/`f`
records only, faces fan-triangulated.

Primitive ids are dense: spheres first, then quads, then mesh triangles.
Intersection is batched over rays; triangle meshes go through a BVH with
median splits, spheres and quads are brute forced (desk scenes are small).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import NORMAL_OFFSET, Ray, dot, norm, normalize
from .materials import MaterialKind, MaterialRecord, bsdf_sample

_LEAF_SIZE = 4
_PARALLEL_EPS = 1e-12


class SceneParseError(ValueError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float  # radians
    width: int
    height: int

    def basis(self):
        forward = normalize(self.look_at - self.position)
        right = normalize(np.cross(forward, self.up))
        up_cam = np.cross(right, forward)
        return right, up_cam, forward


@dataclass
class SurfaceInteraction:
    """Batch of hit records (structure of arrays, length N).

    `n` faces the incoming ray (front side); `back_face` remembers when the
    geometric normal had to be flipped.  Misses have valid == False and
    undefined payload in the other fields.
    """

    x: np.ndarray
    n: np.ndarray
    omega_o: np.ndarray
    hit_distance: np.ndarray
    kind: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    emission: np.ndarray
    prim_id: np.ndarray
    back_face: np.ndarray
    valid: np.ndarray

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def select(self, idx) -> "SurfaceInteraction":
        return SurfaceInteraction(
            self.x[idx], self.n[idx], self.omega_o[idx], self.hit_distance[idx],
            self.kind[idx], self.albedo[idx], self.roughness[idx], self.emission[idx],
            self.prim_id[idx], self.back_face[idx], self.valid[idx],
        )

    @staticmethod
    def empty(n: int) -> "SurfaceInteraction":
        return SurfaceInteraction(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.full(n, np.inf),
            np.zeros(n, dtype=np.int64), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
            np.full(n, -1, dtype=np.int64), np.zeros(n, dtype=bool), np.zeros(n, dtype=bool),
        )


class _Bvh:
    """Median-split BVH over triangles, traversed with ray batches."""

    def __init__(self, v0, v1, v2):
        t = v0.shape[0]
        lo = np.minimum(np.minimum(v0, v1), v2)
        hi = np.maximum(np.maximum(v0, v1), v2)
        centroid = (lo + hi) * 0.5
        self.order = np.arange(t)
        nodes_min, nodes_max, nodes_a, nodes_b, nodes_leaf = [], [], [], [], []

        def build(idx):
            node = len(nodes_min)
            nodes_min.append(lo[idx].min(axis=0))
            nodes_max.append(hi[idx].max(axis=0))
            nodes_a.append(-1)
            nodes_b.append(-1)
            nodes_leaf.append(None)
            if idx.size <= _LEAF_SIZE:
                nodes_leaf[node] = idx
                return node
            extent = hi[idx].max(axis=0) - lo[idx].min(axis=0)
            axis = int(np.argmax(extent))
            half = idx.size // 2
            part = idx[np.argsort(centroid[idx, axis], kind="stable")]
            nodes_a[node] = build(part[:half])
            nodes_b[node] = build(part[half:])
            return node

        build(np.arange(t))
        self.node_min = np.array(nodes_min)
        self.node_max = np.array(nodes_max)
        self.node_a = np.array(nodes_a)
        self.node_b = np.array(nodes_b)
        self.node_leaf = nodes_leaf

    def intersect(self, o, d, t_min, t_max, v0, e1, e2):
        """Nearest triangle per ray; returns (t, tri index or -1)."""
        n = o.shape[0]
        best_t = t_max.copy()
        best_tri = np.full(n, -1, dtype=np.int64)
        inv_d = 1.0 / np.where(d == 0.0, 1e-300, d)

        def visit(node, rays):
            lo = (self.node_min[node] - o[rays]) * inv_d[rays]
            hi = (self.node_max[node] - o[rays]) * inv_d[rays]
            near = np.minimum(lo, hi).max(axis=1)
            far = np.maximum(lo, hi).min(axis=1)
            alive = (near <= far) & (near <= best_t[rays]) & (far >= t_min[rays])
            rays = rays[alive]
            if rays.size == 0:
                return
            leaf = self.node_leaf[node]
            if leaf is None:
                visit(self.node_a[node], rays)
                visit(self.node_b[node], rays)
                return
            for tri in leaf:
                # Moller-Trumbore
                pv = np.cross(d[rays], e2[tri])
                det = dot(e1[tri], pv)
                ok = np.abs(det) > _PARALLEL_EPS
                inv = 1.0 / np.where(ok, det, 1.0)
                tv = o[rays] - v0[tri]
                u = dot(tv, pv) * inv
                qv = np.cross(tv, e1[tri])
                v = dot(d[rays], qv) * inv
                t = dot(e2[tri], qv) * inv
                ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
                ok &= (t > t_min[rays]) & (t < best_t[rays])
                upd = rays[ok]
                best_t[upd] = t[ok]
                best_tri[upd] = tri

        visit(0, np.arange(n))
        return best_t, best_tri


class Scene:
    """Immutable after construction; all queries are pure."""

    def __init__(self, camera, materials, spheres, quads, tris, environment):
        self.camera: Camera = camera
        self.materials: list[MaterialRecord] = materials
        self.environment = np.asarray(environment, dtype=np.float64)

        self.mat_kind = np.array([m.kind for m in materials], dtype=np.int64)
        self.mat_albedo = np.array([m.albedo for m in materials]).reshape(-1, 3)
        self.mat_rough = np.array([m.roughness for m in materials], dtype=np.float64)
        self.mat_emission = np.array([m.emission for m in materials]).reshape(-1, 3)

        centers, radii, smat = spheres
        self.sph_center = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.sph_radius = np.asarray(radii, dtype=np.float64).reshape(-1)
        self.sph_mat = np.asarray(smat, dtype=np.int64).reshape(-1)

        corners, eu, ev, qmat = quads
        self.quad_corner = np.asarray(corners, dtype=np.float64).reshape(-1, 3)
        self.quad_eu = np.asarray(eu, dtype=np.float64).reshape(-1, 3)
        self.quad_ev = np.asarray(ev, dtype=np.float64).reshape(-1, 3)
        self.quad_mat = np.asarray(qmat, dtype=np.int64).reshape(-1)
        qn = np.cross(self.quad_eu, self.quad_ev)
        qa = norm(qn)
        if np.any(qa < 1e-12):
            raise SceneParseError("degenerate quad (zero area)")
        self.quad_n = qn / qa[:, None]
        self.quad_area = qa
        self.quad_inv_eu2 = 1.0 / np.maximum(norm(self.quad_eu) ** 2, 1e-300)
        self.quad_inv_ev2 = 1.0 / np.maximum(norm(self.quad_ev) ** 2, 1e-300)

        v0, v1, v2, tmat = tris
        self.tri_v0 = np.asarray(v0, dtype=np.float64).reshape(-1, 3)
        self.tri_v1 = np.asarray(v1, dtype=np.float64).reshape(-1, 3)
        self.tri_v2 = np.asarray(v2, dtype=np.float64).reshape(-1, 3)
        self.tri_mat = np.asarray(tmat, dtype=np.int64).reshape(-1)
        self.tri_e1 = self.tri_v1 - self.tri_v0
        self.tri_e2 = self.tri_v2 - self.tri_v0
        cn = np.cross(self.tri_e1, self.tri_e2)
        ca = norm(cn)
        if np.any(ca < 1e-15):
            raise SceneParseError("degenerate triangle (zero area)")
        self.tri_n = cn / ca[:, None]
        self.tri_area = 0.5 * ca
        self.bvh = _Bvh(self.tri_v0, self.tri_v1, self.tri_v2) if self.tri_v0.shape[0] else None

        self.n_spheres = self.sph_center.shape[0]
        self.n_quads = self.quad_corner.shape[0]
        self.n_tris = self.tri_v0.shape[0]
        self.n_prims = self.n_spheres + self.n_quads + self.n_tris
        if self.n_prims == 0:
            raise SceneParseError("scene has no primitives")

        self.prim_mat = np.concatenate([self.sph_mat, self.quad_mat, self.tri_mat])
        self.prim_area = np.concatenate(
            [4.0 * np.pi * self.sph_radius**2, self.quad_area, self.tri_area]
        )
        self.prim_emissive = np.any(self.mat_emission[self.prim_mat] > 0.0, axis=1)
        self.emitter_prims = np.flatnonzero(self.prim_emissive)
        self.emitter_area = float(self.prim_area[self.emitter_prims].sum())

        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        if self.n_spheres:
            lo = np.minimum(lo, (self.sph_center - self.sph_radius[:, None]).min(axis=0))
            hi = np.maximum(hi, (self.sph_center + self.sph_radius[:, None]).max(axis=0))
        if self.n_quads:
            pts = np.concatenate([
                self.quad_corner, self.quad_corner + self.quad_eu,
                self.quad_corner + self.quad_ev, self.quad_corner + self.quad_eu + self.quad_ev,
            ])
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
        if self.n_tris:
            pts = np.concatenate([self.tri_v0, self.tri_v1, self.tri_v2])
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
        self.world_bounds = np.stack([lo, hi])
        extent = float((hi - lo).max())
        if not (np.all(np.isfinite(self.world_bounds)) and extent > 0.0):
            raise SceneParseError("degenerate scene bounds")
        self.unit_scale = 1.0 / extent

    # -- queries ---------------------------------------------------------

    def normalize_to_unit_cube(self, x: np.ndarray) -> np.ndarray:
        """Uniform scale by the longest bounds axis; clamps to [0, 1]."""
        rel = (x - self.world_bounds[0]) * self.unit_scale
        return np.clip(rel, 0.0, 1.0)

    def _nearest_hit(self, ray: Ray):
        o, d = ray.origin, ray.dir
        n = ray.count
        best_t = np.where(np.isfinite(ray.t_max), ray.t_max, np.inf).copy()
        best_prim = np.full(n, -1, dtype=np.int64)

        if self.n_spheres:
            oc = o[:, None, :] - self.sph_center[None, :, :]
            b = np.sum(oc * d[:, None, :], axis=2)
            c0 = np.sum(oc * oc, axis=2) - self.sph_radius[None, :] ** 2
            disc = b * b - c0
            hit = disc >= 0.0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            for t_cand in (-b - sq, -b + sq):
                ok = hit & (t_cand > ray.t_min[:, None]) & (t_cand < best_t[:, None])
                if np.any(ok):
                    t_masked = np.where(ok, t_cand, np.inf)
                    j = np.argmin(t_masked, axis=1)
                    rows = np.flatnonzero(t_masked[np.arange(n), j] < best_t)
                    best_t[rows] = t_masked[rows, j[rows]]
                    best_prim[rows] = j[rows]

        if self.n_quads:
            denom = d @ self.quad_n.T
            rel = self.quad_corner[None, :, :] - o[:, None, :]
            tq = np.sum(rel * self.quad_n[None, :, :], axis=2) / np.where(
                np.abs(denom) > _PARALLEL_EPS, denom, np.inf
            )
            p = o[:, None, :] + tq[:, :, None] * d[:, None, :]
            q = p - self.quad_corner[None, :, :]
            u = np.sum(q * self.quad_eu[None, :, :], axis=2) * self.quad_inv_eu2
            v = np.sum(q * self.quad_ev[None, :, :], axis=2) * self.quad_inv_ev2
            ok = (
                (np.abs(denom) > _PARALLEL_EPS)
                & (tq > ray.t_min[:, None]) & (tq < best_t[:, None])
                & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
            )
            t_masked = np.where(ok, tq, np.inf)
            j = np.argmin(t_masked, axis=1)
            rows = np.flatnonzero(t_masked[np.arange(n), j] < best_t)
            best_t[rows] = t_masked[rows, j[rows]]
            best_prim[rows] = self.n_spheres + j[rows]

        if self.bvh is not None:
            cap = np.minimum(best_t, np.where(np.isfinite(ray.t_max), ray.t_max, np.inf))
            t_tri, tri = self.bvh.intersect(
                o, d, ray.t_min, cap, self.tri_v0, self.tri_e1, self.tri_e2
            )
            rows = np.flatnonzero(tri >= 0)
            best_t[rows] = t_tri[rows]
            best_prim[rows] = self.n_spheres + self.n_quads + tri[rows]

        hit = best_prim >= 0
        return best_t, best_prim, hit

    def intersect(self, ray: Ray) -> SurfaceInteraction:
        """Nearest hit per ray; misses have valid == False."""
        t, prim, hit = self._nearest_hit(ray)
        si = SurfaceInteraction.empty(ray.count)
        si.valid = hit
        si.omega_o = -ray.dir
        rows = np.flatnonzero(hit)
        if rows.size == 0:
            return si
        si.hit_distance[rows] = t[rows]
        si.prim_id[rows] = prim[rows]
        si.x[rows] = ray.origin[rows] + t[rows, None] * ray.dir[rows]

        geom_n = np.zeros((rows.size, 3))
        p = prim[rows]
        is_s = p < self.n_spheres
        if np.any(is_s):
            j = p[is_s]
            geom_n[is_s] = (si.x[rows[is_s]] - self.sph_center[j]) / self.sph_radius[j, None]
        is_q = (p >= self.n_spheres) & (p < self.n_spheres + self.n_quads)
        if np.any(is_q):
            geom_n[is_q] = self.quad_n[p[is_q] - self.n_spheres]
        is_t = p >= self.n_spheres + self.n_quads
        if np.any(is_t):
            geom_n[is_t] = self.tri_n[p[is_t] - self.n_spheres - self.n_quads]

        cos_o = dot(geom_n, si.omega_o[rows])
        back = cos_o < 0.0
        si.back_face[rows] = back
        si.n[rows] = np.where(back[:, None], -geom_n, geom_n)

        m = self.prim_mat[p]
        si.kind[rows] = self.mat_kind[m]
        si.albedo[rows] = self.mat_albedo[m]
        si.roughness[rows] = self.mat_rough[m]
        si.emission[rows] = self.mat_emission[m]
        return si

    def occluded(self, x: np.ndarray, n: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Whether the segment from x (offset along n) to target is blocked."""
        to = target - x
        dist = norm(to)
        d = to / np.maximum(dist, 1e-300)[:, None]
        side = np.sign(dot(n, d, keepdims=True))
        side = np.where(side == 0.0, 1.0, side)
        origin = x + NORMAL_OFFSET * side * n
        ray = Ray(origin, d, 0.0, dist - 10.0 * NORMAL_OFFSET)
        _, _, hit = self._nearest_hit(ray)
        return hit

    # -- sampling --------------------------------------------------------

    def _sample_on_prims(self, prim: np.ndarray, rng: np.random.Generator):
        count = prim.shape[0]
        x = np.zeros((count, 3))
        n = np.zeros((count, 3))
        u = rng.random((count, 2))

        is_s = prim < self.n_spheres
        if np.any(is_s):
            j = prim[is_s]
            z = 1.0 - 2.0 * u[is_s, 0]
            r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
            phi = 2.0 * np.pi * u[is_s, 1]
            dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
            x[is_s] = self.sph_center[j] + self.sph_radius[j, None] * dirs
            n[is_s] = dirs
        is_q = (prim >= self.n_spheres) & (prim < self.n_spheres + self.n_quads)
        if np.any(is_q):
            j = prim[is_q] - self.n_spheres
            x[is_q] = (
                self.quad_corner[j]
                + u[is_q, 0, None] * self.quad_eu[j]
                + u[is_q, 1, None] * self.quad_ev[j]
            )
            n[is_q] = self.quad_n[j]
        is_t = prim >= self.n_spheres + self.n_quads
        if np.any(is_t):
            j = prim[is_t] - self.n_spheres - self.n_quads
            a, b = u[is_t, 0], u[is_t, 1]
            flip = a + b > 1.0
            a = np.where(flip, 1.0 - a, a)
            b = np.where(flip, 1.0 - b, b)
            x[is_t] = self.tri_v0[j] + a[:, None] * self.tri_e1[j] + b[:, None] * self.tri_e2[j]
            n[is_t] = self.tri_n[j]
        return x, n

    def sample_surface(self, count: int, rng: np.random.Generator, prim_mask=None):
        """Area-weighted surface points; returns (x, n, prim_id)."""
        area = self.prim_area if prim_mask is None else self.prim_area * prim_mask
        total = area.sum()
        if total <= 0.0:
            raise ValueError("no sampleable surface area")
        cdf = np.cumsum(area) / total
        prim = np.searchsorted(cdf, rng.random(count), side="right")
        prim = np.minimum(prim, self.n_prims - 1)
        x, n = self._sample_on_prims(prim, rng)
        return x, n, prim

    def sample_emitter(self, count: int, rng: np.random.Generator):
        """Uniform-by-area points on the union of emissive primitives.

        Returns (x, n, emission, pdf_area); pdf_area is constant
        1/total_emitter_area.
        """
        if self.emitter_prims.size == 0:
            raise ValueError("scene has no emitters")
        area = self.prim_area[self.emitter_prims]
        cdf = np.cumsum(area) / area.sum()
        pick = np.searchsorted(cdf, rng.random(count), side="right")
        prim = self.emitter_prims[np.minimum(pick, area.size - 1)]
        x, n = self._sample_on_prims(prim, rng)
        emission = self.mat_emission[self.prim_mat[prim]]
        pdf_area = np.full(count, 1.0 / self.emitter_area)
        return x, n, emission, pdf_area

    def reachable_primitives(self, seed: int, n_probes: int = 10000, max_depth: int = 4):
        """Primitives seen front-facing by probe paths from the camera.

        One-time precompute used to keep training samples off geometry whose
        front side no camera path can reach.
        """
        from .rng import stream

        rng = stream(seed, 0xFACE)
        cam = self.camera
        px = rng.random(n_probes) * cam.width
        py = rng.random(n_probes) * cam.height
        ray = camera_rays(cam, px, py)
        reachable = np.zeros(self.n_prims, dtype=bool)
        for _ in range(max_depth):
            si = self.intersect(ray)
            alive = si.valid & ~si.back_face
            reachable[np.unique(si.prim_id[alive])] = True
            rows = np.flatnonzero(alive & (si.kind != MaterialKind.EMITTER))
            if rows.size == 0:
                break
            sub = si.select(rows)
            samp = bsdf_sample(sub.kind, sub.albedo, sub.roughness, sub.n, sub.omega_o, rng)
            ok = samp.valid
            origin = sub.x[ok] + NORMAL_OFFSET * sub.n[ok]
            ray = Ray(origin, samp.omega_i[ok])
        return reachable


# -- camera rays ---------------------------------------------------------


def camera_rays(camera: Camera, px, py, jitter=None) -> Ray:
    """Rays through pixel coordinates (px, py); (0, 0) is the top-left pixel.

    jitter is the sub-pixel offset in [0, 1)^2, default pixel center.
    """
    px = np.atleast_1d(np.asarray(px, dtype=np.float64))
    py = np.atleast_1d(np.asarray(py, dtype=np.float64))
    if jitter is None:
        jx = jy = 0.5
    else:
        jx, jy = jitter[..., 0], jitter[..., 1]
    right, up_cam, forward = camera.basis()
    half_h = math.tan(camera.vertical_fov / 2.0)
    half_w = half_h * camera.width / camera.height
    x_ndc = 2.0 * (px + jx) / camera.width - 1.0
    y_ndc = 1.0 - 2.0 * (py + jy) / camera.height
    d = (
        forward
        + x_ndc[:, None] * half_w * right
        + y_ndc[:, None] * half_h * up_cam
    )
    origin = np.broadcast_to(camera.position, d.shape).copy()
    return Ray(origin, normalize(d))


def generate_camera_ray(camera: Camera, px: int, py: int) -> Ray:
    """Single ray through the center of an integer pixel."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    return camera_rays(camera, [px], [py])


# -- parsing -------------------------------------------------------------


def _floats(tokens, start, count, line_no):
    vals = []
    for tok in tokens[start : start + count]:
        try:
            v = float(tok)
        except ValueError:
            raise SceneParseError(f"line {line_no}: bad number {tok!r}") from None
        if not math.isfinite(v):
            raise SceneParseError(f"line {line_no}: non-finite number {tok!r}")
        vals.append(v)
    if len(vals) != count:
        raise SceneParseError(f"line {line_no}: expected {count} numbers")
    return vals


def _keyed(tokens, line_no, spec, required=()):
    """Parse `key v1 v2 ...` groups per spec {key: arity}; returns dict."""
    out = {}
    i = 0
    while i < len(tokens):
        key = tokens[i]
        if key not in spec:
            raise SceneParseError(f"line {line_no}: unknown key {key!r}")
        arity = spec[key]
        if arity == "s":
            if i + 1 >= len(tokens):
                raise SceneParseError(f"line {line_no}: key {key!r} needs a value")
            out[key] = tokens[i + 1]
            i += 2
        else:
            out[key] = _floats(tokens, i + 1, arity, line_no)
            i += 1 + arity
    for key in required:
        if key not in out:
            raise SceneParseError(f"line {line_no}: missing key {key!r}")
    return out


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII OBJ subset: v/f records, faces fan-triangulated, 1-based indices."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            tokens = raw.split("#", 1)[0].split()
            if not tokens:
                continue
            if tokens[0] == "v":
                verts.append(_floats(tokens, 1, 3, line_no))
            elif tokens[0] == "f":
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise SceneParseError(f"{path}:{line_no}: bad face index {tok!r}") from None
                    if k <= 0:
                        raise SceneParseError(f"{path}:{line_no}: face indices must be positive")
                    idx.append(k - 1)
                if len(idx) < 3:
                    raise SceneParseError(f"{path}:{line_no}: face needs >= 3 vertices")
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append((idx[0], a, b))
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= v.shape[0]:
        raise SceneParseError(f"{path}: face index beyond vertex count")
    return v, f


def parse_scene(text: str, base_dir=None) -> Scene:
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    camera = None
    environment = np.zeros(3)
    materials: list[MaterialRecord] = []
    mat_index: dict[str, int] = {}
    sph = ([], [], [])
    qud = ([], [], [], [])
    tri = ([], [], [], [])

    def mat_ref(name, line_no):
        if name not in mat_index:
            raise SceneParseError(f"line {line_no}: unknown material {name!r}")
        return mat_index[name]

    for line_no, raw in enumerate(text.splitlines(), 1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        rec, rest = tokens[0], tokens[1:]
        if rec == "camera":
            kv = _keyed(
                rest, line_no, {"pos": 3, "look": 3, "up": 3, "vfov": 1, "res": 2},
                required=("pos", "look", "up", "vfov", "res"),
            )
            vfov = math.radians(kv["vfov"][0])
            if not 0.0 < vfov < math.pi:
                raise SceneParseError(f"line {line_no}: vfov out of range")
            w, h = int(kv["res"][0]), int(kv["res"][1])
            if w <= 0 or h <= 0:
                raise SceneParseError(f"line {line_no}: bad resolution")
            camera = Camera(
                np.array(kv["pos"]), np.array(kv["look"]), np.array(kv["up"]), vfov, w, h
            )
        elif rec == "environment":
            environment = np.array(_floats(rest, 0, 3, line_no))
        elif rec == "material":
            if len(rest) < 2:
                raise SceneParseError(f"line {line_no}: material needs a name and kind")
            name, kind_s = rest[0], rest[1]
            try:
                kind = MaterialKind[kind_s.upper()]
            except KeyError:
                raise SceneParseError(f"line {line_no}: unknown material kind {kind_s!r}") from None
            kv = _keyed(rest[2:], line_no, {"albedo": 3, "roughness": 1, "emission": 3})
            if name in mat_index:
                raise SceneParseError(f"line {line_no}: duplicate material {name!r}")
            default_rough = 0.0 if kind == MaterialKind.MIRROR else 1.0
            try:
                mat = MaterialRecord(
                    name=name,
                    kind=kind,
                    albedo=np.array(kv.get("albedo", [0.0, 0.0, 0.0])),
                    roughness=float(kv.get("roughness", [default_rough])[0]),
                    emission=np.array(kv.get("emission", [0.0, 0.0, 0.0])),
                )
            except ValueError as exc:
                raise SceneParseError(f"line {line_no}: {exc}") from None
            mat_index[name] = len(materials)
            materials.append(mat)
        elif rec == "sphere":
            kv = _keyed(rest, line_no, {"mat": "s", "center": 3, "radius": 1},
                        required=("mat", "center", "radius"))
            if kv["radius"][0] <= 0.0:
                raise SceneParseError(f"line {line_no}: sphere radius must be positive")
            sph[0].append(kv["center"])
            sph[1].append(kv["radius"][0])
            sph[2].append(mat_ref(kv["mat"], line_no))
        elif rec == "quad":
            kv = _keyed(rest, line_no, {"mat": "s", "corner": 3, "edge_u": 3, "edge_v": 3},
                        required=("mat", "corner", "edge_u", "edge_v"))
            if np.linalg.norm(np.cross(kv["edge_u"], kv["edge_v"])) <= 0.0:
                raise SceneParseError(f"line {line_no}: degenerate quad (zero area)")
            qud[0].append(kv["corner"])
            qud[1].append(kv["edge_u"])
            qud[2].append(kv["edge_v"])
            qud[3].append(mat_ref(kv["mat"], line_no))
        elif rec == "mesh":
            kv = _keyed(rest, line_no, {"mat": "s", "path": "s"}, required=("mat", "path"))
            v, f = load_obj(base_dir / kv["path"])
            if f.shape[0] == 0:
                raise SceneParseError(f"line {line_no}: mesh {kv['path']!r} has no faces")
            m = mat_ref(kv["mat"], line_no)
            tri[0].extend(v[f[:, 0]])
            tri[1].extend(v[f[:, 1]])
            tri[2].extend(v[f[:, 2]])
            tri[3].extend([m] * f.shape[0])
        else:
            raise SceneParseError(f"line {line_no}: unknown record {rec!r}")

    if camera is None:
        raise SceneParseError("scene has no camera")
    if not materials:
        raise SceneParseError("scene has no materials")
    return Scene(camera, materials, sph, qud, tri, environment)


def load_scene(path) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(encoding="utf-8"), base_dir=path.parent)
