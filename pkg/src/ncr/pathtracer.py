"""Monte Carlo reference renderer and incident-ray sampler.

trace_radiance runs a wavefront path tracer over batched rays: next
event estimation on area emitters, balance-heuristic MIS against BSDF
sampling, and Russian roulette on deep paths.  Emitting surfaces
absorb; escaped rays pick up the (default zero) constant environment.

render_reference parallelizes over pixel tiles, each with its own
counter-based stream keyed by (seed, tile id), so output is bitwise
reproducible for any worker count.  sample_incident draws the plain
BSDF-importance rays that the residual estimator averages.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Ray, dot, offset_ray
from .materials import MaterialKind, bsdf_eval, bsdf_pdf, bsdf_sample
from .rng import stream
from .scene import Scene, SurfaceInteraction, camera_rays

RR_START_DEPTH = 5
RR_SURVIVAL_MIN = 0.05
RR_SURVIVAL_MAX = 0.95
DEFAULT_MAX_DEPTH = 64
TILE_SIZE = 32
MAX_RAYS_PER_CHUNK = 1 << 16


@dataclass
class TraceStats:
    nan_paths: int = 0


@dataclass
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) linear HDR

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel block {self.pixels.shape} does not match size")
        if not np.all(np.isfinite(self.pixels)) or np.any(self.pixels < 0.0):
            raise ValueError("image must be finite and nonnegative")


@dataclass
class IncidentSample:
    omega_i: np.ndarray
    pdf: float
    weight: np.ndarray  # f_s * |n.omega_i| / pdf
    hit: SurfaceInteraction | None


@dataclass
class IncidentBatch:
    """M BSDF-importance rays per interaction, flattened row-major."""

    omega_i: np.ndarray   # (N, M, 3)
    pdf: np.ndarray       # (N, M)
    weight: np.ndarray    # (N, M, 3)
    valid: np.ndarray     # (N, M) sampling succeeded
    hits: SurfaceInteraction  # length N*M; .valid False on miss

    def row_samples(self, i: int) -> list[IncidentSample]:
        m = self.omega_i.shape[1]
        out = []
        for j in range(m):
            if not self.valid[i, j]:
                continue
            hit = self.hits.select(np.array([i * m + j]))
            out.append(IncidentSample(
                self.omega_i[i, j], float(self.pdf[i, j]),
                self.weight[i, j], hit if hit.valid[0] else None))
        return out


def emitter_pdf_sa(scene: Scene, si: SurfaceInteraction) -> np.ndarray:
    """Solid-angle density of light sampling for the points just hit."""
    cos_l = np.maximum(dot(si.n, si.omega_o), 1e-12)
    return si.hit_distance**2 / (cos_l * scene.emitter_area)


def trace_radiance(scene: Scene, ray: Ray, rng: np.random.Generator,
                   max_depth: int = DEFAULT_MAX_DEPTH,
                   stats: TraceStats | None = None) -> np.ndarray:
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    n = ray.count
    L = np.zeros((n, 3))
    idx = np.arange(n)
    beta = np.ones((n, 3))
    spec_prev = np.ones(n, dtype=bool)  # camera rays count emitters fully
    pdf_prev = np.zeros(n)
    cur = ray
    has_lights = scene.emitter_area > 0.0

    for depth in range(max_depth):
        if idx.size == 0:
            break
        si = scene.intersect(cur)

        miss = ~si.valid
        if np.any(miss):
            L[idx[miss]] += beta[miss] * scene.environment
        keep = si.valid
        idx, beta = idx[keep], beta[keep]
        spec_prev, pdf_prev = spec_prev[keep], pdf_prev[keep]
        si = si.select(keep)
        if idx.size == 0:
            break

        glowing = np.any(si.emission > 0.0, axis=1)
        if np.any(glowing):
            w = np.ones(idx.size)
            need = glowing & ~spec_prev
            if np.any(need) and has_lights:
                pl = emitter_pdf_sa(scene, si.select(need))
                w[need] = pdf_prev[need] / (pdf_prev[need] + pl)
            L[idx[glowing]] += beta[glowing] * si.emission[glowing] * w[glowing, None]

        # emitters absorb; everything else scatters on
        keep = si.kind != MaterialKind.EMITTER
        idx, beta = idx[keep], beta[keep]
        spec_prev, pdf_prev = spec_prev[keep], pdf_prev[keep]
        si = si.select(keep)
        if idx.size == 0:
            break

        if has_lights:
            xl, nl, le, pdf_area = scene.sample_emitter(idx.size, rng)
            dvec = xl - si.x
            dist = np.linalg.norm(dvec, axis=1)
            good = dist > 1e-9
            wi = np.where(good[:, None], dvec / np.maximum(dist, 1e-9)[:, None], 0.0)
            cos_s = dot(si.n, wi)
            cos_l = np.abs(dot(nl, -wi))  # emitters are two-sided
            good &= (cos_s > 0.0) & (cos_l > 1e-9)
            if np.any(good):
                vis = ~scene.occluded(si.x[good], si.n[good], xl[good])
                if np.any(vis):
                    g = np.flatnonzero(good)[vis]
                    f = bsdf_eval(si.kind[g], si.albedo[g], si.roughness[g],
                                  si.n[g], si.omega_o[g], wi[g])
                    pdf_sa = pdf_area[g] * dist[g] ** 2 / cos_l[g]
                    pdf_b = bsdf_pdf(si.kind[g], si.roughness[g],
                                     si.n[g], si.omega_o[g], wi[g])
                    contrib = beta[g] * f * le[g] * (cos_s[g] / (pdf_sa + pdf_b))[:, None]
                    L[idx[g]] += contrib

        smp = bsdf_sample(si.kind, si.albedo, si.roughness, si.n, si.omega_o, rng)
        keep = smp.valid
        beta = beta[keep] * smp.weight[keep]
        idx = idx[keep]
        spec_prev = smp.is_specular[keep]
        pdf_prev = smp.pdf[keep]
        si = si.select(keep)
        omega_i = smp.omega_i[keep]
        if idx.size == 0:
            break

        if depth >= RR_START_DEPTH:
            survival = np.clip(beta.max(axis=1), RR_SURVIVAL_MIN, RR_SURVIVAL_MAX)
            keep = rng.uniform(size=idx.size) < survival
            beta = beta[keep] / survival[keep, None]
            idx = idx[keep]
            spec_prev, pdf_prev = spec_prev[keep], pdf_prev[keep]
            si = si.select(keep)
            omega_i = omega_i[keep]
            if idx.size == 0:
                break

        cur = offset_ray(si.x, si.n, omega_i)

    bad = ~np.all(np.isfinite(L), axis=1)
    if np.any(bad):
        L[bad] = 0.0
        if stats is not None:
            stats.nan_paths += int(bad.sum())
    return L


def _subpixel_offsets(spp: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Jitter (count, spp, 2); stratified when spp is a perfect square."""
    s = int(round(spp**0.5))
    u = rng.uniform(size=(count, spp, 2))
    if s * s == spp:
        gx, gy = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        u = (grid[None] + u) / s
    return u


def _render_tile(scene, camera, spp, seed, tile_id, x0, y0, x1, y1, max_depth, stats):
    rng = stream(seed, tile_id)
    px, py = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="xy")
    px, py = px.ravel(), py.ravel()
    n_px = px.size
    acc = np.zeros((n_px, 3))
    jitter = _subpixel_offsets(spp, n_px, rng)
    chunk = max(1, MAX_RAYS_PER_CHUNK // n_px)
    for k0 in range(0, spp, chunk):
        k1 = min(k0 + chunk, spp)
        m = k1 - k0
        j = jitter[:, k0:k1].reshape(-1, 2)
        rays = camera_rays(camera, np.repeat(px, m), np.repeat(py, m), j)
        rad = trace_radiance(scene, rays, rng, max_depth, stats)
        acc += rad.reshape(n_px, m, 3).sum(axis=1)
    return acc.reshape(y1 - y0, x1 - x0, 3) / spp


def render_reference(scene: Scene, spp: int, seed: int, camera=None,
                     workers: int = 1, max_depth: int = DEFAULT_MAX_DEPTH,
                     stats: TraceStats | None = None) -> Image:
    if spp < 1:
        raise ValueError("spp must be >= 1")
    camera = camera or scene.camera
    w, h = camera.width, camera.height
    nx = (w + TILE_SIZE - 1) // TILE_SIZE
    ny = (h + TILE_SIZE - 1) // TILE_SIZE
    jobs = []
    for ty in range(ny):
        for tx in range(nx):
            jobs.append((ty * nx + tx, tx * TILE_SIZE, ty * TILE_SIZE,
                         min((tx + 1) * TILE_SIZE, w), min((ty + 1) * TILE_SIZE, h)))

    pixels = np.zeros((h, w, 3))
    tile_stats = [TraceStats() for _ in jobs] if stats is not None else [None] * len(jobs)

    def run(job_i):
        tid, x0, y0, x1, y1 = jobs[job_i]
        return job_i, _render_tile(scene, camera, spp, seed, tid,
                                   x0, y0, x1, y1, max_depth, tile_stats[job_i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(jobs))))
    else:
        results = [run(i) for i in range(len(jobs))]
    for job_i, block in results:
        _, x0, y0, x1, y1 = jobs[job_i]
        pixels[y0:y1, x0:x1] = block
    if stats is not None:
        stats.nan_paths += sum(t.nan_paths for t in tile_stats)
    return Image(w, h, pixels)


def sample_incident(scene: Scene, si: SurfaceInteraction, M: int,
                    rng: np.random.Generator) -> IncidentBatch:
    if M < 0:
        raise ValueError("M must be >= 0")
    if np.any(si.kind == MaterialKind.EMITTER):
        raise ValueError("scatter sampling is undefined on emitters")
    if np.any(dot(si.n, si.omega_o) <= 0.0):
        raise ValueError("omega_o below the surface")
    n = si.count
    if M == 0:
        return IncidentBatch(np.zeros((n, 0, 3)), np.zeros((n, 0)),
                             np.zeros((n, 0, 3)), np.zeros((n, 0), dtype=bool),
                             SurfaceInteraction.empty(0))

    rep = lambda a: np.repeat(a, M, axis=0)
    smp = bsdf_sample(rep(si.kind), rep(si.albedo), rep(si.roughness),
                      rep(si.n), rep(si.omega_o), rng)
    hits = SurfaceInteraction.empty(n * M)
    live = np.flatnonzero(smp.valid)
    if live.size:
        ray = offset_ray(rep(si.x)[live], rep(si.n)[live], smp.omega_i[live])
        found = scene.intersect(ray)
        for name in ("x", "n", "omega_o", "albedo", "roughness", "emission",
                     "kind", "prim_id", "back_face", "valid", "hit_distance"):
            getattr(hits, name)[live] = getattr(found, name)
    return IncidentBatch(
        smp.omega_i.reshape(n, M, 3),
        smp.pdf.reshape(n, M),
        smp.weight.reshape(n, M, 3),
        smp.valid.reshape(n, M),
        hits,
    )
