"""Lobe probing and footprint clustering for the glossy branch.

A glossy interaction shoots a small packet of rays importance-sampled
over its reflection lobe, clusters the hit distances with 1D K-means,
and condenses each cluster into a query footprint: a mean distance, a
combined radius (projected cone radius plus axial spread), and a query
point along the mirror direction.  Misses are counted but excluded from
clustering; an all-miss packet yields no footprints.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import dot, offset_ray, reflect_dir
from .materials import RHO_GLOSSY_MAX, MaterialKind, bsdf_sample

KMEANS_MAX_ITERS = 16
WCSS_SLACK = 1e-9


@dataclass
class ConeSampleSet:
    """Marching distances of one ray packet per shading point.

    distances is (N, T) with NaN in miss slots, so rows keep their draw
    order and hit counts can differ per point.
    """

    distances: np.ndarray
    miss_count: np.ndarray
    total: int

    @property
    def hit_count(self) -> np.ndarray:
        return self.total - self.miss_count

    def row(self, i: int) -> np.ndarray:
        d = self.distances[i]
        return d[np.isfinite(d)]


@dataclass(frozen=True)
class ClusterSummary:
    t_k: float
    count: int
    weight: float
    r_perp: float
    r_axial: float
    r_c: float
    x_prime: np.ndarray


@dataclass
class FootprintBatch:
    """Per-cluster arrays (N, K); empty clusters carry valid=False."""

    t_k: np.ndarray
    weight: np.ndarray
    r_perp: np.ndarray
    r_axial: np.ndarray
    r_c: np.ndarray
    x_prime: np.ndarray  # (N, K, 3)
    valid: np.ndarray
    hit_count: np.ndarray  # (N,)


def sample_cone_rays(scene, si, T: int, rng: np.random.Generator) -> ConeSampleSet:
    if T < 1:
        raise ValueError("T must be >= 1")
    rho = np.asarray(si.roughness)
    if np.any((rho <= 0.0) | (rho >= RHO_GLOSSY_MAX)):
        raise ValueError("cone rays need glossy roughness in (0, 0.5)")
    if np.any(dot(si.n, si.omega_o) <= 0.0):
        raise ValueError("omega_o below the surface")

    n = si.count
    rep = lambda a: np.repeat(a, T, axis=0)
    smp = bsdf_sample(
        np.full(n * T, MaterialKind.CONDUCTOR),
        rep(si.albedo),
        rep(si.roughness),
        rep(si.n),
        rep(si.omega_o),
        rng,
    )
    dist = np.full(n * T, np.nan)
    live = np.flatnonzero(smp.valid)
    if live.size:
        ray = offset_ray(rep(si.x)[live], rep(si.n)[live], smp.omega_i[live])
        hit = scene.intersect(ray)
        dist[live[hit.valid]] = hit.hit_distance[hit.valid]
    dist = dist.reshape(n, T)
    return ConeSampleSet(dist, np.isnan(dist).sum(axis=1), T)


_DP_CHUNK = 512  # keeps the (chunk, T+1, T+1) cost tensor cache-resident


def _optimal_interval_init(dists: np.ndarray, hit: np.ndarray, K: int) -> np.ndarray:
    """Exact seeding: optimal 1D clustering by interval dynamic programming.

    In one dimension the optimal K-clustering is contiguous in sorted
    order, so a prefix-sum DP over split points finds it exactly in
    O(K T^2) per row, which at packet sizes is no slower than blind
    Lloyd restarts and removes its local minima.  Returns per-row
    centers (interval means, ascending) with NaN for empty clusters;
    the Lloyd loop then just confirms the fixed point.

    Empty intervals are allowed (split at i == j), so the answer at the
    per-row hit count is the optimal clustering into at most K groups.
    """
    n, T = dists.shape
    centers = np.full((n, K), np.nan)
    rows = np.flatnonzero(hit.any(axis=1))
    for c0 in range(0, rows.size, _DP_CHUNK):
        rr = rows[c0:c0 + _DP_CHUNK]
        cnt = hit[rr].sum(axis=1)
        srt = np.sort(dists[rr], axis=1)  # NaN sorts last
        vals = np.where(np.isfinite(srt), srt, 0.0)
        r = rr.size
        ps = np.zeros((r, T + 1))
        ps2 = np.zeros((r, T + 1))
        np.cumsum(vals, axis=1, out=ps[:, 1:])
        np.cumsum(vals * vals, axis=1, out=ps2[:, 1:])
        # seg[., j, i]: cost of sorted slice [i:j), inf above the diagonal
        ix = np.arange(T + 1)
        width = np.maximum(ix[:, None] - ix[None, :], 1)
        s = ps[:, :, None] - ps[:, None, :]
        seg = ps2[:, :, None] - ps2[:, None, :] - s * s / width
        seg = np.where(ix[:, None] >= ix[None, :], np.maximum(seg, 0.0), np.inf)
        best = seg[:, :, 0].copy()  # one interval: [0:j)
        splits = np.zeros((K + 1, r, T + 1), dtype=np.int32)
        for k in range(2, K + 1):
            cand = best[:, None, :] + seg
            a = np.argmin(cand, axis=2)  # ties pick the lowest split
            splits[k] = a
            best = np.take_along_axis(cand, a[:, :, None], axis=2)[:, :, 0]
        bounds = np.zeros((r, K + 1), dtype=np.int64)
        bounds[:, K] = cnt
        end = cnt
        ar = np.arange(r)
        for k in range(K, 1, -1):
            end = splits[k][ar, end]
            bounds[:, k - 1] = end
        lo, hi = bounds[:, :-1], bounds[:, 1:]
        got = hi > lo
        csum = np.take_along_axis(ps, hi, axis=1) - np.take_along_axis(ps, lo, axis=1)
        centers[rr] = np.where(got, csum / np.maximum(hi - lo, 1), np.nan)
    return centers


def kmeans_1d_batch(dists: np.ndarray, K: int, max_iters: int = KMEANS_MAX_ITERS,
                    track_wcss: bool = False):
    """Lloyd iterations from an exact DP seed on NaN-padded rows.

    Returns (assignments (N, T) with -1 in miss slots, centers (N, K),
    wcss trace).  Cluster indices follow ascending distance; empty
    clusters keep NaN centers; rows with no finite entries come back
    all -1.  The seed is already optimal, so the loop settles within
    an iteration and only resolves boundary ties (lower index wins).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    dists = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    n, _ = dists.shape
    hit = np.isfinite(dists)
    centers = _optimal_interval_init(dists, hit, K)

    filled = np.where(hit, dists, 0.0)
    assign = np.full(dists.shape, -1, dtype=np.int64)
    trace = []
    for _ in range(max_iters):
        # ties go to the lower index via argmin's first-match rule
        gap = np.abs(dists[:, :, None] - centers[:, None, :])
        gap = np.where(np.isnan(gap), np.inf, gap)
        new_assign = np.where(hit, np.argmin(gap, axis=2), -1)
        stable = np.array_equal(new_assign, assign)
        assign = new_assign
        for k in range(K):
            m = assign == k
            cnt = m.sum(axis=1)
            got = cnt > 0
            centers[got, k] = (filled * m).sum(axis=1)[got] / cnt[got]
        if track_wcss:
            picked = np.take_along_axis(centers, np.maximum(assign, 0), axis=1)
            trace.append(float(np.sum(np.where(hit, (dists - picked) ** 2, 0.0))))
        if stable:
            break
    return assign, centers, trace


def kmeans_1d(distances: np.ndarray, K: int, max_iters: int = KMEANS_MAX_ITERS):
    """Single-row convenience wrapper; drops empty clusters and compacts."""
    distances = np.asarray(distances, dtype=np.float64).reshape(1, -1)
    if distances.size == 0:
        raise ValueError("distances must be nonempty")
    assign, centers, _ = kmeans_1d_batch(distances, K, max_iters)
    assign, centers = assign[0], centers[0]
    keep = [k for k in range(K) if np.any(assign == k)]
    remap = {k: i for i, k in enumerate(keep)}
    new_assign = np.array([remap[a] for a in assign], dtype=np.int64)
    # report exact means of the final assignment
    means = np.array([distances[0][new_assign == i].mean() for i in range(len(keep))])
    return new_assign, means


def cluster_footprints(x, omega_r, theta_c, dists, K: int,
                       max_iters: int = KMEANS_MAX_ITERS,
                       weight_denominator: str = "hits") -> FootprintBatch:
    """Cluster NaN-padded distance rows and build query footprints."""
    if weight_denominator not in ("hits", "total"):
        raise ValueError(f"unknown weight denominator {weight_denominator!r}")
    x = np.atleast_2d(x)
    omega_r = np.atleast_2d(omega_r)
    dists = np.atleast_2d(dists)
    n, T = dists.shape
    theta_c = np.broadcast_to(np.asarray(theta_c, dtype=np.float64), (n,))

    assign, _, _ = kmeans_1d_batch(dists, K, max_iters)
    hit = np.isfinite(dists)
    filled = np.where(hit, dists, 0.0)

    counts = np.zeros((n, K))
    sums = np.zeros((n, K))
    sq = np.zeros((n, K))
    for k in range(K):
        m = assign == k
        counts[:, k] = m.sum(axis=1)
        sums[:, k] = (filled * m).sum(axis=1)
        sq[:, k] = (filled**2 * m).sum(axis=1)
    valid = counts > 0
    safe = np.maximum(counts, 1)
    t_k = sums / safe
    var = np.maximum(sq / safe - t_k**2, 0.0)  # population variance, clamp fp negatives
    r_axial = np.sqrt(var)
    r_perp = t_k * np.tan(theta_c / 2.0)[:, None]
    r_c = r_perp + r_axial

    hits = hit.sum(axis=1)
    denom = np.full(n, float(T)) if weight_denominator == "total" else np.maximum(hits, 1)
    weight = np.where(valid, counts / denom[:, None], 0.0)
    x_prime = x[:, None, :] + t_k[:, :, None] * omega_r[:, None, :]
    return FootprintBatch(t_k, weight, r_perp, r_axial, r_c, x_prime, valid, hits)


def summarize_clusters(si, theta_c: float, distances, assignments, centers,
                       weight_denominator: str = "hits",
                       total: int | None = None) -> list[ClusterSummary]:
    """Single-interaction summaries from a kmeans_1d result."""
    if si.count != 1:
        raise ValueError("summarize_clusters takes one interaction")
    distances = np.asarray(distances, dtype=np.float64)
    assignments = np.asarray(assignments)
    omega_r = reflect_dir(si.n, si.omega_o)[0]
    x = si.x[0]

    hits = distances.size
    denom = float(total if weight_denominator == "total" else hits)
    if weight_denominator == "total" and total is None:
        raise ValueError("total required for weight_denominator='total'")

    out = []
    for k in range(len(centers)):
        d = distances[assignments == k]
        if d.size == 0:
            continue
        t_k = d.mean()
        r_axial = float(np.sqrt(max(np.mean(d * d) - t_k * t_k, 0.0)))
        r_perp = t_k * np.tan(theta_c / 2.0)
        out.append(ClusterSummary(
            t_k=float(t_k),
            count=int(d.size),
            weight=d.size / denom,
            r_perp=float(r_perp),
            r_axial=float(r_axial),
            r_c=float(r_perp + r_axial),
            x_prime=x + t_k * omega_r,
        ))
    return out


def cv_diagnostics(dists: np.ndarray, K: int):
    """Global vs hit-weighted within-cluster coefficient of variation.

    Returns (cv_global (N,), cv_cluster (N,), mean_radius helper inputs):
    rows with fewer than one hit produce NaN.
    """
    dists = np.atleast_2d(dists)
    n, _ = dists.shape
    hit = np.isfinite(dists)
    hits = hit.sum(axis=1)
    filled = np.where(hit, dists, 0.0)
    safe = np.maximum(hits, 1)
    mean = filled.sum(axis=1) / safe
    var = np.maximum((filled**2).sum(axis=1) / safe - mean**2, 0.0)
    cv_global = np.where(hits > 0, np.sqrt(var) / np.maximum(mean, 1e-300), np.nan)

    assign, _, _ = kmeans_1d_batch(dists, K)
    cv_cluster = np.zeros(n)
    for k in range(K):
        m = assign == k
        cnt = m.sum(axis=1)
        got = cnt > 0
        safe_k = np.maximum(cnt, 1)
        mu = (filled * m).sum(axis=1) / safe_k
        vk = np.maximum((filled**2 * m).sum(axis=1) / safe_k - mu**2, 0.0)
        cv_k = np.where(got & (mu > 0), np.sqrt(vk) / np.maximum(mu, 1e-300), 0.0)
        cv_cluster += np.where(got, cnt / safe * cv_k, 0.0)
    return cv_global, np.where(hits > 0, cv_cluster, np.nan)
