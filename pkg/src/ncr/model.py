"""Dual-branch radiance model, rendering-equation evaluators, and training.

The model predicts outgoing radiance at a surface point from two learned
branches: a diffuse branch reading a concatenated multi-level feature grid,
and a glossy branch that marches a packet of reflection-lobe rays, clusters
their hit distances, and queries a scale-interpolated grid once per cluster
footprint.  A small modulation network blends the branches on glossy
surfaces.  Roughness picks the branch: 0 means a perfect mirror that is
traced through recursively, (0, 0.5) is glossy, [0.5, 1] is diffuse-only.
Emitted radiance stays outside the networks on both sides, so the branches
only ever learn reflected light.

Training needs no reference images.  Each step draws surface interactions,
evaluates outgoing radiance directly (LHS) and via one scattering bounce
whose hit radiance comes from the same model (RHS), and descends the
relative mean-square residual between the two.  Gradients flow through
both sides; the normalizing mean in the denominator is treated as a
constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import (FootprintBatch, cluster_footprints, cv_diagnostics,
                         sample_cone_rays)
from .cone_table import ConeTable, lookup_cone_angle
from .geometry import dot, reflect_dir, offset_ray
from .grid import GradBuffer, GridSpec, HashGrid
from .materials import (RHO_GLOSSY_MAX, MaterialKind, _sample_cosine_dirs,
                        bsdf_eval, bsdf_pdf)
from .mlp import MLP, AdamState, MLPSpec, adam_step, adam_step_rows
from .pathtracer import Image, emitter_pdf_sa, sample_incident
from .rng import stream
from .scene import Scene, SurfaceInteraction, camera_rays

DIFFUSE_GRID_SPEC = GridSpec(levels=4, base_resolution=32, growth_factor=2.0,
                             feature_dim=2, mode="concat")
GLOSSY_GRID_SPEC = GridSpec(levels=8, base_resolution=4, growth_factor=2.0,
                            feature_dim=2, mode="scale_interp")

# Stream ids so each consumer of randomness gets an independent sequence.
_SID_PROBES = 0xFACE
_SID_TRAIN = 0x7EA1
_SID_RENDER = 0xCA3
_SID_DIAG = 0xD1A6


def diffuse_mlp_spec(grid: GridSpec = DIFFUSE_GRID_SPEC) -> MLPSpec:
    # features | position | reflection dir | normal | roughness | albedo
    return MLPSpec(grid.output_dim + 3 + 3 + 3 + 1 + 3, 3, 3, 128)


def glossy_mlp_spec(grid: GridSpec = GLOSSY_GRID_SPEC) -> MLPSpec:
    # features | query point | incoming dir | footprint radius
    return MLPSpec(grid.feature_dim + 3 + 3 + 1, 3, 2, 64)


def mod_mlp_spec() -> MLPSpec:
    # diffuse color | glossy color | roughness | albedo
    return MLPSpec(3 + 3 + 1 + 3, 3, 1, 32)


@dataclass(frozen=True)
class Hyper:
    t_train: int = 128
    t_render: int = 32
    t_secondary: int = 16
    k_clusters: int = 4
    s: float = 1.0
    tau: float = 0.99
    rho_glossy_max: float = RHO_GLOSSY_MAX
    eps_loss: float = 1e-2
    specular_depth_cap: int = 8
    weight_denominator: str = "hits"

    def __post_init__(self):
        if min(self.t_train, self.t_render, self.t_secondary, self.k_clusters) < 1:
            raise ValueError("ray and cluster counts must be >= 1")
        if self.s <= 0.0 or self.eps_loss <= 0.0:
            raise ValueError("s and eps_loss must be positive")
        if self.specular_depth_cap < 1:
            raise ValueError("specular_depth_cap must be >= 1")
        if self.weight_denominator not in ("hits", "total"):
            raise ValueError(f"unknown weight denominator {self.weight_denominator!r}")


@dataclass(frozen=True)
class AblationFlags:
    """Render-path switches; at most one may be set per run."""

    disable_diffuse: bool = False
    disable_glossy: bool = False
    disable_level_interp: bool = False
    disable_cone: bool = False

    def __post_init__(self):
        if sum((self.disable_diffuse, self.disable_glossy,
                self.disable_level_interp, self.disable_cone)) > 1:
            raise ValueError("ablation flags are mutually exclusive")

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        opts = {"diffuse": "disable_diffuse", "glossy": "disable_glossy",
                "interp": "disable_level_interp", "cone": "disable_cone"}
        if name not in opts:
            raise ValueError(f"unknown ablation {name!r} (choose from {sorted(opts)})")
        return cls(**{opts[name]: True})


@dataclass
class EvalDiagnostics:
    depth_cap_hits: int = 0


@dataclass
class Gradients:
    """Per-group parameter gradients from one backward pass."""

    diffuse_grid: GradBuffer
    glossy_grid: GradBuffer
    diffuse_mlp: np.ndarray
    glossy_mlp: np.ndarray
    mod_mlp: np.ndarray


class EvalTape:
    """Chain records from one forward evaluation.

    Forward passes append independent closures; backward(upstream, grads)
    scatters d(sum(upstream * output))/d(params) into the accumulator.
    """

    def __init__(self):
        self.pieces = []

    def backward(self, upstream: np.ndarray, grads: Gradients) -> None:
        for piece in self.pieces:
            piece(np.asarray(upstream, dtype=np.float64), grads)


class NCRModel:
    """Bundle of the two grids, three networks, cone table, and scene frame.

    The grids parameterize positions in the unit cube of one scene, so the
    model carries that scene's normalization (world_lo, unit_scale) with it.
    """

    def __init__(self, diffuse_grid: HashGrid, diffuse_mlp: MLP,
                 glossy_grid: HashGrid, glossy_mlp: MLP, mod_mlp: MLP,
                 cone_table: ConeTable, hyper: Hyper,
                 world_lo: np.ndarray, unit_scale: float, step: int = 0):
        if diffuse_mlp.spec.input_dim != diffuse_grid.spec.output_dim + 13:
            raise ValueError("diffuse network does not match its grid layout")
        if glossy_mlp.spec.input_dim != glossy_grid.spec.feature_dim + 7:
            raise ValueError("glossy network does not match its grid layout")
        if mod_mlp.spec.input_dim != 10 or mod_mlp.spec.output_dim != 3:
            raise ValueError("modulation network must map 10 -> 3")
        if abs(hyper.tau - cone_table.tau) > 1e-12:
            raise ValueError(f"hyper tau {hyper.tau} != cone table tau {cone_table.tau}")
        self.diffuse_grid = diffuse_grid
        self.diffuse_mlp = diffuse_mlp
        self.glossy_grid = glossy_grid
        self.glossy_mlp = glossy_mlp
        self.mod_mlp = mod_mlp
        self.cone_table = cone_table
        self.hyper = hyper
        self.world_lo = np.asarray(world_lo, dtype=np.float64).reshape(3)
        self.unit_scale = float(unit_scale)
        if not (np.all(np.isfinite(self.world_lo)) and self.unit_scale > 0.0):
            raise ValueError("bad scene normalization frame")
        self.step = int(step)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.world_lo) * self.unit_scale, 0.0, 1.0)

    def zero_grads(self) -> Gradients:
        return Gradients(
            diffuse_grid=self.diffuse_grid.grad_buffer(),
            glossy_grid=self.glossy_grid.grad_buffer(),
            diffuse_mlp=np.zeros(self.diffuse_mlp.n_params),
            glossy_mlp=np.zeros(self.glossy_mlp.n_params),
            mod_mlp=np.zeros(self.mod_mlp.n_params),
        )


def build_model(scene: Scene, cone_table: ConeTable,
                hyper: Hyper | None = None, seed: int = 0) -> NCRModel:
    hyper = hyper or Hyper(tau=cone_table.tau)
    return NCRModel(
        diffuse_grid=HashGrid(DIFFUSE_GRID_SPEC, stream(seed, 0xD1F0)),
        diffuse_mlp=MLP(diffuse_mlp_spec(), stream(seed, 0xD1F1)),
        glossy_grid=HashGrid(GLOSSY_GRID_SPEC, stream(seed, 0x6100)),
        glossy_mlp=MLP(glossy_mlp_spec(), stream(seed, 0x6101)),
        mod_mlp=MLP(mod_mlp_spec(), stream(seed, 0x10D0)),
        cone_table=cone_table,
        hyper=hyper,
        world_lo=scene.world_bounds[0],
        unit_scale=scene.unit_scale,
    )


def dispatch_masks(kind: np.ndarray, roughness: np.ndarray):
    """Partition a batch into (emitter, specular, glossy, diffuse) lanes.

    Emitters win regardless of roughness; the rest split on roughness at
    0 and RHO_GLOSSY_MAX.  Exactly one mask is set per lane.
    """
    kind = np.asarray(kind)
    roughness = np.asarray(roughness)
    emitter = kind == MaterialKind.EMITTER
    specular = ~emitter & (roughness == 0.0)
    glossy = ~emitter & (roughness > 0.0) & (roughness < RHO_GLOSSY_MAX)
    diffuse = ~emitter & (roughness >= RHO_GLOSSY_MAX)
    return emitter, specular, glossy, diffuse


# -- branch evaluation -----------------------------------------------------


def _diffuse_branch(model: NCRModel, si: SurfaceInteraction):
    x_hat = model.normalize(si.x)
    omega_r = reflect_dir(si.n, si.omega_o)
    feats, rec = model.diffuse_grid.query_concat(x_hat)
    net_in = np.concatenate(
        [feats, x_hat, omega_r, si.n, si.roughness[:, None], si.albedo], axis=1)
    out, tape = model.diffuse_mlp.forward(net_in)
    return out, (rec, tape)


def _diffuse_grad(model: NCRModel, aux, upstream: np.ndarray, grads: Gradients):
    rec, tape = aux
    pg, gin = model.diffuse_mlp.backward(tape, upstream)
    grads.diffuse_mlp += pg
    d = model.diffuse_grid.spec.output_dim
    model.diffuse_grid.backward(rec, gin[:, :d], grads.diffuse_grid)


def _single_ray_footprints(scene: Scene, si: SurfaceInteraction,
                           omega_r: np.ndarray) -> FootprintBatch:
    """Degenerate footprints from one specular-direction ray (cone ablation)."""
    n = si.count
    hit = scene.intersect(offset_ray(si.x, si.n, omega_r))
    t_k = np.where(hit.valid, hit.hit_distance, 0.0)[:, None]
    valid = hit.valid[:, None]
    zeros = np.zeros((n, 1))
    x_prime = si.x[:, None, :] + t_k[:, :, None] * omega_r[:, None, :]
    return FootprintBatch(t_k, valid.astype(np.float64), zeros, zeros, zeros,
                          x_prime, valid, hit.valid.astype(np.int64))


def _glossy_from_footprints(model: NCRModel, fp: FootprintBatch,
                            omega_r: np.ndarray, disable_interp: bool = False):
    """Weighted sum of per-cluster network colors; aux carries the tape."""
    n = fp.weight.shape[0]
    out = np.zeros((n, 3))
    rows, cols = np.nonzero(fp.valid)
    if rows.size == 0:
        return out, None
    p_hat = model.normalize(fp.x_prime[rows, cols])
    r_hat = fp.r_c[rows, cols] * model.unit_scale
    if disable_interp:
        feats, rec = model.glossy_grid.query_mean(p_hat)
    else:
        feats, rec = model.glossy_grid.query_scale(p_hat, r_hat, model.hyper.s)
    net_in = np.concatenate([feats, p_hat, -omega_r[rows], r_hat[:, None]], axis=1)
    vals, tape = model.glossy_mlp.forward(net_in)
    w = fp.weight[rows, cols]
    np.add.at(out, rows, w[:, None] * vals)
    return out, (rows, w, rec, tape)


def _glossy_grad(model: NCRModel, aux, upstream: np.ndarray, grads: Gradients):
    if aux is None:
        return
    rows, w, rec, tape = aux
    pg, gin = model.glossy_mlp.backward(tape, upstream[rows] * w[:, None])
    grads.glossy_mlp += pg
    d = model.glossy_grid.spec.feature_dim
    model.glossy_grid.backward(rec, gin[:, :d], grads.glossy_grid)


def _glossy_branch(model: NCRModel, scene: Scene, si: SurfaceInteraction,
                   rng: np.random.Generator, T: int,
                   ablate: AblationFlags | None = None):
    omega_r = reflect_dir(si.n, si.omega_o)
    if ablate is not None and ablate.disable_cone:
        fp = _single_ray_footprints(scene, si, omega_r)
    else:
        theta_c = lookup_cone_angle(model.cone_table, si.roughness)
        cones = sample_cone_rays(scene, si, T, rng)
        fp = cluster_footprints(si.x, omega_r, theta_c, cones.distances,
                                model.hyper.k_clusters,
                                weight_denominator=model.hyper.weight_denominator)
    disable_interp = ablate is not None and ablate.disable_level_interp
    return _glossy_from_footprints(model, fp, omega_r, disable_interp)


# -- LHS -------------------------------------------------------------------


def _trace_specular(scene: Scene, si: SurfaceInteraction, cap: int,
                    diagnostics: EvalDiagnostics | None = None):
    """Follow mirror lanes until a non-mirror surface or the bounce cap.

    Returns (terminal interactions, accumulated mirror tint, radiance
    already resolved along the chain, lanes still needing a branch eval).
    Chains that escape pick up the environment; chains that exhaust the
    cap fall back to their emission (none, for mirrors) and are counted.
    """
    n = si.count
    cur = si.select(np.arange(n))
    tint = np.ones((n, 3))
    resolved = np.zeros((n, 3))
    alive = np.ones(n, dtype=bool)
    for _ in range(cap):
        _, spec, _, _ = dispatch_masks(cur.kind, cur.roughness)
        rows = np.flatnonzero(alive & spec)
        if rows.size == 0:
            return cur, tint, resolved, alive
        sub = cur.select(rows)
        omega_r = reflect_dir(sub.n, sub.omega_o)
        nxt = scene.intersect(offset_ray(sub.x, sub.n, omega_r))
        tint[rows] *= sub.albedo
        miss = rows[~nxt.valid]
        resolved[miss] += tint[miss] * scene.environment
        alive[miss] = False
        land = np.flatnonzero(nxt.valid)
        keep = rows[land]
        got = nxt.select(land)
        for name in ("x", "n", "omega_o", "hit_distance", "kind", "albedo",
                     "roughness", "emission", "prim_id", "back_face", "valid"):
            getattr(cur, name)[keep] = getattr(got, name)
    _, spec, _, _ = dispatch_masks(cur.kind, cur.roughness)
    over = np.flatnonzero(alive & spec)
    if over.size:
        if diagnostics is not None:
            diagnostics.depth_cap_hits += int(over.size)
        resolved[over] += tint[over] * cur.emission[over]
        alive[over] = False
    return cur, tint, resolved, alive


def _lhs_forward(model: NCRModel, scene: Scene, si: SurfaceInteraction,
                 rng: np.random.Generator, T: int, tape: EvalTape | None = None,
                 diagnostics: EvalDiagnostics | None = None,
                 ablate: AblationFlags | None = None) -> np.ndarray:
    if not np.all(si.valid):
        raise ValueError("radiance evaluation needs valid interactions")
    term, tint, out, alive = _trace_specular(
        scene, si, model.hyper.specular_depth_cap, diagnostics)
    rows = np.flatnonzero(alive)
    if rows.size == 0:
        return out
    sub = term.select(rows)
    # emission stays outside the networks; non-emitters carry zero
    out[rows] += tint[rows] * sub.emission
    _, _, glossy, diffuse = dispatch_masks(sub.kind, sub.roughness)

    d_rows = rows[diffuse]
    if d_rows.size:
        val, aux = _diffuse_branch(model, sub.select(diffuse))
        out[d_rows] += tint[d_rows] * val
        if tape is not None:
            d_tint = tint[d_rows]

            def dif_piece(up, grads, aux=aux, d_rows=d_rows, d_tint=d_tint):
                _diffuse_grad(model, aux, up[d_rows] * d_tint, grads)

            tape.pieces.append(dif_piece)

    g_rows = rows[glossy]
    if g_rows.size:
        gsub = sub.select(glossy)
        if ablate is not None and ablate.disable_glossy:
            val, aux = _diffuse_branch(model, gsub)
            out[g_rows] += tint[g_rows] * val
            if tape is not None:
                g_tint = tint[g_rows]
                tape.pieces.append(
                    lambda up, grads, aux=aux, g_rows=g_rows, g_tint=g_tint:
                        _diffuse_grad(model, aux, up[g_rows] * g_tint, grads))
        elif ablate is not None and ablate.disable_diffuse:
            val, aux = _glossy_branch(model, scene, gsub, rng, T, ablate)
            out[g_rows] += tint[g_rows] * val
            if tape is not None:
                g_tint = tint[g_rows]
                tape.pieces.append(
                    lambda up, grads, aux=aux, g_rows=g_rows, g_tint=g_tint:
                        _glossy_grad(model, aux, up[g_rows] * g_tint, grads))
        else:
            l_dif, aux_d = _diffuse_branch(model, gsub)
            l_glo, aux_g = _glossy_branch(model, scene, gsub, rng, T, ablate)
            mod_in = np.concatenate(
                [l_dif, l_glo, gsub.roughness[:, None], gsub.albedo], axis=1)
            val, mod_tape = model.mod_mlp.forward(mod_in)
            out[g_rows] += tint[g_rows] * val
            if tape is not None:
                g_tint = tint[g_rows]

                def glo_piece(up, grads, aux_d=aux_d, aux_g=aux_g,
                              mod_tape=mod_tape, g_rows=g_rows, g_tint=g_tint):
                    pg, gin = model.mod_mlp.backward(mod_tape, up[g_rows] * g_tint)
                    grads.mod_mlp += pg
                    _diffuse_grad(model, aux_d, gin[:, 0:3], grads)
                    _glossy_grad(model, aux_g, gin[:, 3:6], grads)

                tape.pieces.append(glo_piece)
    return out


# -- RHS ---------------------------------------------------------------------


def _direct_light(scene: Scene, si: SurfaceInteraction, M: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Reflected direct light, one area-light sample per lobe sample.

    Balance-heuristic MIS against the BSDF pdf, mirroring the emitter-hit
    weighting of the lobe samples.  Purely a function of the scene, so no
    gradients are involved.
    """
    n_pts = si.count
    rep = lambda a: np.repeat(a, M, axis=0)
    x, nrm, wo = rep(si.x), rep(si.n), rep(si.omega_o)
    xl, nl, le, pdf_area = scene.sample_emitter(n_pts * M, rng)
    dvec = xl - x
    dist = np.linalg.norm(dvec, axis=1)
    good = dist > 1e-9
    wi = np.where(good[:, None], dvec / np.maximum(dist, 1e-9)[:, None], 0.0)
    cos_s = dot(nrm, wi)
    cos_l = np.abs(dot(nl, -wi))  # emitters are two-sided
    good &= (cos_s > 0.0) & (cos_l > 1e-9)
    contrib = np.zeros((n_pts * M, 3))
    g = np.flatnonzero(good)
    if g.size:
        g = g[~scene.occluded(x[g], nrm[g], xl[g])]
    if g.size:
        kind, alb, rough = rep(si.kind)[g], rep(si.albedo)[g], rep(si.roughness)[g]
        f = bsdf_eval(kind, alb, rough, nrm[g], wo[g], wi[g])
        pdf_sa = pdf_area[g] * dist[g] ** 2 / cos_l[g]
        pdf_b = bsdf_pdf(kind, rough, nrm[g], wo[g], wi[g])
        contrib[g] = f * le[g] * (cos_s[g] / (pdf_sa + pdf_b))[:, None]
    return contrib.reshape(n_pts, M, 3).mean(axis=1)


def _rhs_forward(model: NCRModel, scene: Scene, si: SurfaceInteraction, M: int,
                 rng: np.random.Generator, tape: EvalTape | None = None,
                 diagnostics: EvalDiagnostics | None = None,
                 radiance_fn=None) -> np.ndarray:
    """Scattering-integral estimate of outgoing radiance.

    Direct light is sampled on the lights and combined with the lobe
    samples by multiple importance sampling; without it the estimate is
    a rare-spike process at small M, which destabilizes the relative
    training loss badly enough to collapse the field.

    radiance_fn(si, rng) -> (N, 3) replaces the model at secondary hits
    when given (no gradients flow through it); the default is the model's
    own LHS evaluation at the reduced secondary ray count.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not np.all(si.valid):
        raise ValueError("radiance evaluation needs valid interactions")

    def secondary(batch, sub_tape):
        if radiance_fn is not None:
            return radiance_fn(batch, rng)
        return _lhs_forward(model, scene, batch, rng, model.hyper.t_secondary,
                            sub_tape, diagnostics)

    out = si.emission.copy()
    _, specular, glossy, diffuse = dispatch_masks(si.kind, si.roughness)

    # Mirrors: the delta lobe collapses the M-sample average to one ray.
    rows = np.flatnonzero(specular)
    if rows.size:
        sub = si.select(rows)
        omega_r = reflect_dir(sub.n, sub.omega_o)
        hit = scene.intersect(offset_ray(sub.x, sub.n, omega_r))
        ok = np.flatnonzero(hit.valid)
        if ok.size:
            hrows = rows[ok]
            coeff = sub.albedo[ok]
            sub_tape = EvalTape() if tape is not None else None
            vals = secondary(hit.select(ok), sub_tape)
            out[hrows] += coeff * vals
            if sub_tape is not None:
                tape.pieces.append(
                    lambda up, grads, st=sub_tape, hrows=hrows, coeff=coeff:
                        st.backward(up[hrows] * coeff, grads))

    rows = np.flatnonzero(glossy | diffuse)
    if rows.size:
        sub = si.select(rows)
        inc = sample_incident(scene, sub, M, rng)
        landed = inc.valid & inc.hits.valid.reshape(rows.size, M)
        pr, pm = np.nonzero(landed)
        if pr.size:
            hits = inc.hits.select(pr * M + pm)
            coeff = inc.weight[pr, pm] / M
            orig = rows[pr]
            emitting = hits.kind == MaterialKind.EMITTER
            # lobe samples landing on a light carry only its emission,
            # weighted against the light-sampling pdf
            e = np.flatnonzero(emitting)
            if e.size:
                pdf_b = inc.pdf[pr[e], pm[e]]
                w = pdf_b / (pdf_b + emitter_pdf_sa(scene, hits.select(e)))
                np.add.at(out, orig[e], coeff[e] * w[:, None] * hits.emission[e])
            live = np.flatnonzero(~emitting)
            if live.size:
                sub_tape = EvalTape() if tape is not None else None
                vals = secondary(hits.select(live), sub_tape)
                np.add.at(out, orig[live], coeff[live] * vals)
                if sub_tape is not None:
                    tape.pieces.append(
                        lambda up, grads, st=sub_tape, o=orig[live], c=coeff[live]:
                            st.backward(up[o] * c, grads))
        if scene.emitter_area > 0.0:
            out[rows] += _direct_light(scene, sub, M, rng)
    return out


# -- public evaluators -------------------------------------------------------


def eval_diffuse(model: NCRModel, si: SurfaceInteraction,
                 omega_o: np.ndarray | None = None) -> np.ndarray:
    """Diffuse-branch radiance; pure in (model, si)."""
    if omega_o is not None:
        si = si.select(np.arange(si.count))
        si.omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    out, _ = _diffuse_branch(model, si)
    return out


def eval_glossy(model: NCRModel, scene: Scene, si: SurfaceInteraction,
                rng: np.random.Generator, T: int | None = None) -> np.ndarray:
    """Glossy-branch radiance: cone rays, depth clusters, per-cluster queries."""
    out, _ = _glossy_branch(model, scene, si, rng, T or model.hyper.t_render)
    return out


def eval_radiance_lhs(model: NCRModel, scene: Scene, si: SurfaceInteraction,
                      rng: np.random.Generator, T: int | None = None,
                      diagnostics: EvalDiagnostics | None = None,
                      ablate: AblationFlags | None = None) -> np.ndarray:
    """Outgoing radiance toward si.omega_o with branch dispatch on roughness."""
    return _lhs_forward(model, scene, si, rng, T or model.hyper.t_render,
                        None, diagnostics, ablate)


def eval_rhs(model: NCRModel, scene: Scene, si: SurfaceInteraction,
             omega_o: np.ndarray | None, M: int, rng: np.random.Generator,
             radiance_fn=None) -> np.ndarray:
    """One-bounce estimate: emission plus the M-ray scattering average."""
    if omega_o is not None:
        si = si.select(np.arange(si.count))
        si.omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    return _rhs_forward(model, scene, si, M, rng, radiance_fn=radiance_fn)


# -- loss --------------------------------------------------------------------


@dataclass
class ResidualSample:
    """One interaction's two-sided radiance estimate."""

    si: SurfaceInteraction
    omega_o: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs

    @property
    def mean(self) -> np.ndarray:
        return 0.5 * (self.lhs + self.rhs)


def residual_loss(lhs: np.ndarray, rhs: np.ndarray, eps: float):
    """Relative MSE between the two estimates and its LHS gradient.

    The normalizer m = (lhs + rhs)/2 is a constant for differentiation, so
    d(loss)/d(rhs) is exactly -g for the returned g = d(loss)/d(lhs).
    """
    lhs = np.atleast_2d(np.asarray(lhs, dtype=np.float64))
    rhs = np.atleast_2d(np.asarray(rhs, dtype=np.float64))
    if lhs.shape != rhs.shape or lhs.size == 0:
        raise ValueError("lhs/rhs must be matching nonempty arrays")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    r = lhs - rhs
    denom = 0.5 * (lhs + rhs) + eps
    loss = float(np.mean((r / denom) ** 2))
    g = 2.0 * r / denom**2 / r.size
    return loss, g


# -- training ----------------------------------------------------------------


def sample_training_batch(scene: Scene, B: int, rng: np.random.Generator,
                          prim_mask: np.ndarray | None = None) -> SurfaceInteraction:
    """Area-weighted surface points with cosine-drawn outgoing directions.

    prim_mask restricts sampling (reachability exclusion); omega_o always
    lands strictly inside the front hemisphere.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    x, n, prim = scene.sample_surface(B, rng, prim_mask)
    si = SurfaceInteraction.empty(B)
    si.x, si.n, si.prim_id = x, n, prim
    m = scene.prim_mat[prim]
    si.kind = scene.mat_kind[m]
    si.albedo = scene.mat_albedo[m]
    si.roughness = scene.mat_rough[m]
    si.emission = scene.mat_emission[m]
    u = rng.random((B, 2))
    si.omega_o, _ = _sample_cosine_dirs(n, u[:, 0], u[:, 1])
    si.valid[:] = True
    return si


def schedule_mb(step: int, total_steps: int, m_initial: int, b_initial: int):
    """M doubles and B halves at each quarter of the schedule (1-based step)."""
    q = min(3, 4 * step // total_steps)
    return m_initial << q, max(1, b_initial >> q)


def cosine_lr(step: int, total_steps: int, lr: float, lr_min: float) -> float:
    t = step / total_steps
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 4096
    m_initial: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0          # 0: only the final checkpoint
    checkpoint_path: str | Path | None = None
    csv_path: str | Path | None = None

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.m_initial < 1:
            raise ValueError("steps, batch size, and M must all be >= 1")
        if self.lr < 0.0 or self.lr_min < 0.0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class TrainResult:
    steps: np.ndarray
    loss: np.ndarray
    m: np.ndarray
    b: np.ndarray
    lr: np.ndarray
    skipped: int = 0
    checkpoints: list = field(default_factory=list)
    diagnostics: EvalDiagnostics = field(default_factory=EvalDiagnostics)


def _write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "M", "B", "lr"])
        writer.writerows(rows)


def train(model: NCRModel, scene: Scene, config: TrainConfig) -> TrainResult:
    """Residual-descent training; mutates the model's parameters in place.

    Grid rows get lazy sparse optimizer updates (only touched rows move);
    the dense network parameters take full Adam steps.  A non-finite loss
    skips the step, and three skips in a row halve the learning rate.
    """
    from . import checkpoint as _ckpt  # deferred: checkpoint builds models too

    reachable = scene.reachable_primitives(config.seed)
    groups = {
        "diffuse_grid": (model.diffuse_grid.params, True),
        "glossy_grid": (model.glossy_grid.params, True),
        "diffuse_mlp": (model.diffuse_mlp.params, False),
        "glossy_mlp": (model.glossy_mlp.params, False),
        "mod_mlp": (model.mod_mlp.params, False),
    }
    states = {name: AdamState(p.shape) for name, (p, _) in groups.items()}
    diag = EvalDiagnostics()
    rows = []
    lr_scale = 1.0
    consecutive_skips = 0
    skipped = 0
    checkpoints = []

    for step in range(1, config.total_steps + 1):
        M, B = schedule_mb(step, config.total_steps, config.m_initial, config.batch_size)
        lr = cosine_lr(step, config.total_steps, config.lr, config.lr_min) * lr_scale
        rng = stream(config.seed, _SID_TRAIN, step)
        si = sample_training_batch(scene, B, rng, reachable)

        lhs_tape, rhs_tape = EvalTape(), EvalTape()
        lhs = _lhs_forward(model, scene, si, rng, model.hyper.t_train, lhs_tape, diag)
        rhs = _rhs_forward(model, scene, si, M, rng, rhs_tape, diag)
        loss, g = residual_loss(lhs, rhs, model.hyper.eps_loss)

        if math.isfinite(loss):
            consecutive_skips = 0
            grads = model.zero_grads()
            lhs_tape.backward(g, grads)
            rhs_tape.backward(-g, grads)
            for name, (params, is_grid) in groups.items():
                states[name].lr = lr
                gval = getattr(grads, name)
                if is_grid:
                    grows, gvals = gval.compact()
                    adam_step_rows(params, grows, gvals, states[name])
                else:
                    adam_step(params, gval, states[name])
        else:
            skipped += 1
            consecutive_skips += 1
            if consecutive_skips == 3:
                lr_scale *= 0.5
        model.step += 1
        rows.append((step, loss, M, B, lr))

        if (config.checkpoint_path is not None and config.checkpoint_every > 0
                and step % config.checkpoint_every == 0 and step < config.total_steps):
            path = Path(config.checkpoint_path)
            inter = path.with_name(f"{path.stem}-{step:06d}{path.suffix}")
            _ckpt.save_checkpoint(model, inter)
            checkpoints.append(inter)

    if config.checkpoint_path is not None:
        _ckpt.save_checkpoint(model, config.checkpoint_path)
        checkpoints.append(Path(config.checkpoint_path))
    if config.csv_path is not None:
        _write_trace(config.csv_path, rows)

    arr = np.array([(s, l, m, b, r) for s, l, m, b, r in rows], dtype=np.float64)
    return TrainResult(
        steps=arr[:, 0].astype(np.int64), loss=arr[:, 1],
        m=arr[:, 2].astype(np.int64), b=arr[:, 3].astype(np.int64), lr=arr[:, 4],
        skipped=skipped, checkpoints=checkpoints, diagnostics=diag,
    )


# -- rendering with the model -------------------------------------------------


def render_model(model: NCRModel, scene: Scene, seed: int = 0,
                 t_render: int | None = None, ablate: AblationFlags | None = None,
                 camera=None, diagnostics: EvalDiagnostics | None = None) -> Image:
    """One ray per pixel center, shaded by the model's LHS evaluation."""
    camera = camera or scene.camera
    w, h = camera.width, camera.height
    px, py = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    rays = camera_rays(camera, px.ravel(), py.ravel())
    si = scene.intersect(rays)
    out = np.broadcast_to(scene.environment, (w * h, 3)).copy()
    rows = np.flatnonzero(si.valid)
    if rows.size:
        rng = stream(seed, _SID_RENDER)
        out[rows] = _lhs_forward(
            model, scene, si.select(rows), rng,
            t_render or model.hyper.t_render, None, diagnostics, ablate)
    return Image(w, h, out.reshape(h, w, 3))


def primary_glossy_mask(scene: Scene, specular_depth_cap: int = 8,
                        camera=None) -> np.ndarray:
    """Pixels whose (post-mirror-chain) primary hit is glossy, as (H, W) bools."""
    camera = camera or scene.camera
    w, h = camera.width, camera.height
    px, py = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    si = scene.intersect(camera_rays(camera, px.ravel(), py.ravel()))
    mask = np.zeros(w * h, dtype=bool)
    rows = np.flatnonzero(si.valid)
    if rows.size:
        term, _, _, alive = _trace_specular(scene, si.select(rows), specular_depth_cap)
        _, _, glossy, _ = dispatch_masks(term.kind, term.roughness)
        mask[rows] = alive & glossy
    return mask.reshape(h, w)


def render_cv_diagnostics(scene: Scene, cone_table: ConeTable, seed: int = 0,
                          t: int = 128, k_clusters: int = 4,
                          weight_denominator: str = "hits",
                          specular_depth_cap: int = 8, camera=None) -> Image:
    """Depth-spread map over glossy pixels, no networks involved.

    Channels: global CV of lobe-ray hit distances, hit-weighted mean of
    within-cluster CVs, weighted mean footprint radius.  Pixels that are
    not glossy (or whose lobe rays all miss) stay zero.
    """
    camera = camera or scene.camera
    w, h = camera.width, camera.height
    px, py = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    si = scene.intersect(camera_rays(camera, px.ravel(), py.ravel()))
    out = np.zeros((w * h, 3))
    rows = np.flatnonzero(si.valid)
    if rows.size:
        term, _, _, alive = _trace_specular(scene, si.select(rows), specular_depth_cap)
        _, _, glossy, _ = dispatch_masks(term.kind, term.roughness)
        g = np.flatnonzero(alive & glossy)
        if g.size:
            sub = term.select(g)
            cones = sample_cone_rays(scene, sub, t, stream(seed, _SID_DIAG))
            theta_c = lookup_cone_angle(cone_table, sub.roughness)
            omega_r = reflect_dir(sub.n, sub.omega_o)
            fp = cluster_footprints(sub.x, omega_r, theta_c, cones.distances,
                                    k_clusters, weight_denominator=weight_denominator)
            gcv, ccv = cv_diagnostics(cones.distances, k_clusters)
            wsum = np.where(fp.valid, fp.weight, 0.0).sum(axis=1)
            radius = np.where(fp.valid, fp.weight * fp.r_c, 0.0).sum(axis=1)
            radius = np.where(wsum > 0, radius / np.maximum(wsum, 1e-300), 0.0)
            layers = np.stack([np.nan_to_num(gcv), np.nan_to_num(ccv), radius], axis=1)
            out[rows[g]] = layers
    return Image(w, h, out.reshape(h, w, 3))
