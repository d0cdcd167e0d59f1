import time
import numpy as np
from ncr.cone_table import bake_cone_table
from ncr.scene import load_scene
from ncr.rng import stream
from ncr import model as M

scene = load_scene("scenes/toy_cornell.scene")
table = bake_cone_table(n_rho=64, n_theta=256)
mdl = M.build_model(scene, table, seed=1)

rng = stream(7, 1)
si = M.sample_training_batch(scene, 64, rng)
print("batch kinds:", np.bincount(si.kind, minlength=4))

t0 = time.time()
tape_l, tape_r = M.EvalTape(), M.EvalTape()
lhs = M._lhs_forward(mdl, scene, si, rng, 32, tape_l)
rhs = M._rhs_forward(mdl, scene, si, 4, rng, tape_r)
loss, g = M.residual_loss(lhs, rhs, 1e-2)
print(f"lhs mean {lhs.mean():.4f} rhs mean {rhs.mean():.4f} loss {loss:.4f}")
grads = mdl.zero_grads()
tape_l.backward(g, grads)
tape_r.backward(-g, grads)
print("grad norms: dmlp %.3e gmlp %.3e mod %.3e" % (
    np.abs(grads.diffuse_mlp).max(), np.abs(grads.glossy_mlp).max(),
    np.abs(grads.mod_mlp).max()))
rows_d, vals_d = grads.diffuse_grid.compact()
rows_g, vals_g = grads.glossy_grid.compact()
print("touched grid rows: diffuse %d glossy %d" % (rows_d.size, rows_g.size))
print("fwd+bwd for B=64:", time.time() - t0, "s")

# short train run
cfg = M.TrainConfig(total_steps=8, batch_size=64, m_initial=2, seed=3)
t0 = time.time()
res = M.train(mdl, scene, cfg)
print("train 8 steps:", time.time() - t0, "s; losses", np.round(res.loss, 3))

img = M.render_model(mdl, scene, seed=0, t_render=4)
print("render:", img.pixels.shape, "mean", img.pixels.mean())
mask = M.primary_glossy_mask(scene)
print("glossy mask px:", mask.sum())
