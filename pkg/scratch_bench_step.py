import time
import numpy as np
from ncr.cone_table import bake_cone_table
from ncr.scene import load_scene
from ncr.rng import stream
from ncr import model as M
from ncr import checkpoint as C

scene = load_scene("scenes/toy_cornell.scene")
table = bake_cone_table()
mdl = M.build_model(scene, table, seed=1)

# checkpoint roundtrip
b1 = C.model_to_bytes(mdl)
m2 = C.model_from_bytes(b1)
b2 = C.model_to_bytes(m2)
print("roundtrip bytes equal:", b1 == b2, "size MB:", len(b1) / 1e6)

# one full-size training step (B=4096, M=4, T_train=128)
for B, M_, label in [(4096, 4, "q0"), (512, 32, "q3")]:
    rng = stream(5, 99, B)
    si = M.sample_training_batch(scene, B, rng)
    t0 = time.time()
    tl, tr = M.EvalTape(), M.EvalTape()
    lhs = M._lhs_forward(mdl, scene, si, rng, 128, tl)
    rhs = M._rhs_forward(mdl, scene, si, M_, rng, tr)
    loss, g = M.residual_loss(lhs, rhs, 1e-2)
    t1 = time.time()
    grads = mdl.zero_grads()
    tl.backward(g, grads)
    tr.backward(-g, grads)
    t2 = time.time()
    from ncr.mlp import AdamState, adam_step, adam_step_rows
    st = AdamState(mdl.diffuse_grid.params.shape)
    rows, vals = grads.diffuse_grid.compact()
    adam_step_rows(mdl.diffuse_grid.params, rows, vals, st)
    t3 = time.time()
    print(f"{label}: fwd {t1-t0:.3f}s bwd {t2-t1:.3f}s opt(dgrid) {t3-t2:.3f}s "
          f"loss {loss:.3f} touched {rows.size}")
