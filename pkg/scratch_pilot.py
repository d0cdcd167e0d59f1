import time
import numpy as np
from ncr.cone_table import bake_cone_table
from ncr.scene import load_scene
from ncr import model as M

scene = load_scene("scenes/toy_cornell.scene")
table = bake_cone_table()
mdl = M.build_model(scene, table, seed=0)

t0 = time.time()
cfg = M.TrainConfig(total_steps=600, batch_size=512, m_initial=2, seed=0)
res = M.train(mdl, scene, cfg)
dt = time.time() - t0
np.save("/tmp/pilot_loss.npy", res.loss)
print(f"600 steps B=512 M0=2: {dt:.0f}s ({dt/600*1000:.0f} ms/step)")
for lo, hi in [(0, 50), (100, 150), (250, 300), (400, 450), (550, 600)]:
    print(f"steps {lo:3d}-{hi:3d}: mean loss {np.nanmean(res.loss[lo:hi]):.4f}")
print("skipped:", res.skipped, "depth_cap:", res.diagnostics.depth_cap_hits)
