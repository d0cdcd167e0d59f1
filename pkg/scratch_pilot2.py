import time
import numpy as np
from ncr.cone_table import bake_cone_table
from ncr.scene import load_scene
from ncr.pathtracer import render_reference
from ncr import model as M

scene = load_scene("scenes/toy_cornell.scene")
table = bake_cone_table()

# A: thresholds for the unit-test progress oracle (150 steps, B=256)
for seed in (0, 1, 2):
    mdl = M.build_model(scene, table, seed=seed)
    res = M.train(mdl, scene, M.TrainConfig(total_steps=150, batch_size=256,
                                            m_initial=2, seed=seed))
    first = float(np.mean(res.loss[:30]))
    last = float(np.mean(res.loss[-30:]))
    print(f"A seed {seed}: first30 {first:.4f} last30 {last:.4f} ratio {last/first:.3f}")

# B: 2000-step trend at B=1024 M0=4, then MAPE vs a 256-spp reference
t0 = time.time()
mdl = M.build_model(scene, table, seed=0)
res = M.train(mdl, scene, M.TrainConfig(total_steps=2000, batch_size=1024,
                                        m_initial=4, seed=0))
print(f"B train 2000: {time.time()-t0:.0f}s")
for lo, hi in [(0, 200), (900, 1100), (1800, 2000)]:
    print(f"B steps {lo}-{hi}: mean loss {np.mean(res.loss[lo:hi]):.4f}")
t0 = time.time()
ref = render_reference(scene, 256, seed=77)
print(f"B ref 256spp: {time.time()-t0:.0f}s")
img = M.render_model(mdl, scene, seed=1)
p, r = img.pixels, ref.pixels
mape = float(np.mean(np.abs(p - r) / (r + 0.01)))
mask = M.primary_glossy_mask(scene)
gmape = float(np.mean((np.abs(p - r) / (r + 0.01))[mask]))
print(f"B MAPE global {mape:.4f} glossy {gmape:.4f}")
np.save("/tmp/pilot2_loss.npy", res.loss)
