import time

import numpy as np

from ncr.cone_table import bake_cone_table
from ncr.imaging import mape
from ncr.model import TrainConfig, build_model, primary_glossy_mask, render_model, train
from ncr.pathtracer import render_reference
from ncr.scene import load_scene

scene = load_scene("scenes/toy_cornell.scene")
table = bake_cone_table(tau=0.99, n_rho=64, n_theta=512)

t0 = time.time()
try:
    ref = np.load("/tmp/pilot_ref256.npy")
except FileNotFoundError:
    ref = render_reference(scene, 256, seed=77).pixels
    np.save("/tmp/pilot_ref256.npy", ref)
print(f"ref 256spp ready: {time.time()-t0:.0f}s mean {ref.mean():.4f}", flush=True)

mask = primary_glossy_mask(scene)
print(f"glossy mask px {int(mask.sum())}", flush=True)


def report(tag, model):
    img = render_model(model, scene, seed=1).pixels
    g = mape(img[mask], ref[mask])
    print(
        f"{tag}: render mean {img.mean():.4f} MAPE global {mape(img, ref):.4f} glossy {g:.4f}",
        flush=True,
    )


model = build_model(scene, table, seed=3)
report("untrained", model)

cfg = TrainConfig(
    total_steps=6000,
    batch_size=1024,
    m_initial=4,
    seed=3,
    checkpoint_every=3000,
    checkpoint_path="/tmp/pilot4.ckpt",
    csv_path="/tmp/pilot4_trace.csv",
)
t0 = time.time()
res = train(model, scene, cfg)
print(f"train 6000: {time.time()-t0:.0f}s skipped {res.skipped}", flush=True)

trace = np.genfromtxt("/tmp/pilot4_trace.csv", delimiter=",", names=True)
loss = trace["loss"]
for lo in range(0, 6000, 500):
    seg = loss[lo : lo + 500]
    print(f"loss[{lo}:{lo+500}] mean {np.nanmean(seg):.4f}", flush=True)

from ncr.checkpoint import load_checkpoint

report("step3000", load_checkpoint("/tmp/pilot4-003000.ckpt"))
report("step6000", model)
