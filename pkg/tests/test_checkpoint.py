"""Checkpoint binary format: roundtrips, corruption handling, cadence."""

import dataclasses

import numpy as np
import pytest

from ncr import checkpoint as C
from ncr.cone_table import bake_cone_table
from ncr.model import Hyper, TrainConfig, build_model, render_model, train
from ncr.scene import load_scene


@pytest.fixture(scope="module")
def scene():
    return load_scene("scenes/cornell_min.scene")


@pytest.fixture(scope="module")
def cone_table():
    return bake_cone_table(n_rho=32, n_theta=256)


@pytest.fixture(scope="module")
def model(scene, cone_table):
    return build_model(scene, cone_table, seed=11)


@pytest.fixture(scope="module")
def blob(model):
    return C.model_to_bytes(model)


def test_roundtrip_bytes_stable(model, blob):
    again = C.model_to_bytes(C.model_from_bytes(blob))
    assert again == blob


def test_save_load_preserves_fields(tmp_path, model):
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(model, path)
    loaded = C.load_checkpoint(path)
    assert loaded.step == model.step
    assert loaded.unit_scale == pytest.approx(model.unit_scale, rel=1e-15)
    np.testing.assert_allclose(loaded.world_lo, model.world_lo)
    assert loaded.hyper == model.hyper
    np.testing.assert_array_equal(loaded.cone_table.rho, model.cone_table.rho)
    np.testing.assert_array_equal(loaded.cone_table.theta_c, model.cone_table.theta_c)
    assert loaded.diffuse_grid.spec == model.diffuse_grid.spec
    assert loaded.glossy_mlp.spec == model.glossy_mlp.spec


def test_loaded_model_renders_like_source(scene, model, blob):
    cam = dataclasses.replace(scene.camera, width=16, height=12)
    loaded = C.model_from_bytes(blob)
    a = render_model(model, scene, seed=5, camera=cam).pixels
    b = render_model(loaded, scene, seed=5, camera=cam).pixels
    # one roundtrip rounds parameters to f32
    np.testing.assert_allclose(b, a, rtol=1e-4, atol=1e-7)
    # a second roundtrip is exact: the parameters are already f32 values
    twice = C.model_from_bytes(C.model_to_bytes(loaded))
    c = render_model(twice, scene, seed=5, camera=cam).pixels
    np.testing.assert_array_equal(c, b)


def test_hyper_survives_roundtrip(scene, cone_table):
    hyper = Hyper(t_render=16, k_clusters=3, weight_denominator="total")
    m = build_model(scene, cone_table, hyper=hyper, seed=2)
    loaded = C.model_from_bytes(C.model_to_bytes(m))
    assert loaded.hyper == hyper


def test_truncated_blob_raises(blob):
    for cut in (0, 3, 4, 11, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ValueError, match="truncated"):
            C.model_from_bytes(blob[:cut])


def test_bad_magic_raises(blob):
    with pytest.raises(ValueError, match="magic"):
        C.model_from_bytes(b"XXXX" + blob[4:])


def test_bad_version_raises(blob):
    bad = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(ValueError, match="version"):
        C.model_from_bytes(bad)


def test_out_of_order_section_raises(blob):
    # corrupt the first section name ("diffuse_grid" starts right after
    # magic + version + count + name length = 16 bytes)
    bad = blob[:16] + b"X" + blob[17:]
    with pytest.raises(ValueError, match="out of order"):
        C.model_from_bytes(bad)


def test_trailing_bytes_raise(blob):
    with pytest.raises(ValueError, match="trailing"):
        C.model_from_bytes(blob + b"\x00")


def test_train_checkpoint_cadence(tmp_path, scene, cone_table):
    m = build_model(scene, cone_table, seed=7)
    cfg = TrainConfig(total_steps=5, batch_size=32, m_initial=2, seed=7,
                      checkpoint_every=2, checkpoint_path=tmp_path / "run.ckpt")
    result = train(m, scene, cfg)
    names = [p.name for p in result.checkpoints]
    assert names == ["run-000002.ckpt", "run-000004.ckpt", "run.ckpt"]
    for p in result.checkpoints:
        assert p.exists()
    assert C.load_checkpoint(tmp_path / "run-000002.ckpt").step == 2
    assert C.load_checkpoint(tmp_path / "run-000004.ckpt").step == 4
    assert C.load_checkpoint(tmp_path / "run.ckpt").step == 5
