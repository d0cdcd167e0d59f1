"""Self-contained binary model checkpoints.

Layout (all little-endian): magic "NCRM", version u32, section count u32,
then the sections in a fixed order.  Each section is a u32 name length,
the utf-8 name, a u64 payload length, and the payload.  Parameters are
stored as f32; loading widens them back to f64, so a load/save cycle is
byte-identical.  The cone table rides along as its own baked blob and the
scene normalization frame lives in a small JSON trailer, which makes a
checkpoint renderable without any sidecar files.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .cone_table import cone_table_from_bytes, cone_table_to_bytes
from .grid import GridSpec, HashGrid
from .mlp import MLP, MLPSpec
from .model import Hyper, NCRModel

MAGIC = b"NCRM"
VERSION = 1

SECTION_ORDER = ("diffuse_grid", "diffuse_mlp", "glossy_grid", "glossy_mlp",
                 "mod_mlp", "cone_table_ref", "train_meta")

_GRID_HEADER = "<IIdIQB"   # levels, base res, growth, feature dim, table size, mode
_MLP_HEADER = "<IIIIB"     # in, out, hidden layers, hidden width, activation
_GRID_MODES = ("concat", "scale_interp")
_ACTIVATIONS = ("squareplus", "identity")


def _pack_grid(grid: HashGrid) -> bytes:
    s = grid.spec
    head = struct.pack(_GRID_HEADER, s.levels, s.base_resolution, s.growth_factor,
                       s.feature_dim, s.table_size, _GRID_MODES.index(s.mode))
    return head + grid.params.astype("<f4").tobytes()


def _unpack_grid(payload: bytes) -> HashGrid:
    head = struct.calcsize(_GRID_HEADER)
    levels, base, growth, fdim, tsize, mode = struct.unpack_from(_GRID_HEADER, payload)
    if mode >= len(_GRID_MODES):
        raise ValueError(f"unknown grid mode code {mode}")
    spec = GridSpec(levels, base, growth, fdim, tsize, _GRID_MODES[mode])
    flat = np.frombuffer(payload, dtype="<f4", offset=head)
    if flat.size % fdim != 0:
        raise ValueError("grid payload length does not match its header")
    return HashGrid.from_params(spec, flat.astype(np.float64).reshape(-1, fdim))


def _pack_mlp(net: MLP) -> bytes:
    s = net.spec
    head = struct.pack(_MLP_HEADER, s.input_dim, s.output_dim, s.hidden_layers,
                       s.hidden_width, _ACTIVATIONS.index(s.output_activation))
    return head + net.params.astype("<f4").tobytes()


def _unpack_mlp(payload: bytes) -> MLP:
    head = struct.calcsize(_MLP_HEADER)
    din, dout, layers, width, act = struct.unpack_from(_MLP_HEADER, payload)
    if act >= len(_ACTIVATIONS):
        raise ValueError(f"unknown activation code {act}")
    spec = MLPSpec(din, dout, layers, width, _ACTIVATIONS[act])
    flat = np.frombuffer(payload, dtype="<f4", offset=head)
    return MLP.from_params(spec, flat.astype(np.float64))


def _pack_meta(model: NCRModel) -> bytes:
    meta = {
        "step": model.step,
        "world_lo": [float(v) for v in model.world_lo],
        "unit_scale": model.unit_scale,
        "hyper": dataclasses.asdict(model.hyper),
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_to_bytes(model: NCRModel) -> bytes:
    payloads = {
        "diffuse_grid": _pack_grid(model.diffuse_grid),
        "diffuse_mlp": _pack_mlp(model.diffuse_mlp),
        "glossy_grid": _pack_grid(model.glossy_grid),
        "glossy_mlp": _pack_mlp(model.glossy_mlp),
        "mod_mlp": _pack_mlp(model.mod_mlp),
        "cone_table_ref": cone_table_to_bytes(model.cone_table),
        "train_meta": _pack_meta(model),
    }
    parts = [MAGIC, struct.pack("<II", VERSION, len(SECTION_ORDER))]
    for name in SECTION_ORDER:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<Q", len(payloads[name])) + payloads[name])
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> NCRModel:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if count != len(SECTION_ORDER):
        raise ValueError(f"expected {len(SECTION_ORDER)} sections, found {count}")
    payloads = {}
    for expect in SECTION_ORDER:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        if name != expect:
            raise ValueError(f"section {name!r} out of order (expected {expect!r})")
        (size,) = r.unpack("<Q")
        payloads[name] = r.take(size)
    if r.pos != len(blob):
        raise ValueError("trailing bytes after the last section")

    meta = json.loads(payloads["train_meta"].decode("utf-8"))
    return NCRModel(
        diffuse_grid=_unpack_grid(payloads["diffuse_grid"]),
        diffuse_mlp=_unpack_mlp(payloads["diffuse_mlp"]),
        glossy_grid=_unpack_grid(payloads["glossy_grid"]),
        glossy_mlp=_unpack_mlp(payloads["glossy_mlp"]),
        mod_mlp=_unpack_mlp(payloads["mod_mlp"]),
        cone_table=cone_table_from_bytes(payloads["cone_table_ref"]),
        hyper=Hyper(**meta["hyper"]),
        world_lo=np.array(meta["world_lo"]),
        unit_scale=meta["unit_scale"],
        step=meta["step"],
    )


def save_checkpoint(model: NCRModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_checkpoint(path) -> NCRModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    return model_from_bytes(blob)
