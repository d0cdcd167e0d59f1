"""Command line front end: bake, train, render, eval, diagnose-cv.

Run configuration uses the same line-oriented syntax as scene files:
``[section]`` headers, one ``key value ...`` statement per line, ``#``
comments.  Paths inside the config resolve relative to the config file,
paths on the command line resolve relative to the working directory.

Sections and keys:

    [cone]     path, tau, n_rho, n_theta, weight_denominator
    [model]    t_train, t_render, t_secondary, k_clusters, s, eps_loss,
               specular_depth_cap
    [train]    checkpoint, steps, batch, m_initial, lr, lr_min,
               checkpoint_every, csv, seed
    [render]   image, png, checkpoint, t_render, width, height, seed
    [eval]     image, reference, eps, report
    [diagnose] image, t, k, seed

``eval`` prints one JSON object per line on stdout; everything else
prints a short status line.  Exit codes: 0 success, 1 bad input or IO,
2 usage, 3 missing cone table.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .cone_table import bake_cone_table, load_cone_table, save_cone_table
from .imaging import mape, read_pfm, write_pfm, write_png
from .model import (AblationFlags, Hyper, TrainConfig, build_model,
                    primary_glossy_mask, render_cv_diagnostics, render_model,
                    train)
from .scene import load_scene

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NO_CONE_TABLE = 3

_KNOWN_KEYS = {
    "cone": {"path", "tau", "n_rho", "n_theta", "weight_denominator"},
    "model": {"t_train", "t_render", "t_secondary", "k_clusters", "s",
              "eps_loss", "specular_depth_cap"},
    "train": {"checkpoint", "steps", "batch", "m_initial", "lr", "lr_min",
              "checkpoint_every", "csv", "seed"},
    "render": {"image", "png", "checkpoint", "t_render", "width", "height",
               "seed"},
    "eval": {"image", "reference", "eps", "report"},
    "diagnose": {"image", "t", "k", "seed"},
}


class ConfigError(ValueError):
    pass


class MissingConeTable(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    sections: dict[str, dict[str, str]]
    base_dir: Path

    def get(self, section: str, key: str, cast=str, default=None):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None

    def require(self, section: str, key: str, cast=str):
        value = self.get(section, key, cast)
        if value is None:
            raise ConfigError(f"[{section}] {key} is required")
        return value

    def path(self, section: str, key: str, required: bool = False) -> Path | None:
        raw = self.require(section, key) if required else self.get(section, key)
        return None if raw is None else (self.base_dir / raw)


def parse_run_config(text: str, base_dir=".") -> RunConfig:
    sections: dict[str, dict[str, str]] = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _KNOWN_KEYS:
                raise ConfigError(f"line {ln}: unknown section [{section}]")
            sections.setdefault(section, {})
            continue
        if section is None:
            raise ConfigError(f"line {ln}: statement before any [section]")
        key, *rest = line.split(None, 1)
        if key not in _KNOWN_KEYS[section]:
            raise ConfigError(f"line {ln}: unknown key {key!r} in [{section}]")
        if not rest:
            raise ConfigError(f"line {ln}: {key} has no value")
        sections[section][key] = rest[0].strip()
    return RunConfig(sections, Path(base_dir))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(), path.parent)


def _require_cone_table(cfg: RunConfig):
    path = cfg.path("cone", "path", required=True)
    if not path.exists():
        raise MissingConeTable(f"cone table not found: {path} (run `ncr bake` first)")
    return load_cone_table(path)


def _hyper(cfg: RunConfig, tau: float) -> Hyper:
    return Hyper(
        t_train=cfg.get("model", "t_train", int, 128),
        t_render=cfg.get("model", "t_render", int, 32),
        t_secondary=cfg.get("model", "t_secondary", int, 16),
        k_clusters=cfg.get("model", "k_clusters", int, 4),
        s=cfg.get("model", "s", float, 1.0),
        tau=tau,
        eps_loss=cfg.get("model", "eps_loss", float, 1e-2),
        specular_depth_cap=cfg.get("model", "specular_depth_cap", int, 8),
        weight_denominator=cfg.get("cone", "weight_denominator", str, "hits"),
    )


def _seed(args, cfg: RunConfig, section: str) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get(section, "seed", int, 0)


def _out(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_bake(scene, cfg: RunConfig, args) -> int:
    path = cfg.path("cone", "path", required=True)
    table = bake_cone_table(
        tau=cfg.get("cone", "tau", float, 0.99),
        n_rho=cfg.get("cone", "n_rho", int, 256),
        n_theta=cfg.get("cone", "n_theta", int, 2048),
    )
    save_cone_table(table, _out(path))
    print(f"baked cone table tau={table.tau} ({table.rho.size} entries) -> {path}")
    return EXIT_OK


def cmd_train(scene, cfg: RunConfig, args) -> int:
    table = _require_cone_table(cfg)
    seed = _seed(args, cfg, "train")
    model = build_model(scene, table, hyper=_hyper(cfg, table.tau), seed=seed)
    ckpt = _out(cfg.path("train", "checkpoint", required=True))
    csv = cfg.path("train", "csv")
    config = TrainConfig(
        total_steps=cfg.require("train", "steps", int),
        batch_size=cfg.get("train", "batch", int, 4096),
        m_initial=cfg.get("train", "m_initial", int, 4),
        lr=cfg.get("train", "lr", float, 1e-3),
        lr_min=cfg.get("train", "lr_min", float, 1e-4),
        seed=seed,
        checkpoint_every=cfg.get("train", "checkpoint_every", int, 0),
        checkpoint_path=ckpt,
        csv_path=None if csv is None else _out(csv),
    )
    result = train(model, scene, config)
    print(f"trained {config.total_steps} steps "
          f"(skipped {result.skipped}, final loss {result.loss[-1]:.6g}) -> {ckpt}")
    return EXIT_OK


def cmd_render(scene, cfg: RunConfig, args) -> int:
    ckpt = cfg.path("render", "checkpoint") or cfg.path("train", "checkpoint")
    if ckpt is None:
        raise ConfigError("[render] checkpoint is required")
    model = load_checkpoint(ckpt)
    camera = scene.camera
    width = cfg.get("render", "width", int, camera.width)
    height = cfg.get("render", "height", int, camera.height)
    if (width, height) != (camera.width, camera.height):
        camera = dataclasses.replace(camera, width=width, height=height)
    ablate = AblationFlags.from_name(args.ablate) if args.ablate else None
    image = render_model(
        model, scene,
        seed=_seed(args, cfg, "render"),
        t_render=cfg.get("render", "t_render", int),
        ablate=ablate,
        camera=camera,
    )
    out = _out(cfg.path("render", "image", required=True))
    write_pfm(out, image)
    png = cfg.path("render", "png")
    if png is not None:
        write_png(_out(png), image)
    print(f"rendered {image.width}x{image.height} -> {out}")
    return EXIT_OK


def cmd_eval(scene, cfg: RunConfig, args) -> int:
    image = read_pfm(cfg.path("eval", "image", required=True))
    reference = read_pfm(cfg.path("eval", "reference", required=True))
    eps = cfg.get("eval", "eps", float, 0.01)
    camera = scene.camera
    if (image.width, image.height) != (camera.width, camera.height):
        camera = dataclasses.replace(camera, width=image.width, height=image.height)
    mask = primary_glossy_mask(scene, camera=camera)
    lines = [
        {"metric": "mape_global", "value": mape(image, reference, eps), "eps": eps},
        {"metric": "mape_glossy",
         "value": (mape(image.pixels[mask], reference.pixels[mask], eps)
                   if mask.any() else 0.0),
         "eps": eps, "mask_pixels": int(mask.sum())},
    ]
    report = cfg.path("eval", "report")
    text = "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)
    if report is not None:
        _out(report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(scene, cfg: RunConfig, args) -> int:
    table = _require_cone_table(cfg)
    image = render_cv_diagnostics(
        scene, table,
        seed=_seed(args, cfg, "diagnose"),
        t=cfg.get("diagnose", "t", int, 128),
        k_clusters=cfg.get("diagnose", "k", int, 4),
        weight_denominator=cfg.get("cone", "weight_denominator", str, "hits"),
    )
    out = _out(cfg.path("diagnose", "image", required=True))
    write_pfm(out, image)
    print(f"wrote depth-spread diagnostics -> {out}")
    return EXIT_OK


_COMMANDS = {
    "bake": cmd_bake,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "diagnose-cv": cmd_diagnose,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncr",
        description="Train and render residual-trained radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scene", required=True, help="scene file")
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name == "render":
            p.add_argument("--ablate",
                           choices=("diffuse", "glossy", "interp", "cone"),
                           default=None, help="disable one model component")
        else:
            p.set_defaults(ablate=None)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        scene = load_scene(args.scene)
        return _COMMANDS[args.command](scene, cfg, args)
    except MissingConeTable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONE_TABLE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
