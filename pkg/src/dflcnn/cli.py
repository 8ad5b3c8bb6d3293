"""Command-line entry point: synth, tile, train, detect, eval and curves.

Settings live in one flat dictionary of dotted keys (``detector.steps``,
``sampler.rpn_pos``, ...).  Values are resolved as built-in defaults, then a
JSON config file, then the ``DFL_SEED`` environment variable, then flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .assigner import SamplerConfig
from .boxgeom import Box, Detection, boxes_to_array, clip_array, nms_indices
from .datapipe import (
    ImageRecord,
    SynthConfig,
    Tile,
    atomic_write_text,
    crop_tile,
    load_manifest,
    manifest_json,
    read_ppm,
    synth_generate,
    tile_image,
    write_ppm,
)
from .detnet import DetectorConfig, TrainState, detect, init_params, train
from .errors import DFLError, ParseError
from .evalkit import (
    detections_json,
    evaluate,
    f1_score,
    load_detections,
    rates,
    write_curve_csv,
    write_curve_svg,
)
from .losses import FocalConfig

log = logging.getLogger("dflcnn")


@dataclasses.dataclass(frozen=True)
class TilingConfig:
    tile_w: int = 752
    tile_h: int = 674
    keep_rule: str = "center"


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    manifest: str = ""
    out: str = ""
    checkpoint: str = ""
    detections: str = ""


SECTIONS = {
    "detector": DetectorConfig,
    "sampler": SamplerConfig,
    "focal": FocalConfig,
    "synth": SynthConfig,
    "tiling": TilingConfig,
    "paths": PathsConfig,
}
SEED_KEYS = ("detector.seed", "sampler.seed", "synth.seed")

# which sections each subcommand exposes as flags
COMMAND_SECTIONS = {
    "synth": ("synth",),
    "tile": ("tiling",),
    "train": ("detector", "sampler", "focal", "tiling"),
    "detect": ("detector", "tiling"),
    "eval": (),
    "curves": (),
}
COMMAND_PATHS = {
    "synth": ("out",),
    "tile": ("manifest", "out"),
    "train": ("manifest", "out"),
    "detect": ("checkpoint", "manifest", "out"),
    "eval": ("detections", "manifest"),
    "curves": ("detections", "manifest"),
}


def default_config() -> dict:
    out = {}
    for sec, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f"{sec}.{f.name}"] = f.default
    return out


def _field_types() -> dict:
    types = {}
    for sec, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            types[f"{sec}.{f.name}"] = type(f.default)
    return types


FIELD_TYPES = _field_types()


def _check_value(key, value, source):
    want = FIELD_TYPES[key]
    if want is bool:
        ok = isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, want)
    if not ok:
        raise ParseError(f"{source}: key {key!r} expects {want.__name__}, got {value!r}")
    return value


def load_config_file(path) -> dict:
    """Read a flat dotted-key JSON object; unknown keys are rejected."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ParseError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(FIELD_TYPES))
    if unknown:
        raise ParseError(f"{path}: unknown config keys {unknown}")
    return {k: _check_value(k, v, str(path)) for k, v in doc.items()}


def config_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True) + "\n"


def section(cfg: dict, name: str):
    cls = SECTIONS[name]
    kwargs = {f.name: cfg[f"{name}.{f.name}"] for f in dataclasses.fields(cls)}
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ParseError(f"invalid {name} settings: {e}") from e


def resolve_config(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = default_config()
    if args.config:
        cfg.update(load_config_file(args.config))
    env_seed = environ.get("DFL_SEED")
    if env_seed is not None and env_seed != "":
        try:
            seed = int(env_seed)
        except ValueError as e:
            raise ParseError(f"DFL_SEED must be an integer, got {env_seed!r}") from e
        for k in SEED_KEYS:
            cfg[k] = seed
    if getattr(args, "seed", None) is not None:
        for k in SEED_KEYS:
            cfg[k] = args.seed
    for key in FIELD_TYPES:
        v = getattr(args, _dest(key), None)
        if v is not None:
            cfg[key] = v
    return cfg


# --------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from e
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {v}")
    return v


def _dest(key: str) -> str:
    return key.replace(".", "__")


def _flag(key: str) -> str:
    sec, name = key.split(".", 1)
    if sec == "paths":
        return "--" + name
    return "--" + name.replace("_", "-")


def _add_section_flags(p, sec):
    for f in dataclasses.fields(SECTIONS[sec]):
        if f.name == "seed":
            continue
        key = f"{sec}.{f.name}"
        kind = FIELD_TYPES[key]
        if kind is bool:
            extra = {"type": parse_bool, "nargs": "?", "const": True, "metavar": "BOOL"}
        else:
            extra = {"type": kind, "metavar": f.name.upper()}
        names = [_flag(key)]
        if key == "synth.n_images":
            names.append("--n")
        p.add_argument(*names, dest=_dest(key), default=None, help=f"{key} (default: {f.default!r})", **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dflcnn", description="Two-stage vehicle detector with focal loss and skip fusion.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "write a seeded synthetic scene set and its manifest",
        "tile": "cut large frames into fixed-size tiles with remapped boxes",
        "train": "train the detector on a manifest",
        "detect": "run the detector over a manifest and write detections JSON",
        "eval": "print recall, precision and F1 at one IoU threshold",
        "curves": "write recall/precision against IoU threshold as CSV and SVG",
    }
    path_help = {
        "out": "output directory",
        "manifest": "manifest JSON",
        "checkpoint": "DFLW1 weight file",
        "detections": "detections JSON",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=None, help="flat dotted-key JSON config (default: None)")
        if any(s in ("detector", "synth") for s in COMMAND_SECTIONS[name]):
            p.add_argument("--seed", type=int, default=None,
                           help="seed for every random stream; overrides DFL_SEED (default: from config)")
        for key in COMMAND_PATHS[name]:
            h = path_help[key]
            if name == "detect" and key == "out":
                h = "output detections JSON"
            p.add_argument("--" + key, dest=_dest(f"paths.{key}"), default=None, metavar="PATH", help=f"{h} (default: '')")
        for sec in COMMAND_SECTIONS[name]:
            _add_section_flags(p, sec)
        if name == "eval":
            p.add_argument("--iou", type=_unit_interval, default=0.3, help="matching IoU threshold (default: 0.3)")
            p.add_argument("--counts", default=None,
                           help="JSON with tp/fp/fn or rr/pr instead of detections (default: None)")
            p.add_argument("--report", default=None, help="write the report JSON here (default: None)")
        if name == "curves":
            p.add_argument("--csv", required=True, help="output CSV path (default: required)")
            p.add_argument("--svg", required=True, help="output SVG path (default: required)")
    return parser


def _need(cfg, key):
    v = cfg[f"paths.{key}"]
    if not v:
        raise UsageError(f"--{key} is required")
    return v


# --------------------------------------------------------------------------
# commands


def _echo_config(cfg: dict, path) -> None:
    atomic_write_text(path, config_json(cfg))


def cmd_synth(cfg: dict) -> Path:
    out = Path(_need(cfg, "out"))
    manifest = synth_generate(out, section(cfg, "synth"))
    _echo_config(cfg, out / "config.json")
    print(manifest)
    return manifest


def network_tiles(rec: ImageRecord, tiling: TilingConfig) -> list[Tile]:
    """Tiles covering a frame; frames no larger than a tile form a single tile."""
    tw, th = min(tiling.tile_w, rec.width), min(tiling.tile_h, rec.height)
    return tile_image(rec, tw, th, tiling.keep_rule)


def _image_name(rec: ImageRecord, base: Path) -> str:
    return os.path.relpath(rec.image_path, base).replace(os.sep, "/")


def cmd_tile(cfg: dict) -> Path:
    manifest = Path(_need(cfg, "manifest"))
    out = Path(_need(cfg, "out"))
    tiling = section(cfg, "tiling")
    records, _ = load_manifest(manifest)
    tiled = []
    for rec in records:
        image = read_ppm(rec.image_path)
        stem = Path(rec.image_path).stem
        for t in tile_image(rec, tiling.tile_w, tiling.tile_h, tiling.keep_rule):
            name = f"{stem}_x{t.origin[0]}_y{t.origin[1]}.ppm"
            write_ppm(crop_tile(image, t, multiple=1), out / name)
            tiled.append(ImageRecord(name, t.width, t.height, t.boxes))
    path = out / "manifest.json"
    atomic_write_text(path, manifest_json(tiled))
    _echo_config(cfg, out / "config.json")
    print(path)
    return path


def training_samples(records, tiling: TilingConfig):
    samples = []
    for rec in records:
        image = read_ppm(rec.image_path)
        for t in network_tiles(rec, tiling):
            samples.append((crop_tile(image, t), boxes_to_array(t.boxes)))
    return samples


def cmd_train(cfg: dict) -> Path:
    manifest = _need(cfg, "manifest")
    out = Path(_need(cfg, "out"))
    det = section(cfg, "detector")
    records, _ = load_manifest(manifest)
    if not records:
        raise ParseError(f"{manifest}: no images to train on")
    samples = training_samples(records, section(cfg, "tiling"))
    state = TrainState(init_params(det))
    state, losses = train(samples, det, section(cfg, "focal"), section(cfg, "sampler"), state)
    ckpt = out / "weights.dflw"
    checkpoint.save(state.params, ckpt)
    atomic_write_text(out / "loss.csv", "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses, 1)))
    _echo_config(cfg, out / "config.json")
    print(ckpt)
    return ckpt


def detect_record(image: np.ndarray, rec: ImageRecord, params, det: DetectorConfig, tiling: TilingConfig) -> list[Detection]:
    """Detect per tile, shift into frame coordinates and merge with NMS."""
    found: list[Detection] = []
    for t in network_tiles(rec, tiling):
        found += detect(crop_tile(image, t), params, det, tile_origin=t.origin)
    if not found:
        return []
    boxes = clip_array(boxes_to_array([d.box for d in found]), rec.width, rec.height)
    scores = np.array([d.score for d in found])
    ok = np.flatnonzero((boxes[:, 2] > 0) & (boxes[:, 3] > 0))
    keep = ok[nms_indices(boxes[ok], scores[ok], det.final_nms_iou)]
    return [Detection(Box(*map(float, boxes[i])), float(scores[i]), found[i].tile_origin) for i in keep]


def cmd_detect(cfg: dict) -> Path:
    params = checkpoint.load(_need(cfg, "checkpoint"))
    manifest = Path(_need(cfg, "manifest"))
    out = Path(_need(cfg, "out"))
    det = section(cfg, "detector")
    tiling = section(cfg, "tiling")
    records, _ = load_manifest(manifest)
    entries = []
    for rec in records:
        image = read_ppm(rec.image_path)
        entries.append((_image_name(rec, manifest.parent), detect_record(image, rec, params, det, tiling)))
    atomic_write_text(out, detections_json(entries))
    _echo_config(cfg, out.with_name(out.stem + ".config.json"))
    print(out)
    return out


def _pairs_for_eval(cfg: dict):
    dets = load_detections(_need(cfg, "detections"))
    manifest = Path(_need(cfg, "manifest"))
    records, _ = load_manifest(manifest, check_images=False)
    pairs = []
    for rec in records:
        name = _image_name(rec, manifest.parent)
        pairs.append((dets.get(name, []), rec.boxes))
    unknown = sorted(set(dets) - {_image_name(r, manifest.parent) for r in records})
    if unknown:
        raise ParseError(f"detections for images missing from the manifest: {unknown}")
    return pairs


def _read_counts(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ParseError(f"counts file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}") from e
    if isinstance(doc, dict) and {"tp", "fp", "fn"} <= set(doc):
        return rates(int(doc["tp"]), int(doc["fp"]), int(doc["fn"]))
    if isinstance(doc, dict) and {"rr", "pr"} <= set(doc):
        rr, pr = float(doc["rr"]), float(doc["pr"])
        return rr, pr, f1_score(rr, pr)
    raise ParseError(f"{path}: expected keys tp/fp/fn or rr/pr")


def cmd_eval(cfg: dict, iou: float, counts=None, report_path=None) -> dict:
    if counts:
        rr, pr, f1 = _read_counts(counts)
        result = {"operating_iou": iou, "recall": rr, "precision": pr, "f1": f1}
    else:
        pairs = _pairs_for_eval(cfg)
        rep = evaluate([p[0] for p in pairs], [p[1] for p in pairs], iou)
        result = rep.to_json()
        rr, pr, f1 = rep.rr, rep.pr, rep.f1
    print(f"IoU={iou:g} RR={rr:.4f} PR={pr:.4f} F1={f1:.4f}")
    if report_path:
        atomic_write_text(report_path, json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def cmd_curves(cfg: dict, csv_path, svg_path) -> None:
    pairs = _pairs_for_eval(cfg)
    rep = evaluate([p[0] for p in pairs], [p[1] for p in pairs])
    write_curve_csv(rep, csv_path)
    write_curve_svg(rep, svg_path)
    print(csv_path)
    print(svg_path)


def run(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args, environ)
        cmd = args.command
        if cmd == "synth":
            cmd_synth(cfg)
        elif cmd == "tile":
            cmd_tile(cfg)
        elif cmd == "train":
            cmd_train(cfg)
        elif cmd == "detect":
            cmd_detect(cfg)
        elif cmd == "eval":
            cmd_eval(cfg, args.iou, args.counts, args.report)
        elif cmd == "curves":
            cmd_curves(cfg, args.csv, args.svg)
    except UsageError as e:
        print(f"dflcnn {args.command}: error: {e}", file=sys.stderr)
        return 1
    except DFLError as e:
        print(f"dflcnn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"dflcnn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
