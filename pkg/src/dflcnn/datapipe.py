"""Image and annotation ingestion, tiling, and the synthetic scene generator.

Manifest format (UTF-8 JSON)::

    [{"image": "img_0000.ppm", "width": 736, "height": 672,
      "boxes": [[x, y, w, h], ...]}, ...]

Boxes use the top-left corner convention.  Image paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxgeom import Box, iou_matrix
from .errors import (
    DegenerateQuadrilateral,
    IoFailure,
    MissingImage,
    ParseError,
    PlacementFailure,
    TileLargerThanImage,
    TruncatedFile,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)


@dataclass
class ImageRecord:
    image_path: str
    width: int
    height: int
    boxes: list[Box] = field(default_factory=list)


@dataclass
class Tile:
    parent: str
    origin: tuple[int, int]
    width: int
    height: int
    boxes: list[Box] = field(default_factory=list)


@dataclass(frozen=True)
class OrientedBox:
    corners: tuple[tuple[float, float], ...]


# --------------------------------------------------------------------------
# atomic file output


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(f"cannot write {path}: {e}") from e


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# PPM


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (1,3,H,W) or (3,H,W) image, got {np.shape(image)}")
    q = quantize(img).transpose(1, 2, 0)
    h, w = q.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def _header_tokens(data: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedFile("PPM header ends early")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise UnsupportedFormat(f"not a binary P6 PPM (magic {data[:2]!r})")
    tokens, offset = _header_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise UnsupportedFormat(f"bad PPM header {tokens!r}") from e
    if maxval != 255:
        raise UnsupportedFormat(f"only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    raster = data[offset:offset + need]
    if len(raster) < need:
        raise TruncatedFile(f"PPM raster has {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into a (1, 3, H, W) float64 array scaled to [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise MissingImage(str(path)) from e
    return decode_ppm(data)


# --------------------------------------------------------------------------
# manifests


def _clip_box(b: Box, w: int, h: int) -> Box:
    x1, y1 = max(b.x, 0.0), max(b.y, 0.0)
    x2, y2 = min(b.x + b.w, float(w)), min(b.y + b.h, float(h))
    return Box(x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0))


def parse_manifest(doc, source: str = "<manifest>") -> tuple[list[ImageRecord], int]:
    if not isinstance(doc, list):
        raise ParseError(f"{source}: top level must be a JSON array")
    records = []
    clipped = 0
    for i, entry in enumerate(doc):
        where = f"{source}: entry {i}"
        if not isinstance(entry, dict):
            raise ParseError(f"{where}: expected an object")
        for key in ("image", "width", "height", "boxes"):
            if key not in entry:
                raise ParseError(f"{where}: missing field {key!r}")
        if not isinstance(entry["image"], str):
            raise ParseError(f"{where}: field 'image' must be a string")
        try:
            w, h = int(entry["width"]), int(entry["height"])
        except (TypeError, ValueError) as e:
            raise ParseError(f"{where}: width/height must be integers") from e
        if w <= 0 or h <= 0:
            raise ParseError(f"{where}: non-positive image extents {w}x{h}")
        boxes = []
        if not isinstance(entry["boxes"], list):
            raise ParseError(f"{where}: field 'boxes' must be an array")
        for j, raw in enumerate(entry["boxes"]):
            if not isinstance(raw, list) or len(raw) != 4 or not all(isinstance(v, (int, float)) for v in raw):
                raise ParseError(f"{where}: box {j} must be [x, y, w, h] numbers")
            b = Box(*(float(v) for v in raw))
            if b.w < 0 or b.h < 0:
                raise ParseError(f"{where}: box {j} has negative extent")
            c = _clip_box(b, w, h)
            if c != b:
                clipped += 1
            boxes.append(c)
        records.append(ImageRecord(entry["image"], w, h, boxes))
    return records, clipped


def load_manifest(path, check_images: bool = True) -> tuple[list[ImageRecord], int]:
    """Parse a manifest; returns the records and the number of clipped boxes.

    Image paths in the result are resolved against the manifest directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ParseError(f"manifest not found: {path}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    records, clipped = parse_manifest(doc, str(path))
    for r in records:
        full = path.parent / r.image_path
        if check_images and not full.exists():
            raise MissingImage(f"{path}: image {r.image_path!r} not found")
        r.image_path = str(full)
    if clipped:
        log.warning("%s: clipped %d boxes to image bounds", path, clipped)
    return records, clipped


def manifest_json(records: Sequence[ImageRecord], base_dir=None) -> str:
    out = []
    for r in records:
        name = r.image_path
        if base_dir is not None:
            name = os.path.relpath(name, base_dir)
        out.append({
            "image": name.replace(os.sep, "/"),
            "width": r.width,
            "height": r.height,
            "boxes": [[_num(v) for v in b.as_tuple()] for b in r.boxes],
        })
    return json.dumps(out, indent=1) + "\n"


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


# --------------------------------------------------------------------------
# tiling


def tile_origins(extent: int, tile: int) -> list[int]:
    """Tile starts along one axis; the last tile is shifted back to end at the border."""
    n = math.ceil(extent / tile)
    return [min(i * tile, extent - tile) for i in range(n)]


def tile_image(
    record: ImageRecord,
    tile_w: int = 752,
    tile_h: int = 674,
    keep_rule: str = "center",
) -> list[Tile]:
    """Cut a frame into full-size tiles and remap its boxes.

    Tiles are ordered row-major.  Under the ``center`` rule a box belongs to
    the first tile whose half-open extent contains its center (the closing
    image border counts for the last tile); under ``any_overlap`` it belongs
    to every tile it overlaps.  Remapped boxes are clipped to the tile.
    """
    if keep_rule not in ("center", "any_overlap"):
        raise ValueError(f"unknown keep_rule {keep_rule!r}")
    if tile_w > record.width or tile_h > record.height:
        raise TileLargerThanImage(
            f"tile {tile_w}x{tile_h} exceeds image {record.width}x{record.height}"
        )
    xs = tile_origins(record.width, tile_w)
    ys = tile_origins(record.height, tile_h)
    tiles = [Tile(record.image_path, (x0, y0), tile_w, tile_h, []) for y0 in ys for x0 in xs]
    for b in record.boxes:
        if keep_rule == "center":
            targets = []
            for t in tiles:
                x0, y0 = t.origin
                in_x = x0 <= b.cx < x0 + tile_w or (b.cx == record.width and x0 + tile_w == record.width)
                in_y = y0 <= b.cy < y0 + tile_h or (b.cy == record.height and y0 + tile_h == record.height)
                if in_x and in_y:
                    targets.append(t)
                    break
        else:
            targets = [
                t for t in tiles
                if b.x < t.origin[0] + tile_w and b.x + b.w > t.origin[0]
                and b.y < t.origin[1] + tile_h and b.y + b.h > t.origin[1]
            ]
        for t in targets:
            moved = Box(b.x - t.origin[0], b.y - t.origin[1], b.w, b.h)
            t.boxes.append(_clip_box(moved, tile_w, tile_h))
    return tiles


def untile_box(b: Box, tile: Tile) -> Box:
    return Box(b.x + tile.origin[0], b.y + tile.origin[1], b.w, b.h)


def crop_tile(image: np.ndarray, tile: Tile, multiple: int = 32) -> np.ndarray:
    """Extract tile pixels, padded by edge replication to a multiple of ``multiple``."""
    x0, y0 = tile.origin
    crop = image[:, :, y0:y0 + tile.height, x0:x0 + tile.width]
    ph = (-tile.height) % multiple
    pw = (-tile.width) % multiple
    if ph or pw:
        crop = np.pad(crop, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return crop


# --------------------------------------------------------------------------
# oriented boxes


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def oriented_to_axis_aligned(ob: OrientedBox) -> Box:
    """Smallest axis-aligned box enclosing a quadrilateral, in corner form."""
    pts = np.asarray(ob.corners, dtype=np.float64)
    if pts.shape != (4, 2) or not np.all(np.isfinite(pts)):
        raise DegenerateQuadrilateral(f"expected four finite corners, got {ob.corners!r}")
    x, y = pts[:, 0], pts[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    if area <= 1e-12:
        raise DegenerateQuadrilateral("quadrilateral has zero area")
    if _segments_cross(pts[0], pts[1], pts[2], pts[3]) or _segments_cross(pts[1], pts[2], pts[3], pts[0]):
        raise DegenerateQuadrilateral("quadrilateral is self-intersecting")
    x1, x2 = x.min(), x.max()
    y1, y2 = y.min(), y.max()
    cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
    return Box(cx - w / 2, cy - h / 2, w, h)


def rotated_corners(cx: float, cy: float, w: float, h: float, angle_deg: float) -> OrientedBox:
    """Corners of a ``w`` x ``h`` rectangle rotated counter-clockwise about its center."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    pts = []
    for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        pts.append((cx + dx * c - dy * s, cy + dx * s + dy * c))
    return OrientedBox(tuple(pts))


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 1
    n_images: int = 4
    img_w: int = 736
    img_h: int = 672
    vehicles_min: int = 3
    vehicles_max: int = 8
    distractor_rate: float = 0.5
    min_side: int = 24
    max_side: int = 60
    max_retries: int = 200


def value_noise(rng: np.random.Generator, h: int, w: int, cell: int = 32) -> np.ndarray:
    """Smooth noise: bilinear interpolation of a coarse random lattice, in [0, 1]."""
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.random((gh, gw))
    yy = np.arange(h) / cell
    xx = np.arange(w) / cell
    y0 = yy.astype(int)
    x0 = xx.astype(int)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _background(rng, h, w):
    base = 0.25 + 0.3 * value_noise(rng, h, w, 64) + 0.1 * value_noise(rng, h, w, 8)
    tint = rng.uniform(-0.05, 0.05, size=3)
    img = np.stack([base + t for t in tint])
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def _draw_vehicle(img, rng, x, y, w, h):
    """Bright body with a dark glass band across the short axis near the front."""
    body = rng.uniform(0.7, 1.0, size=3)
    img[:, y:y + h, x:x + w] = body[:, None, None]
    dark = rng.uniform(0.0, 0.15)
    if w >= h:
        lo, hi = x + int(0.2 * w), x + int(0.38 * w)
        img[:, y + 2:y + h - 2, lo:hi] = dark
    else:
        lo, hi = y + int(0.2 * h), y + int(0.38 * h)
        img[:, lo:hi, x + 2:x + w - 2] = dark


def _draw_distractor(img, rng, x, y, w, h):
    """Same size range and brightness, but a checkerboard of dark squares."""
    body = rng.uniform(0.7, 1.0, size=3)
    img[:, y:y + h, x:x + w] = body[:, None, None]
    dark = rng.uniform(0.0, 0.15)
    cell = max(4, min(w, h) // 4)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy // cell) + (xx // cell)) % 2 == 1
    region = img[:, y:y + h, x:x + w]
    region[:, mask] = dark


def _place(rng, taken, cfg, img_w, img_h, overlap_ok):
    for _ in range(cfg.max_retries):
        long_side = int(rng.integers(max(cfg.min_side, 36), cfg.max_side + 1))
        short_side = int(rng.integers(cfg.min_side, min(long_side, 40) + 1))
        w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
        x = int(rng.integers(0, img_w - w + 1))
        y = int(rng.integers(0, img_h - h + 1))
        cand = np.array([[x, y, w, h]], dtype=np.float64)
        if taken:
            ov = iou_matrix(cand, np.array(taken, dtype=np.float64))[0]
            if not overlap_ok(ov):
                continue
        return x, y, w, h
    raise PlacementFailure(f"could not place an object after {cfg.max_retries} attempts")


def synth_image(cfg: SynthConfig, index: int) -> tuple[np.ndarray, list[Box]]:
    """One scene: (1, 3, H, W) image in [0, 1] and its annotated vehicle boxes."""
    if cfg.img_w % 32 or cfg.img_h % 32:
        raise ValueError(f"image extents must be divisible by 32, got {cfg.img_w}x{cfg.img_h}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, index])))
    img = _background(rng, cfg.img_h, cfg.img_w)
    n_veh = int(rng.integers(cfg.vehicles_min, cfg.vehicles_max + 1))
    vehicles: list[tuple[int, int, int, int]] = []
    for _ in range(n_veh):
        vehicles.append(_place(rng, vehicles, cfg, cfg.img_w, cfg.img_h, lambda ov: np.all(ov <= 0.3)))
    distractors: list[tuple[int, int, int, int]] = []
    for _ in range(n_veh):
        if rng.random() < cfg.distractor_rate:
            taken = vehicles + distractors
            distractors.append(_place(rng, taken, cfg, cfg.img_w, cfg.img_h, lambda ov: np.all(ov == 0)))
    for d in distractors:
        _draw_distractor(img, rng, *d)
    for v in vehicles:
        _draw_vehicle(img, rng, *v)
    img = np.clip(img, 0.0, 1.0)[None]
    return img, [Box(float(x), float(y), float(w), float(h)) for x, y, w, h in vehicles]


def synth_generate(out_dir, cfg: SynthConfig = SynthConfig()) -> Path:
    """Write ``cfg.n_images`` PPM scenes plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    records = []
    for i in range(cfg.n_images):
        img, boxes = synth_image(cfg, i)
        # store the quantized image so the manifest matches what readers see
        name = f"img_{i:04d}.ppm"
        write_ppm(img, out / name)
        records.append(ImageRecord(name, cfg.img_w, cfg.img_h, boxes))
    manifest = out / "manifest.json"
    atomic_write_text(manifest, manifest_json(records))
    return manifest
