import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflcnn.boxgeom import Box
from dflcnn.datapipe import (
    ImageRecord,
    OrientedBox,
    SynthConfig,
    atomic_write_bytes,
    crop_tile,
    decode_ppm,
    encode_ppm,
    load_manifest,
    manifest_json,
    oriented_to_axis_aligned,
    quantize,
    read_ppm,
    rotated_corners,
    synth_generate,
    synth_image,
    tile_image,
    untile_box,
    write_ppm,
)
from dflcnn.errors import (
    DegenerateQuadrilateral,
    IoFailure,
    MissingImage,
    ParseError,
    PlacementFailure,
    TileLargerThanImage,
    TruncatedFile,
    UnsupportedFormat,
)
from dflcnn.boxgeom import iou_matrix


# PPM


def test_ppm_white_pixel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    assert read_ppm(p).tolist() == [[[[1.0]], [[1.0]], [[1.0]]]]


def test_ppm_roundtrip_bytes(tmp_path):
    img = np.random.default_rng(0).random((1, 3, 7, 5))
    write_ppm(img, tmp_path / "a.ppm")
    back = read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(quantize(back), quantize(img))
    assert encode_ppm(back) == (tmp_path / "a.ppm").read_bytes()


def test_ppm_quantize_round_half_up():
    assert quantize(np.array([0.5 / 255, 1.49 / 255, -0.2, 1.3])).tolist() == [1, 1, 0, 255]


def test_ppm_header_comments():
    data = b"P6 # made by hand\n2 1\n# max\n255\n" + bytes([0, 0, 0, 255, 255, 255])
    img = decode_ppm(data)
    assert img.shape == (1, 3, 1, 2)
    assert img[0, :, 0, 1].tolist() == [1.0, 1.0, 1.0]


def test_ppm_errors(tmp_path):
    with pytest.raises(UnsupportedFormat):
        decode_ppm(b"P3\n1 1\n255\n255 255 255\n")
    with pytest.raises(UnsupportedFormat):
        decode_ppm(b"P6\n1 1\n65535\n" + b"\0" * 6)
    with pytest.raises(TruncatedFile):
        decode_ppm(b"P6\n2 2\n255\n" + b"\0" * 5)
    with pytest.raises(TruncatedFile):
        decode_ppm(b"P6\n2 ")
    with pytest.raises(MissingImage):
        read_ppm(tmp_path / "nope.ppm")


# manifests


def _manifest(tmp_path, doc, make_images=True):
    if make_images:
        for e in doc if isinstance(doc, list) else []:
            if isinstance(e, dict) and isinstance(e.get("image"), str):
                write_ppm(np.zeros((1, 3, 2, 2)), tmp_path / e["image"])
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_manifest_one_box(tmp_path):
    p = _manifest(tmp_path, [{"image": "a.ppm", "width": 100, "height": 100, "boxes": [[10, 20, 30, 40]]}])
    recs, clipped = load_manifest(p)
    assert len(recs) == 1 and clipped == 0
    assert recs[0].boxes == [Box(10, 20, 30, 40)]
    assert recs[0].image_path == str(tmp_path / "a.ppm")


def test_manifest_clips_and_counts(tmp_path):
    p = _manifest(tmp_path, [{"image": "a.ppm", "width": 100, "height": 50, "boxes": [[90, 10, 30, 10], [5, 5, 5, 5]]}])
    recs, clipped = load_manifest(p)
    assert clipped == 1
    assert recs[0].boxes[0] == Box(90, 10, 10, 10)


def test_manifest_empty_boxes_and_order(tmp_path):
    doc = [{"image": f"{c}.ppm", "width": 8, "height": 8, "boxes": []} for c in "cab"]
    recs, _ = load_manifest(_manifest(tmp_path, doc))
    assert [os.path.basename(r.image_path) for r in recs] == ["c.ppm", "a.ppm", "b.ppm"]
    assert all(r.boxes == [] for r in recs)


@pytest.mark.parametrize("doc, needle", [
    ("{not json", "line 1"),
    ({"image": "a.ppm"}, "array"),
    ([{"image": "a.ppm", "width": 8, "height": 8}], "boxes"),
    ([{"image": "a.ppm", "width": 8, "height": 8, "boxes": [[1, 2, 3]]}], "box 0"),
    ([{"image": "a.ppm", "width": 8, "height": 8, "boxes": [[1, 2, -3, 4]]}], "negative"),
    ([{"image": "a.ppm", "width": 0, "height": 8, "boxes": []}], "extents"),
])
def test_manifest_parse_errors(tmp_path, doc, needle):
    with pytest.raises(ParseError, match=needle):
        load_manifest(_manifest(tmp_path, doc))


def test_manifest_missing_file_and_image(tmp_path):
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "none.json")
    p = _manifest(tmp_path, [{"image": "ghost.ppm", "width": 8, "height": 8, "boxes": []}], make_images=False)
    with pytest.raises(MissingImage):
        load_manifest(p)


def test_manifest_json_roundtrip(tmp_path):
    recs = [ImageRecord(str(tmp_path / "x.ppm"), 64, 32, [Box(1, 2, 3.5, 4)])]
    write_ppm(np.zeros((1, 3, 32, 64)), tmp_path / "x.ppm")
    p = tmp_path / "m.json"
    p.write_text(manifest_json(recs, tmp_path))
    back, _ = load_manifest(p)
    assert back[0].boxes == recs[0].boxes and back[0].image_path == recs[0].image_path


# tiling


def _frame(w, h, boxes=()):
    return ImageRecord("frame", w, h, list(boxes))


def test_tiling_full_frame_counts_and_coverage():
    tiles = tile_image(_frame(5616, 3744))
    assert len(tiles) == 48
    assert all((t.width, t.height) == (752, 674) for t in tiles)
    cover = np.zeros((3744, 5616), dtype=np.int32)
    for t in tiles:
        x0, y0 = t.origin
        assert 0 <= x0 and x0 + 752 <= 5616 and 0 <= y0 and y0 + 674 <= 3744
        cover[y0:y0 + 674, x0:x0 + 752] += 1
    assert cover.min() >= 1
    xs = sorted({t.origin[0] for t in tiles})
    ys = sorted({t.origin[1] for t in tiles})
    assert xs[:-1] == [752 * i for i in range(7)] and xs[-1] == 5616 - 752
    assert ys[:-1] == [674 * i for i in range(5)] and ys[-1] == 3744 - 674


def test_tiling_single_tile_unchanged():
    boxes = [Box(10, 10, 30, 20), Box(700, 600, 40, 50)]
    tiles = tile_image(_frame(752, 674, boxes))
    assert len(tiles) == 1 and tiles[0].origin == (0, 0) and tiles[0].boxes == boxes


def test_tiling_boundary_center_goes_to_one_tile():
    b = Box(742, 100, 20, 20)  # center x = 752, the first tile boundary
    tiles = tile_image(_frame(1504, 674, [b]))
    owners = [t for t in tiles if t.boxes]
    assert len(owners) == 1 and owners[0].origin == (752, 0)
    assert sum(len(t.boxes) for t in tile_image(_frame(1504, 674, [b]), keep_rule="any_overlap")) == 2


def test_tiling_too_large():
    with pytest.raises(TileLargerThanImage):
        tile_image(_frame(700, 674))


def test_tiling_remap_identity_interior_boxes():
    rng = np.random.default_rng(8)
    boxes = []
    for _ in range(300):
        w, h = rng.integers(10, 80, 2)
        boxes.append(Box(float(rng.integers(0, 5616 - w)), float(rng.integers(0, 3744 - h)), float(w), float(h)))
    tiles = tile_image(_frame(5616, 3744, boxes))
    assert sum(len(t.boxes) for t in tiles) == 300
    interior = 0
    for b0 in boxes:
        owner = next(t for t in tiles
                     if t.origin[0] <= b0.cx < t.origin[0] + t.width and t.origin[1] <= b0.cy < t.origin[1] + t.height)
        inside = (owner.origin[0] <= b0.x and b0.x + b0.w <= owner.origin[0] + owner.width
                  and owner.origin[1] <= b0.y and b0.y + b0.h <= owner.origin[1] + owner.height)
        if inside:
            interior += 1
            local = Box(b0.x - owner.origin[0], b0.y - owner.origin[1], b0.w, b0.h)
            assert local in owner.boxes
            assert untile_box(local, owner) == b0
    assert interior > 250


def test_crop_tile_pads_by_edge_replication():
    img = np.arange(3 * 10 * 12, dtype=float).reshape(1, 3, 10, 12)
    t = tile_image(_frame(12, 10), 12, 10)[0]
    crop = crop_tile(img, t, multiple=8)
    assert crop.shape == (1, 3, 16, 16)
    assert np.array_equal(crop[:, :, :10, :12], img)
    assert np.array_equal(crop[:, :, 15, :12], img[:, :, 9, :])


# oriented boxes


def test_oriented_axis_aligned_identity():
    ob = OrientedBox(((10, 20), (40, 20), (40, 60), (10, 60)))
    assert oriented_to_axis_aligned(ob) == Box(10, 20, 30, 40)


def test_oriented_rotated_unit_square():
    b = oriented_to_axis_aligned(rotated_corners(5.0, 7.0, 1.0, 1.0, 45.0))
    assert b.w == pytest.approx(math.sqrt(2), abs=1e-12) and b.h == pytest.approx(math.sqrt(2), abs=1e-12)
    assert (b.cx, b.cy) == pytest.approx((5.0, 7.0), abs=1e-12)


@pytest.mark.parametrize("corners", [
    ((0, 0), (1, 1), (2, 2), (3, 3)),
    ((0, 0), (2, 2), (2, 0), (0, 2)),
])
def test_oriented_degenerate(corners):
    with pytest.raises(DegenerateQuadrilateral):
        oriented_to_axis_aligned(OrientedBox(corners))


@settings(max_examples=50)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(1, 50), st.floats(1, 50), st.floats(0, 360))
def test_oriented_box_contains_corners(cx, cy, w, h, ang):
    ob = rotated_corners(cx, cy, w, h, ang)
    b = oriented_to_axis_aligned(ob)
    for x, y in ob.corners:
        assert b.x - 1e-9 <= x <= b.x + b.w + 1e-9
        assert b.y - 1e-9 <= y <= b.y + b.h + 1e-9


# synthetic scenes


def test_synth_exact_vehicle_count(tmp_path):
    m = synth_generate(tmp_path, SynthConfig(seed=1, n_images=1, vehicles_min=3, vehicles_max=3))
    doc = json.loads(m.read_text())
    assert len(doc) == 1 and len(doc[0]["boxes"]) == 3


def test_synth_byte_identical(tmp_path):
    cfg = SynthConfig(seed=4, n_images=2, img_w=128, img_h=96)
    a, b = tmp_path / "a", tmp_path / "b"
    synth_generate(a, cfg)
    synth_generate(b, cfg)
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b)) == ["img_0000.ppm", "img_0001.ppm", "manifest.json"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_synth_constraints():
    cfg = SynthConfig(seed=9, n_images=6, img_w=320, img_h=320, vehicles_min=5, vehicles_max=8)
    for i in range(cfg.n_images):
        img, boxes = synth_image(cfg, i)
        assert img.shape == (1, 3, 320, 320) and img.min() >= 0 and img.max() <= 1
        assert 5 <= len(boxes) <= 8
        arr = np.array([b.as_tuple() for b in boxes])
        assert arr[:, 2:].min() >= 24 and arr[:, 2:].max() <= 60
        m = iou_matrix(arr, arr)
        np.fill_diagonal(m, 0)
        assert m.max() <= 0.3


def _distractor_pixels(img, boxes):
    """Count dark pixels outside annotated boxes that sit inside bright rectangles."""
    mask = np.ones(img.shape[2:], bool)
    for b in boxes:
        mask[int(b.y):int(b.y + b.h), int(b.x):int(b.x + b.w)] = False
    bright = img[0].min(axis=0) >= 0.7
    return int((bright & mask).sum())


def test_synth_distractor_rate_zero():
    base = dict(seed=2, n_images=1, img_w=256, img_h=256, vehicles_min=4, vehicles_max=4)
    none_img, none_boxes = synth_image(SynthConfig(distractor_rate=0.0, **base), 0)
    all_img, all_boxes = synth_image(SynthConfig(distractor_rate=1.0, **base), 0)
    assert _distractor_pixels(none_img, none_boxes) == 0
    assert _distractor_pixels(all_img, all_boxes) > 200


def test_synth_rejects_bad_extent_and_density():
    with pytest.raises(ValueError):
        synth_image(SynthConfig(img_w=100), 0)
    with pytest.raises(PlacementFailure):
        synth_image(SynthConfig(img_w=64, img_h=64, vehicles_min=20, vehicles_max=20, max_retries=20), 0)


# atomic writes


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_bytes(tmp_path / "sub" / "f.bin", b"abc")
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"abc"
    assert os.listdir(tmp_path / "sub") == ["f.bin"]


def test_atomic_write_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        atomic_write_bytes(blocker / "child.bin", b"abc")
