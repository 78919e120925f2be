"""Scene ingestion, feature pyramids, proposal featurization and label output.

Scene JSON (one object per file)::

    {
      "image_id": "s0001",
      "width": 64, "height": 64,
      "num_classes": 3,                      # optional
      "annotations": [{"instance_id": 0, "point": [x, y], "class_id": 1}],
      "bags": [{"instance_id": 0,
                "proposals": [{"mask": {"size": [h, w], "counts": [...]},
                               "box": [x, y, w, h],   # optional if mask given
                               "score": 0.93,         # optional
                               "feature": [...]}]}],  # optional
      "gt": [{"instance_id": 0, "box": [...], "mask": {...}}],   # optional
      "image_plane": "s0001.ppm",            # optional, relative to the JSON
      "feature_pyramid": "s0001.sapf"        # optional, relative to the JSON
    }

Masks are column-major RLE (see :func:`pointmine.geometry.rle_encode`).
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Box,
    Point,
    box_iou_matrix,
    box_to_mask,
    mask_perimeter,
    mask_to_box,
    rle_decode,
    rle_encode,
)

PYRAMID_MAGIC = b"SAPF"
SOFT_MASK_MAGIC = b"SAPM"
DESCRIPTOR_DIM = 12


class SceneError(ValueError):
    """Raised for schema or invariant violations; the message names the field."""


class FormatError(ValueError):
    """Raised for malformed binary payloads."""


@dataclass
class Proposal:
    box: Box
    mask: np.ndarray | None = None
    generator_score: float | None = None
    feature: np.ndarray | None = None


@dataclass
class ProposalBag:
    instance_id: int
    point: Point
    proposals: list[Proposal]

    def __len__(self) -> int:
        return len(self.proposals)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([p.box.as_array() for p in self.proposals]).reshape(-1, 4)

    @property
    def has_features(self) -> bool:
        return all(p.feature is not None for p in self.proposals)


@dataclass
class GroundTruth:
    instance_id: int
    box: Box
    mask: np.ndarray | None = None


@dataclass
class FeaturePyramid:
    """Per-image multi-scale features, highest resolution first; each C x H x W."""

    levels: list[np.ndarray]


@dataclass
class Scene:
    image_id: str
    width: int
    height: int
    points: list[Point]
    bags: list[ProposalBag]
    gt: dict[int, GroundTruth] | None = None
    image_plane: np.ndarray | None = None
    pyramid: FeaturePyramid | None = None
    num_classes: int | None = None
    source: Path | None = field(default=None, compare=False)

    @property
    def n_instances(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------- masks / RLE


def mask_to_rle_obj(m: np.ndarray) -> dict:
    h, w = m.shape
    return {"size": [int(h), int(w)], "counts": rle_encode(m)}


def rle_obj_to_mask(obj, where: str = "mask") -> np.ndarray:
    if not isinstance(obj, dict) or "size" not in obj or "counts" not in obj:
        raise SceneError(f"{where}: expected an RLE object with 'size' and 'counts'")
    size = obj["size"]
    if not (isinstance(size, list) and len(size) == 2 and all(_is_int(s) for s in size)):
        raise SceneError(f"{where}.size: expected [height, width]")
    h, w = int(size[0]), int(size[1])
    counts = obj["counts"]
    if not isinstance(counts, list) or not all(_is_int(c) for c in counts):
        raise SceneError(f"{where}.counts: expected a list of integers")
    try:
        return rle_decode(counts, w, h)
    except ValueError as exc:
        raise SceneError(f"{where}: RLE checksum mismatch ({exc})") from None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _box_field(v, where: str) -> Box:
    if not (isinstance(v, list) and len(v) == 4 and all(_is_num(c) for c in v)):
        raise SceneError(f"{where}: expected [x, y, w, h] of finite numbers")
    if v[2] < 0 or v[3] < 0:
        raise SceneError(f"{where}: negative width or height")
    return Box(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


def _boxes_equal(a: Box, b: Box, tol: float = 1e-9) -> bool:
    return all(abs(p - q) <= tol for p, q in zip(a[:4], b[:4]))


# ---------------------------------------------------------------- scenes


def parse_scene(doc: dict, base_dir: Path | None = None, load_assets: bool = True,
                missing_pyramid: str = "error") -> Scene:
    """Validate a decoded scene document and build a :class:`Scene`."""
    if not isinstance(doc, dict):
        raise SceneError("scene: expected a JSON object")
    for key in ("image_id", "width", "height", "annotations", "bags"):
        if key not in doc:
            raise SceneError(f"{key}: missing required field")
    image_id = doc["image_id"]
    if not isinstance(image_id, str) or not image_id:
        raise SceneError("image_id: expected a non-empty string")
    width, height = doc["width"], doc["height"]
    if not (_is_int(width) and width > 0):
        raise SceneError("width: expected a positive integer")
    if not (_is_int(height) and height > 0):
        raise SceneError("height: expected a positive integer")
    num_classes = doc.get("num_classes")
    if num_classes is not None and not (_is_int(num_classes) and num_classes >= 1):
        raise SceneError("num_classes: expected a positive integer")

    anns = doc["annotations"]
    if not isinstance(anns, list) or not anns:
        raise SceneError("annotations: expected a non-empty list")
    points: list[Point] = []
    seen: set[int] = set()
    for i, a in enumerate(anns):
        where = f"annotations[{i}]"
        if not isinstance(a, dict):
            raise SceneError(f"{where}: expected an object")
        iid, pt, cid = a.get("instance_id"), a.get("point"), a.get("class_id")
        if not _is_int(iid):
            raise SceneError(f"{where}.instance_id: expected an integer")
        if iid in seen:
            raise SceneError(f"{where}.instance_id: duplicate instance_id {iid}")
        seen.add(iid)
        if not _is_int(cid) or cid < 0:
            raise SceneError(f"{where}.class_id: expected a non-negative integer")
        if num_classes is not None and cid >= num_classes:
            raise SceneError(f"{where}.class_id: {cid} >= num_classes {num_classes}")
        if not (isinstance(pt, list) and len(pt) == 2 and all(_is_num(c) for c in pt)):
            raise SceneError(f"{where}.point: expected [x, y]")
        if not (0 <= pt[0] < width and 0 <= pt[1] < height):
            raise SceneError(
                f"{where}.point: instance_id {iid} point {pt} lies outside the "
                f"{width}x{height} image"
            )
        points.append(Point(float(pt[0]), float(pt[1]), int(cid), int(iid)))

    bags_doc = doc["bags"]
    if not isinstance(bags_doc, list):
        raise SceneError("bags: expected a list")
    by_id = {p.instance_id: p for p in points}
    bag_map: dict[int, ProposalBag] = {}
    feat_dim: int | None = None
    for i, b in enumerate(bags_doc):
        where = f"bags[{i}]"
        if not isinstance(b, dict):
            raise SceneError(f"{where}: expected an object")
        iid = b.get("instance_id")
        if not _is_int(iid) or iid not in by_id:
            raise SceneError(f"{where}.instance_id: {iid!r} matches no annotation")
        if iid in bag_map:
            raise SceneError(f"{where}.instance_id: second bag for instance_id {iid}")
        props_doc = b.get("proposals")
        if not isinstance(props_doc, list) or not props_doc:
            raise SceneError(f"{where}.proposals: expected a non-empty list")
        props = []
        for j, p in enumerate(props_doc):
            pw = f"{where}.proposals[{j}]"
            prop = _parse_proposal(p, pw, width, height)
            if prop.feature is not None:
                if feat_dim is None:
                    feat_dim = prop.feature.size
                elif prop.feature.size != feat_dim:
                    raise SceneError(
                        f"{pw}.feature: dimension {prop.feature.size}, expected {feat_dim}"
                    )
            props.append(prop)
        bag_map[iid] = ProposalBag(int(iid), by_id[iid], props)
    missing = [p.instance_id for p in points if p.instance_id not in bag_map]
    if missing:
        raise SceneError(f"bags: no bag for instance_id {missing[0]}")
    bags = [bag_map[p.instance_id] for p in points]

    gt = None
    if doc.get("gt") is not None:
        gt = {}
        if not isinstance(doc["gt"], list):
            raise SceneError("gt: expected a list")
        for i, g in enumerate(doc["gt"]):
            where = f"gt[{i}]"
            if not isinstance(g, dict) or not _is_int(g.get("instance_id")):
                raise SceneError(f"{where}.instance_id: expected an integer")
            iid = g["instance_id"]
            if iid not in by_id:
                raise SceneError(f"{where}.instance_id: {iid} matches no annotation")
            mask = None
            if g.get("mask") is not None:
                mask = _check_mask(rle_obj_to_mask(g["mask"], f"{where}.mask"), f"{where}.mask", width, height)
            if g.get("box") is not None:
                box = _box_field(g["box"], f"{where}.box")
            elif mask is not None:
                box = mask_to_box(mask)
            else:
                raise SceneError(f"{where}: needs a box or a mask")
            gt[iid] = GroundTruth(int(iid), box, mask)

    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    image_plane = None
    pyramid = None
    if load_assets and doc.get("image_plane"):
        path = base_dir / doc["image_plane"]
        try:
            image_plane = read_image_plane(path)
        except OSError as exc:
            raise SceneError(f"image_plane: cannot read {path}: {exc}") from None
        if image_plane.shape[:2] != (height, width):
            raise SceneError(f"image_plane: shape {image_plane.shape[:2]} != ({height}, {width})")
    if load_assets and doc.get("feature_pyramid"):
        path = base_dir / doc["feature_pyramid"]
        try:
            pyramid = load_feature_pyramid(path)
        except FileNotFoundError as exc:
            if missing_pyramid != "warn":
                raise SceneError(f"feature_pyramid: {exc}") from None
            warnings.warn(f"{image_id}: feature pyramid {path} not found; continuing without it")
        except (OSError, FormatError) as exc:
            raise SceneError(f"feature_pyramid: {exc}") from None

    return Scene(
        image_id=image_id,
        width=int(width),
        height=int(height),
        points=points,
        bags=bags,
        gt=gt,
        image_plane=image_plane,
        pyramid=pyramid,
        num_classes=num_classes,
    )


def _check_mask(m: np.ndarray, where: str, width: int, height: int) -> np.ndarray:
    if m.shape != (height, width):
        raise SceneError(f"{where}: mask size {list(m.shape)} != [{height}, {width}]")
    m.setflags(write=False)
    return m


def _parse_proposal(p, where: str, width: int, height: int) -> Proposal:
    if not isinstance(p, dict):
        raise SceneError(f"{where}: expected an object")
    mask = None
    if p.get("mask") is not None:
        mask = _check_mask(rle_obj_to_mask(p["mask"], f"{where}.mask"), f"{where}.mask", width, height)
    box = None
    if p.get("box") is not None:
        box = _box_field(p["box"], f"{where}.box")
    if mask is None and box is None:
        raise SceneError(f"{where}: needs a mask or a box")
    if mask is not None:
        derived = mask_to_box(mask)
        if box is not None and not _boxes_equal(box, derived):
            raise SceneError(f"{where}.box: {list(box[:4])} disagrees with mask bounds {list(derived[:4])}")
        box = derived
    score = p.get("score")
    if score is not None:
        if not _is_num(score) or not 0.0 <= score <= 1.0:
            raise SceneError(f"{where}.score: expected a number in [0, 1]")
        score = float(score)
    feature = p.get("feature")
    if feature is not None:
        if not (isinstance(feature, list) and feature and all(_is_num(v) for v in feature)):
            raise SceneError(f"{where}.feature: expected a non-empty list of finite numbers")
        feature = np.asarray(feature, dtype=np.float64)
    return Proposal(box=box, mask=mask, generator_score=score, feature=feature)


def load_scene(path, load_assets: bool = True, missing_pyramid: str = "error") -> Scene:
    """Parse one scene file; ``missing_pyramid="warn"`` tolerates an absent pyramid file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})") from None
    scene = parse_scene(doc, base_dir=path.parent, load_assets=load_assets,
                        missing_pyramid=missing_pyramid)
    scene.source = path
    return scene


def scene_to_doc(scene: Scene, image_plane: str | None = None, feature_pyramid: str | None = None,
                 include_features: bool = True) -> dict:
    """Inverse of :func:`parse_scene` (asset paths are passed in, not written)."""
    doc = {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
    }
    if scene.num_classes is not None:
        doc["num_classes"] = scene.num_classes
    doc["annotations"] = [
        {"instance_id": p.instance_id, "point": [p.x, p.y], "class_id": p.class_id}
        for p in scene.points
    ]
    bags = []
    for bag in scene.bags:
        props = []
        for prop in bag.proposals:
            d = {"box": [float(v) for v in prop.box[:4]]}
            if prop.mask is not None:
                d["mask"] = mask_to_rle_obj(prop.mask)
            if prop.generator_score is not None:
                d["score"] = prop.generator_score
            if include_features and prop.feature is not None:
                d["feature"] = [float(v) for v in prop.feature]
            props.append(d)
        bags.append({"instance_id": bag.instance_id, "proposals": props})
    doc["bags"] = bags
    if scene.gt is not None:
        doc["gt"] = [
            {
                "instance_id": g.instance_id,
                "box": [float(v) for v in g.box[:4]],
                **({"mask": mask_to_rle_obj(g.mask)} if g.mask is not None else {}),
            }
            for g in scene.gt.values()
        ]
    if image_plane:
        doc["image_plane"] = image_plane
    if feature_pyramid:
        doc["feature_pyramid"] = feature_pyramid
    return doc


def load_corpus(path, missing_pyramid: str = "error") -> list[Scene]:
    """Load a single scene file, or every ``*.json`` scene in a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.glob("*.json") if p.name != "corpus.json")
        return [load_scene(p, missing_pyramid=missing_pyramid) for p in files]
    return [load_scene(path, missing_pyramid=missing_pyramid)]


# ---------------------------------------------------------------- binary formats


def write_feature_pyramid(pyr: FeaturePyramid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(PYRAMID_MAGIC)
        fh.write(struct.pack("<I", len(pyr.levels)))
        for lvl in pyr.levels:
            c, h, w = lvl.shape
            fh.write(struct.pack("<III", c, h, w))
            fh.write(np.ascontiguousarray(lvl, dtype="<f4").tobytes())


def load_feature_pyramid(path) -> FeaturePyramid:
    data = Path(path).read_bytes()
    if data[:4] != PYRAMID_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    levels = []
    for i in range(n):
        if off + 12 > len(data):
            raise FormatError(f"{path}: truncated header for level {i}")
        c, h, w = struct.unpack_from("<III", data, off)
        off += 12
        nbytes = 4 * c * h * w
        if off + nbytes > len(data):
            raise FormatError(
                f"{path}: level {i} declares {nbytes} bytes, only {len(data) - off} present"
            )
        lvl = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        if not np.all(np.isfinite(lvl)):
            raise FormatError(f"{path}: level {i} contains non-finite values")
        levels.append(lvl.astype(np.float32))
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return FeaturePyramid(levels)


def write_soft_mask(m: np.ndarray, path) -> None:
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(SOFT_MASK_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_soft_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SOFT_MASK_MAGIC or len(data) < 12:
        raise FormatError(f"{path}: not a soft-mask file")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * h * w:
        raise FormatError(f"{path}: size mismatch for {h}x{w} soft mask")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def read_image_plane(path) -> np.ndarray:
    """PGM/PPM (or anything Pillow decodes) as an ``H x W x C`` float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image_plane(plane: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(plane) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------- featurization


def handcrafted_descriptor(
    box: Box,
    fg: np.ndarray | None,
    generator_score: float | None,
    point: Point,
    width: int,
    height: int,
) -> np.ndarray:
    """Backbone-free 12-dim proposal descriptor.

    ``fg`` is the proposal's own mask, or any foreground estimate for boxes that
    have none. Layout: center x/y, width, height (image-normalized), foreground
    ratio, generator score, perimeter ratio, aspect, point-to-center distance
    (box-diagonal units), then a bias channel and two zero pads.
    """
    x, y, w, h = box[:4]
    area = max(w * h, 1e-12)
    fg_ratio = 0.0
    perim = 0.0
    if fg is not None:
        inside = fg & box_to_mask(box, width, height)
        n = np.count_nonzero(inside)
        fg_ratio = min(n / area, 1.0)
        perim = mask_perimeter(inside) / max(2.0 * (w + h), 1e-12)
    cx, cy = x + w / 2.0, y + h / 2.0
    diag = max(math.hypot(w, h), 1e-12)
    dist = math.hypot(point.x - cx, point.y - cy) / diag
    return np.array(
        [
            cx / width,
            cy / height,
            w / width,
            h / height,
            fg_ratio,
            generator_score if generator_score is not None else 0.0,
            perim,
            w / max(w + h, 1e-12),
            dist,
            1.0,
            0.0,
            0.0,
        ]
    )


def _pixel_span(lo: np.ndarray, size: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # pixels whose centers fall inside [lo, lo + size)
    a = np.clip(np.ceil(lo - 0.5), 0, n).astype(np.int64)
    b = np.clip(np.ceil(lo + size - 0.5), 0, n).astype(np.int64)
    return a, np.maximum(a, b)


def roi_pool_features(level: np.ndarray, boxes: np.ndarray, width: int, height: int,
                      ring: float = 0.5) -> np.ndarray:
    """Pool a dense ``C x H x W`` map over boxes given in image pixels.

    Each box yields ``[mean inside (C), max inside (C), mean of the
    surrounding ring (C), mass (C), w / width, h / height]``. The ring is the
    box grown by ``ring`` times its size on each axis, minus the box itself,
    clipped to the image. Mass is the inside mean times the square root of
    the box's share of the image, so larger boxes accumulate evidence.
    """
    level = np.asarray(level, dtype=np.float64)
    c, fh, fw = level.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    sx, sy = fw / width, fh / height
    integ = np.zeros((c, fh + 1, fw + 1))
    integ[:, 1:, 1:] = level.cumsum(1).cumsum(2)

    def rect_sum(x0, x1, y0, y1):
        return (integ[:, y1, x1] - integ[:, y0, x1] - integ[:, y1, x0] + integ[:, y0, x0]).T

    bx = boxes[:, 0] * sx
    by = boxes[:, 1] * sy
    bw = boxes[:, 2] * sx
    bh = boxes[:, 3] * sy
    x0, x1 = _pixel_span(bx, bw, fw)
    y0, y1 = _pixel_span(by, bh, fh)
    # degenerate boxes still pool the pixel under their center
    (empty,) = np.nonzero((x1 <= x0) | (y1 <= y0))
    for i in empty:
        px = int(np.clip(np.floor(bx[i] + bw[i] / 2.0), 0, fw - 1))
        py = int(np.clip(np.floor(by[i] + bh[i] / 2.0), 0, fh - 1))
        x0[i], x1[i], y0[i], y1[i] = px, px + 1, py, py + 1
    inner_n = ((x1 - x0) * (y1 - y0)).astype(np.float64)
    inner = rect_sum(x0, x1, y0, y1)
    peak = np.array(
        [level[:, a:b, e:f].max(axis=(1, 2)) for a, b, e, f in zip(y0, y1, x0, x1)]
    ).reshape(-1, c)
    gx, gy = bw * ring, bh * ring
    ox0, ox1 = _pixel_span(bx - gx, bw + 2 * gx, fw)
    oy0, oy1 = _pixel_span(by - gy, bh + 2 * gy, fh)
    ox0, oy0 = np.minimum(ox0, x0), np.minimum(oy0, y0)
    ox1, oy1 = np.maximum(ox1, x1), np.maximum(oy1, y1)
    outer_n = ((ox1 - ox0) * (oy1 - oy0)).astype(np.float64)
    outer = rect_sum(ox0, ox1, oy0, oy1)
    ring_n = outer_n - inner_n
    ring_mean = np.zeros_like(inner)
    np.divide(outer - inner, ring_n[:, None], out=ring_mean, where=ring_n[:, None] > 0)
    mean = inner / inner_n[:, None]
    share = np.sqrt(np.clip(boxes[:, 2] * boxes[:, 3], 0.0, None) / float(width * height))
    return np.hstack(
        [
            mean,
            peak,
            ring_mean,
            mean * share[:, None],
            (boxes[:, 2] / width)[:, None],
            (boxes[:, 3] / height)[:, None],
        ]
    )


class SceneFeaturizer:
    """Gives bag proposals and arbitrary derived boxes features in one space.

    Precedence in ``auto`` mode: RoI pooling over pyramid level 0 when the
    scene has a pyramid; otherwise inline proposal features when every
    proposal carries them; otherwise the handcrafted descriptor. Derived boxes (augmented positives,
    sampled negatives) use RoI pooling when a pyramid is present and its
    dimension matches, borrow the feature of the best-overlapping proposal when
    only inline features exist, and fall back to the descriptor.
    """

    def __init__(self, scene: Scene, mode: str = "auto"):
        self.scene = scene
        inline = all(b.has_features for b in scene.bags)
        has_pyr = scene.pyramid is not None and len(scene.pyramid.levels) > 0
        if mode == "auto":
            if has_pyr:
                mode = "roi"
            elif inline:
                mode = "inline"
            else:
                mode = "descriptor"
        if mode == "roi" and not has_pyr:
            raise ValueError(f"{scene.image_id}: roi features need a feature pyramid")
        if mode == "inline" and not inline:
            raise ValueError(f"{scene.image_id}: not every proposal carries a feature")
        self.mode = mode
        self._fg_union = None

    def _union_fg(self, bag_index: int | None) -> np.ndarray | None:
        bags = self.scene.bags if bag_index is None else [self.scene.bags[bag_index]]
        masks = [p.mask for b in bags for p in b.proposals if p.mask is not None]
        if not masks:
            return None
        return np.logical_or.reduce(masks)

    def bag_features(self, bag_index: int) -> np.ndarray:
        bag = self.scene.bags[bag_index]
        if self.mode == "inline":
            return np.vstack([p.feature for p in bag.proposals])
        if self.mode == "roi":
            return self._roi(bag.boxes)
        return np.vstack(
            [
                handcrafted_descriptor(
                    p.box, p.mask, p.generator_score, bag.point, self.scene.width, self.scene.height
                )
                for p in bag.proposals
            ]
        )

    def box_features(self, boxes: np.ndarray, bag_index: int | None = None) -> np.ndarray:
        """Features for boxes that are not bag proposals."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if boxes.shape[0] == 0:
            return np.zeros((0, self.dim))
        if self.mode == "roi":
            return self._roi(boxes)
        if self.mode == "inline":
            props = [p for b in self.scene.bags for p in b.proposals]
            pboxes = np.array([p.box.as_array() for p in props])
            iou = box_iou_matrix(boxes, pboxes)
            best = np.argmax(iou, axis=1)
            out = np.vstack([props[j].feature for j in best])
            out[iou[np.arange(len(best)), best] <= 0.0] = 0.0
            return out
        fg = self._union_fg(bag_index)
        point = self.scene.bags[bag_index].point if bag_index is not None else self.scene.points[0]
        return np.vstack(
            [
                handcrafted_descriptor(Box.from_array(b), fg, None, point, self.scene.width, self.scene.height)
                for b in boxes
            ]
        )

    def _roi(self, boxes: np.ndarray) -> np.ndarray:
        return roi_pool_features(self.scene.pyramid.levels[0], boxes, self.scene.width, self.scene.height)

    @property
    def dim(self) -> int:
        return self.bag_features(0).shape[1]


# ---------------------------------------------------------------- pseudo labels


@dataclass
class PseudoLabel:
    image_id: str
    instance_id: int
    class_id: int
    b_psm: Box
    b_srm: Box
    mask: np.ndarray | None = None
    soft_I: np.ndarray | None = None
    soft_S: np.ndarray | None = None
    scores: dict = field(default_factory=dict)


def _label_stem(label: PseudoLabel) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label.image_id)
    return f"{safe}__{label.instance_id}"


def write_pseudo_labels(labels: list[PseudoLabel], path) -> None:
    """Write labels as JSON; soft masks go to raw-float sidecars next to it."""
    path = Path(path)
    side_dir = path.with_name(path.stem + ".soft")
    rows = []
    for lab in labels:
        row = {
            "image_id": lab.image_id,
            "instance_id": lab.instance_id,
            "class_id": lab.class_id,
            "b_psm": [float(v) for v in lab.b_psm[:4]],
            "b_srm": [float(v) for v in lab.b_srm[:4]],
            "mask": mask_to_rle_obj(lab.mask) if lab.mask is not None else None,
            "scores": {k: float(v) for k, v in sorted(lab.scores.items())},
        }
        for tag, soft in (("I", lab.soft_I), ("S", lab.soft_S)):
            ref = None
            if soft is not None:
                side_dir.mkdir(parents=True, exist_ok=True)
                fname = f"{_label_stem(lab)}__{tag}.f32"
                write_soft_mask(soft, side_dir / fname)
                ref = f"{side_dir.name}/{fname}"
            row[f"soft_mask_{tag}"] = ref
        rows.append(row)
    doc = {"format": "pointmine-pseudo-labels", "version": 1, "labels": rows}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_pseudo_labels(path, load_soft: bool = True) -> list[PseudoLabel]:
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for row in doc["labels"]:
        mask = rle_obj_to_mask(row["mask"]) if row.get("mask") else None
        soft = {}
        for tag in ("I", "S"):
            ref = row.get(f"soft_mask_{tag}")
            soft[tag] = read_soft_mask(path.parent / ref) if (ref and load_soft) else None
        out.append(
            PseudoLabel(
                image_id=row["image_id"],
                instance_id=int(row["instance_id"]),
                class_id=int(row["class_id"]),
                b_psm=Box.from_array(row["b_psm"]),
                b_srm=Box.from_array(row["b_srm"]),
                mask=mask,
                soft_I=soft["I"],
                soft_S=soft["S"],
                scores=dict(row.get("scores", {})),
            )
        )
    return out
