"""Synthetic scenes with planted part and group confusers, and brute-force oracles.

Each instance is an axis-aligned ellipse of its class colour with a darker,
more class-typical sub-ellipse (the discriminative part) that holds the
annotated point. Proposal bags contain the whole object, rectangular chunks of
it around the part, a loosely dilated copy and, for adjacent same-class pairs,
the union of both objects. The semantic map gives parts the strongest class
response, so classification-driven selection is drawn towards them, while the
generator's own confidence favours them even more.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import (
    FeaturePyramid,
    GroundTruth,
    Proposal,
    ProposalBag,
    Scene,
    roi_pool_features,
    scene_to_doc,
    write_feature_pyramid,
    write_image_plane,
)
from .geometry import Box, Point, box_iou, mask_to_box, box_to_mask

PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.90],
        [0.85, 0.80, 0.20],
        [0.70, 0.30, 0.80],
        [0.20, 0.80, 0.80],
    ]
)
BACKGROUND = np.array([0.35, 0.35, 0.35])


@dataclass
class SynthSpec:
    seed: int = 0
    n_scenes: int = 200
    width: int = 64
    height: int = 64
    min_instances: int = 2
    max_instances: int = 4
    num_classes: int = 3
    proposals: int = 6
    part_fraction: float = 0.6
    group_fraction: float = 0.5
    feature_noise: float = 0.08
    image_noise: float = 0.02
    body_level: float = 0.5
    part_strength: tuple[float, float] = (0.5, 1.0)
    radius: tuple[float, float] = (6.0, 11.0)
    extra_channels: int = 0
    pyramid_levels: int = 4
    part_presence: float = 0.6
    feature_blur: int = 1
    objectness: bool = False

    def __post_init__(self):
        for name in ("n_scenes", "width", "height", "min_instances", "max_instances",
                     "num_classes", "proposals", "pyramid_levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_instances < self.min_instances:
            raise ValueError("max_instances must be >= min_instances")
        if self.num_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} classes are supported")
        for name in ("part_fraction", "group_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.extra_channels < 0:
            raise ValueError("extra_channels must be >= 0")

    @property
    def channels(self) -> int:
        return self.num_classes + int(self.objectness) + self.extra_channels

    @property
    def feature_dim(self) -> int:
        return 4 * self.channels + 2


@dataclass
class GeneratedScene:
    scene: Scene
    kinds: list[list[str]]  # per bag, per proposal: whole / part / loose / group
    partners: dict[int, int] = field(default_factory=dict)  # group pairs, both directions


def _ellipse(W, H, cx, cy, a, b) -> np.ndarray:
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    return ((xs[None, :] - cx) / a) ** 2 + ((ys[:, None] - cy) / b) ** 2 <= 1.0


def _dilate(m: np.ndarray, r: int) -> np.ndarray:
    out = m.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    # iid noise box-blurred 3x3; scaled so the blurred field has std ~ sigma
    raw = rng.normal(0.0, sigma * 3.0, size=(shape[0] + 2, shape[1] + 2))
    acc = np.zeros(shape)
    for dy in range(3):
        for dx in range(3):
            acc += raw[dy : dy + shape[0], dx : dx + shape[1]]
    return acc / 9.0


def _box_blur3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    return sum(p[:, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)) / 9.0


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = max(h // 2, 1), max(w // 2, 1)
    fy, fx = (2 if h >= 2 else 1), (2 if w >= 2 else 1)
    x = x[:, : h2 * fy, : w2 * fx]
    return x.reshape(c, h2, fy, w2, fx).mean(axis=(2, 4))


@dataclass
class _Instance:
    cx: float
    cy: float
    a: float
    b: float
    cls: int
    mask: np.ndarray
    part: np.ndarray
    part_center: tuple[float, float]
    part_axes: tuple[float, float]
    strength: float
    point: tuple[float, float]
    partner: int | None = None


def _place(spec: SynthSpec, rng, n: int, pair: bool) -> list[_Instance]:
    W, H = spec.width, spec.height
    occupied = np.zeros((H, W), dtype=bool)
    out: list[_Instance] = []
    lo, hi = spec.radius

    def fits(m):
        return not (_dilate(m, 2) & occupied).any()

    def make(cx, cy, a, b, cls):
        m = _ellipse(W, H, cx, cy, a, b)
        box = mask_to_box(m)
        if box.empty or box.x <= 0 or box.y <= 0 or box.x + box.w >= W or box.y + box.h >= H:
            return None
        return m

    i = 0
    tries = 0
    while i < n:
        tries += 1
        if tries > 400 * n:
            raise ValueError(
                f"infeasible packing: cannot place {n} instances in a {W}x{H} image"
            )
        a, b = rng.uniform(lo, hi, 2)
        cx = rng.uniform(a + 1, W - a - 1)
        cy = rng.uniform(b + 1, H - b - 1)
        cls = int(rng.integers(spec.num_classes))
        group = pair and i == 0 and n >= 2
        m = make(cx, cy, a, b, cls)
        if m is None or not fits(m):
            continue
        if group:
            # a same-class neighbour separated by a narrow gap
            a2, b2 = rng.uniform(lo, hi, 2)
            gap = rng.uniform(1.5, 3.0)
            horizontal = rng.random() < 0.5
            if horizontal:
                cx2 = cx + (a + a2 + gap) * (1 if rng.random() < 0.5 else -1)
                cy2 = cy + rng.uniform(-0.3, 0.3) * b
            else:
                cx2 = cx + rng.uniform(-0.3, 0.3) * a
                cy2 = cy + (b + b2 + gap) * (1 if rng.random() < 0.5 else -1)
            m2 = make(cx2, cy2, a2, b2, cls)
            if m2 is None or (m & _dilate(m2, 1)).any() or not fits(m2):
                continue
            out.append(_new_instance(rng, spec, cx, cy, a, b, cls, m))
            out.append(_new_instance(rng, spec, cx2, cy2, a2, b2, cls, m2))
            out[-2].partner, out[-1].partner = len(out) - 1, len(out) - 2
            occupied |= m | m2
            i += 2
            continue
        out.append(_new_instance(rng, spec, cx, cy, a, b, cls, m))
        occupied |= m
        i += 1
    return out


def _new_instance(rng, spec, cx, cy, a, b, cls, m) -> _Instance:
    W, H = spec.width, spec.height
    theta = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(0.35, 0.5)
    pa, pb = 0.4 * a, 0.4 * b
    pcx, pcy = cx + off * a * np.cos(theta), cy + off * b * np.sin(theta)
    part = _ellipse(W, H, pcx, pcy, pa, pb) & m
    ys, xs = np.nonzero(part)
    if len(xs) == 0:
        ys, xs = np.nonzero(m)
    k = int(rng.integers(len(xs)))
    point = (float(xs[k]) + 0.5, float(ys[k]) + 0.5)
    strength = float(rng.uniform(*spec.part_strength))
    return _Instance(cx, cy, a, b, cls, m, part, (pcx, pcy), (pa, pb), strength, point)


def _part_proposal(rng, spec, inst: _Instance) -> np.ndarray | None:
    W, H = spec.width, spec.height
    gt = mask_to_box(inst.mask)
    f = rng.uniform(0.4, 0.7, 2)
    w, h = f[0] * gt.w, f[1] * gt.h
    px, py = inst.point
    x = np.clip(inst.part_center[0] - w / 2 + rng.uniform(-0.15, 0.15) * w, gt.x, gt.x + gt.w - w)
    y = np.clip(inst.part_center[1] - h / 2 + rng.uniform(-0.15, 0.15) * h, gt.y, gt.y + gt.h - h)
    # keep the annotated point inside the chunk
    x = min(max(x, px - w + 0.5), px - 0.5)
    y = min(max(y, py - h + 0.5), py - 0.5)
    m = inst.mask & box_to_mask((x, y, w, h), W, H)
    if not m.any():
        return None
    return m


def generate_scene(spec: SynthSpec, index: int) -> GeneratedScene:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    W, H = spec.width, spec.height
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    pair = n >= 2 and rng.random() < spec.group_fraction
    insts = _place(spec, rng, n, pair)

    # semantic map: class channels, objectness, optional pure-noise channels
    C = spec.channels
    sem = np.zeros((C, H, W))
    img = np.broadcast_to(BACKGROUND, (H, W, 3)).copy()
    for inst in insts:
        sem[inst.cls][inst.mask] = spec.body_level
        sem[inst.cls][inst.part] = inst.strength
        if spec.objectness:
            sem[spec.num_classes][inst.mask] = 1.0
        col = PALETTE[inst.cls]
        img[inst.mask] = col
        img[inst.part] = col * 0.6
    for _ in range(spec.feature_blur):
        sem = _box_blur3(sem)
    for c in range(C):
        sem[c] += _smooth_noise(rng, (H, W), spec.feature_noise)
    img += rng.normal(0.0, spec.image_noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    levels = [sem.astype(np.float32)]
    for _ in range(spec.pyramid_levels - 1):
        levels.append(_avg_pool2(levels[-1].astype(np.float64)).astype(np.float32))

    points = [Point(i.point[0], i.point[1], i.cls, k) for k, i in enumerate(insts)]
    bags, kinds = [], []
    level0 = levels[0].astype(np.float64)
    n_parts = int(round(spec.part_fraction * (spec.proposals - 1)))
    for k, inst in enumerate(insts):
        entries: list[tuple[str, np.ndarray, float]] = [
            ("whole", inst.mask, rng.uniform(0.6, 0.85))
        ]
        slots = spec.proposals - 1
        if inst.partner is not None and slots > 0:
            entries.append(("group", inst.mask | insts[inst.partner].mask, rng.uniform(0.5, 0.8)))
            slots -= 1
        has_parts = rng.random() < spec.part_presence
        for _ in range(min(n_parts, slots) if has_parts else 0):
            m = _part_proposal(rng, spec, inst)
            if m is not None:
                entries.append(("part", m, rng.uniform(0.8, 0.98)))
        slots = spec.proposals - len(entries)
        for _ in range(max(slots, 0)):
            entries.append(("loose", _dilate(inst.mask, int(rng.integers(3, 6))),
                            rng.uniform(0.4, 0.7)))
        order = rng.permutation(len(entries))
        entries = [entries[j] for j in order]
        boxes = np.array([mask_to_box(m).as_array() for _, m, _ in entries])
        feats = roi_pool_features(level0, boxes, W, H)
        props = [
            Proposal(Box.from_array(boxes[j]), m, float(round(s, 6)), feats[j])
            for j, (_, m, s) in enumerate(entries)
        ]
        bags.append(ProposalBag(k, points[k], props))
        kinds.append([kind for kind, _, _ in entries])

    gt = {k: GroundTruth(k, mask_to_box(i.mask), i.mask) for k, i in enumerate(insts)}
    scene = Scene(
        image_id=f"synth_{spec.seed}_{index:05d}",
        width=W,
        height=H,
        points=points,
        bags=bags,
        gt=gt,
        image_plane=img,
        pyramid=FeaturePyramid(levels),
        num_classes=spec.num_classes,
    )
    partners = {k: i.partner for k, i in enumerate(insts) if i.partner is not None}
    return GeneratedScene(scene, kinds, partners)


def generate_corpus(spec: SynthSpec) -> list[GeneratedScene]:
    return [generate_scene(spec, i) for i in range(spec.n_scenes)]


def write_corpus(corpus: list[GeneratedScene], spec: SynthSpec, out_dir) -> Path:
    """Scene JSON + PPM image + SAPF pyramid per scene, and a ``corpus.json`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for g in corpus:
        s = g.scene
        write_image_plane(s.image_plane, out / f"{s.image_id}.ppm")
        write_feature_pyramid(s.pyramid, out / f"{s.image_id}.sapf")
        doc = scene_to_doc(s, image_plane=f"{s.image_id}.ppm", feature_pyramid=f"{s.image_id}.sapf")
        (out / f"{s.image_id}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    manifest = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "scenes": [
            {"image_id": g.scene.image_id, "kinds": g.kinds,
             "partners": {str(k): v for k, v in sorted(g.partners.items())}}
            for g in corpus
        ],
    }
    path = out / "corpus.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def corrupt_mask(mask: np.ndarray, rng: np.random.Generator, holes: int = 3,
                 hole_radius: float = 1.5, bleed: int = 2) -> np.ndarray:
    """Punch holes into ``mask`` and let its boundary bleed outward on one side."""
    m = np.asarray(mask, dtype=bool).copy()
    H, W = m.shape
    ys, xs = np.nonzero(_erode(m, 2))
    for _ in range(holes if len(xs) else 0):
        k = int(rng.integers(len(xs)))
        m &= ~_ellipse(W, H, xs[k] + 0.5, ys[k] + 0.5, hole_radius, hole_radius)
    box = mask_to_box(mask)
    grown = _dilate(np.asarray(mask, dtype=bool), bleed)
    side = int(rng.integers(4))
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    half = [xx < cx, xx >= cx, yy < cy, yy >= cy][side]
    return m | (grown & half & ~np.asarray(mask, dtype=bool))


def _erode(m: np.ndarray, r: int) -> np.ndarray:
    return ~_dilate(~m, r)


# ---------------------------------------------------------------- oracles


def oracle_best_iou(bag: ProposalBag, gt_box) -> int:
    """Index of the proposal with the highest box IoU to ``gt_box`` (first on ties)."""
    best, best_iou = 0, -1.0
    for j, p in enumerate(bag.proposals):
        v = box_iou(p.box, gt_box)
        if v > best_iou:
            best, best_iou = j, v
    return best


ORACLE_MAX_SIDE = 12


def oracle_tree_filter(phi: np.ndarray, right: np.ndarray, down: np.ndarray,
                       bandwidth: float, literal: bool = False) -> np.ndarray:
    """All-pairs tree filter on an ``H x W`` grid by explicit path scans.

    The spanning tree comes from Prim's algorithm; each source runs a
    breadth-first walk recording the largest edge seen so far.
    """
    phi = np.asarray(phi, dtype=np.float64)
    H, W = phi.shape
    if H > ORACLE_MAX_SIDE or W > ORACLE_MAX_SIDE:
        raise ValueError(f"oracle limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} grids")
    n = H * W
    nbrs: list[list[tuple[float, int]]] = [[] for _ in range(n)]
    for r in range(H):
        for c in range(W):
            u = r * W + c
            if c + 1 < W:
                nbrs[u].append((float(right[r, c]), u + 1))
                nbrs[u + 1].append((float(right[r, c]), u))
            if r + 1 < H:
                nbrs[u].append((float(down[r, c]), u + W))
                nbrs[u + W].append((float(down[r, c]), u))
    tree: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    done = [False] * n
    heap = [(0.0, 0, -1)]
    while heap:
        w, v, frm = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        if frm >= 0:
            tree[v].append((frm, w))
            tree[frm].append((v, w))
        for wt, u in nbrs[v]:
            if not done[u]:
                heapq.heappush(heap, (wt, u, v))
    flat = phi.ravel()
    out = np.empty(n)
    for src in range(n):
        maxw = np.full(n, -1.0)
        maxw[src] = 0.0
        q = deque([src])
        while q:
            a = q.popleft()
            for b, wt in tree[a]:
                if maxw[b] < 0:
                    maxw[b] = max(maxw[a], wt)
                    q.append(b)
        psi = np.exp(-maxw / (bandwidth * bandwidth))
        num = float(np.sum(psi * flat))
        den = float(np.sum(psi)) - (1.0 if literal else 0.0)
        out[src] = num / den if den > 0 else flat[src]
    return out.reshape(H, W)
