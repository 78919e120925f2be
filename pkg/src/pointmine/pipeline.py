"""End-to-end pseudo-label mining over a corpus of scenes.

Modes:

* ``generator``: the generator's own top-scoring proposal.
* ``mil``: two-branch MIL selection without distance guidance.
* ``guided``: MIL with distance guidance, refinement stage and box mining.
* ``full``: ``guided`` plus completeness self-distillation in both stages.

Heads are trained on the whole corpus with full-batch gradient descent; every
per-scene step (featurization, sampling, mining, refinement) runs in a thread
pool whose results are merged in scene order, and the sampling seed of scene
``i`` is derived from ``(seed, i)``, so outputs do not depend on the pool size.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import PseudoLabel, Scene, SceneFeaturizer
from .geometry import Box, box_iou, clip_box, mask_iou, mask_to_box, points_in_boxes
from .metrics import (
    DiagnosticReport,
    InstanceRow,
    LocalGapInput,
    gap_group,
    gap_local,
    local_eligible,
    rv_ratio,
    rv_threshold,
)
from .mlar import AffinityConfig, affinity_loss, mlar_refine, prepare_guidance
from .psm import (
    BagBatch,
    DistanceConfig,
    MilHead,
    TrainerConfig,
    box_distance_scores,
    distance_scores,
    mil_forward,
    overlap_flags,
    train_psm,
)
from .sasd import DistillBag, SasdConfig, holistic_score, self_distill
from .srm import (
    BmsConfig,
    NegativeBatch,
    PnpgConfig,
    SrmConfig,
    box_mining,
    match_mask,
    sample_background_negatives,
    sample_part_negatives,
    sample_positive,
    train_srm,
)

MODES = ("generator", "mil", "guided", "full")


@dataclass
class PipelineConfig:
    mode: str = "full"
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    psm_trainer: TrainerConfig = field(default_factory=TrainerConfig)
    pnpg: PnpgConfig = field(default_factory=PnpgConfig)
    srm: SrmConfig = field(default_factory=SrmConfig)
    bms: BmsConfig = field(default_factory=BmsConfig)
    sasd: SasdConfig = field(default_factory=SasdConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    parallelism: int = 1
    seed: int = 0
    feature_mode: str = "auto"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @property
    def uses_distance(self) -> bool:
        return self.mode in ("guided", "full")


def pmap(fn, items, parallelism: int):
    """Ordered map, threaded when ``parallelism > 1``."""
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as ex:
        return list(ex.map(fn, items))


def _num_classes(scenes: list[Scene]) -> int:
    k = max(p.class_id for s in scenes for p in s.points) + 1
    declared = [s.num_classes for s in scenes if s.num_classes is not None]
    return max([k] + declared)


@dataclass
class _Prep:
    feats: list[np.ndarray]
    boxes: list[np.ndarray]
    s_dis: list[np.ndarray]
    featurizer: SceneFeaturizer


def _prepare(scene: Scene, cfg: PipelineConfig) -> _Prep:
    fz = SceneFeaturizer(scene, cfg.feature_mode)
    feats = [fz.bag_features(i) for i in range(scene.n_instances)]
    boxes = [bag.boxes for bag in scene.bags]
    if cfg.uses_distance:
        s_dis = distance_scores(scene, overlap_flags(scene), cfg.distance)
    else:
        s_dis = [np.ones(len(b)) for b in boxes]
    return _Prep(feats, boxes, s_dis, fz)


@dataclass
class _Augment:
    pos_boxes: list[np.ndarray]
    pos_feats: list[np.ndarray]
    pos_sdis: list[np.ndarray]
    neg_feats: np.ndarray


def _augment(scene: Scene, index: int, prep: _Prep, sel: list[int], cfg: PipelineConfig) -> _Augment:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    pos_boxes, pos_feats, pos_sdis = [], [], []
    part_negs = []
    for i in range(scene.n_instances):
        b_psm = prep.boxes[i][sel[i]]
        s = float(prep.s_dis[i][sel[i]])
        pos = [clip_box(b, scene.width, scene.height) for b in sample_positive(b_psm, s, cfg.pnpg)]
        pos = np.array([b[:4] for b in pos if b.w > 0 and b.h > 0]).reshape(-1, 4)
        pos_boxes.append(pos)
        pos_feats.append(prep.featurizer.box_features(pos, i))
        if cfg.uses_distance and len(pos):
            pos_sdis.append(box_distance_scores(scene, i, pos, cfg.distance))
        else:
            pos_sdis.append(np.ones(len(pos)))
    bg = sample_background_negatives(scene, cfg.pnpg, rng)
    for i in range(scene.n_instances):
        part_negs.extend(sample_part_negatives(prep.boxes[i][sel[i]], cfg.pnpg, rng))
    neg = np.array([b[:4] for b in bg + part_negs]).reshape(-1, 4)
    return _Augment(pos_boxes, pos_feats, pos_sdis, prep.featurizer.box_features(neg))


@dataclass
class SelectResult:
    labels: list[PseudoLabel]
    traces: dict
    heads: dict


def run_select(scenes: list[Scene], cfg: PipelineConfig) -> SelectResult:
    if not scenes:
        raise ValueError("empty corpus")
    K = _num_classes(scenes)
    preps = pmap(lambda s: _prepare(s, cfg), scenes, cfg.parallelism)
    n_img = len(scenes)
    bag_scene = np.concatenate([np.full(s.n_instances, k) for k, s in enumerate(scenes)])
    labels = np.array([p.class_id for s in scenes for p in s.points])
    weights = np.concatenate([np.full(s.n_instances, 1.0 / (s.n_instances * n_img)) for s in scenes])
    feats_I = [f for p in preps for f in p.feats]
    boxes_I = [b for p in preps for b in p.boxes]
    sdis_I = [d for p in preps for d in p.s_dis]
    bags = [bag for s in scenes for bag in s.bags]
    batch = BagBatch.from_bags(feats_I, labels, sdis_I, weights)
    traces: dict = {}
    heads: dict = {}

    if cfg.mode == "generator":
        sel = [int(np.argmax([p.generator_score or 0.0 for p in bag.proposals])) for bag in bags]
        S_I = [np.zeros((len(b), K)) for b in bags]
        return SelectResult(_labels(scenes, bags, boxes_I, sel, sel, None, S_I, {}), traces, heads)

    head = MilHead.zeros(batch.features.shape[1], K)
    head, traces["psm"] = train_psm(batch, head, cfg.psm_trainer)
    heads["psm"] = head
    fw = mil_forward(head, batch)
    S_I = [fw.S[batch.bag_slice(i)] for i in range(batch.n_bags)]
    sel_psm = [int(np.argmax(S_I[i][:, labels[i]])) for i in range(batch.n_bags)]

    if cfg.mode == "mil":
        return SelectResult(
            _labels(scenes, bags, boxes_I, sel_psm, sel_psm, None, S_I, {}), traces, heads
        )

    # refinement stage
    offsets = np.concatenate(([0], np.cumsum([s.n_instances for s in scenes])))
    augs = pmap(
        lambda k: _augment(scenes[k], k, preps[k], sel_psm[offsets[k] : offsets[k + 1]], cfg),
        range(n_img),
        cfg.parallelism,
    )
    pos_boxes = [b for a in augs for b in a.pos_boxes]
    pos_feats = [f for a in augs for f in a.pos_feats]
    pos_sdis = [d for a in augs for d in a.pos_sdis]
    feats_II = [np.vstack([f, g]) for f, g in zip(feats_I, pos_feats)]
    boxes_II = [np.vstack([b, p]) for b, p in zip(boxes_I, pos_boxes)]
    sdis_II = [np.concatenate([d, e]) for d, e in zip(sdis_I, pos_sdis)]
    batch_II = BagBatch.from_bags(feats_II, labels, sdis_II, weights)
    neg = NegativeBatch(
        np.vstack([a.neg_feats for a in augs]).reshape(-1, batch.features.shape[1]),
        np.concatenate([np.full(len(a.neg_feats), k) for k, a in enumerate(augs)]).astype(np.int64),
        n_img,
    )
    srm_head = MilHead.zeros(batch.features.shape[1], K)
    srm_head, traces["srm"] = train_srm(batch_II, fw.bag, bag_scene, neg, srm_head, cfg.srm)
    heads["srm"] = srm_head
    fw2 = mil_forward(srm_head, batch_II, cfg.srm.cls_activation)
    S_II = [fw2.S[batch_II.bag_slice(i)] for i in range(batch_II.n_bags)]
    M = [len(b) for b in boxes_I]
    sel = [int(np.argmax(S_II[i][: M[i], labels[i]])) for i in range(len(bags))]
    mine_scores = [S_II[i][: M[i], labels[i]] for i in range(len(bags))]
    extra: dict[int, dict] = {i: {"srm_peak": float(S_II[i][sel[i], labels[i]])} for i in range(len(bags))}
    sel_stage1 = sel_psm

    if cfg.mode == "full":
        dbags = [
            DistillBag(feats_I[i], boxes_I[i], S_I[i][:, labels[i]], feats_II[i], boxes_II[i],
                       S_II[i][:, labels[i]], float(weights[i]), M[i])
            for i in range(len(bags))
        ]
        res = self_distill(dbags, cfg.sasd)
        traces["sasd"] = res.trace
        heads["completeness_I"], heads["completeness_II"] = res.head_I, res.head_II
        sel, sel_stage1 = [int(v) for v in res.sel_II], [int(v) for v in res.sel_I]
        for i in range(len(bags)):
            hs = holistic_score(S_II[i][:, labels[i]], res.comp_II[i])[: M[i]]
            mine_scores[i] = hs
            extra[i]["holistic_peak"] = float(hs[sel[i]])
            extra[i]["completeness"] = float(res.comp_II[i][sel[i]])

    merged = []
    for i, scene_k in enumerate(bag_scene):
        s = scenes[scene_k]
        mined = box_mining(boxes_I[i][sel[i]], boxes_I[i], mine_scores[i], cfg.bms)
        merged.append(clip_box(mined.box, s.width, s.height).as_array())
    return SelectResult(
        _labels(scenes, bags, boxes_I, sel_stage1, sel, merged, S_I, extra), traces, heads
    )


def _labels(scenes, bags, boxes_I, sel_I, sel, merged, S_I, extra) -> list[PseudoLabel]:
    out = []
    i = 0
    for s in scenes:
        for bag in s.bags:
            c = bag.point.class_id
            b_psm = clip_box(boxes_I[i][sel_I[i]], s.width, s.height)
            if merged is None:
                b_srm = clip_box(boxes_I[i][sel[i]], s.width, s.height)
                mask = bag.proposals[sel[i]].mask
            else:
                b_srm = Box.from_array(merged[i])
                has_mask = any(p.mask is not None for p in bag.proposals)
                mask = match_mask(b_srm, bag)[1] if has_mask else None
            scores = {"psm_peak": float(S_I[i][sel_I[i], c])}
            scores.update(extra.get(i, {}))
            out.append(PseudoLabel(s.image_id, bag.instance_id, c, b_psm, b_srm,
                                   None if mask is None else np.asarray(mask, dtype=bool), None, None,
                                   scores))
            i += 1
    return out


# ---------------------------------------------------------------- diagnostics


def _rv_mask(m) -> float:
    if m is None:
        return 0.0
    b = mask_to_box(m)
    return 0.0 if b.empty else rv_ratio(m, b)


def _group_flags(boxes: np.ndarray, pts: np.ndarray, cls: np.ndarray) -> np.ndarray:
    n = len(boxes)
    if n < 2:
        return np.zeros(n, dtype=bool)
    inside = points_in_boxes(pts, boxes)
    same = (cls[:, None] == cls[None, :]) & ~np.eye(n, dtype=bool)
    return (inside & same).any(axis=1)


def evaluate(scenes: list[Scene], labels: list[PseudoLabel]) -> DiagnosticReport:
    """Diagnostics of ``labels`` against the scenes' ground truth.

    The local gap reads the matched proposal mask in its own tight box; the
    group rate and box mIoU read the mined pseudo box.
    """
    if not scenes:
        raise ValueError("empty corpus")
    by_key = {(lab.image_id, lab.instance_id): lab for lab in labels}
    items, rows, skipped = [], [], 0
    group_boxes, group_pts, group_cls = [], [], []
    for s in scenes:
        labelled = [bag for bag in s.bags if (s.image_id, bag.instance_id) in by_key]
        boxes = np.array([by_key[(s.image_id, b.instance_id)].b_srm[:4] for b in labelled]).reshape(-1, 4)
        pts = np.array([[b.point.x, b.point.y] for b in labelled]).reshape(-1, 2)
        cls = np.array([b.point.class_id for b in labelled], dtype=np.int64)
        group_boxes.append(boxes)
        group_pts.append(pts)
        group_cls.append(cls)
        flags = _group_flags(boxes, pts, cls)
        for j, bag in enumerate(labelled):
            lab = by_key[(s.image_id, bag.instance_id)]
            g = s.gt.get(bag.instance_id) if s.gt else None
            if g is None:
                skipped += 1
                continue
            rv = np.array([_rv_mask(p.mask) for p in bag.proposals])
            areas = np.array(
                [mask_to_box(p.mask).area if p.mask is not None else p.box.area for p in bag.proposals]
            )
            rv_sel = _rv_mask(lab.mask)
            rv_gt = _rv_mask(g.mask) if g.mask is not None else 1.0
            items.append(LocalGapInput(rv, areas, rv_sel, rv_gt, g.box.area))
            m_iou = (
                mask_iou(lab.mask, g.mask)
                if lab.mask is not None and g.mask is not None
                else float("nan")
            )
            rows.append(InstanceRow(s.image_id, bag.instance_id, box_iou(lab.b_srm, g.box), m_iou,
                                    rv_sel, rv_gt, False, bool(flags[j])))
        skipped += s.n_instances - len(labelled)
    if not items:
        raise ValueError("no instance has both a label and ground truth")
    t_rv = rv_threshold([it.rv_bag for it in items])
    for it, row in zip(items, rows):
        row.local_eligible = local_eligible(it, t_rv)
    mask_vals = [r.mask_iou for r in rows if not np.isnan(r.mask_iou)]
    return DiagnosticReport(
        gap_local=gap_local(items, t_rv),
        gap_group=gap_group(group_boxes, group_pts, group_cls),
        miou_box=float(np.mean([r.box_iou for r in rows])),
        miou_mask=float(np.mean(mask_vals)) if mask_vals else 0.0,
        t_rv=t_rv,
        n_instances=len(rows),
        n_local_eligible=sum(r.local_eligible for r in rows),
        skipped=skipped,
        rows=rows,
    )


# ---------------------------------------------------------------- refinement


@dataclass
class RefineReport:
    affinity_loss: float
    per_instance: list[dict]
    iou_before: float | None
    iou_after: float | None
    semantic_skipped: int


def combined_soft(soft_I: np.ndarray, soft_S: np.ndarray | None) -> np.ndarray:
    return soft_I if soft_S is None else 0.5 * (soft_I + soft_S)


def refine_scene(scene: Scene, labels: list[PseudoLabel], cfg: AffinityConfig):
    """Refine every label of one scene; guidance trees are built once per scene."""
    shape = (scene.height, scene.width)
    levels = scene.pyramid.levels if scene.pyramid is not None else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        guidance = prepare_guidance(shape, scene.image_plane, levels)
    out, rows, skipped = [], [], 0
    for lab in labels:
        if lab.mask is None:
            out.append(lab)
            continue
        m_pre = lab.mask.astype(np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = mlar_refine(m_pre, scene.image_plane, levels, cfg, guidance=guidance)
            loss = affinity_loss(res.yI, res.yS, m_pre > 0.5, lab.mask)
        skipped += int(res.semantic_skipped)
        row = {"image_id": lab.image_id, "instance_id": lab.instance_id, "affinity_loss": loss.value}
        g = scene.gt.get(lab.instance_id) if scene.gt else None
        if g is not None and g.mask is not None:
            refined = combined_soft(res.yI, res.yS) >= 0.5
            row["iou_before"] = mask_iou(lab.mask, g.mask)
            row["iou_after"] = mask_iou(refined, g.mask)
        rows.append(row)
        out.append(
            PseudoLabel(lab.image_id, lab.instance_id, lab.class_id, lab.b_psm, lab.b_srm, lab.mask,
                        res.yI.astype(np.float32),
                        None if res.yS is None else res.yS.astype(np.float32), dict(lab.scores))
        )
    return out, rows, skipped


def run_refine(scenes: list[Scene], labels: list[PseudoLabel], cfg: PipelineConfig):
    by_scene: dict[str, list[PseudoLabel]] = {}
    for lab in labels:
        by_scene.setdefault(lab.image_id, []).append(lab)
    known = {s.image_id for s in scenes}
    missing = sorted(set(by_scene) - known)
    if missing:
        raise ValueError(f"labels refer to unknown image {missing[0]!r}")
    for s in scenes:
        if s.image_plane is None and by_scene.get(s.image_id):
            raise ValueError(f"{s.image_id}: refinement needs an image plane")
    results = pmap(lambda s: refine_scene(s, by_scene.get(s.image_id, []), cfg.affinity),
                   scenes, cfg.parallelism)
    out, rows, skipped = [], [], 0
    for labs, rws, sk in results:
        out.extend(labs)
        rows.extend(rws)
        skipped += sk
    before = [r["iou_before"] for r in rows if "iou_before" in r]
    after = [r["iou_after"] for r in rows if "iou_after" in r]
    report = RefineReport(
        float(np.mean([r["affinity_loss"] for r in rows])) if rows else 0.0,
        rows,
        float(np.mean(before)) if before else None,
        float(np.mean(after)) if after else None,
        skipped,
    )
    return out, report
