"""Command-line front end: synth, select, refine, metrics and gradcheck.

Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as C
from .dataset_io import load_corpus, read_pseudo_labels, write_pseudo_labels
from .gradsuite import CHAINS, TOL, run_suite
from .metrics import DiagnosticReport, gap_group
from .pipeline import evaluate, run_refine, run_select
from .synth import SynthSpec, generate_corpus, write_corpus

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- config flags


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value file; flags below override it")
    g = p.add_argument_group("pipeline settings (default, source)")
    dflt = C.defaults()
    for key in C.KEYS:
        g.add_argument(
            f"--{key.name}", dest=f"cfg:{key.name}", metavar="V", default=None,
            help=f"{key.help} [default {C.format_value(dflt[key.name])}; {key.source}]",
        )


def _pipeline_config(args) -> "C.PipelineConfig":
    values = C.load_file(args.config) if args.config else {}
    for key in C.KEYS:
        raw = getattr(args, f"cfg:{key.name}")
        if raw is not None:
            values[key.name] = C.parse_value(key, raw)
    if getattr(args, "baseline_mil", False):
        if values.get("mode", "mil") != "mil":
            raise UsageError("--baseline-mil conflicts with --mode")
        values["mode"] = "mil"
    return C.build(values)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_scenes(path: str, missing_pyramid: str = "error"):
    scenes = load_corpus(_existing(path, "corpus"), missing_pyramid=missing_pyramid)
    if not scenes:
        raise UsageError(f"corpus {path} holds no scenes")
    return scenes


def _emit_json(obj, path: str | None) -> None:
    if path:
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    try:
        spec = SynthSpec(
            seed=args.seed, n_scenes=args.scenes, width=args.width, height=args.height,
            num_classes=args.classes, proposals=args.proposals,
            min_instances=args.min_instances, max_instances=args.max_instances,
            part_fraction=args.part_fraction, group_fraction=args.group_fraction,
        )
    except ValueError as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    corpus = generate_corpus(spec)
    manifest = write_corpus(corpus, spec, args.out)
    kinds = Counter(k for g in corpus for bag in g.kinds for k in bag)
    n_inst = sum(g.scene.n_instances for g in corpus)
    print(f"wrote {len(corpus)} scenes ({n_inst} instances) to {manifest.parent}")
    print("proposal kinds: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return EXIT_OK


def _trace_doc(mode: str, traces: dict) -> dict:
    doc = {"mode": mode}
    for name, tr in traces.items():
        if name == "sasd":
            doc[name] = [[float(v) for v in loop] for loop in tr]
        else:
            doc[name] = [float(v) for v in tr]
    return doc


def cmd_select(args) -> int:
    cfg = _pipeline_config(args)
    scenes = _load_scenes(args.corpus)
    res = run_select(scenes, cfg)
    out = Path(args.out)
    write_pseudo_labels(res.labels, out)
    trace_path = args.trace or str(out.with_name(out.stem + ".trace.json"))
    _emit_json(_trace_doc(cfg.mode, res.traces), trace_path)
    print(f"mode {cfg.mode}: {len(res.labels)} pseudo labels -> {out}")
    for name, tr in res.traces.items():
        last = tr[-1][-1] if name == "sasd" and tr else (tr[-1] if tr else float("nan"))
        first = tr[0][0] if name == "sasd" and tr else (tr[0] if tr else float("nan"))
        print(f"  {name} loss {first:.6f} -> {last:.6f}")
    print(f"loss trace -> {trace_path}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _pipeline_config(args)
    labels = read_pseudo_labels(_existing(args.labels, "labels"), load_soft=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scenes = _load_scenes(args.corpus, missing_pyramid="warn")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    refined, report = run_refine(scenes, labels, cfg)
    if report.semantic_skipped:
        print(f"warning: feature-plane refinement skipped for {report.semantic_skipped} masks "
              "(no feature pyramid)", file=sys.stderr)
    out = Path(args.out)
    write_pseudo_labels(refined, out)
    doc = {
        "affinity_loss": report.affinity_loss,
        "iou_before": report.iou_before,
        "iou_after": report.iou_after,
        "semantic_skipped": report.semantic_skipped,
        "instances": report.per_instance,
    }
    _emit_json(doc, args.report or str(out.with_name(out.stem + ".report.json")))
    print(f"refined {len(report.per_instance)} masks -> {out}")
    print(f"  mean affinity loss {report.affinity_loss:.6f}")
    if report.iou_before is not None:
        print(f"  mask IoU to gt {report.iou_before:.4f} -> {report.iou_after:.4f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    scenes = _load_scenes(args.corpus)
    labels = read_pseudo_labels(_existing(args.labels, "labels"), load_soft=False)
    if not any(s.gt for s in scenes):
        by_key = {(lab.image_id, lab.instance_id): lab for lab in labels}
        boxes, pts, cls = [], [], []
        for s in scenes:
            bags = [b for b in s.bags if (s.image_id, b.instance_id) in by_key]
            boxes.append(np.array([by_key[(s.image_id, b.instance_id)].b_srm[:4] for b in bags]).reshape(-1, 4))
            pts.append(np.array([[b.point.x, b.point.y] for b in bags]).reshape(-1, 2))
            cls.append(np.array([b.point.class_id for b in bags], dtype=np.int64))
        gg = gap_group(boxes, pts, cls)
        print(f"gap_group  {gg:.4f}")
        print("corpus carries no ground truth: gap_local, miou_box and miou_mask are unavailable; "
              "gap_group needs only the annotated points", file=sys.stderr)
        _emit_json({"gap_group": gg, "gap_local": None, "miou_box": None, "miou_mask": None}, args.json)
        return EXIT_DOMAIN
    report: DiagnosticReport = evaluate(scenes, labels)
    print(report.table())
    if report.skipped:
        print(f"note: {report.skipped} instances lack a label or ground truth and were skipped",
              file=sys.stderr)
    doc = json.loads(report.to_json(include_rows=args.rows))
    print(json.dumps(doc, indent=1, sort_keys=True))
    _emit_json(doc, args.json)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.points < 1:
        raise UsageError("--points must be >= 1")
    chains = args.chains.split(",") if args.chains else None
    try:
        results = run_suite(points=args.points, seed=args.seed, tol=args.tol,
                            inject=args.inject_bug, chains=chains)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    w = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(w)}  max_rel_err {r.max_rel_err:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DOMAIN
    print(f"all {len(results)} chains pass at rel-err <= {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointmine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True, help="output directory")
    d = SynthSpec()
    s.add_argument("--scenes", type=int, default=d.n_scenes, help=f"number of scenes [default {d.n_scenes}]")
    s.add_argument("--seed", type=int, default=d.seed, help=f"generator seed [default {d.seed}]")
    s.add_argument("--width", type=int, default=d.width, help=f"[default {d.width}]")
    s.add_argument("--height", type=int, default=d.height, help=f"[default {d.height}]")
    s.add_argument("--classes", type=int, default=d.num_classes, help=f"[default {d.num_classes}]")
    s.add_argument("--proposals", type=int, default=d.proposals,
                   help=f"generator proposals per bag [default {d.proposals}]")
    s.add_argument("--min-instances", type=int, default=d.min_instances, help=f"[default {d.min_instances}]")
    s.add_argument("--max-instances", type=int, default=d.max_instances, help=f"[default {d.max_instances}]")
    s.add_argument("--part-fraction", type=float, default=d.part_fraction,
                   help=f"share of bags with a part confuser [default {d.part_fraction}]")
    s.add_argument("--group-fraction", type=float, default=d.group_fraction,
                   help=f"share of scenes with an adjacent same-class pair [default {d.group_fraction}]")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("select", help="mine pseudo labels for a corpus")
    s.add_argument("corpus", help="scene file or directory of scene files")
    s.add_argument("--out", default="labels.json", help="pseudo-label JSON [default labels.json]")
    s.add_argument("--trace", help="loss-trace JSON [default <out>.trace.json]")
    s.add_argument("--baseline-mil", action="store_true", help="plain MIL selection (same as --mode mil)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("refine", help="affinity refinement of selected masks")
    s.add_argument("labels", help="pseudo-label JSON from select")
    s.add_argument("--corpus", required=True, help="scene file or directory with image planes and pyramids")
    s.add_argument("--out", default="refined.json", help="refined pseudo-label JSON [default refined.json]")
    s.add_argument("--report", help="affinity-loss report JSON [default <out>.report.json]")
    _add_config_flags(s)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("metrics", help="diagnostics of pseudo labels against ground truth")
    s.add_argument("labels", help="pseudo-label JSON")
    s.add_argument("--corpus", required=True, help="scene file or directory with ground truth")
    s.add_argument("--json", help="also write the report to this file")
    s.add_argument("--rows", action="store_true", help="include per-instance rows in the JSON")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss chain")
    s.add_argument("--points", type=int, default=100, help="random points per chain [default 100]")
    s.add_argument("--seed", type=int, default=0, help="[default 0]")
    s.add_argument("--tol", type=float, default=TOL, help=f"relative error bound [default {TOL:g}]")
    s.add_argument("--chains", help=f"comma-separated subset of: {', '.join(CHAINS)}")
    s.add_argument("--inject-bug", metavar="CHAIN",
                   help="test hook: scale CHAIN's analytic gradient by 1.01")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"pointmine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except C.ConfigError as exc:
        print(f"pointmine: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, ValueError, OSError) as exc:
        print(f"pointmine: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
