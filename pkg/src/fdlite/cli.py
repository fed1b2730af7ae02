"""Command line entry point: ``fdlite audit|infer|eval|selftest|init-weights|export-graph``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evalkit as ev
from . import executor as ex
from . import netgraph as ng
from . import pipeline as pl
from .errors import FDLiteError
from .images import draw_detections, load_image, save_image

# Published budgets for the backbone alone and the full detector. The
# detector size also appears as 0.26M in the original announcement.
PUBLISHED = {
    "backbone": (0.167e6, 0.52e9),
    "detector": (0.24e6, 0.94e9),
}
PUBLISHED_DETECTOR_PARAMS_ALT = 0.26e6


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 32 or h < 32:
        raise argparse.ArgumentTypeError("input size must be at least 32x32")
    return w, h


def _detector_config(variant: str) -> ng.DetectorConfig:
    return ng.DetectorConfig(backbone=ng.BackboneConfig(fru_variant=variant))


def _fmt_delta(value: float, ref: float, unit: float, suffix: str) -> str:
    return f"{value / unit:.3f}{suffix} vs {ref / unit:.3f}{suffix} ({(value - ref) / unit:+.3f}{suffix})"


def cmd_audit(args) -> int:
    w, h = args.input_size
    shape = ng.TensorShape(1, h, w, 3)
    cfg = _detector_config(args.variant)
    det = ng.count_flops(ng.build_fdlite(cfg), shape)
    bb = ng.count_flops(ng.build_blite(cfg.backbone), shape)
    if args.json:
        print(json.dumps({"variant": args.variant, "backbone": bb.to_json(),
                          "detector": det.to_json(), "published": PUBLISHED}))
        return 0
    print(f"architecture audit at {w}x{h}, FRU variant {args.variant}")
    print(f"{'unit':<14}{'params':>12}{'FLOPs':>16}")
    for name, (p, f) in det.by_prefix(2 if args.detail else 1).items():
        print(f"{name:<14}{p:>12,}{f:>16,}")
    for label, rep in (("backbone", bb), ("detector", det)):
        ref_p, ref_f = PUBLISHED[label]
        print(f"{label}: params {rep.total_params:,}  FLOPs {rep.total_flops:,} "
              f"(MAC convention {rep.total_macs:,}); BN running stats {rep.non_learned_params:,}")
        print(f"  published {ref_p / 1e6:.3g}M / {ref_f / 1e9:.3g}G: "
              f"params {_fmt_delta(rep.total_params, ref_p, 1e6, 'M')}, "
              f"GFLOPs {_fmt_delta(rep.total_flops, ref_f, 1e9, 'G')}, "
              f"GMACs {_fmt_delta(rep.total_macs, ref_f, 1e9, 'G')}")
    print(f"  (alternate published detector size {PUBLISHED_DETECTOR_PARAMS_ALT / 1e6:.2f}M: "
          f"{(det.total_params - PUBLISHED_DETECTOR_PARAMS_ALT) / 1e6:+.3f}M)")
    return 0


def _inference_config(args) -> pl.InferenceConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key in ("score_threshold", "nms_iou", "top_k", "branch", "max_pixels"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.scales:
        base["scales"] = [int(s) for s in args.scales.split(",")]
    if args.no_flip:
        base["flip"] = False
    return pl.InferenceConfig.from_dict(base)


def cmd_infer(args) -> int:
    cfg = _inference_config(args)
    graph = ng.build_fdlite(_detector_config(args.variant))
    weights = ex.load_weights(args.weights, graph)
    image = load_image(args.image)
    dets = pl.detect_image(image, graph, weights, cfg, multiscale=args.multiscale,
                           workers=args.workers)
    if args.annotate:
        save_image(args.annotate, draw_detections(image, dets))
    if args.json or not args.annotate:
        sys.stdout.write(pl.to_jsonl(dets, str(args.image)))
    return 0


def cmd_eval(args) -> int:
    gts = ev.load_gt(args.gts, args.invalid_as_ignore)
    dets = ev.load_dets(args.dets)
    if args.protocol == "fddb":
        tpr, under = ev.tpr_at_fp(dets, gts, args.fp_budget)
        print(json.dumps({"protocol": "fddb", "fp_budget": args.fp_budget, "tpr": tpr,
                          "under_budget": under, "n_images": len(gts.images), "n_gt": gts.n_gt}))
        return 0
    tags = {f.difficulty for faces in gts.images.values() for f in faces} - {None}
    for subset in [None] + [d for d in ev.DIFFICULTIES if d in tags]:
        sub = gts.subset(subset)
        if sub.n_gt == 0:
            continue
        print(json.dumps(ev.evaluate_ap(dets, gts, subset)))
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    return 0 if selftest.run() else 1


def cmd_init_weights(args) -> int:
    graph = ng.build_fdlite(_detector_config(args.variant))
    store = ex.zero_weights(graph) if args.zero else ex.init_weights(graph, args.seed)
    ex.save_weights(store, args.out)
    print(f"wrote {len(store)} tensors to {args.out}")
    return 0


def cmd_export_graph(args) -> int:
    graph = ng.build_fdlite(_detector_config(args.variant))
    text = graph.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdlite", description="FDLite face detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("audit", help="parameter/FLOP audit against published budgets")
    a.add_argument("--input-size", type=_size, default=(640, 480), metavar="WxH")
    a.add_argument("--variant", choices=("dense", "grouped"), default="dense")
    a.add_argument("--detail", action="store_true", help="break down by sub-unit")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_audit)

    i = sub.add_parser("infer", help="detect faces in one image")
    i.add_argument("--image", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--variant", choices=("dense", "grouped"), default="dense")
    i.add_argument("--multiscale", action="store_true")
    i.add_argument("--json", action="store_true", help="emit JSON-lines (default without --annotate)")
    i.add_argument("--annotate", metavar="OUT", help="write an annotated .ppm/.png copy")
    i.add_argument("--config", help="JSON file of inference options; flags override it")
    i.add_argument("--score-threshold", type=float)
    i.add_argument("--nms-iou", type=float)
    i.add_argument("--top-k", type=int)
    i.add_argument("--branch", type=int, choices=(1, 2))
    i.add_argument("--scales", help="comma-separated short edges")
    i.add_argument("--no-flip", action="store_true")
    i.add_argument("--max-pixels", type=int)
    i.add_argument("--workers", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against annotations")
    e.add_argument("--dets", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--invalid-as-ignore", action="store_true",
                   help="treat the WIDER invalid attribute as an ignore flag")
    e.add_argument("--protocol", choices=("ap", "fddb"), default="ap")
    e.add_argument("--fp-budget", type=int, default=1000)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run built-in oracle checks")
    s.set_defaults(func=cmd_selftest)

    w = sub.add_parser("init-weights", help="write a freshly initialised weight file")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--zero", action="store_true")
    w.add_argument("--variant", choices=("dense", "grouped"), default="dense")
    w.set_defaults(func=cmd_init_weights)

    g = sub.add_parser("export-graph", help="print the graph as JSON")
    g.add_argument("--out")
    g.add_argument("--variant", choices=("dense", "grouped"), default="dense")
    g.set_defaults(func=cmd_export_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (FDLiteError, OSError, json.JSONDecodeError) as e:
        print(f"fdlite: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
