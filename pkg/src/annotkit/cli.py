"""Batch entry points: simulate, sweep, evaluate, synth, serve.

Every command is deterministic for a fixed flag set (including --seed and
--jobs); outputs carry a config fingerprint line so runs can be traced
back to their settings. Exit codes: 0 success, 1 usage error, 2 data
error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

from . import metrics
from .dataset import (
    RunConfig,
    attach_proposals,
    entries_from_annotation,
    load_annotation,
    load_manifest,
    save_manifest,
)
from .engine import COST_TABLE, SessionConfig, render_entries
from .errors import AnnotkitError
from .metrics import GroundTruthIndex, aggregate_curve, pixel_agreement, write_curve_csv
from .simulator import simulate_dataset, write_trace
from .synth import NoiseConfig

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_common(parser):
    parser.add_argument("--dataset", required=True, help="manifest JSON path")
    parser.add_argument("--out", required=True, help="output directory (or file for synth)")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--jobs", type=int, default=1, help="image-level parallelism")


def _add_session_flags(parser):
    parser.add_argument("--init", choices=["auto", "empty"], default="auto")
    parser.add_argument("--nms", default="none", help="IoU threshold in (0,1) or 'none'")
    parser.add_argument("--ordering", choices=["score", "distance"], default="score")
    parser.add_argument("--top-n", default="none", help="candidate cap or 'none'")
    parser.add_argument("--budget", type=int, default=300)


def _add_noise_flags(parser):
    defaults = NoiseConfig()
    parser.add_argument("--variants", type=int, default=defaults.variants_per_target)
    parser.add_argument("--radius-max", type=int, default=defaults.dilate_erode_radius_max)
    parser.add_argument("--jitter", type=float, default=defaults.translation_jitter_std)
    parser.add_argument("--label-noise", type=float, default=defaults.label_noise_prob)
    parser.add_argument("--miss", type=float, default=defaults.miss_prob)
    parser.add_argument("--distractors", type=int, default=defaults.distractor_count)
    parser.add_argument("--max-proposals", type=int, default=defaults.max_proposals)


def _parse_optional(text, cast):
    return None if text in ("none", "None", "") else cast(text)


def _session_config(args) -> SessionConfig:
    return SessionConfig(
        init_mode=args.init,
        nms_threshold=_parse_optional(args.nms, float),
        ordering=args.ordering,
        top_n=_parse_optional(args.top_n, int),
    )


def _noise_config(args) -> NoiseConfig:
    return NoiseConfig(
        variants_per_target=args.variants,
        dilate_erode_radius_max=args.radius_max,
        translation_jitter_std=args.jitter,
        label_noise_prob=args.label_noise,
        miss_prob=args.miss,
        distractor_count=args.distractors,
        max_proposals=args.max_proposals,
    )


def _simulation_inputs(manifest):
    images = []
    for image in manifest.images:
        if image.proposals is None:
            raise AnnotkitError(f"image {image.image_id!r} has no proposals; run synth first")
        if image.gt is None:
            raise AnnotkitError(f"image {image.image_id!r} has no ground truth")
        images.append((image.image_id, image.proposals, image.gt))
    return images


def _budget_grid(budget, step=5):
    return list(range(0, budget + 1, step))


def _write_run_config(out_dir, run_config: RunConfig):
    payload = run_config.to_json()
    payload["fingerprint"] = run_config.fingerprint()
    payload["cost_table"] = COST_TABLE
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_simulate(args) -> int:
    manifest = load_manifest(args.dataset)
    config = _session_config(args)
    images = _simulation_inputs(manifest)
    os.makedirs(args.out, exist_ok=True)
    traces_dir = os.path.join(args.out, "traces")
    os.makedirs(traces_dir, exist_ok=True)
    traces = simulate_dataset(
        images, config, args.budget, args.seed, list(manifest.catalog), jobs=args.jobs
    )
    run_config = RunConfig(session=config, budget=args.budget, seed=args.seed)
    for trace in traces:
        write_trace(trace, os.path.join(traces_dir, f"{trace.image_id}.trace"))
    curve = aggregate_curve(traces, _budget_grid(args.budget))
    write_curve_csv(
        curve,
        os.path.join(args.out, "curve.csv"),
        preamble=f"# setting={config.setting_string()} seed={args.seed} fingerprint={run_config.fingerprint()}",
    )
    _write_run_config(args.out, run_config)
    return 0


def cmd_sweep(args) -> int:
    manifest = load_manifest(args.dataset)
    images = _simulation_inputs(manifest)
    os.makedirs(args.out, exist_ok=True)
    inits = args.grid_init.split(",")
    nmses = [_parse_optional(v, float) for v in args.grid_nms.split(",")]
    orderings = args.grid_ordering.split(",")
    top_ns = [_parse_optional(v, int) for v in args.grid_top_n.split(",")]
    combos = list(itertools.product(inits, nmses, orderings, top_ns))
    if not combos:
        raise AnnotkitError("empty sweep grid")
    for init, nms, ordering, top_n in combos:
        config = SessionConfig(init_mode=init, nms_threshold=nms, ordering=ordering, top_n=top_n)
        traces = simulate_dataset(
            images, config, args.budget, args.seed, list(manifest.catalog), jobs=args.jobs
        )
        curve = aggregate_curve(traces, _budget_grid(args.budget))
        run_config = RunConfig(session=config, budget=args.budget, seed=args.seed)
        write_curve_csv(
            curve,
            os.path.join(args.out, f"{config.setting_string()}.csv"),
            preamble=f"# setting={config.setting_string()} seed={args.seed} fingerprint={run_config.fingerprint()}",
        )
    grid_config = RunConfig(session=SessionConfig(), budget=args.budget, seed=args.seed)
    _write_run_config(args.out, grid_config)
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.dataset)
    sets = args.annotation_sets
    os.makedirs(args.out, exist_ok=True)

    renders = {}  # (set name, image id) -> Rendering
    set_names = []
    for set_dir in sets:
        name = os.path.basename(os.path.normpath(set_dir))
        set_names.append(name)
        for fname in sorted(os.listdir(set_dir)):
            if not fname.endswith(".json"):
                continue
            record = load_annotation(os.path.join(set_dir, fname))
            image = manifest.by_id.get(record.image_id)
            if image is None:
                raise AnnotkitError(f"annotation references unknown image {record.image_id!r}")
            if image.proposals is None:
                raise AnnotkitError(f"image {record.image_id!r} has no proposals in the manifest")
            entries = entries_from_annotation(record, manifest.catalog)
            renders[(name, record.image_id)] = render_entries(
                image.proposals, entries, manifest.catalog
            )

    report = {"sets": {}, "agreement": {}}
    for name in set_names:
        image_ids = sorted(i for (n, i) in renders if n == name)
        recalls, pqs = [], []
        for image_id in image_ids:
            gt = manifest.by_id[image_id].gt
            if gt is None:
                continue
            quality = GroundTruthIndex(gt).score_rendering(renders[(name, image_id)])
            recalls.append(quality.recall)
            pqs.append(quality.panoptic_quality)
        report["sets"][name] = {
            "images": len(image_ids),
            "mean_recall": sum(recalls) / len(recalls) if recalls else None,
            "mean_pq": sum(pqs) / len(pqs) if pqs else None,
        }

    matrix = []
    for a in set_names:
        row = []
        for b in set_names:
            shared = sorted(i for (n, i) in renders if n == a and (b, i) in renders)
            if not shared:
                row.append(None)
                continue
            values = [pixel_agreement(renders[(a, i)], renders[(b, i)]) for i in shared]
            row.append(sum(values) / len(values))
        matrix.append(row)
    report["agreement"] = {"sets": set_names, "matrix": matrix}

    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "agreement.csv"), "w", encoding="utf-8") as fh:
        fh.write("set," + ",".join(set_names) + "\n")
        for name, row in zip(set_names, matrix):
            cells = ["" if v is None else f"{v:.6f}" for v in row]
            fh.write(name + "," + ",".join(cells) + "\n")
    return 0


def cmd_synth(args) -> int:
    manifest = load_manifest(args.dataset)
    noise = _noise_config(args)
    enriched = attach_proposals(manifest, noise, args.seed)
    save_manifest(enriched, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.dataset, persist_dir=args.persist)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="annotkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the simulated annotator over a dataset")
    _add_common(p)
    _add_session_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="cross-product of interface settings, one curve per setting")
    _add_common(p)
    p.add_argument("--budget", type=int, default=300)
    p.add_argument("--grid-init", default="auto,empty")
    p.add_argument("--grid-nms", default="none,0.1,0.5,0.9")
    p.add_argument("--grid-ordering", default="score,distance")
    p.add_argument("--grid-top-n", default="none,4")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score annotation sets against ground truth and each other")
    _add_common(p)
    p.add_argument("annotation_sets", nargs="+", help="directories of annotation JSON files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="attach synthetic proposals to a ground-truth manifest")
    _add_common(p)
    _add_noise_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="serve the annotation session API")
    p.add_argument("--dataset", required=True)
    p.add_argument("--persist", default=None, help="directory for write-through action logs")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AnnotkitError as exc:
        print(f"annotkit: {exc}", file=sys.stderr)
        return DATA_EXIT
    except OSError as exc:
        print(f"annotkit: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
