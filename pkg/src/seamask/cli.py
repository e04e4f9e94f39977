"""Command-line entry point: synth | tile | train | eval | ablate | viz.

Every command resolves a layered configuration (defaults, --config file,
--set overrides), honors --seed, and writes the resolved snapshot next to its
outputs so a run can be reproduced.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio
from .config import ConfigError, RunConfig
from .detector import SgdState, TrainDivergedError, TrainSample, infer, learning_rate, train_step
from .evaluation import Detection, EvalConfig, evaluate, format_report
from .fpn import pyramid_forward
from .model import build_model
from .sea import SeaConfig, sea_forward
from .supervision import instances_to_semantic_map
from . import viz


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seamask", description=__doc__)
    parser.add_argument("--config", help="JSON config file layered over defaults")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default="runs/out", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic dataset")

    p_tile = sub.add_parser("tile", help="tile a dataset into patches")
    p_tile.add_argument("--data", required=True, help="dataset directory (manifest.json + images/)")
    p_tile.add_argument("--patch", type=int, default=800)
    p_tile.add_argument("--stride", type=int, default=200)
    p_tile.add_argument("--keep-empty", action="store_true")

    p_train = sub.add_parser("train", help="train the detector")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--steps", type=int, help="total steps (default: epochs x images)")

    p_eval = sub.add_parser("eval", help="run inference + COCO-style evaluation")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--results-file", help="skip inference, evaluate these detections")

    p_abl = sub.add_parser("ablate", help="train/evaluate a config grid")
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--axes", default="grid", choices=["grid", "uniform", "sea-fusion", "scmb-fusion", "branches"])
    p_abl.add_argument("--steps", type=int)

    p_viz = sub.add_parser("viz", help="render attention/semantic/detection figures")
    p_viz.add_argument("--checkpoint", required=True)
    p_viz.add_argument("--data", required=True)
    p_viz.add_argument("--image-id", type=int, default=1)
    p_viz.add_argument("--panels", default="input,semantic,attention,pyramid,detections")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.update({"seed": args.seed})
    return cfg


def _prepare_out(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))


def cmd_synth(cfg: RunConfig, out_dir) -> int:
    _prepare_out(cfg, out_dir)
    synth_cfg = dataio.SynthConfig.from_run_config(cfg)
    manifest, images = dataio.synth_generate(synth_cfg)
    dataio.save_dataset(manifest, images, out_dir)
    per_class = {c["name"]: 0 for c in manifest.categories}
    names = {c["id"]: c["name"] for c in manifest.categories}
    areas = []
    for ann in manifest.annotations:
        per_class[names[ann["category_id"]]] += 1
        areas.append(ann["area"])
    print(f"wrote {len(manifest.images)} images, {len(manifest.annotations)} instances -> {out_dir}")
    for name, count in per_class.items():
        print(f"  {name}: {count}")
    if areas:
        hist, edges = np.histogram(np.sqrt(areas), bins=6)
        for h, lo, hi in zip(hist, edges, edges[1:]):
            print(f"  sqrt-area [{lo:6.1f}, {hi:6.1f}): {h}")
    return 0


def cmd_tile(cfg: RunConfig, args, out_dir) -> int:
    _prepare_out(cfg, out_dir)
    manifest, images = dataio.load_dataset(args.data)
    tiled, tiled_images = dataio.tile_dataset(manifest, images, args.patch, args.stride, args.keep_empty)
    dataio.save_dataset(tiled, tiled_images, out_dir)
    print(f"tiled {len(manifest.images)} images into {len(tiled.images)} patches "
          f"({len(tiled.annotations)} surviving instances) -> {out_dir}")
    return 0


def _dataset_samples(manifest, images):
    return {im["id"]: TrainSample(images[im["id"]], manifest.instances_for(im["id"])) for im in manifest.images}


def cmd_train(cfg: RunConfig, args, out_dir) -> int:
    manifest, images = dataio.load_dataset(args.data)
    cfg.update({"num_classes": len(manifest.categories)})
    _prepare_out(cfg, out_dir)
    samples = _dataset_samples(manifest, images)
    ids = sorted(samples)
    steps = args.steps if args.steps else cfg["train.epochs"] * len(ids)
    model = build_model(cfg)
    state = SgdState(model.params)
    seed = cfg["seed"]
    log_path = os.path.join(out_dir, "loss_log.txt")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    scales = cfg["train.scales"]
    order = []
    with open(log_path, "w") as log:
        log.write("step lr l_detection l_segmentation l_scmb l_total\n")
        for step in range(steps):
            if not order:
                order = list(np.random.default_rng([seed, 7, step]).permutation(ids))
            sample = samples[order.pop()]
            if cfg["train.multi_scale"]:
                pick = int(np.random.default_rng([seed, 11, step]).choice(scales))
                sample = _rescale_sample(sample, pick)
            lr = learning_rate(cfg["train.lr"], cfg["train.schedule"], step, steps)
            try:
                report = train_step([sample], model, state, lr, np.random.default_rng([seed, step]))
            except TrainDivergedError as err:
                print(f"aborted at step {step}: {err}", file=sys.stderr)
                return 1
            log.write(
                f"{step} {lr:.6g} {report.l_detection:.6f} {report.l_segmentation:.6f} "
                f"{report.l_scmb:.6f} {report.l_total:.6f}\n"
            )
            if (step + 1) % cfg["train.checkpoint_every"] == 0 or step + 1 == steps:
                dataio.checkpoint_save(model.param_arrays(), state.as_arrays(), cfg, ckpt_path)
                log.flush()
    print(f"trained {steps} steps -> {ckpt_path}")
    return 0


def _rescale_sample(sample: TrainSample, short_side: int) -> TrainSample:
    from .supervision import InstanceAnnotation
    from .tape import linear_resize_matrix

    h, w = sample.image.shape[:2]
    factor = short_side / min(h, w)
    nh = max(round(h * factor / 64) * 64, 64)
    nw = max(round(w * factor / 64) * 64, 64)
    if (nh, nw) == (h, w):
        return sample
    mh = linear_resize_matrix(h, nh)
    mw = linear_resize_matrix(w, nw)
    image = np.stack([mh @ sample.image[:, :, c] @ mw.T for c in range(3)], axis=-1)
    rows = np.minimum((np.arange(nh) * h // nh), h - 1)
    cols = np.minimum((np.arange(nw) * w // nw), w - 1)
    anns = []
    for inst in sample.annotations:
        mask = inst.mask[rows[:, None], cols[None, :]]
        if mask.sum() >= 1:
            anns.append(InstanceAnnotation(class_id=inst.class_id, mask=mask))
    return TrainSample(np.clip(image, 0.0, 1.0), anns)


def _run_inference(model, manifest, images, seed: int) -> list[Detection]:
    results = []
    for im in manifest.images:
        sample_gts = manifest.instances_for(im["id"])
        dets = infer(
            images[im["id"]], model, gts=sample_gts, rng=np.random.default_rng([seed, im["id"]])
        )
        for d in dets:
            results.append(
                Detection(im["id"], d.class_id, d.score, d.box, dataio.rle_encode(d.mask))
            )
    return results


def _detection_records(results: list[Detection]) -> list[dict]:
    return [
        {
            "image_id": d.image_id,
            "category_id": d.class_id,
            "score": d.score,
            "bbox": [float(v) for v in d.box],
            "segmentation": {"size": list(d.mask.size), "counts": d.mask.counts},
        }
        for d in results
    ]


def _load_results_file(path) -> list[Detection]:
    with open(path) as f:
        records = json.load(f)
    return [
        Detection(
            r["image_id"],
            r["category_id"],
            r["score"],
            tuple(r["bbox"]),
            dataio.RleMask(tuple(r["segmentation"]["size"]), list(r["segmentation"]["counts"])),
        )
        for r in records
    ]


def cmd_eval(cfg: RunConfig, args, out_dir) -> int:
    manifest, images = dataio.load_dataset(args.data)
    if args.results_file:
        results = _load_results_file(args.results_file)
        run_cfg = cfg
    else:
        if not args.checkpoint:
            print("eval needs --checkpoint or --results-file", file=sys.stderr)
            return 2
        params, _opt, run_cfg = dataio.checkpoint_load(args.checkpoint)
        model = build_model(run_cfg)
        model.load_arrays(params)
        results = _run_inference(model, manifest, images, run_cfg["seed"])
    _prepare_out(run_cfg, out_dir)
    report = evaluate(results, manifest, EvalConfig(max_dets=run_cfg["infer.max_dets"]))
    with open(os.path.join(out_dir, "results.json"), "w") as f:
        json.dump(_detection_records(results), f)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    table = format_report(report, manifest.categories)
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


_ABLATION_AXES = {
    "grid": [
        ("baseline", {"sea.enabled": False, "scmb.enabled": False}),
        ("sea", {"sea.enabled": True, "scmb.enabled": False}),
        ("scmb", {"sea.enabled": False, "scmb.enabled": True}),
        ("sea+scmb", {"sea.enabled": True, "scmb.enabled": True}),
    ],
    "uniform": [(f"P{k}-scale", {"sea.uniform_level": k}) for k in (3, 4, 5, 6)],
    "sea-fusion": [
        ("sea-multiply", {"sea.fusion": "MULTIPLY"}),
        ("sea-concate", {"sea.fusion": "CONCATE"}),
    ],
    "scmb-fusion": [
        ("scmb-multiply", {"scmb.fusion": "MULTIPLY"}),
        ("scmb-concate", {"scmb.fusion": "CONCATE"}),
    ],
    "branches": [
        ("7+14", {"scmb.branches": [7, 14]}),
        ("14+28", {"scmb.branches": [14, 28]}),
        ("7+14+28", {"scmb.branches": [7, 14, 28]}),
    ],
}


def cmd_ablate(cfg: RunConfig, args, out_dir) -> int:
    manifest, images = dataio.load_dataset(args.data)
    cfg.update({"num_classes": len(manifest.categories)})
    _prepare_out(cfg, out_dir)
    samples = _dataset_samples(manifest, images)
    ids = sorted(samples)
    steps = args.steps if args.steps else cfg["train.epochs"] * len(ids)
    seed = cfg["seed"]
    rows = []
    for name, overrides in _ABLATION_AXES[args.axes]:
        cell_cfg = RunConfig(cfg.snapshot()).update(overrides)
        model = build_model(cell_cfg)
        state = SgdState(model.params)
        order = []
        for step in range(steps):
            if not order:
                order = list(np.random.default_rng([seed, 7, step]).permutation(ids))
            lr = learning_rate(cell_cfg["train.lr"], cell_cfg["train.schedule"], step, steps)
            train_step([samples[order.pop()]], model, state, lr, np.random.default_rng([seed, step]))
        results = _run_inference(model, manifest, images, seed)
        report = evaluate(results, manifest, EvalConfig(max_dets=cell_cfg["infer.max_dets"]))
        rows.append(
            {
                "cell": name,
                "config_hash": cell_cfg.arch_hash(),
                "sea": cell_cfg["sea.enabled"],
                "scmb": cell_cfg["scmb.enabled"],
                "mask": report.mask,
                "box": report.box,
            }
        )
        print(f"[{name}] mask AP={_fmt(report.mask['AP'])} box AP={_fmt(report.box['AP'])}")
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump({"axes": args.axes, "steps": steps, "rows": rows}, f, indent=2, sort_keys=True)
    lines = ["cell          hash              APm    APm50  APm75  APb    APb50  APb75"]
    for r in rows:
        lines.append(
            f"{r['cell']:<13} {r['config_hash']}  "
            f"{_fmt(r['mask']['AP'])}  {_fmt(r['mask']['AP50'])}  {_fmt(r['mask']['AP75'])}  "
            f"{_fmt(r['box']['AP'])}  {_fmt(r['box']['AP50'])}  {_fmt(r['box']['AP75'])}"
        )
    table = "\n".join(lines)
    with open(os.path.join(out_dir, "table.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


def _fmt(v) -> str:
    return " --  " if v is None else f"{v:.3f}"


def cmd_viz(cfg: RunConfig, args, out_dir) -> int:
    params, _opt, run_cfg = dataio.checkpoint_load(args.checkpoint)
    _prepare_out(run_cfg, out_dir)
    model = build_model(run_cfg)
    model.load_arrays(params)
    manifest, images = dataio.load_dataset(args.data)
    image = images[args.image_id]
    gts = manifest.instances_for(args.image_id)
    h, w = image.shape[:2]
    panels = [p.strip() for p in args.panels.split(",") if p.strip()]
    written = []

    sea_cfg = SeaConfig(
        uniform_level=run_cfg["sea.uniform_level"],
        fusion=run_cfg["sea.fusion"],
        enabled=run_cfg["sea.enabled"],
    )
    pyramid = pyramid_forward(image.astype(model.dtype), model.params, run_cfg["fpn.channels"])
    res = sea_forward(pyramid, None, sea_cfg, model.params, model.num_classes)

    def emit(name, array):
        path = os.path.join(out_dir, f"{name}.png")
        viz.save_png(path, array)
        written.append(path)

    for panel in panels:
        if panel == "input":
            emit("input", viz.image_to_uint8(image))
        elif panel == "semantic":
            if res.branch is not None:
                pred = res.branch.probabilities.value[0].argmax(axis=-1)
            else:
                pred = instances_to_semantic_map(gts, h, w)
            emit("semantic", viz.label_colormap(pred, (h, w)))
        elif panel == "attention":
            if res.branch is not None:
                emit("attention", viz.heatmap(res.branch.attention.value[0].mean(axis=-1), out_size=h))
            else:
                emit("attention", viz.heatmap(np.zeros((8, 8)), out_size=h))
        elif panel == "pyramid":
            for lvl in (2, 3, 4, 5, 6):
                emit(f"pyramid_P{lvl}_before", viz.heatmap(pyramid.levels[lvl].value[0].mean(axis=-1)))
                emit(f"pyramid_P{lvl}_after", viz.heatmap(res.pyramid.levels[lvl].value[0].mean(axis=-1)))
        elif panel == "detections":
            dets = infer(image, model, gts=gts, rng=np.random.default_rng([run_cfg["seed"], args.image_id]))
            emit("detections", viz.overlay_detections(image, dets))
        else:
            print(f"unknown panel: {panel}", file=sys.stderr)
            return 2
    print(f"wrote {len(written)} files -> {out_dir}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "tile":
            return cmd_tile(cfg, args, args.out)
        if args.command == "train":
            return cmd_train(cfg, args, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args, args.out)
        if args.command == "ablate":
            return cmd_ablate(cfg, args, args.out)
        if args.command == "viz":
            return cmd_viz(cfg, args, args.out)
    except (ConfigError, dataio.CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
