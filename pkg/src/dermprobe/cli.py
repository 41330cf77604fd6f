"""Command-line entry point.

Subcommands: synth-data, plan, train-cls, train-seg, ablate, kmeans, eval,
report. Every run writes its resolved config snapshot, delimited tables,
figures, and checkpoints under --run-dir. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as dat
from . import evaluation as ev
from . import plots
from .backbone import BlockSpec, build_toy_backbone, load_pretrained_backbone, train_toy_backbone
from .config import RunConfig, load_config
from .errors import CheckpointMissingError, ConfigError, DermprobeError
from .probes import load_head
from .train import TrainConfig, snapshot_config, train_classifier, train_segmentation


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        subset_percent=t.subset_percent,
        learning_rate=t.learning_rate,
        weight_decay=t.weight_decay,
        max_epochs=t.max_epochs,
        patience=t.patience,
        seed=t.seed,
    )


def _load_corpus_and_plan(cfg: RunConfig):
    root = cfg.resolved_root()
    records = dat.load_corpus(root / cfg.data.metadata, root)
    if cfg.data.plan:
        plan = dat.load_plan(cfg.data.plan)
    else:
        plan = dat.draw_subset_plan(records, cfg.data.plan_seed)
    return root, records, plan


def _backbone_for(cfg: RunConfig, pretrain_records=None, root=None):
    b = cfg.backbone
    if b.kind == "pretrained":
        return load_pretrained_backbone(b.checkpoint)
    backbone = build_toy_backbone(b.resolution, b.base_channels, b.seed)
    if b.train_steps > 0:
        if not pretrain_records:
            raise ConfigError(
                ["backbone.train_steps > 0 needs a corpus to denoise-train on"]
            )
        images = np.stack(
            [dat.load_image_array(Path(root) / r.image_path, b.resolution) for r in pretrain_records]
        )
        backbone, _ = train_toy_backbone(backbone, images, b.train_steps, seed=b.seed)
    return backbone


def _resolve(plan, records, ids):
    return dat.resolve_ids(ids, dat.records_by_id(records))


def cmd_synth_data(args) -> int:
    metadata = dat.generate_synthetic_corpus(
        args.out, n_per_cell=args.n_per_cell, resolution=args.resolution, seed=args.seed
    )
    print(f"wrote {6 * args.n_per_cell} samples under {Path(args.out)} ({metadata})")
    return 0


def cmd_plan(args) -> int:
    records = dat.load_corpus(args.metadata)
    plan = dat.draw_subset_plan(records, args.seed)
    dat.save_plan(plan, args.out)
    sizes = {p: len(ids) for p, ids in plan.subsets.items()}
    print(f"plan written to {args.out}: subsets {sizes}, validation 30, test 30")
    return 0


def _overrides_from(args) -> dict:
    pairs = {}
    for dotted in ("train.seed", "train.subset_percent"):
        key = dotted.split(".", 1)[1]
        if getattr(args, key.replace(".", "_"), None) is not None:
            pairs[dotted] = getattr(args, key)
    return pairs


def cmd_train_cls(args) -> int:
    overrides = _overrides_from(args)
    if args.block is not None:
        overrides["train.block"] = args.block
    if args.timestep is not None:
        overrides["train.timestep"] = args.timestep
    cfg = load_config(args.config, overrides)
    root, records, plan = _load_corpus_and_plan(cfg)
    index = dat.records_by_id(records)
    train_records = dat.resolve_ids(plan.subsets[cfg.train.subset_percent], index)
    backbone = _backbone_for(cfg, train_records, root)
    run_dir = Path(args.run_dir)
    snapshot_config(run_dir, cfg.document())
    block = BlockSpec(cfg.train.block, cfg.train.timestep)
    head, history = train_classifier(
        backbone, block,
        train_records, dat.resolve_ids(plan.validation, index),
        _train_config(cfg), root, run_dir=run_dir,
    )
    plots.save_loss_curves(history.rows, run_dir / "loss_curve.png")
    print(
        f"trained classifier on block {block.block_index} t={block.timestep}; "
        f"final val loss {history.final_val_loss():.4f}; artifacts in {run_dir}"
    )
    return 0


def cmd_train_seg(args) -> int:
    overrides = _overrides_from(args)
    if args.blocks is not None:
        overrides["train.seg_blocks"] = args.blocks
    if args.timestep is not None:
        overrides["train.seg_timestep"] = args.timestep
    cfg = load_config(args.config, overrides)
    root, records, plan = _load_corpus_and_plan(cfg)
    index = dat.records_by_id(records)
    train_records = dat.resolve_ids(plan.subsets[cfg.train.subset_percent], index)
    backbone = _backbone_for(cfg, train_records, root)
    run_dir = Path(args.run_dir)
    snapshot_config(run_dir, cfg.document())
    blocks = [BlockSpec(b, cfg.train.seg_timestep) for b in cfg.train.seg_blocks]
    ensemble, history = train_segmentation(
        backbone,
        train_records, dat.resolve_ids(plan.validation, index),
        _train_config(cfg), root,
        blocks=blocks,
        max_pixels_per_image=cfg.train.seg_max_pixels_per_image,
        run_dir=run_dir,
    )
    plots.save_loss_curves(history.rows, run_dir / "loss_curve.png")
    print(
        f"trained segmentation ensemble on blocks {cfg.train.seg_blocks} "
        f"t={cfg.train.seg_timestep}; artifacts in {run_dir}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    root, records, plan = _load_corpus_and_plan(cfg)
    index = dat.records_by_id(records)
    pretrain = dat.resolve_ids(plan.subsets[20], index)
    backbone = _backbone_for(cfg, pretrain, root)
    run_dir = Path(args.run_dir)
    snapshot_config(run_dir, cfg.document())
    grids = ev.run_ablation(
        backbone, records, plan, root, _train_config(cfg),
        block_indices=args.blocks, subsets=args.subsets, timesteps=args.timesteps,
        out_dir=run_dir,
    )
    for pct, grid in grids.items():
        plots.save_ablation_heatmap(grid, run_dir / f"grid_subset{pct:02d}.png")
        missing = sum(v is None for row in grid.values for v in row)
        print(f"subset {pct}%: {len(grid.block_indices) * len(grid.timesteps)} cells, {missing} missing")
        for (b, t), msg in grid.errors.items():
            print(f"  cell block={b} t={t} failed: {msg}", file=sys.stderr)
    return 0


def cmd_kmeans(args) -> int:
    cfg = load_config(args.config)
    backbone = _backbone_for(cfg)
    res = backbone.descriptor.input_resolution
    x0 = dat.load_image_array(args.image, res)
    from .backbone import collect_activations

    (act,) = collect_activations(
        backbone, x0, [BlockSpec(args.block, args.timestep)], epsilon_seed=cfg.eval.kmeans_seed
    )
    labels = ev.kmeans_blocks(act, k=cfg.eval.kmeans_k, seed=cfg.eval.kmeans_seed)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(run_dir, cfg.document())
    plots.save_cluster_map(labels, run_dir / "cluster_map.png")
    sizes = np.bincount(labels.reshape(-1), minlength=cfg.eval.kmeans_k)
    with open(run_dir / "cluster_sizes.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("cluster,pixels\n")
        for i, s in enumerate(sizes):
            fh.write(f"{i},{int(s)}\n")
    print(f"clustered block {args.block} t={args.timestep} into {cfg.eval.kmeans_k} groups; see {run_dir}")
    return 0


def _print_reference_comparison(report: ev.MetricsReport, subset_percent: int) -> None:
    ref = ev.REFERENCE_RESULTS["classification_accuracy"].get(subset_percent)
    if ref is not None and report.overall.accuracy is not None:
        print(
            f"reference comparison: measured accuracy {report.overall.accuracy:.3f} "
            f"vs full-scale reference {ref:.2f} at {subset_percent}% (reported, not asserted)"
        )


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    root, records, plan = _load_corpus_and_plan(cfg)
    index = dat.records_by_id(records)
    loaded = load_head(args.checkpoint)
    split_ids = plan.validation if args.split == "validation" else plan.test
    split_records = dat.resolve_ids(split_ids, index)
    pretrain = dat.resolve_ids(plan.subsets[20], index)
    backbone = _backbone_for(cfg, pretrain, root)
    run_dir = Path(args.run_dir) if args.run_dir else Path(args.checkpoint).parent
    run_dir.mkdir(parents=True, exist_ok=True)

    seed = cfg.train.seed
    if loaded.kind == "classifier":
        results = ev.collect_classification_results(
            backbone, loaded.model, loaded.blocks[0], split_records, root, seed
        )
    else:
        results = ev.collect_segmentation_results(
            backbone, loaded.model, loaded.blocks, split_records, root, seed
        )
    report = ev.stratify_report(results, cfg.eval.threshold_mode)
    ev.write_sample_results_csv(results, run_dir / f"samples_{args.split}.csv")
    ev.write_report_csv(report, run_dir / f"metrics_{args.split}.csv")
    if report.task == "classification":
        plots.save_roc_curve(
            [r.score for r in results], [r.label for r in results],
            run_dir / f"roc_{args.split}.png", title=f"ROC ({args.split})",
        )
        print(f"AUC {report.overall.auc:.3f}, accuracy@best {report.overall.accuracy:.3f}")
        _print_reference_comparison(report, cfg.train.subset_percent)
    else:
        plots.save_iou_bars(report, run_dir / f"iou_{args.split}.png")
        print(f"mean IoU {report.overall.mean_iou:.3f}, lesion IoU {report.overall.lesion_iou:.3f}")
    print(f"tables written to {run_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise DermprobeError(f"run directory not found: {run_dir}")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    produced = []
    history = run_dir / "history.csv"
    if history.exists():
        import csv as _csv

        with open(history, newline="", encoding="utf-8") as fh:
            rows = [
                {
                    "member": r["member"],
                    "epoch": int(r["epoch"]),
                    "train_loss": float(r["train_loss"]),
                    "val_loss": float(r["val_loss"]),
                }
                for r in _csv.DictReader(fh)
            ]
        plots.save_loss_curves(rows, out / "loss_curve.png")
        produced.append("loss_curve.png")
    for samples in sorted(run_dir.glob("samples_*.csv")):
        split = samples.stem.split("_", 1)[1]
        results = ev.read_sample_results_csv(samples)
        report = ev.stratify_report(results)
        ev.write_report_csv(report, out / f"metrics_{split}.csv")
        produced.append(f"metrics_{split}.csv")
        if report.task == "classification":
            plots.save_roc_curve(
                [r.score for r in results], [r.label for r in results],
                out / f"roc_{split}.png", title=f"ROC ({split})",
            )
            produced.append(f"roc_{split}.png")
        else:
            plots.save_iou_bars(report, out / f"iou_{split}.png")
            produced.append(f"iou_{split}.png")
    for grid_csv in sorted(run_dir.glob("grid_subset*.csv")):
        pct = int(grid_csv.stem.removeprefix("grid_subset"))
        grid = ev.load_ablation_grid(grid_csv, pct)
        plots.save_ablation_heatmap(grid, out / f"{grid_csv.stem}.png")
        produced.append(f"{grid_csv.stem}.png")
    if not produced:
        raise DermprobeError(f"no reportable artifacts found in {run_dir}")
    print(f"report regenerated in {out}: {', '.join(produced)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermprobe",
        description="Frozen-diffusion feature probing for lesion segmentation and malignancy classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus with palette masks")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-cell", type=int, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("plan", help="draw nested balanced subsets from a corpus")
    p.add_argument("--metadata", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train-cls", help="train the malignancy classifier head")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--block", type=int, default=None)
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--subset-percent", type=int, default=None, dest="subset_percent")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("train-seg", help="train the per-pixel segmentation ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--blocks", type=int, nargs="+", default=None)
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--subset-percent", type=int, default=None, dest="subset_percent")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("ablate", help="accuracy grid over (block, timestep, subset) cells")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--blocks", type=int, nargs="+", default=[6, 8])
    p.add_argument("--subsets", type=int, nargs="+", default=[5, 10, 15, 20])
    p.add_argument("--timesteps", type=int, nargs="+", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("kmeans", help="cluster one block's activation for an image")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--timestep", type=int, required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("eval", help="evaluate a head checkpoint on a plan split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="regenerate tables and figures from a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except CheckpointMissingError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 1
    except DermprobeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
