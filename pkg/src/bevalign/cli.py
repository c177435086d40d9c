"""Command-line interface.

Exit status is 0 on success, 1 on invalid input or configuration and 2 on a
numerical failure. Every command writes its artifacts under ``--out`` together
with ``config.ini`` and ``run.json`` recording the config hash, seed and version.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import storage
from . import train as T
from .config import VERSION, RunConfig
from .datasets import class_fractions, generate_samples, prepare_all, split_seeds
from .errors import NumericalError, ValidationError
from .geometry import BevMap
from .gradcheck import run_suite
from .metrics import pca_project
from .simulator import class_names, derive_seed

log = logging.getLogger("bevalign")

COMMANDS = ("synth-gen", "pretrain", "finetune", "eval", "pose-recover", "grad-check", "pca-viz")
DATA_SECTIONS = ("world", "rig", "grid", "bins")
GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults apply to missing keys)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; may be repeated; wins over --config")
    common.add_argument("--seed", type=int, help="run seed (train.seed); recorded in every output")
    common.add_argument("--out", help="output directory (io.out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for scene generation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bevalign", description="Pose-supervised camera/lidar BEV alignment on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"bevalign {VERSION}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic scene dataset")
    s.add_argument("--scenes", type=int, default=200, help="training scenes")
    s.add_argument("--test-scenes", type=int, default=100, help="held-out scenes")
    s.add_argument("--dataset", help="dataset directory (default: <out>/dataset)")

    for name, text in (("pretrain", "pose-supervised pretraining"),
                       ("finetune", "segmentation fine-tuning"),
                       ("eval", "segmentation evaluation of a checkpoint"),
                       ("pose-recover", "recover ego pose offsets by similarity search"),
                       ("pca-viz", "PCA colouring of latent BEV maps")):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("--dataset", help="dataset directory (io.dataset)")
        c.add_argument("--checkpoint", help="checkpoint file (io.checkpoint)")
        if name in ("eval", "pose-recover", "pca-viz"):
            c.add_argument("--scenes", type=int, help="use only the first N held-out scenes")

    g = sub.add_parser("grad-check", parents=[common], help="finite-difference check of all gradients")
    g.add_argument("--instances", type=int, default=10, help="random alignment-loss instances")
    g.add_argument("--seg-instances", type=int, default=3, help="random segmentation-loss instances")
    return p


# ---------------------------------------------------------------- helpers

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.override(args.set)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.io.out = args.out
    for key in ("dataset", "checkpoint"):
        val = getattr(args, key, None)
        if val:
            setattr(cfg.io, key, val)
    return cfg.validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_run(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    cfg.dump(out / "config.ini")
    doc = {"command": command, "config_hash": cfg.config_hash, "data_hash": cfg.data_hash,
           "seed": cfg.train.seed, "version": VERSION}
    if extra:
        doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _dataset_dir(cfg: RunConfig) -> Path:
    if not cfg.io.dataset:
        raise ValidationError("no dataset given (use --dataset or io.dataset)")
    return Path(cfg.io.dataset)


def adopt_dataset_config(cfg: RunConfig, manifest: dict) -> RunConfig:
    """World, rig, grid and bins come from the dataset manifest."""
    for sec in DATA_SECTIONS:
        for k, v in manifest["config"][sec].items():
            cfg.set_value(sec, k, v)
    cfg.validate()
    if cfg.data_hash != manifest["data_hash"]:
        raise ValidationError(f"dataset manifest is inconsistent: data hash {manifest['data_hash']} "
                              f"does not match its own configuration ({cfg.data_hash})")
    return cfg


def _load_split(cfg: RunConfig, manifest: dict, split: str, limit: int | None = None, required=True):
    seeds = manifest.get("splits", {}).get(split, [])
    if limit is not None:
        if limit < 1:
            raise ValidationError("--scenes must be at least 1")
        seeds = seeds[:limit]
    if not seeds:
        if required:
            raise ValidationError(f"dataset has no '{split}' scenes")
        return []
    _, samples = storage.read_dataset(_dataset_dir(cfg), seeds)
    order = {s: i for i, s in enumerate(seeds)}
    return sorted(samples, key=lambda s: order[s.seed])


def load_model(cfg: RunConfig, manifest: dict, required: bool) -> dict | None:
    """Checkpoint tensors after the dataset and shape guards; ``None`` when absent and optional."""
    if not cfg.io.checkpoint:
        if required:
            raise ValidationError("no checkpoint given (use --checkpoint or io.checkpoint)")
        return None
    ck = storage.load_checkpoint(cfg.io.checkpoint)
    data_hash = ck.meta.get("data_hash")
    if data_hash != manifest["data_hash"]:
        raise ValidationError(f"config hash mismatch: checkpoint was trained on data hash {data_hash}, "
                              f"dataset manifest has {manifest['data_hash']}")
    saved = ck.meta.get("config", {})
    for sec in ("model",):
        for k, v in saved.get(sec, {}).items():
            cfg.set_value(sec, k, v)
    cfg.validate()
    ref = T.fresh_params(cfg)
    for k, v in ref.items():
        if k not in ck.tensors or ck.tensors[k].shape != v.shape:
            raise ValidationError(f"checkpoint tensor {k} is missing or has the wrong shape")
    return {k: ck.tensors[k].astype(np.float32) for k in ref}


def _checkpoint(params, cfg: RunConfig, stage: str, extra: dict | None = None) -> storage.Checkpoint:
    d = cfg.to_dict()
    d.pop("io")
    meta = {"stage": stage, "data_hash": cfg.data_hash, "config": d}
    if extra:
        meta.update(extra)
    return storage.Checkpoint(dict(params), cfg.config_hash, cfg.train.seed, VERSION, meta)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(_cell(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _plots():
    from . import plotting  # imported lazily so non-plotting commands avoid the matplotlib start-up cost

    return plotting


# ---------------------------------------------------------------- commands

def cmd_synth_gen(args, cfg: RunConfig) -> int:
    if args.scenes < 1:
        raise ValidationError("--scenes must be at least 1")
    if args.test_scenes < 0:
        raise ValidationError("--test-scenes must be non-negative")
    out = _out_dir(cfg)
    root = Path(args.dataset or cfg.io.dataset or out / "dataset")
    seed = cfg.train.seed
    splits = {"train": split_seeds(seed, "train", args.scenes), "test": split_seeds(seed, "test", args.test_scenes)}
    samples = {k: generate_samples(cfg, v, args.jobs) for k, v in splits.items()}
    storage.write_dataset(root, samples["train"] + samples["test"], cfg, splits)
    K = cfg.world.num_classes
    rows = []
    for split, ss in samples.items():
        if ss:
            rows.append([split, len(ss), *[float(f) for f in class_fractions(ss, K)], seed, cfg.config_hash, VERSION])
    _write_rows(out / "synth_stats.csv",
                ["split", "scene_count", *[f"frac_{k}" for k in range(K)], "seed", "config_hash", "version"], rows)
    _record_run(out, cfg, "synth-gen", {"dataset": str(root)})
    print(f"wrote {args.scenes}+{args.test_scenes} scenes to {root} (data hash {cfg.data_hash})")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    manifest = storage.read_manifest(_dataset_dir(cfg))
    adopt_dataset_config(cfg, manifest)
    init = load_model(cfg, manifest, required=False)
    out = _out_dir(cfg)
    geom = T.build_geometry(cfg)
    train = prepare_all(_load_split(cfg, manifest, "train"), cfg)
    try:
        res = T.pretrain(train, geom, cfg, init)
    except NumericalError as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            storage.save_checkpoint(out / "pretrain_last_good.ckpt", _checkpoint(last, cfg, "pretrain"))
        raise
    test = prepare_all(_load_split(cfg, manifest, "test", required=False), cfg)
    disc = T.discrimination_rate(test, res.params, geom, cfg)[0] if test else math.nan
    storage.save_checkpoint(out / "pretrain.ckpt", _checkpoint(res.params, cfg, "pretrain", {
        "loss_curve": res.loss_curve, "final_loss": res.final_loss}))
    rows = [["initial", res.initial_loss]] + [[str(i + 1), v] for i, v in enumerate(res.loss_curve)]
    rows += [["final_eval", res.final_loss], ["discrimination_rate", disc], ["max_depth_sum_error", res.depth_sum_error]]
    rows = [r + [cfg.train.seed, cfg.config_hash, VERSION] for r in rows]
    _write_rows(out / "pretrain_metrics.csv", ["epoch", "value", "seed", "config_hash", "version"], rows)
    (out / "pretrain_metrics.json").write_text(json.dumps({
        "initial_loss": res.initial_loss, "loss_curve": res.loss_curve, "final_eval_loss": res.final_loss,
        "discrimination_rate": None if math.isnan(disc) else disc, "scene_count": len(train),
        "seed": cfg.train.seed, "config_hash": cfg.config_hash, "version": VERSION}, indent=1, sort_keys=True))
    _plots().plot_loss_curves(out / "pretrain_loss.png", {"alignment": res.loss_curve},
                              f"pretraining ({cfg.config_hash})")
    _record_run(out, cfg, "pretrain")
    print(f"pretrain: loss {res.loss_curve[0] if res.loss_curve else res.initial_loss:.4f} -> "
          f"{res.final_loss:.4f}, discrimination {disc:.3f} (config {cfg.config_hash})")
    return 0


def _evaluate_all(params, scenes, geom, cfg: RunConfig, loss_curve=()):
    reports = []
    for modality in ("both", "camera_only", "lidar_only"):
        r = T.evaluate_segmentation(params, scenes, geom, cfg, modality)
        if modality == "both":
            r.loss_curve = list(loss_curve)
        reports.append(r)
    return reports


def _write_seg_reports(out: Path, stem: str, reports, cfg: RunConfig, extra=None):
    names = class_names(cfg.world.num_classes)
    storage.write_metrics(out, stem, reports, names, extra)
    _plots().plot_iou_bars(out / f"{stem}_iou.png", reports, names, f"{stem} ({cfg.config_hash})")
    for r in reports:
        print(f"{stem}[{r.label}]: mIoU {r.miou:.2f} over {r.scene_count} scenes")


def cmd_finetune(args, cfg: RunConfig) -> int:
    manifest = storage.read_manifest(_dataset_dir(cfg))
    adopt_dataset_config(cfg, manifest)
    init = load_model(cfg, manifest, required=False)
    out = _out_dir(cfg)
    geom = T.build_geometry(cfg)
    train = prepare_all(_load_split(cfg, manifest, "train"), cfg)
    test = prepare_all(_load_split(cfg, manifest, "test"), cfg)
    res = T.finetune(train, geom, cfg, init)
    storage.save_checkpoint(out / "finetune.ckpt", _checkpoint(res.params, cfg, "finetune", {
        "loss_curve": res.loss_curve, "initialised_from": "checkpoint" if init is not None else "scratch"}))
    reports = _evaluate_all(res.params, test, geom, cfg, res.loss_curve)
    extra = {"label_fraction": cfg.train.label_fraction, "labelled_scenes": len(res.subset),
             "initialised_from": "checkpoint" if init is not None else "scratch"}
    _write_seg_reports(out, "finetune_metrics", reports, cfg, extra)
    _plots().plot_loss_curves(out / "finetune_loss.png", {"focal": res.loss_curve}, f"fine-tuning ({cfg.config_hash})")
    _record_run(out, cfg, "finetune")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = storage.read_manifest(_dataset_dir(cfg))
    adopt_dataset_config(cfg, manifest)
    params = load_model(cfg, manifest, required=True)
    out = _out_dir(cfg)
    geom = T.build_geometry(cfg)
    test = prepare_all(_load_split(cfg, manifest, "test", args.scenes), cfg)
    _write_seg_reports(out, "eval_metrics", _evaluate_all(params, test, geom, cfg), cfg)
    _record_run(out, cfg, "eval", {"checkpoint": str(cfg.io.checkpoint)})
    return 0


def cmd_pose_recover(args, cfg: RunConfig) -> int:
    from .pose_search import pose_recovery

    manifest = storage.read_manifest(_dataset_dir(cfg))
    adopt_dataset_config(cfg, manifest)
    params = load_model(cfg, manifest, required=True)
    out = _out_dir(cfg)
    geom = T.build_geometry(cfg)
    test = prepare_all(_load_split(cfg, manifest, "test", args.scenes if args.scenes else 50), cfg)
    rows, errs = [], []
    for sc in test:
        q, r = T.scene_bevs(params, sc, geom)
        init = T.perturbed_initial_pose(derive_seed(cfg.train.seed, sc.seed))
        est = pose_recovery(q, r, init)
        ix, iz, iy = init.planar_params()
        x, z, y = est.pose.planar_params()
        err = math.hypot(x, z)
        errs.append(err)
        rows.append([sc.seed, ix, iz, math.degrees(iy), x, z, math.degrees(y), err, abs(math.degrees(y)),
                     est.confidence, est.low_confidence, cfg.train.seed, cfg.config_hash])
    _write_rows(out / "pose_recovery.csv",
                ["scene_seed", "init_x", "init_z", "init_yaw_deg", "est_x", "est_z", "est_yaw_deg",
                 "trans_error", "yaw_error_deg", "confidence", "low_confidence", "seed", "config_hash"], rows)
    cell = cfg.grid.cell_size
    med = float(np.median(errs))
    (out / "pose_recovery.json").write_text(json.dumps({
        "scene_count": len(errs), "median_trans_error": med, "median_trans_error_cells": med / cell,
        "seed": cfg.train.seed, "config_hash": cfg.config_hash, "version": VERSION}, indent=1, sort_keys=True))
    _plots().plot_error_hist(out / "pose_recovery_errors.png", errs, cell, f"pose recovery ({cfg.config_hash})")
    _record_run(out, cfg, "pose-recover", {"checkpoint": str(cfg.io.checkpoint)})
    print(f"pose-recover: median translation error {med:.3f} m ({med / cell:.2f} cells) over {len(errs)} scenes")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    if args.instances < 1 or args.seg_instances < 0:
        raise ValidationError("--instances must be >= 1 and --seg-instances >= 0")
    out = _out_dir(cfg)
    rep = run_suite(cfg.train.seed, args.instances, args.seg_instances)
    rows = [[r.instance, r.path, r.param, r.size, r.max_rel_error, r.max_abs_grad, cfg.train.seed, cfg.config_hash]
            for r in rep.rows]
    _write_rows(out / "grad_check.csv", ["instance", "path", "param", "size", "max_rel_error", "max_abs_grad",
                                         "seed", "config_hash"], rows)
    ok = rep.max_rel_error < GRAD_TOLERANCE
    (out / "grad_check.json").write_text(json.dumps({
        "max_rel_error": rep.max_rel_error, "tolerance": GRAD_TOLERANCE, "passed": ok,
        "alignment_instances": args.instances, "segmentation_instances": args.seg_instances,
        "seed": cfg.train.seed, "config_hash": cfg.config_hash, "version": VERSION}, indent=1, sort_keys=True))
    _record_run(out, cfg, "grad-check")
    print(f"grad-check: max relative error {rep.max_rel_error:.3e} over {len(rep.rows)} tensors "
          f"({rep.seconds:.1f} s)")
    if not ok:
        raise NumericalError(f"gradient mismatch {rep.max_rel_error:.3e} >= {GRAD_TOLERANCE}", stage="grad-check")
    return 0


def cmd_pca_viz(args, cfg: RunConfig) -> int:
    manifest = storage.read_manifest(_dataset_dir(cfg))
    adopt_dataset_config(cfg, manifest)
    params = load_model(cfg, manifest, required=False)
    params = T.fresh_params(cfg) if params is None else params
    out = _out_dir(cfg)
    geom = T.build_geometry(cfg)
    split = "test" if manifest.get("splits", {}).get("test") else "train"
    scenes = prepare_all(_load_split(cfg, manifest, split, args.scenes if args.scenes else 1), cfg)
    plots = _plots()
    for sc in scenes:
        latent, mask, _ = T.latent_forward(params, sc.tensors, geom, cfg.train.modality_mask, cfg.model.window)
        rgb = pca_project(BevMap(geom.ego_grid.with_dim(latent.shape[-1]), latent.astype(np.float64), mask))
        stem = f"pca_{sc.seed}"
        X, Z = mask.shape
        rows = [[ix, iz, bool(mask[ix, iz]), *[float(c) for c in rgb[ix, iz]], cfg.config_hash]
                for ix in range(X) for iz in range(Z)]
        _write_rows(out / f"{stem}.csv", ["ix", "iz", "valid", "r", "g", "b", "config_hash"], rows)
        plots.plot_rgb_map(out / f"{stem}.png", rgb, f"latent PCA, scene {sc.seed}")
    _record_run(out, cfg, "pca-viz", {"scenes": [sc.seed for sc in scenes]})
    print(f"pca-viz: wrote {len(scenes)} maps to {out}")
    return 0


HANDLERS = {"synth-gen": cmd_synth_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "pose-recover": cmd_pose_recover, "grad-check": cmd_grad_check, "pca-viz": cmd_pca_viz}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("bevalign: error: a command is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"bevalign {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"bevalign {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
