"""wspkit command line: synthetic data, pair building, pre-training, fine-tuning, evaluation."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import anno, checkpoint, corpus, metrics, nn, pairs, pose3d, wsp
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("wspkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write_bytes(out_dir / f"{command}.resolved.ini", cfg.to_ini().encode())


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write_bytes(path, text.encode())


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _config_from_dict(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
    return cls(**vals)


def _load_pairs_file(path: Path) -> tuple[list[pairs.PairSample], Callable[[str], np.ndarray]]:
    samples = pairs.load_pairs(path.read_text())
    base = path.parent
    cache: dict[str, np.ndarray] = {}

    def load_image(ref: str) -> np.ndarray:
        if ref not in cache:
            from .synth import read_pgm
            p = base / ref
            if not p.is_file():
                raise DataError(f"image not found: {p}")
            cache.clear()
            cache[ref] = read_pgm(p)
        return cache[ref]

    return samples, load_image


def _split_by_image(samples: Sequence[pairs.PairSample], fraction: float, seed: int):
    ids = sorted({s.image_id for s in samples})
    if len(ids) < 2:
        raise DataError("need pairs from at least 2 images to hold out a validation split")
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(fraction * len(ids))))
    val_ids = set(np.asarray(ids)[rng.permutation(len(ids))[:n_val]].tolist())
    return [s for s in samples if s.image_id not in val_ids], [s for s in samples if s.image_id in val_ids]


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    results = corpus.render_corpus(args.count, args.seed if args.seed is not None else 0, cfg.synth,
                                   workers=corpus.worker_count(args.workers))
    corpus.write_corpus(out, results)
    _echo_config(cfg, out, "synth-gen")
    print(f"wrote {len(results)} scenes to {out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    cfg = _resolve_config(args)
    pcfg = cfg.pairs
    if args.pairs_per_image is not None:
        pcfg = dataclasses.replace(pcfg, pairs_per_image=args.pairs_per_image)
    src = _require_file(args.input, "input")
    out = Path(args.out)
    raw = src.read_bytes()
    if src.suffix == ".json":
        images, rejected = anno.parse_annotation_doc(raw, anno.SKELETONS[args.source])
        for img in images:
            img.persons = [anno.remap_skeleton(p, anno.MAPPINGS[args.source]) for p in img.persons]
        for r in rejected:
            log.warning("rejected annotation %s: %s", r.annotation_id, r.reason)
    else:
        images, rejected = anno.load_manifest(raw.decode()), []
    eligible = anno.filter_eligible(images)
    if not eligible:
        raise DataError("no image passes the eligibility filter (>= 2 persons with an annotated ankle)")
    rel = lambda img: os.path.relpath(src.parent / img.file_name, out.parent)
    samples = pairs.build_dataset(eligible, pcfg, image_ref=rel)
    if args.mask_ankles:
        samples = samples + [pairs.mask_ankles(s) for s in samples]
    _write_text(out, pairs.dump_pairs(samples))
    cfg = dataclasses.replace(cfg, pairs=pcfg)
    _echo_config(cfg, out.parent, "build-dataset")
    print(f"{len(images)} images, {len(rejected)} rejected annotations, {len(eligible)} eligible, "
          f"{len(samples)} pairs -> {out}")
    return EXIT_OK


def _pair_batches(args, cfg: RunConfig, dtype):
    samples, load_image = _load_pairs_file(_require_file(args.pairs, "pair manifest"))
    if not samples:
        raise DataError("pair manifest is empty")
    if args.val_pairs:
        val, val_load = _load_pairs_file(_require_file(args.val_pairs, "validation pair manifest"))
        train = samples
    else:
        train, val = _split_by_image(samples, args.val_fraction, cfg.train.seed)
        val_load = load_image
    return (wsp.assemble_pairs(train, load_image, cfg.wsp, dtype), wsp.assemble_pairs(val, val_load, cfg.wsp, dtype))


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    dtype = np.dtype(cfg.train.dtype)
    out = Path(args.out)
    train, val = _pair_batches(args, cfg, dtype)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".metrics.jsonl")
    model = wsp.WspModel(cfg.wsp, seed=cfg.train.seed, dtype=dtype)
    lines: list[str] = []
    meta = {"kind": "wsp", "wsp": dataclasses.asdict(cfg.wsp), "train": dataclasses.asdict(cfg.train)}

    def on_epoch(rec):
        lines.append(wsp.format_record(rec) + "\n")
        print(wsp.format_record(rec), flush=True)

    try:
        wsp.train_pretrain(model, train, val, cfg.train, on_epoch)
    except wsp.TrainingDiverged as e:
        # the requested checkpoint path is left untouched; keep the last good weights beside it
        checkpoint.save(out.with_name(out.name + ".last-good"), e.last_good.params, dict(meta, diverged=True))
        _write_text(log_path, "".join(lines))
        raise
    checkpoint.save(out, model.params.params, meta)
    _write_text(log_path, "".join(lines))
    _echo_config(cfg, out.parent, "pretrain")
    return EXIT_OK


def _pose_sets(args, cfg: RunConfig):
    data = corpus.load_corpus(args.data, need_poses=True)
    if args.val_data:
        vdata = corpus.load_corpus(args.val_data, need_poses=True)
        train_recs, val_recs, vload = data.pose_records, vdata.pose_records, vdata.image
    else:
        recs = data.pose_records
        if len(recs) < 2:
            raise DataError("need at least 2 scenes to hold out a validation split")
        rng = np.random.default_rng(cfg.finetune.seed)
        n_val = max(1, int(round(args.val_fraction * len(recs))))
        val_idx = set(rng.permutation(len(recs))[:n_val].tolist())
        train_recs = [r for i, r in enumerate(recs) if i not in val_idx]
        val_recs = [r for i, r in enumerate(recs) if i in val_idx]
        vload = data.image
    train = corpus.pose_set_from_records(train_recs, data.image, cfg.wsp, cfg.finetune)
    val = corpus.pose_set_from_records(val_recs, vload, cfg.wsp, cfg.finetune)
    return train, val


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, epochs=args.epochs))
    out = Path(args.out)
    model = pose3d.Pose3DModel(cfg.wsp, cfg.finetune)
    if not args.from_scratch:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --from-scratch is given")
        try:
            tensors, _ = checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
        except checkpoint.CheckpointError as e:
            raise DataError(str(e)) from None
        dtype = np.dtype(cfg.finetune.dtype)
        pose3d.load_trunk(model, {k: v.astype(dtype) for k, v in tensors.items()})
    train, val = _pose_sets(args, cfg)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".metrics.jsonl")
    lines: list[str] = []

    def on_epoch(rec):
        rec = dict(rec, arm="scratch" if args.from_scratch else "pretrained")
        lines.append(wsp.format_record(rec) + "\n")
        print(wsp.format_record(rec), flush=True)

    meta = {"kind": "pose3d", "wsp": dataclasses.asdict(cfg.wsp), "finetune": dataclasses.asdict(cfg.finetune),
            "from_scratch": bool(args.from_scratch)}
    try:
        pose3d.train_finetune(model, train, val, cfg.finetune, on_epoch)
    except wsp.TrainingDiverged as e:
        checkpoint.save(out.with_name(out.name + ".last-good"), e.last_good.params, dict(meta, diverged=True))
        _write_text(log_path, "".join(lines))
        raise
    checkpoint.save(out, model.params.params, meta)
    _write_text(log_path, "".join(lines))
    _echo_config(cfg, out.parent, "finetune")
    return EXIT_OK


def _load_pose_model(path) -> pose3d.Pose3DModel:
    try:
        tensors, meta = checkpoint.load(_require_file(path, "model"))
    except checkpoint.CheckpointError as e:
        raise DataError(str(e)) from None
    if not meta or meta.get("kind") != "pose3d":
        raise DataError(f"{path} is not a fine-tuned 3D pose model")
    wcfg = _config_from_dict(wsp.WspConfig, meta["wsp"])
    fcfg = _config_from_dict(pose3d.FinetuneConfig, meta["finetune"])
    store = nn.ParamStore()
    for k, v in tensors.items():
        store.add(k, v)
    return pose3d.Pose3DModel(wcfg, fcfg, params=store)


def cmd_eval_3d(args) -> int:
    model = _load_pose_model(args.model)
    data = corpus.load_corpus(args.data, need_poses=True)
    ds = corpus.pose_set_from_records(data.pose_records, data.image, model.wcfg, model.fcfg)
    dtype = next(iter(model.params.params.values())).dtype
    pred = model.predict(ds.images.astype(dtype)).astype(np.float64)
    res = metrics.evaluate_poses(pred, ds.targets, ds.valid, args.thresholds)
    print(res.format())
    if args.out:
        _write_text(Path(args.out), metrics.dump_records([res.to_record()]))
    return EXIT_OK


def _load_wsp_model(path) -> wsp.WspModel:
    try:
        tensors, meta = checkpoint.load(_require_file(path, "checkpoint"))
    except checkpoint.CheckpointError as e:
        raise DataError(str(e)) from None
    if not meta or meta.get("kind") != "wsp":
        raise DataError(f"{path} is not a pre-training checkpoint")
    wcfg = _config_from_dict(wsp.WspConfig, meta["wsp"])
    store = nn.ParamStore()
    for k, v in tensors.items():
        store.add(k, v)
    return wsp.WspModel(wcfg, params=store)


def cmd_eval_rd(args) -> int:
    model = _load_wsp_model(args.checkpoint)
    samples, load_image = _load_pairs_file(_require_file(args.pairs, "pair manifest"))
    plain = [s for s in samples if not s.ankle_masked]
    chosen = []
    if "plain" in args.protocols:
        chosen += plain
    if "ankle_masked" in args.protocols:
        masked = [s for s in samples if s.ankle_masked] or [pairs.mask_ankles(s) for s in plain]
        chosen += masked
    if not chosen:
        raise DataError("no pairs for the selected protocols")
    dtype = next(iter(model.params.params.values())).dtype
    batch = wsp.assemble_pairs(chosen, load_image, model.cfg, dtype)
    scores = model.predict_batch(batch)
    cells = metrics.rd_protocol_report(scores, batch.labels.astype(int), batch.delta_s, batch.ankle_masked,
                                       args.thresholds)
    print(metrics.format_rd_report(cells))
    if args.out:
        _write_text(Path(args.out), metrics.dump_records(metrics.rd_report_records(cells)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    reports = run_gradchecks(args.seed, args.which, args.max_entries)
    ok = True
    for name, rep in reports.items():
        print(f"== {name}")
        print(rep.format())
        ok &= rep.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wspkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="render a synthetic multi-person corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.add_argument("--workers", type=int, default=None, help="worker processes (capped by WSPKIT_THREADS)")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("build-dataset", help="build relative-depth pairs from annotations")
    s.add_argument("--input", required=True, help="canonical manifest (.jsonl) or COCO-style keypoint document (.json)")
    s.add_argument("--source", default="coco17", choices=sorted(anno.MAPPINGS), help="skeleton of a .json input")
    s.add_argument("--out", required=True, help="pair manifest to write")
    s.add_argument("--seed", type=int)
    s.add_argument("--pairs-per-image", type=int)
    s.add_argument("--mask-ankles", action="store_true", help="also emit ankle-masked copies of every pair")
    s.add_argument("--config")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("pretrain", help="train the relative-depth network")
    s.add_argument("--pairs", required=True)
    s.add_argument("--val-pairs")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--log", help="per-epoch metrics (JSON lines); default <out>.metrics.jsonl")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train the 3D pose head on a synthetic corpus")
    s.add_argument("--checkpoint")
    s.add_argument("--data", required=True, help="corpus directory written by synth-gen")
    s.add_argument("--val-data")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--config")
    s.add_argument("--from-scratch", action="store_true", help="ignore the checkpoint; random backbone")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--log")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval-rd", help="relative-depth metrics per protocol and scale-gap bucket")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--protocols", default="plain,ankle_masked",
                   type=lambda t: tuple(x.strip() for x in t.split(",") if x.strip()))
    s.add_argument("--thresholds", type=_floats, default=pairs.DELTA_S_THRESHOLDS)
    s.add_argument("--out", help="machine-readable records (JSON lines)")
    s.set_defaults(func=cmd_eval_rd)

    s = sub.add_parser("eval-3d", help="MPJPE, per-axis MPJPE, PA-MPJPE and 3DPCK")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--thresholds", type=_floats, default=metrics.PCK_THRESHOLDS_MM)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_3d)

    s = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--which", default="pretrain,finetune",
                   type=lambda t: tuple(x.strip() for x in t.split(",") if x.strip()))
    s.add_argument("--max-entries", type=int, default=40, help="sampled entries per tensor")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval-rd":
        bad = set(args.protocols) - {"plain", "ankle_masked"}
        if bad:
            parser.error(f"unknown protocol(s): {', '.join(sorted(bad))}")
    if args.command == "gradcheck":
        bad = set(args.which) - {"pretrain", "finetune"}
        if bad:
            parser.error(f"unknown gradcheck target(s): {', '.join(sorted(bad))}")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"wspkit: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (nn.NumericError, wsp.TrainingDiverged) as e:
        print(f"wspkit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, anno.AnnotationParseError, pose3d.IncompatibleCheckpoint, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"wspkit: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
