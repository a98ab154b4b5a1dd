"""Command-line interface: crossfeat <subcommand> [flags]."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .augment import TrainResult, augment_set, train_augmentor
from .config import ConfigError, RunConfig, load_config
from .diffcore import NonFiniteError, OptimizerState, load_checkpoint, save_checkpoint, tensors_digest
from .features import AlgorithmId, FeatureSet
from .matching import MatchMode, MatchOptions, match_pipeline
from .pipeline import (EVAL_MODES, ModelSet, build_branches, build_codecs, evaluate, mean_curves, summarize,
                       translation_data)
from .synth import PairDataset, load_dataset, make_pair_dataset, save_dataset
from .translate import decode, encode, train_translator

log = logging.getLogger("crossfeat")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

AUGMENT_CKPT = "augment.ckpt"
TRANSLATE_CKPT = "translate.ckpt"
PLAIN_CKPT = "translate_plain.ckpt"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _paths(cfg: RunConfig, out: Path) -> dict[str, Path]:
    return {k: out / cfg[f"paths.{k}"] for k in ("data", "models", "eval")}


def _write_resolved(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved.yaml").write_text(cfg.dump())


def _write_csv(path: Path, rows: Sequence[dict], header_lines: Sequence[str] = ()) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _require_dataset(paths) -> PairDataset:
    if not (paths["data"] / "manifest.json").exists():
        raise CliError(f"no dataset at {paths['data']}; run `crossfeat gen` first", EXIT_MISSING)
    return load_dataset(paths["data"])


def _models(cfg: RunConfig, dataset, paths, need_augment=False, need_translate=False) -> ModelSet:
    seed = cfg["seed"]
    models = ModelSet()
    ckpt = paths["models"] / AUGMENT_CKPT
    if ckpt.exists():
        models.branches = build_branches(dataset, seed, cfg.aft_layers())
        tensors = load_checkpoint(ckpt)
        for b in models.branches.values():
            b.load_named_tensors(tensors)
            b.eval()
    elif need_augment:
        raise CliError(f"missing augmentation checkpoint {ckpt}; run `crossfeat train-augment` first", EXIT_MISSING)
    for name, attr in ((TRANSLATE_CKPT, "codecs"), (PLAIN_CKPT, "plain_codecs")):
        ckpt = paths["models"] / name
        if ckpt.exists():
            codecs = build_codecs(dataset, seed, cfg["translate.emb_dim"])
            tensors = load_checkpoint(ckpt)
            for c in codecs.values():
                c.load_named_tensors(tensors)
                c.eval()
            setattr(models, attr, codecs)
        elif need_translate and attr == "codecs":
            raise CliError(f"missing translation checkpoint {ckpt}; run `crossfeat train-translate` first",
                           EXIT_MISSING)
    return models


def _checksums(paths) -> dict[str, str]:
    out = {}
    for name in (AUGMENT_CKPT, TRANSLATE_CKPT, PLAIN_CKPT):
        p = paths["models"] / name
        if p.exists():
            out[name] = tensors_digest(load_checkpoint(p))
    return out


# ---------------------------------------------------------------------------
# resumable training


def _state_paths(models_dir: Path, tag: str) -> tuple[Path, Path]:
    return models_dir / "state" / f"{tag}.ckpt", models_dir / "state" / f"{tag}.json"


def _save_state(models_dir: Path, tag: str, modules: dict, result: TrainResult) -> None:
    ckpt, meta = _state_paths(models_dir, tag)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for m in modules.values():
        tensors.update(m.named_tensors())
    tensors.update(result.optimizer.state_tensors("opt/"))
    save_checkpoint(ckpt, tensors)
    opt = result.optimizer
    meta.write_text(json.dumps({"epochs_done": result.epochs_done, "history": result.history,
                                "validation": result.validation,
                                "optimizer": {"base_lr": opt.base_lr, "betas": list(opt.betas), "eps": opt.eps,
                                              "weight_decay": opt.weight_decay}}))


def _load_state(models_dir: Path, tag: str, modules: dict) -> Optional[TrainResult]:
    ckpt, meta = _state_paths(models_dir, tag)
    if not (ckpt.exists() and meta.exists()):
        return None
    tensors = load_checkpoint(ckpt)
    doc = json.loads(meta.read_text())
    for m in modules.values():
        m.load_named_tensors(tensors)
    o = doc["optimizer"]
    opt = OptimizerState(o["base_lr"], tuple(o["betas"]), o["eps"], o["weight_decay"])
    opt.load_state_tensors(tensors, "opt/")
    return TrainResult(modules, doc["history"], doc["validation"], opt, doc["epochs_done"])


def _train_group(models_dir: Path, tag: str, modules: dict, train_fn, force: bool, stop_after: Optional[int]):
    resume = None if force else _load_state(models_dir, tag, modules)
    if resume is not None:
        log.info("resuming %s after epoch %d", tag, resume.epochs_done)
    return train_fn(resume=resume, stop_after_epochs=stop_after,
                    on_epoch_end=lambda r: _save_state(models_dir, tag, modules, r))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    out = paths["data"]
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} is not empty; pass --force to overwrite", EXIT_USAGE)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = make_pair_dataset(cfg["dataset.scenes"], cfg.scene_spec(), cfg.detector_profiles(),
                           cfg.descriptor_profiles(), cfg.homography_family(), cfg["seed"],
                           cfg["dataset.val_fraction"], cfg["dataset.gt_threshold_px"])
    if out.exists() and args.force:
        for p in out.iterdir():
            if p.is_file():
                p.unlink()
    save_dataset(ds, out)
    _write_resolved(cfg, out)
    n_files = sum(len(p.features) for p in ds.pairs)
    print(f"wrote {len(ds.pairs)} scene pairs, {n_files} feature files to {out}")
    return EXIT_OK


def cmd_train_augment(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = _require_dataset(paths)
    mdir = paths["models"]
    branches = build_branches(ds, cfg["seed"], cfg.aft_layers())
    tcfg = cfg.augment_config()
    rows, finished = [], True
    for d in ds.descriptors:
        group = {det: b for (det, desc), b in branches.items() if desc == d.id}
        train, val = ds.augment_pairs(d.id, "train"), ds.augment_pairs(d.id, "val")
        result = _train_group(mdir, f"augment_{d.id}", group,
                              lambda **kw: train_augmentor(group, train, val, tcfg, **kw), args.force, args.stop_after)
        rows += [{"descriptor": d.id, **r} for r in result.history]
        finished &= result.epochs_done >= tcfg.epochs
        log.info("augment %s validation %s", d.id, result.validation[-1] if result.validation else None)
    _write_csv(mdir / "augment_loss.csv", rows)
    if finished:
        tensors = {}
        for b in branches.values():
            tensors.update(b.named_tensors())
        save_checkpoint(mdir / AUGMENT_CKPT, tensors)
    _write_resolved(cfg, mdir)
    print(f"augmentation: {len(rows)} steps logged to {mdir / 'augment_loss.csv'}")
    return EXIT_OK


def cmd_train_translate(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = _require_dataset(paths)
    models = _models(cfg, ds, paths, need_augment=True)
    mdir = paths["models"]
    tcfg = cfg.translate_config()
    variants = [("translate", TRANSLATE_CKPT, models.branches)]
    if cfg["translate.train_plain"]:
        variants.append(("translate_plain", PLAIN_CKPT, None))
    rows, finished = [], True
    for tag, ckpt_name, branches in variants:
        codecs = build_codecs(ds, cfg["seed"] + (7 if branches is None else 0), cfg["translate.emb_dim"])
        train, val = translation_data(ds, "train", branches), translation_data(ds, "val", branches)
        result = _train_group(mdir, tag, codecs, lambda **kw: train_translator(codecs, train, val, tcfg, **kw),
                              args.force, args.stop_after)
        rows += [{"variant": tag, **r} for r in result.history]
        if result.epochs_done >= tcfg.epochs:
            tensors = {}
            for c in codecs.values():
                tensors.update(c.named_tensors())
            save_checkpoint(mdir / ckpt_name, tensors)
        else:
            finished = False
    _write_csv(mdir / "translate_loss.csv", rows)
    _write_resolved(cfg, mdir)
    print(f"translation: {len(rows)} steps logged{'' if finished else ' (stopped early)'}")
    return EXIT_OK


def _alg(ds, text: str) -> AlgorithmId:
    det, desc = text.split("/")
    return next(a for a in ds.algorithms() if a.detector == det and a.descriptor == desc)


def cmd_match(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = _require_dataset(paths)
    mode = MatchMode(cfg["match.mode"])
    models = _models(cfg, ds, paths, need_augment=mode is not MatchMode.DIRECT,
                     need_translate=mode in (MatchMode.TRANSLATE, MatchMode.EMBEDDED))
    opts = MatchOptions(mode, cfg["match.mutual_check"], cfg["match.ratio"])
    q, m = _alg(ds, cfg["match.query"]), _alg(ds, cfg["match.map"])
    out = paths["eval"] / "matches"
    out.mkdir(parents=True, exist_ok=True)
    checksums = _checksums(paths)
    for i in ds.splits[cfg["eval.split"]]:
        pair = ds.pairs[i]
        ml = match_pipeline(pair.view(0, q.detector, q.descriptor), pair.view(1, m.detector, m.descriptor),
                            models.branches, models.codecs, opts)
        ml.checksums = checksums
        (out / f"{pair.scene_id}_{m.label.replace('/', '-')}_{q.label.replace('/', '-')}_{mode.value}.csv"
         ).write_text(ml.to_csv())
    _write_resolved(cfg, paths["eval"])
    print(f"wrote match lists to {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = _require_dataset(paths)
    models = _models(cfg, ds, paths)
    unknown = [m for m in cfg["eval.modes"] if m not in EVAL_MODES]
    if unknown:
        raise CliError(f"unknown eval modes {unknown}; choose from {list(EVAL_MODES)}", EXIT_USAGE)
    res = evaluate(ds, models, cfg["eval.split"], modes=cfg["eval.modes"], workers=args.workers,
                   keep_matches=cfg["eval.dump_matches"])
    edir = paths["eval"]
    checksums = _checksums(paths)
    header = [f"model {k} sha256={v}" for k, v in sorted(checksums.items())]
    _write_csv(edir / "report.csv", res.rows, header)
    summary = [{"config": c, "mode": m, **{k: v for k, v in s.items()}} for (c, m), s in
               sorted(summarize(res.rows).items())]
    _write_csv(edir / "summary_3px.csv", summary)
    if cfg["eval.dump_matches"]:
        mdir = edir / "matches"
        mdir.mkdir(parents=True, exist_ok=True)
        for (scene, config, mode), ml in res.matches.items():
            ml.checksums = checksums
            (mdir / f"{scene}_{config.replace('/', '-')}_{mode}.csv").write_text(ml.to_csv())
    from .plotting import plot_curves

    plot_curves(mean_curves(res.rows), edir)
    _write_resolved(cfg, edir)
    for config, mode, missing in res.skipped:
        print(f"skipped {config} {mode}: missing {', '.join(missing)}", file=sys.stderr)
    print(f"wrote {len(res.rows)} rows to {edir / 'report.csv'}")
    return EXIT_MISSING if res.skipped else EXIT_OK


def _rows_to_curves(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        out.append({"sequence": r["sequence"], "case": r["case"], "config": r["config"], "mode": r["mode"],
                    "threshold_px": int(r["threshold_px"]), "mma": float(r["mma"]),
                    "num_inliers": int(r["num_inliers"]), "num_matches": int(r["num_matches"])})
    return out


def cmd_plot(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    report = paths["eval"] / "report.csv"
    if not report.exists():
        raise CliError(f"missing {report}; run `crossfeat eval` first", EXIT_MISSING)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    from .plotting import plot_curves

    written = plot_curves(mean_curves(_rows_to_curves(_read_csv(report))), paths["eval"])
    print("\n".join(str(p) for p in written))
    return EXIT_OK


# ---------------------------------------------------------------------------
# timing


def synthetic_image(alg: AlgorithmId, num_features: int, rng: np.random.Generator,
                    width: int = 640, height: int = 480) -> FeatureSet:
    kp = np.column_stack([rng.uniform(0, width, num_features), rng.uniform(0, height, num_features),
                          rng.uniform(1.6, 12.0, num_features), rng.uniform(-np.pi, np.pi, num_features),
                          rng.uniform(0.2, 1.0, num_features)]).astype(np.float32)
    d = rng.normal(size=(num_features, alg.descriptor_dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return FeatureSet("bench", width, height, alg, kp, d.astype(np.float32))


def time_models(models: ModelSet, dataset, images: int, features: int, seed: int = 0,
                warmup: int = 5) -> list[dict]:
    """Per-image wall-clock of augmentation and query-to-map translation, in milliseconds."""
    rng = np.random.default_rng(seed)
    rows = []
    descs = [d.id for d in dataset.descriptors]
    for alg in dataset.algorithms():
        branch = models.branches[(alg.detector, alg.descriptor)]
        samples = []
        for i in range(warmup + images):
            fs = synthetic_image(alg, features, rng)
            t0 = time.perf_counter()
            augment_set(branch, fs)
            if i >= warmup:
                samples.append(1e3 * (time.perf_counter() - t0))
        rows.append(_timing_row("augmentation", alg.label, features, samples))
    for src in descs:
        dst = next((d for d in descs if d != src), src)
        alg = next(a for a in dataset.algorithms() if a.descriptor == src)
        samples = []
        for i in range(warmup + images):
            x = synthetic_image(alg, features, rng).descriptors
            t0 = time.perf_counter()
            decode(models.codecs[dst], encode(models.codecs[src], x))
            if i >= warmup:
                samples.append(1e3 * (time.perf_counter() - t0))
        rows.append(_timing_row("translation", f"{src}->{dst}", features, samples))
    return rows


def _timing_row(stage: str, model: str, features: int, samples: list[float]) -> dict:
    arr = np.asarray(samples)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"stage": stage, "model": model, "features": features, "samples": len(arr),
            "mean_ms": float(arr.mean()), "std_ms": std, "suspicious": std == 0.0}


def cmd_bench(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args.out)
    if args.dry_run:
        print(cfg.dump(), end="")
        return EXIT_OK
    ds = _require_dataset(paths)
    models = _models(cfg, ds, paths, need_augment=True, need_translate=True)
    torch.set_num_threads(1)
    rows = time_models(models, ds, cfg["bench.images"], cfg["bench.features"], cfg["seed"], cfg["bench.warmup"])
    bdir = args.out / "bench"
    _write_csv(bdir / "timing.csv", rows)
    _write_resolved(cfg, bdir)
    for r in rows:
        flag = "  (stddev 0: suspicious)" if r["suspicious"] else ""
        print(f"{r['stage']:<13} {r['model']:<14} {r['mean_ms']:8.2f} ± {r['std_ms']:6.2f} ms"
              f"  n={r['samples']}{flag}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train-augment": cmd_train_augment,
    "train-translate": cmd_train_translate,
    "match": cmd_match,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "plot": cmd_plot,
}


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel workers for evaluation")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs / restart training")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--stop-after", type=int, help="stop training after this many epochs (resumable)")
    parser = argparse.ArgumentParser(prog="crossfeat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("MATCHA_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
