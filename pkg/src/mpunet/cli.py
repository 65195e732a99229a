"""``mpunet`` command line: phantoms, splits, training, prediction, fusion, evaluation, statistics.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Config values resolve as flags > config file > preset.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import evalstats, fusion, pipeline
from .multiplanar import PlaneSamplingError, PlaneSet
from .nncore import load_checkpoint, save_checkpoint
from .unetzoo import VARIANTS, ArchSpec, audit, build, count_params
from .volume import (INTENSITY, DegenerateDistributionError, VolumeFormatError, dice_per_class,
                     fp_fn_projection, load_volume, read_container, save_volume, write_container,
                     write_count_map)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mpunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _manifest(out_dir, args, **extra):
    """Echo the invocation (and resolved config, if any) next to the outputs."""
    entry = {"command": args.command,
             "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}}
    entry.update(extra)
    _write_json(Path(out_dir) / "run_manifest.json", entry)


# ------------------------------------------------------------------ config

PRESETS = {"full": lambda seed: pipeline.ExperimentConfig(seed=seed),
           "desk": lambda seed: pipeline.desk_config(seed=seed)}


def _parse_set(items):
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


def resolve_config(args):
    """Preset defaults, then the config file, then explicit flags."""
    seed = args.seed if args.seed is not None else 0
    cfg = PRESETS[args.preset](seed)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_values = json.loads(path.read_text(encoding="utf-8"))
        cfg = cfg.merged(_flatten(file_values))
    flags = _parse_set(getattr(args, "set", None))
    for name in ("seed", "planes", "max_epochs", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    return cfg.merged(flags) if flags else cfg


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict) and k in ("arch", "augmentation"):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _seed_dir(out, seed):
    path = Path(out) / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# ----------------------------------------------------------------- commands

def cmd_phantom(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    manifest = pipeline.write_phantom_dataset(args.out, args.n, tuple(args.shape), args.classes,
                                              args.noise, args.seed)
    _manifest(args.out, args)
    print(f"wrote {len(manifest['subjects'])} subjects to {args.out}")


def cmd_split(args):
    manifest = pipeline.read_manifest(args.dataset)
    ids = [e["id"] for e in manifest["subjects"]]
    folds = pipeline.make_folds(ids, args.seed, args.folds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, folds)
    for f in folds:
        print(f"fold {f['fold']}: {len(f['train'])} train / {len(f['val'])} val / "
              f"{len(f['test'])} test")


def cmd_params(args):
    spec = ArchSpec(args.variant, args.ds, args.levels, args.base, 3, args.channels,
                    args.classes, args.sqrt2, args.cat)
    g = build(spec, materialize=False)
    total, _ = count_params(g)
    rows = audit(spec, g)
    fields = ["variant", "stage", "formula", "graph", "delta"]
    out = open(args.csv, "w", newline="", encoding="utf-8") if args.csv else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({"variant": spec.name, **r})
    finally:
        if args.csv:
            out.close()
    print(f"# total parameters: {total}", file=sys.stderr)
    bad = [r for r in rows if r["delta"]]
    if bad:
        print(f"{len(bad)} stage(s) disagree with the closed form", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _dataset_check(path):
    if not Path(path).is_dir():
        raise pipeline.DataError(f"dataset directory not found: {path}")


def cmd_run(args):
    cfg = resolve_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    _dataset_check(args.dataset)
    out = _seed_dir(args.out, cfg.seed)
    _manifest(out, args, config=cfg.to_dict())
    report = pipeline.run_experiment(cfg, args.dataset, out, jobs=args.jobs, progress=log.info)
    agg = report["aggregate"]
    print(f"{report['arch']} k={report['planes']}: mean test Dice {agg['mean_dice']:.4f} over "
          f"{agg['n_folds']} fold(s); report in {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    _dataset_check(args.dataset)
    manifest = pipeline.read_manifest(args.dataset)
    splits = pipeline.make_folds([e["id"] for e in manifest["subjects"]], cfg.seed, cfg.folds,
                                 cfg.split)
    if not 0 <= args.fold < len(splits):
        raise UsageError(f"--fold must lie in [0, {len(splits) - 1}]")
    split = splits[args.fold]
    ps = pipeline.sample_plane_set(cfg.planes, seed=cfg.seed, min_angle_deg=cfg.min_angle_deg)
    train = list(pipeline.load_dataset(args.dataset, split["train"]).values())
    val = list(pipeline.load_dataset(args.dataset, split["val"]).values())
    size = pipeline.resolve_target_size(cfg, train[:1], ps, 2 ** (cfg.arch.levels - 1))
    out = _seed_dir(args.out, cfg.seed) / f"fold_{args.fold}"
    out.mkdir(parents=True, exist_ok=True)
    _manifest(out, args, config=cfg.to_dict())
    result = pipeline.train_fold(cfg, train, val, ps, size, args.fold, progress=log.info)
    save_checkpoint(result.graph, out / "checkpoint")
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "planes.json", ps.to_dict())
    _write_json(out / "model.json", {"fold": args.fold, "split": split, "target_size": size,
                                     "best_epoch": result.best_epoch,
                                     "best_val_dice": result.best_dice,
                                     "batch_size": result.batch_size})
    _write_json(out / "train_log.json", result.log)
    print(f"best epoch {result.best_epoch}, validation Dice {result.best_dice:.4f}; model in {out}")


def _load_model(model_dir):
    model_dir = Path(model_dir)
    for name in ("config.json", "planes.json", "model.json", "checkpoint.json"):
        if not (model_dir / name).is_file():
            raise pipeline.DataError(f"model directory lacks {name}: {model_dir}")
    cfg = pipeline.ExperimentConfig.load(model_dir / "config.json")
    ps = PlaneSet.from_dict(json.loads((model_dir / "planes.json").read_text(encoding="utf-8")))
    meta = json.loads((model_dir / "model.json").read_text(encoding="utf-8"))
    g = load_checkpoint(build(cfg.arch), model_dir / "checkpoint")
    return cfg, ps, meta, g


def _subject_ids(args, manifest, meta=None):
    if args.subjects:
        return list(args.subjects)
    if meta is not None and args.split_part:
        return meta["split"][args.split_part]
    return [e["id"] for e in manifest["subjects"]]


def cmd_predict(args):
    cfg, ps, meta, g = _load_model(args.model)
    manifest = pipeline.read_manifest(args.dataset)
    ids = _subject_ids(args, manifest, meta)
    subjects = pipeline.load_dataset(args.dataset, ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        s = subjects[sid]
        probs = pipeline.predict_subject(g, s.image, ps, cfg, meta["target_size"])
        sub = out / sid
        sub.mkdir(exist_ok=True)
        for k, p in enumerate(probs):
            write_container(sub / f"plane_{k}", p, s.image.spacing, s.image.origin, INTENSITY,
                            channels=p.shape[-1])
        print(f"{sid}: {len(probs)} plane predictions")
    _write_json(out / "planes.json", ps.to_dict())
    _manifest(out, args, config=cfg.to_dict())


def _read_planes(pred_dir, sid):
    sub = Path(pred_dir) / sid
    files = sorted(sub.glob("plane_*.hdr"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise pipeline.DataError(f"no plane predictions for {sid} in {sub}")
    return [read_container(f)[0] for f in files]


def _pred_subjects(pred_dir, wanted=None):
    ids = sorted(p.name for p in Path(pred_dir).iterdir() if p.is_dir())
    if wanted:
        missing = set(wanted) - set(ids)
        if missing:
            raise pipeline.DataError(f"no predictions for {sorted(missing)} in {pred_dir}")
        ids = list(wanted)
    if not ids:
        raise pipeline.DataError(f"no subject predictions in {pred_dir}")
    return ids


def _truth(dataset, sid):
    entries = {e["id"]: e for e in pipeline.read_manifest(dataset)["subjects"]}
    if sid not in entries:
        raise pipeline.DataError(f"subject {sid} not in dataset {dataset}")
    return load_volume(Path(dataset) / entries[sid]["label"])


def cmd_fuse_fit(args):
    ids = _pred_subjects(args.predictions, args.subjects)
    probs = [_read_planes(args.predictions, sid) for sid in ids]
    truth = [_truth(args.dataset, sid).data for sid in ids]
    planes_file = Path(args.predictions) / "planes.json"
    vectors = (json.loads(planes_file.read_text(encoding="utf-8"))["vectors"]
               if planes_file.is_file() else None)
    fp = fusion.fit_fusion(probs, truth, args.steps, args.step_size, args.max_voxels, args.seed,
                           vectors)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fp.save(out)
    info = fp.info
    print(f"fit-set cross-entropy {info['initial_loss']:.5f} -> {info['final_loss']:.5f}")


def cmd_evaluate(args):
    ids = _pred_subjects(args.predictions, args.subjects)
    fp = fusion.FusionParams.load(args.fusion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sid in ids:
        truth = _truth(args.dataset, sid)
        _, labels = fusion.fuse(_read_planes(args.predictions, sid), fp)
        save_volume(truth.with_data(labels), out / f"{sid}_fused")
        k = fp.num_classes - 1
        scores, empty = dice_per_class(labels, truth.data, k)
        for c, d in scores.items():
            rows.append({"method": args.method, "subject": sid, "class": c, "dice": f"{d:.6f}",
                         "empty": int(c in empty)})
            for axis in args.project_axes:
                fp_map, fn_map = fp_fn_projection(labels, truth.data, c, axis)
                write_count_map(fp_map, out / f"{sid}_class{c}_axis{axis}_fp")
                write_count_map(fn_map, out / f"{sid}_class{c}_axis{axis}_fn")
    with open(out / "dice.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "subject", "class", "dice", "empty"])
        w.writeheader()
        w.writerows(rows)
    mean = np.mean([float(r["dice"]) for r in rows])
    print(f"mean foreground Dice over {len(ids)} subject(s): {mean:.4f}")
    _manifest(out, args)


def read_scores(path):
    """``{dataset: {method: {(subject, class): dice}}}`` from a long-format CSV."""
    path = Path(path)
    if not path.is_file():
        raise pipeline.DataError(f"scores file not found: {path}")
    table = defaultdict(lambda: defaultdict(dict))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"method", "subject", "class", "dice"}
        if not reader.fieldnames or need - set(reader.fieldnames):
            raise pipeline.DataError(f"{path} needs columns {sorted(need)}")
        for row in reader:
            table[row.get("dataset", "") or ""][row["method"]][(row["subject"], row["class"])] = \
                float(row["dice"])
    return table


def cmd_stats(args):
    table = read_scores(args.scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    box_rows = []
    for dataset, methods in sorted(table.items()):
        names = sorted(methods)
        keys = sorted(set.intersection(*(set(m) for m in methods.values())))
        if len(keys) < 2:
            raise pipeline.DataError(f"dataset {dataset!r}: fewer than two paired samples")
        samples = {n: np.array([methods[n][k] for k in keys]) for n in names}
        for test in ("t", "rank_sum", "signed_rank"):
            names_, m = evalstats.pvalue_matrix(samples, test)
            tag = f"{dataset}_" if dataset else ""
            evalstats.write_pvalue_csv(out / f"{tag}pvalues_{test}.csv", names_, m, dataset, test)
        for n in names:
            b = evalstats.box_stats(samples[n])
            box_rows.append({"dataset": dataset, "method": n,
                             **{k: v for k, v in b.items() if k != "outliers"},
                             "outliers": " ".join(f"{v:.6g}" for v in b["outliers"])})
    with open(out / "box_stats.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(box_rows[0]))
        w.writeheader()
        w.writerows(box_rows)
    print(f"wrote p-value matrices and box statistics to {out}")
    _manifest(out, args)


# ------------------------------------------------------------------ parser

def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full",
                   help="defaults underneath the config file (default: full)")
    p.add_argument("--seed", type=int)
    p.add_argument("--planes", type=int, choices=(1, 3, 6))
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. arch.variant=unet3p (repeatable)")


def build_parser():
    parser = _Parser(prog="mpunet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--shape", type=int, nargs=3, default=[48, 48, 48])
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("split", help="write the 5-fold train/val/test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("params", help="closed-form vs graph parameter table (CSV)")
    p.add_argument("--variant", choices=VARIANTS, default="unet2p")
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--base", type=int, default=32)
    p.add_argument("--classes", type=int, default=8, help="output classes incl. background")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--cat", type=int, default=64, help="UNet3+ per-scale channels")
    p.add_argument("--ds", action="store_true", help="deep supervision")
    p.add_argument("--sqrt2", action="store_true", help="sqrt(2) filter scaling (unet only)")
    p.add_argument("--csv", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("run", help="end-to-end cross-validated experiment")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="outputs go to OUT/seed_<seed>")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train one fold")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True, help="model goes to OUT/seed_<seed>/fold_<fold>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-plane probability volumes from a trained model")
    p.add_argument("--model", required=True, help="directory written by 'train'")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", nargs="*")
    p.add_argument("--split-part", choices=("train", "val", "test"),
                   help="predict this part of the model's fold split")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse-fit", help="fit fusion weights on validation predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="fusion JSON path")
    p.add_argument("--subjects", nargs="*")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", dest="step_size", type=float, default=0.1)
    p.add_argument("--max-voxels", dest="max_voxels", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse_fit)

    p = sub.add_parser("evaluate", help="fuse, score and project errors")
    p.add_argument("--predictions", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", nargs="*")
    p.add_argument("--method", default="model", help="method name written to dice.csv")
    p.add_argument("--project-axes", dest="project_axes", type=int, nargs="*", default=[0],
                   choices=(0, 1, 2))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="p-value matrices and box statistics from a scores CSV")
    p.add_argument("--scores", required=True,
                   help="CSV with columns method, subject, class, dice[, dataset]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


_DATA_ERRORS = (pipeline.DataError, VolumeFormatError, DegenerateDistributionError,
                FileNotFoundError, fusion.FusionError, json.JSONDecodeError)
_NUMERIC_ERRORS = (FloatingPointError, PlaneSamplingError, pipeline.MemoryBudgetError,
                   evalstats.StatsError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        code = args.func(args)
    except (UsageError, pipeline.ConfigError) as exc:
        print(f"mpunet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"mpunet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"mpunet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors come from argument values the parser cannot check
        print(f"mpunet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
