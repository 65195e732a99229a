"""Experiment orchestration: folds, training with early stopping, per-plane prediction, fusion.

Everything random is driven by ``numpy.random.SeedSequence`` streams derived
from ``(config.seed, fold)``, so a config plus seed reproduces splits, logs,
checkpoints and reports byte for byte. Wall-clock timings go to a separate
``timing.json`` for that reason.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fusion as fz
from .augment import ElasticParams, elastic_deform
from .multiplanar import PlaneSet, extract_slices, map_back, sample_plane_set, stack_geometry
from .nncore import OptimState, activation_bytes, adam_step, backward, forward, loss, predict_proba
from .nncore.checkpoint import save_checkpoint
from .unetzoo import ArchSpec, build, count_params
from .volume import (LABEL, PhantomSpec, Volume, dice_per_class, load_volume,
                     make_phantom, robust_scale, save_volume)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class MemoryBudgetError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    """Every knob of an experiment; defaults are the full-scale setup.

    ``target_size`` is the square in-plane slice size in pixels (``None``
    picks the smallest size covering every view of every subject).
    ``run_folds`` limits which folds are trained (``None`` = all).
    ``memory_budget_bytes`` drives batch-size halving; ``None`` disables it.
    """

    arch: ArchSpec = field(default_factory=ArchSpec)
    planes: int = 3
    folds: int = 5
    split: tuple = (0.6, 0.2, 0.2)
    run_folds: tuple | None = None
    max_epochs: int = 500
    patience: int = 15
    train_images_per_epoch: int = 2500
    val_images_per_epoch: int = 3500
    batch_size: int = 16
    min_batch_size: int = 4
    memory_budget_bytes: int | None = None
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    l2: float = 1e-5
    augmentation: ElasticParams = field(default_factory=ElasticParams)
    target_size: int | None = None
    grid_spacing: float | None = None
    min_angle_deg: float = 60.0
    fusion_steps: int = 200
    fusion_step_size: float = 0.1
    fusion_max_voxels: int = 1_000_000
    predict_batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchSpec(**self.arch)
        if isinstance(self.augmentation, dict):
            aug = dict(self.augmentation)
            for key in ("smoothing_range", "magnitude_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            self.augmentation = ElasticParams(**aug)
        self.split = tuple(float(s) for s in self.split)
        if self.run_folds is not None:
            self.run_folds = tuple(int(f) for f in self.run_folds)
        self.validate()

    def validate(self):
        if self.planes not in (1, 3, 6):
            raise ConfigError("planes must be 1, 3 or 6")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ConfigError("split must be three positive fractions summing to 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.run_folds is not None and any(not 0 <= f < self.folds for f in self.run_folds):
            raise ConfigError(f"run_folds must lie in [0, {self.folds - 1}]")
        if not 4 <= self.min_batch_size <= self.batch_size <= 16:
            raise ConfigError("batch sizes must satisfy 4 <= min_batch_size <= batch_size <= 16")
        if self.max_epochs < 1 or not 0 < self.patience < self.max_epochs:
            raise ConfigError("need max_epochs >= 1 and 0 < patience < max_epochs")
        if self.train_images_per_epoch < 1 or self.val_images_per_epoch < 1:
            raise ConfigError("images per epoch must be positive")
        if self.target_size is not None and self.target_size < 1:
            raise ConfigError("target_size must be positive")
        if self.lr <= 0 or self.l2 < 0:
            raise ConfigError("lr must be > 0 and l2 >= 0")

    @property
    def num_classes(self):
        return self.arch.num_classes

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        d["run_folds"] = None if self.run_folds is None else list(self.run_folds)
        d["augmentation"] = {k: list(v) if isinstance(v, tuple) else v
                             for k, v in d["augmentation"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def merged(self, overrides: dict):
        """Copy with ``overrides`` applied; nested ``arch.*`` / ``augmentation.*`` keys allowed."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            target = d
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ConfigError(f"unknown config field {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config field {key!r}")
            target[parts[-1]] = value
        return type(self).from_dict(d)


def desk_config(seed=0, **overrides):
    """The small phantom experiment: unet2p at base 8, k=3, 15 epochs of 400/400 slices, one fold."""
    base = ExperimentConfig(
        arch=ArchSpec("unet2p", levels=5, base_channels=8, num_classes=4),
        planes=3, folds=5, run_folds=(0,), max_epochs=15, patience=14,
        train_images_per_epoch=400, val_images_per_epoch=400, batch_size=8, min_batch_size=4,
        lr=1e-3, target_size=48, seed=seed,
    )
    return base.merged(overrides) if overrides else base


# ------------------------------------------------------------------- folds

def make_folds(subject_ids, seed=0, folds=5, split=(0.6, 0.2, 0.2)):
    """Seeded rotation: shuffle, cut into ``folds`` groups, rotate test/validation/train.

    Fold ``f`` tests group ``f``, validates on the next ``round(split[1]*folds)``
    groups and trains on the rest, so every subject is tested exactly once.
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise DataError("subject ids must be unique")
    if len(ids) < folds:
        raise DataError(f"need at least {folds} subjects, got {len(ids)}")
    n_val = max(1, int(round(split[1] * folds)))
    n_test = max(1, int(round(split[2] * folds)))
    if n_test != 1:
        raise ConfigError("the rotation needs the test fraction to equal 1/folds")
    if n_val + n_test >= folds:
        raise ConfigError("split leaves no training groups")
    order = np.random.default_rng(seed).permutation(len(ids))
    groups = [[ids[i] for i in part] for part in np.array_split(order, folds)]
    out = []
    for f in range(folds):
        val = [s for g in range(1, n_val + 1) for s in groups[(f + g) % folds]]
        train = [s for g in range(n_val + 1, folds) for s in groups[(f + g) % folds]]
        out.append({"fold": f, "train": sorted(train), "val": sorted(val),
                    "test": sorted(groups[f])})
    return out


# ----------------------------------------------------------------- dataset

@dataclass
class Subject:
    id: str
    image: Volume     # robust-scaled
    label: Volume


def write_phantom_dataset(directory, n, shape=(48, 48, 48), num_classes=3, noise_sigma=0.3,
                          seed=0, spacing=(1.0, 1.0, 1.0)):
    """``n`` phantom subjects with jittered shell radii and semi-axes, plus ``manifest.json``."""
    if n < 1:
        raise DataError("need at least one subject")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = np.linspace(0.35, 0.85, num_classes) if num_classes > 1 else np.array([0.6])
    gap = 0.5 / max(num_classes - 1, 1)
    entries = []
    for i in range(n):
        radii = base + rng.uniform(-0.15, 0.15, num_classes) * gap
        radii = np.minimum(radii, 0.95)
        semi = rng.uniform(0.85, 1.0, 3)
        spec = PhantomSpec(tuple(shape), tuple(spacing), num_classes, tuple(radii), noise_sigma,
                           int(rng.integers(2 ** 31)), tuple(semi))
        image, label = make_phantom(spec)
        sid = f"subject_{i:03d}"
        save_volume(image, directory / f"{sid}_image")
        save_volume(label, directory / f"{sid}_label")
        counts = np.bincount(label.data.ravel(), minlength=num_classes + 1)
        entries.append({
            "id": sid, "image": f"{sid}_image", "label": f"{sid}_label",
            "class_counts": [int(c) for c in counts],
            "phantom": {"shell_radii": [float(r) for r in radii],
                        "semi_axes": [float(a) for a in semi], "seed": spec.seed},
        })
    manifest = {"num_classes": num_classes, "shape": list(shape), "spacing": list(spacing),
                "noise_sigma": noise_sigma, "seed": seed, "subjects": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                             encoding="utf-8")
    return manifest


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataError(f"dataset manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_subject(directory, entry, scale=True) -> Subject:
    directory = Path(directory)
    if not entry.get("label"):
        raise DataError(f"subject {entry['id']} has no label volume")
    try:
        image = load_volume(directory / entry["image"])
        label = load_volume(directory / entry["label"])
    except FileNotFoundError as exc:
        raise DataError(f"missing volume file: {exc.filename}") from None
    if label.kind != LABEL:
        raise DataError(f"{entry['label']} is not a label volume")
    if label.shape != image.shape:
        raise DataError(f"subject {entry['id']}: label and image shapes differ")
    return Subject(entry["id"], robust_scale(image) if scale else image, label)


def load_dataset(directory, ids=None):
    manifest = read_manifest(directory)
    wanted = None if ids is None else set(ids)
    subjects = {}
    for entry in manifest["subjects"]:
        if wanted is None or entry["id"] in wanted:
            subjects[entry["id"]] = load_subject(directory, entry)
    if wanted is not None and wanted - set(subjects):
        raise DataError(f"subjects not in dataset: {sorted(wanted - set(subjects))}")
    return subjects


# ------------------------------------------------------------------ slices

def resolve_target_size(config, subjects, ps: PlaneSet, divisor):
    """Configured size, or the smallest divisor-aligned square covering every view."""
    if config.target_size is not None:
        if config.target_size % divisor:
            raise ConfigError(f"target_size {config.target_size} must be divisible by {divisor}")
        return int(config.target_size)
    size = divisor
    for s in subjects:
        gs = config.grid_spacing or min(s.image.spacing)
        for i in range(ps.k):
            (_, w, h), _ = stack_geometry(s.image.shape, s.image.spacing, s.image.origin,
                                          ps.vectors[i], ps.in_plane_bases[i], gs, None, divisor)
            size = max(size, w, h)
    return int(size)


def build_pool(subjects, ps: PlaneSet, size, grid_spacing=None):
    """Slice stacks for every (subject, view) pair, in subject-major order."""
    pool = []
    for s in subjects:
        for view in range(ps.k):
            st = extract_slices(s.image, ps, view, (size, size), grid_spacing, label=s.label)
            pool.append((st.images.astype(np.float32), st.labels))
    return pool


def sample_slices(rng, pool, num_views, count):
    """``count`` (stack, slice) picks: subject, then view, then slice, each uniform."""
    num_subjects = len(pool) // num_views
    subj = rng.integers(num_subjects, size=count)
    view = rng.integers(num_views, size=count)
    stack = subj * num_views + view
    sizes = np.array([p[0].shape[0] for p in pool])
    slc = np.floor(rng.random(count) * sizes[stack]).astype(np.int64)
    return np.stack([stack, slc], axis=1)


def gather(pool, picks):
    images = np.stack([pool[s][0][i] for s, i in picks])[..., None]
    labels = np.stack([pool[s][1][i] for s, i in picks])
    return images, labels


# --------------------------------------------------------------- training

class EarlyStopping:
    """Track the best score; stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = None
        self.stale = 0

    def update(self, score, epoch):
        """Record ``score`` for ``epoch``; returns True when it is a new best."""
        if score > self.best_score:
            self.best_score, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self):
        return self.stale >= self.patience


def choose_batch_size(g, height, width, config):
    """Halve from ``batch_size`` until the activation estimate fits the memory budget."""
    bs = config.batch_size
    if config.memory_budget_bytes is None:
        return bs
    per_sample = activation_bytes(g, height, width)
    while bs * per_sample > config.memory_budget_bytes:
        bs //= 2
        if bs < config.min_batch_size:
            raise MemoryBudgetError(
                f"a batch of {config.min_batch_size} needs {config.min_batch_size * per_sample} "
                f"bytes, budget is {config.memory_budget_bytes}")
    return bs


def _streams(seed, fold):
    ss = np.random.SeedSequence([int(seed), int(fold)])
    init, sample, augment, val = ss.spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(sample),
            np.random.default_rng(augment), np.random.default_rng(val))


@dataclass
class TrainResult:
    graph: object
    log: list
    best_epoch: int
    best_dice: float
    batch_size: int
    stopped_early: bool


def snapshot(g):
    return ({k: v.copy() for k, v in g.params.items()},
            {k: v.copy() for k, v in g.buffers.items()})


def restore(g, snap):
    g.params = {k: v.copy() for k, v in snap[0].items()}
    g.buffers = {k: v.copy() for k, v in snap[1].items()}


def train_fold(config: ExperimentConfig, train_subjects, val_subjects, ps: PlaneSet, size,
               fold=0, progress=None) -> TrainResult:
    """Train one network on the training subjects, selecting the epoch by validation Dice.

    Only ``train_subjects`` feed the optimiser and only ``val_subjects`` the
    model selection.
    """
    init_seed, sample_rng, aug_rng, val_rng = _streams(config.seed, fold)
    g = build(config.arch, seed=init_seed)
    bs = choose_batch_size(g, size, size, config)
    train_pool = build_pool(train_subjects, ps, size, config.grid_spacing)
    val_pool = build_pool(val_subjects, ps, size, config.grid_spacing)
    val_x, val_y = gather(val_pool, sample_slices(val_rng, val_pool, ps.k,
                                                  config.val_images_per_epoch))
    opt = OptimState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    stopper = EarlyStopping(config.patience)
    best, log = None, []
    kernels = [n for n, (_, role) in g.param_info.items() if role == "kernel"]
    for epoch in range(1, config.max_epochs + 1):
        picks = sample_slices(sample_rng, train_pool, ps.k, config.train_images_per_epoch)
        losses = []
        for start in range(0, len(picks), bs):
            x, y = gather(train_pool, picks[start:start + bs])
            for i in range(len(x)):
                x[i, ..., 0], y[i] = elastic_deform(x[i, ..., 0], y[i], config.augmentation,
                                                    aug_rng)
            outs = forward(g, x, "train")
            lv = loss(outs, y, {n: g.params[n] for n in kernels}, config.l2)
            if not np.isfinite(lv.value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            adam_step(opt, g.params, backward(g, lv))
            losses.append(lv.value)
        probs = predict_proba(g, val_x, config.predict_batch_size)
        val_dice = mean_fg_dice(np.argmax(probs, axis=-1), val_y, config.num_classes)
        improved = stopper.update(val_dice, epoch)
        if improved:
            best = snapshot(g)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice,
               "improved": improved}
        log.append(row)
        if progress:
            progress(f"fold {fold} epoch {epoch}: loss {row['train_loss']:.4f} "
                     f"val dice {val_dice:.4f}{' *' if improved else ''}")
        if stopper.should_stop:
            break
    restore(g, best)
    return TrainResult(g, log, stopper.best_epoch, float(stopper.best_score), bs,
                       len(log) < config.max_epochs)


# -------------------------------------------------------------- prediction

def predict_subject(g, image: Volume, ps: PlaneSet, config: ExperimentConfig, size):
    """One ``(d0, d1, d2, C)`` probability volume per view of ``ps``."""
    if image.channels != g.input_channels:
        raise DataError("image channels do not match the network input")
    out = []
    for view in range(ps.k):
        st = extract_slices(image, ps, view, (size, size), config.grid_spacing)
        x = st.images.astype(np.float32)[..., None]
        probs = predict_proba(g, x, config.predict_batch_size)
        out.append(map_back(probs, st, image).astype(np.float32))
    return out


def plane_labels(prob_volumes):
    return [np.argmax(p, axis=-1).astype(np.uint8) for p in prob_volumes]


def mean_fg_dice(pred, truth, num_classes):
    """Mean Dice over the foreground classes ``1 .. num_classes-1``."""
    scores, _ = dice_per_class(pred, truth, num_classes - 1)
    return float(np.mean(list(scores.values())))


def run_fold(config: ExperimentConfig, dataset_dir, split, ps: PlaneSet, size, out_dir,
             progress=None):
    """Train, fit fusion on validation, evaluate fused test predictions; write fold outputs."""
    t0 = time.perf_counter()
    fold = split["fold"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = list(load_dataset(dataset_dir, split["train"]).values())
    val = load_dataset(dataset_dir, split["val"])
    result = train_fold(config, train, list(val.values()), ps, size, fold, progress)
    g = result.graph
    t_train = time.perf_counter() - t0

    C = config.num_classes
    val_probs, val_truth, plane_val = [], [], [[] for _ in range(ps.k)]
    for sid in split["val"]:
        probs = predict_subject(g, val[sid].image, ps, config, size)
        val_probs.append(probs)
        val_truth.append(val[sid].label.data)
        for k, lab in enumerate(plane_labels(probs)):
            plane_val[k].append(mean_fg_dice(lab, val[sid].label.data, C))
    fp = fz.fit_fusion(val_probs, val_truth, config.fusion_steps, config.fusion_step_size,
                       config.fusion_max_voxels, seed=config.seed + fold,
                       vectors=ps.vectors.tolist())
    fused_val = [mean_fg_dice(fz.fuse(p, fp)[1], t, C) for p, t in zip(val_probs, val_truth)]
    uniform = fz.FusionParams.uniform(ps.k, C)
    uniform_val = [mean_fg_dice(fz.fuse(p, uniform)[1], t, C) for p, t in zip(val_probs, val_truth)]
    del val_probs

    test = load_dataset(dataset_dir, split["test"])
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    test_rows, plane_test = [], [[] for _ in range(ps.k)]
    for sid in split["test"]:
        probs = predict_subject(g, test[sid].image, ps, config, size)
        truth = test[sid].label.data
        for k, lab in enumerate(plane_labels(probs)):
            plane_test[k].append(mean_fg_dice(lab, truth, C))
        _, fused = fz.fuse(probs, fp)
        save_volume(test[sid].label.with_data(fused), pred_dir / f"{sid}_fused")
        scores, empty = dice_per_class(fused, truth, C - 1)
        test_rows.append({"subject": sid, "dice": {str(c): v for c, v in scores.items()},
                          "empty_classes": empty, "mean": float(np.mean(list(scores.values())))})

    save_checkpoint(g, out_dir / "checkpoint")
    fp.save(out_dir / "fusion.json")
    with open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_dice", "improved"])
        w.writeheader()
        for row in result.log:
            w.writerow({**row, "train_loss": repr(row["train_loss"]),
                        "val_dice": repr(row["val_dice"]), "improved": int(row["improved"])})

    per_class = {str(c): float(np.mean([r["dice"][str(c)] for r in test_rows]))
                 for c in range(1, C)}
    return {
        "fold": fold,
        "split": split,
        "batch_size": result.batch_size,
        "epochs_run": len(result.log),
        "best_epoch": result.best_epoch,
        "best_val_slice_dice": result.best_dice,
        "stopped_early": result.stopped_early,
        "val": {
            "plane_mean_dice": [float(np.mean(d)) for d in plane_val],
            "fused_mean_dice": float(np.mean(fused_val)),
            "uniform_mean_dice": float(np.mean(uniform_val)),
        },
        "fusion": fp.info,
        "test": {
            "subjects": test_rows,
            "per_class_dice": per_class,
            "mean_dice": float(np.mean([r["mean"] for r in test_rows])),
            "plane_mean_dice": [float(np.mean(d)) for d in plane_test],
        },
        "timing": {"train_seconds": t_train, "total_seconds": time.perf_counter() - t0},
    }


def _run_fold_job(args):
    cfg_dict, dataset_dir, split, ps_dict, size, out_dir = args
    return run_fold(ExperimentConfig.from_dict(cfg_dict), dataset_dir, split,
                    PlaneSet.from_dict(ps_dict), size, out_dir)


def run_experiment(config: ExperimentConfig, dataset_dir, out_dir, jobs=1, progress=None):
    """Full cross-validated experiment; writes ``report.json``, ``report.csv`` and per-fold outputs.

    Returns the report dictionary. ``jobs > 1`` trains folds in separate
    processes; results do not depend on it.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(dataset_dir)
    if manifest.get("num_classes", config.num_classes - 1) + 1 != config.num_classes:
        raise ConfigError(f"dataset has {manifest['num_classes']} foreground classes but the "
                          f"network predicts {config.num_classes - 1}")
    ids = [e["id"] for e in manifest["subjects"]]
    splits = make_folds(ids, config.seed, config.folds, config.split)
    ps = sample_plane_set(config.planes, seed=config.seed, min_angle_deg=config.min_angle_deg)
    divisor = 2 ** (config.arch.levels - 1)
    first = load_subject(dataset_dir, manifest["subjects"][0])
    size = resolve_target_size(config, [first], ps, divisor)
    folds = list(config.run_folds) if config.run_folds is not None else list(range(config.folds))
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
    (out_dir / "folds.json").write_text(json.dumps(splits, indent=2) + "\n", encoding="utf-8")
    (out_dir / "planes.json").write_text(json.dumps(ps.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")

    if jobs > 1 and len(folds) > 1:
        args = [(config.to_dict(), str(dataset_dir), splits[f], ps.to_dict(), size,
                 str(out_dir / f"fold_{f}")) for f in folds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, args))
    else:
        results = [run_fold(config, dataset_dir, splits[f], ps, size, out_dir / f"fold_{f}",
                            progress) for f in folds]

    timing = {"folds": {str(r["fold"]): r.pop("timing") for r in results},
              "total_seconds": time.perf_counter() - t0}
    params, _ = count_params(build(config.arch, materialize=False))
    report = make_report(config, results, params, size, ps)
    write_report(report, out_dir)
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return report


# ------------------------------------------------------------------ report

def make_report(config, fold_results, params, size, ps):
    C = config.num_classes
    per_class = {str(c): float(np.mean([r["test"]["per_class_dice"][str(c)]
                                        for r in fold_results])) for c in range(1, C)}
    return {
        "arch": config.arch.name,
        "variant": config.arch.variant,
        "planes": config.planes,
        "params": int(params),
        "target_size": size,
        "plane_vectors": ps.vectors.tolist(),
        "folds": fold_results,
        "aggregate": {
            "per_class_dice": per_class,
            "mean_dice": float(np.mean([r["test"]["mean_dice"] for r in fold_results])),
            "n_folds": len(fold_results),
            "n_subjects": int(sum(len(r["test"]["subjects"]) for r in fold_results)),
        },
    }


REPORT_FIELDS = ["row_type", "arch", "planes", "fold", "class", "dice", "n_subjects", "params"]


def report_rows(report):
    base = {"arch": report["arch"], "planes": report["planes"], "params": report["params"]}
    rows = []
    for r in report["folds"]:
        n = len(r["test"]["subjects"])
        for c, d in r["test"]["per_class_dice"].items():
            rows.append({**base, "row_type": "fold_class", "fold": r["fold"], "class": c,
                         "dice": d, "n_subjects": n})
        rows.append({**base, "row_type": "fold_mean", "fold": r["fold"], "class": "mean",
                     "dice": r["test"]["mean_dice"], "n_subjects": n})
    agg = report["aggregate"]
    for c, d in agg["per_class_dice"].items():
        rows.append({**base, "row_type": "aggregate_class", "fold": "all", "class": c, "dice": d,
                     "n_subjects": agg["n_subjects"]})
    rows.append({**base, "row_type": "aggregate", "fold": "all", "class": "mean",
                 "dice": agg["mean_dice"], "n_subjects": agg["n_subjects"]})
    return rows


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in report_rows(report):
            w.writerow({**row, "dice": f"{row['dice']:.6f}"})


def subject_scores(report):
    """Long-format per-subject, per-class test Dice rows for the stats tools."""
    rows = []
    for r in report["folds"]:
        for s in r["test"]["subjects"]:
            for c, d in s["dice"].items():
                rows.append({"method": report["arch"], "planes": report["planes"],
                             "fold": r["fold"], "subject": s["subject"], "class": c, "dice": d})
    return rows
