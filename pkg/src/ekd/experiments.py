"""Pretrain -> joint EKD -> evaluate pipelines, sweeps, and persisted metrics.

A run directory holds::

    manifest.json     resolved config, config hash, status of every stage
    metrics.jsonl     one MetricsRecord per line, appended as runs finish
    trace.jsonl       per-epoch trace rows, streamed while training
    features-*.tsv    optional feature dumps (sample, label, branch, f0..)
"""
from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from . import data as data_mod
from .config import ExperimentConfig, config_hash
from .estimators import EKDClassifier, ResNetClassifier, derive_seed
from .exceptions import ConfigError
from .models import ModelSpec, count_flops

log = logging.getLogger(__name__)

AXES = ("data_fraction", "ensemble_size")


@dataclass
class MetricsRecord:
    run_id: str
    config_hash: str
    seed: int
    variant: str
    dataset: str
    data_fraction: float
    ensemble_size: int
    teachers: str
    trace: list
    eval: dict
    param_count: int
    flop_count: int
    wall_time: float
    sweep_id: Optional[str] = None
    teacher_evals: list = field(default_factory=list)
    feature_dump: Optional[str] = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    @property
    def accuracy(self):
        return self.eval["top1_ensemble"]


def load_datasets(config: ExperimentConfig, seed):
    """Train/test splits for ``config``, with the train split subsampled by ``data_fraction``."""
    if config.dataset == "synthetic":
        shape = (config.synthetic_image_size, config.synthetic_image_size, 3)
        # means are shared across seeds and splits; noise differs
        train = data_mod.synthetic_blobs(
            config.synthetic_num_classes, config.synthetic_per_class, shape,
            config.synthetic_separation, seed=derive_seed(seed, 101), split_name="train", means_seed=0,
        )
        test = data_mod.synthetic_blobs(
            config.synthetic_num_classes, config.synthetic_test_per_class, shape,
            config.synthetic_separation, seed=derive_seed(seed, 102), split_name="test", means_seed=0,
        )
    else:
        train = data_mod.load_cifar(config.dataset, "train", config.data_root, config.label_mode)
        test = data_mod.load_cifar(config.dataset, "test", config.data_root, config.label_mode)
    train = data_mod.stratified_subsample(train, config.data_fraction, seed)
    return train, test


def _estimator_kwargs(config: ExperimentConfig, seed):
    return dict(
        stage_widths=config.stage_widths,
        lr=config.base_lr,
        lr_drop_points=config.lr_drop_points,
        drop_factor=config.drop_factor,
        weight_decay=config.weight_decay,
        batch_size=config.batch_size,
        augment=config.augment,
        init_std=config.init_std,
        eval_batch_size=config.eval_batch_size,
        random_state=seed,
    )


class _RunWriter:
    def __init__(self, run_dir: Path, config: ExperimentConfig, run_id, sweep_id=None):
        self.dir = run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "run_id": run_id,
            "sweep_id": sweep_id,
            "config_hash": config_hash(config),
            "config": config.to_dict(),
            "stages": [],
            "status": "running",
        }
        self._flush()

    def _flush(self):
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        tmp.replace(self.dir / "manifest.json")

    def stage(self, name, seed, status, **info):
        self.manifest["stages"].append({"stage": name, "seed": seed, "status": status, **info})
        self._flush()

    def trace_callback(self, stage, seed):
        path = self.dir / "trace.jsonl"

        def write(row):
            with open(path, "a") as fh:
                fh.write(json.dumps({"stage": stage, "seed": seed, **row.to_dict()}, sort_keys=True) + "\n")

        return write

    def record(self, rec: MetricsRecord):
        with open(self.dir / "metrics.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")

    def finish(self, status):
        self.manifest["status"] = status
        self._flush()


def run_experiment(config: ExperimentConfig, run_dir=None, sweep_id=None) -> List[MetricsRecord]:
    """Run every seed of ``config``: subsample, pretrain teachers, train EKD, evaluate.

    With ``compare_no_ekd`` the same student is also trained with
    ``alpha = gamma = 0`` (cross-entropy only) as a control. Records are
    appended to ``metrics.jsonl`` in the run directory as they complete.
    """
    chash = config_hash(config)
    run_id = f"{config.name}-{chash[:8]}"
    run_dir = Path(run_dir) if run_dir is not None else Path(config.output_dir) / run_id
    writer = _RunWriter(run_dir, config, run_id, sweep_id)
    records = []
    try:
        for seed in config.seeds:
            records.extend(_run_seed(config, seed, writer, run_id, chash, sweep_id))
    except Exception as exc:
        writer.stage("error", None, "failed", error=f"{type(exc).__name__}: {exc}",
                     traceback=traceback.format_exc())
        writer.finish("failed")
        raise
    writer.finish("complete")
    return records


def _run_seed(config, seed, writer, run_id, chash, sweep_id):
    train, test = load_datasets(config, seed)
    writer.stage("data", seed, "ok", train_size=len(train), test_size=len(test),
                 class_counts=train.class_counts().tolist())
    X, y = train.images, train.labels
    eval_set = (test.images, test.labels)
    kw = _estimator_kwargs(config, seed)
    h, w, c = train.image_shape
    student_spec = ModelSpec(config.student_depth, train.num_classes, config.stage_widths, c)
    params = None
    flops = count_flops([student_spec] * config.n_branches, (h, w, c))
    common = dict(
        run_id=run_id, config_hash=chash, seed=seed, dataset=config.dataset,
        data_fraction=config.data_fraction, ensemble_size=config.n_branches,
        teachers=config.teacher_label(), flop_count=flops, sweep_id=sweep_id,
    )
    out = []

    # teachers
    teachers, teacher_evals = [], []
    for i, depth in enumerate(config.teacher_depths):
        start = time.perf_counter()
        t = ResNetClassifier(
            depth=depth, epochs=config.pretrain_epochs,
            max_steps=config.pretrain_max_steps or None,
            callback=writer.trace_callback(f"pretrain-T{i + 1}", seed),
            **{**kw, "random_state": derive_seed(seed, i + 1)},
        ).fit(X, y, eval_set)
        report = t.evaluate(*eval_set, dataset_id=f"{config.dataset}-test", model_id=f"ResNet{depth}")
        teacher_evals.append(report.to_dict())
        writer.stage(f"pretrain-T{i + 1}", seed, "ok", depth=depth, accuracy=report.top1_ensemble,
                     seconds=time.perf_counter() - start)
        teachers.append(t)

    start = time.perf_counter()
    ekd = EKDClassifier(
        student_depth=config.student_depth, n_branches=config.n_branches,
        teacher_depths=config.teacher_depths, alpha=config.alpha, beta=config.beta,
        gamma=config.gamma, temperature=config.temperature, soften_student=config.soften_student,
        epochs=config.epochs, freeze_teachers=config.freeze_teachers,
        teacher_objective=config.teacher_objective, teachers=teachers,
        max_steps=config.max_steps or None,
        callback=writer.trace_callback("ekd", seed), **kw,
    ).fit(X, y, eval_set)
    report = ekd.evaluate(*eval_set, dataset_id=f"{config.dataset}-test",
                          model_id=f"ResNet{config.student_depth}x{config.n_branches}+EKD")
    params = ekd.n_params_
    dump_path = _maybe_dump(config, writer, ekd, test, seed, "ekd")
    writer.stage("ekd", seed, "ok", accuracy=report.top1_ensemble, seconds=time.perf_counter() - start)
    rec = MetricsRecord(variant="ekd", trace=ekd.trace_.to_list(), eval=report.to_dict(),
                        param_count=params, wall_time=time.perf_counter() - start,
                        teacher_evals=teacher_evals, feature_dump=dump_path, **common)
    writer.record(rec)
    out.append(rec)

    if config.compare_no_ekd:
        start = time.perf_counter()
        control = ResNetClassifier(
            depth=config.student_depth, n_branches=config.n_branches, epochs=config.epochs,
            ce_weight=config.beta, max_steps=config.max_steps or None,
            callback=writer.trace_callback("no_ekd", seed), **kw,
        ).fit(X, y, eval_set)
        report = control.evaluate(*eval_set, dataset_id=f"{config.dataset}-test",
                                  model_id=f"ResNet{config.student_depth}x{config.n_branches}")
        dump_path = _maybe_dump(config, writer, control, test, seed, "no_ekd")
        writer.stage("no_ekd", seed, "ok", accuracy=report.top1_ensemble, seconds=time.perf_counter() - start)
        rec = MetricsRecord(variant="no_ekd", trace=control.trace_.to_list(), eval=report.to_dict(),
                            param_count=control.n_params_, wall_time=time.perf_counter() - start,
                            feature_dump=dump_path, **common)
        writer.record(rec)
        out.append(rec)
    return out


def _maybe_dump(config, writer, estimator, test, seed, variant):
    if not config.dump_features:
        return None
    dump = estimator.feature_dump(test.images, test.labels)
    path = writer.dir / f"features-{variant}-seed{seed}.tsv"
    dump.to_tsv(path)
    return str(path)


def sweep_configs(config: ExperimentConfig, axis, values):
    """Derived configs, one per value; ensemble sizes take prefixes of ``teacher_depths``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(AXES)}, got {axis!r}")
    out = []
    for v in values:
        if axis == "data_fraction":
            out.append(config.replace(data_fraction=float(v)))
        else:
            k = int(v)
            if not 1 <= k <= len(config.teacher_depths):
                raise ConfigError(
                    f"ensemble size {k} needs at least {k} teachers; config lists {len(config.teacher_depths)}"
                )
            out.append(config.replace(n_branches=k, teacher_depths=config.teacher_depths[:k]))
    return out


def sweep(config: ExperimentConfig, axis, values, root=None) -> List[MetricsRecord]:
    """One :func:`run_experiment` per value, sharing seeds, grouped under one sweep id."""
    configs = sweep_configs(config, axis, values)
    sweep_id = f"sweep-{axis}-{config_hash(config)[:8]}"
    root = Path(root) if root is not None else Path(config.output_dir) / sweep_id
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps(
        {"sweep_id": sweep_id, "axis": axis, "values": list(values), "base_config": config.to_dict()},
        indent=2, sort_keys=True,
    ))
    records = []
    for v, cfg in zip(values, configs):
        records.extend(run_experiment(cfg, root / f"{axis}={v}", sweep_id))
    return records


def _completed(metrics_file: Path):
    manifest = metrics_file.parent / "manifest.json"
    if not manifest.exists():
        return True
    return json.loads(manifest.read_text()).get("status") == "complete"


def load_records(paths) -> List[MetricsRecord]:
    """Read every ``metrics.jsonl`` found at or below the given paths.

    Files whose run manifest is not marked complete (still running, or
    failed) are skipped with a warning.
    """
    records = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("metrics.jsonl"))
        for f in files:
            if not _completed(f):
                log.warning("skipping %s: run is not complete", f)
                continue
            with open(f) as fh:
                records.extend(MetricsRecord.from_json(line) for line in fh if line.strip())
    return records
