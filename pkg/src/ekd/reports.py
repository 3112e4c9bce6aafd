"""Tables and figures built from persisted MetricsRecords.

Numbers are read from record fields as stored; nothing is recomputed from
models at render time.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .evaluation import FeatureDump, project_2d
from .exceptions import ComparabilityError

KINDS = ("table", "accuracy_curve", "embedding_scatter")
TABLE_COLUMNS = ("ES", "Teachers", "no EKD", "with EKD", "No. of param (million)", "No. of FLOPS (million)")


def mean_std(values, precision=2):
    """``"mean ± std"`` of accuracies given as fractions, printed in percent (sample std)."""
    pct = np.asarray(values, dtype=np.float64) * 100
    if pct.size == 0:
        return "-"
    std = pct.std(ddof=1) if pct.size > 1 else 0.0
    return f"{pct.mean():.{precision}f} ± {std:.{precision}f}"


def _one(values, what):
    values = set(values)
    if len(values) != 1:
        raise ComparabilityError(f"records mix {what}: {sorted(map(str, values))}")
    return values.pop()


def emit_report(records, kind, path, precision=2):
    """Write a report of ``kind`` to ``path`` and return the list of files written."""
    records = list(records)
    if not records:
        raise ComparabilityError("no records to report")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {', '.join(KINDS)}")
    _one((r.dataset for r in records), "datasets")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if kind == "table":
        return [_table(records, path, precision)]
    if kind == "accuracy_curve":
        return _curve(records, path)
    return _scatter(records, path)


def _table(records, path, precision):
    _one((r.data_fraction for r in records), "data fractions")
    groups = defaultdict(lambda: {"ekd": [], "no_ekd": []})
    meta = {}
    for r in records:
        groups[r.ensemble_size][r.variant].append(r.accuracy)
        m = meta.setdefault(r.ensemble_size, {"teachers": r.teachers, "params": set(), "flops": set()})
        m["params"].add(r.param_count)
        m["flops"].add(r.flop_count)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for es in sorted(groups):
            m = meta[es]
            params = _one(m["params"], f"parameter counts at ES={es}")
            flops = _one(m["flops"], f"FLOP counts at ES={es}")
            w.writerow([
                es,
                m["teachers"],
                mean_std(groups[es]["no_ekd"], precision),
                mean_std(groups[es]["ekd"], precision),
                f"{params / 1e6:.2f}",
                f"{flops / 1e6:.2f}",
            ])
    return path


def _axis_of(records):
    fractions = {r.data_fraction for r in records}
    sizes = {r.ensemble_size for r in records}
    if len(fractions) > 1 and len(sizes) > 1:
        raise ComparabilityError("records vary both data fraction and ensemble size")
    return "ensemble_size" if len(sizes) > 1 else "data_fraction"


def _curve(records, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    axis = _axis_of(records)
    groups = defaultdict(list)
    for r in records:
        groups[(r.variant, getattr(r, axis))].append(r.accuracy * 100)
    data_path = path.with_suffix(".tsv")
    rows = []
    for (variant, x), accs in sorted(groups.items()):
        accs = np.asarray(accs)
        std = accs.std(ddof=1) if accs.size > 1 else 0.0
        rows.append((variant, x, accs.mean(), std, accs.size))
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["variant", axis, "mean_acc", "std_acc", "n_seeds"])
        for variant, x, mean, std, n in rows:
            w.writerow([variant, x, f"{mean:.4f}", f"{std:.4f}", n])

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = {"ekd": "with EKD", "no_ekd": "no EKD"}
    for variant in sorted({r[0] for r in rows}):
        pts = [r for r in rows if r[0] == variant]
        xs = [p[1] for p in pts]
        ax.errorbar(xs, [p[2] for p in pts], yerr=[p[3] for p in pts], marker="o",
                    capsize=3, label=labels.get(variant, variant))
    ax.set_xlabel("fraction of training data" if axis == "data_fraction" else "ensemble size")
    ax.set_ylabel("mean test accuracy (%)")
    ax.legend()
    fig.tight_layout()
    img_path = path.with_suffix(".png")
    fig.savefig(img_path, dpi=120)
    plt.close(fig)
    return [img_path, data_path]


def _scatter(records, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dumped = [r for r in records if r.feature_dump]
    if not dumped:
        raise ComparabilityError("no record carries a feature dump; run with dump_features = true")
    fig, axes = plt.subplots(1, len(dumped), figsize=(4 * len(dumped), 4), squeeze=False)
    data_path = path.with_suffix(".tsv")
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["panel", "variant", "seed", "label", "x", "y"])
        for i, (ax, r) in enumerate(zip(axes[0], dumped)):
            proj = project_2d(FeatureDump.from_tsv(r.feature_dump).combined())
            ax.scatter(proj.coords[:, 0], proj.coords[:, 1], c=proj.labels, cmap="tab10", s=4)
            title = f"{r.variant}, ES={r.ensemble_size}, seed {r.seed}"
            ax.set_title(title + (" (degenerate)" if proj.degenerate else ""), fontsize=9)
            for lab, (x, y) in zip(proj.labels, proj.coords):
                w.writerow([i, r.variant, r.seed, int(lab), f"{x:.6g}", f"{y:.6g}"])
    fig.tight_layout()
    img_path = path.with_suffix(".png")
    fig.savefig(img_path, dpi=120)
    plt.close(fig)
    return [img_path, data_path]
