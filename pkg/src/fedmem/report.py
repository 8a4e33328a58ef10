"""Static reports built purely from metrics CSVs.

Outputs in the report directory:

* ``summary.csv`` / ``summary.md``: mean and sample std of final accuracy
  per (setting, strategy) over seeds.  Two statistics per row: the mean over
  clients of per-client test accuracy, and the global test accuracy.
* ``dropout.csv`` / ``dropout.md``: accuracy on dropout clients' test
  slices, plus the raw global model on the same missing classes.
* ``curves-<setting>.svg``: per-round global accuracy per strategy.
"""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ReportError
from .metrics import MetricsRecord, format_value, read_csv

_SEED_SUFFIX = re.compile(r"-s-?\d+$")


def setting_of(run_id: str) -> str:
    """A run id minus its ``-s<seed>`` suffix names the configuration."""
    return _SEED_SUFFIX.sub("", run_id)


def load_records(paths: Sequence[str | Path]) -> list[MetricsRecord]:
    if not paths:
        raise ReportError("report needs at least one CSV")
    out: list[MetricsRecord] = []
    for p in paths:
        if not Path(p).exists():
            raise ReportError(f"no such metrics file: {p}")
        out += read_csv(p)
    seen = set()
    for r in out:
        if r.key() in seen:
            raise ReportError(f"duplicate record {r.key()} across inputs")
        seen.add(r.key())
    return out


def mean_std(values: Iterable[float]) -> tuple[float, float, int]:
    """Mean and sample standard deviation (``nan`` std for a single value)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if not len(v):
        return float("nan"), float("nan"), 0
    std = float(v.std(ddof=1)) if len(v) > 1 else float("nan")
    return float(v.mean()), std, len(v)


def _is_client(cid: str) -> bool:
    return cid.isdigit()


def final_accuracies(records: Sequence[MetricsRecord]) -> dict[tuple[str, str, str], dict[int, float]]:
    """``(setting, strategy, kind) -> {seed: value}`` at each run's last round.

    ``kind`` is ``client_mean`` or ``global``.
    """
    acc = [r for r in records if r.metric == "accuracy" and r.split == "test"]
    last: dict[tuple[str, str], int] = {}
    for r in acc:
        k = (r.run_id, r.strategy)
        last[k] = max(last.get(k, r.round), r.round)
    buckets: dict[tuple[str, str, str, int], list[float]] = defaultdict(list)
    for r in acc:
        if r.round != last[(r.run_id, r.strategy)] or math.isnan(r.value):
            continue
        kind = "global" if r.client_id == "global" else "client_mean"
        buckets[(setting_of(r.run_id), r.strategy, kind, r.seed)].append(r.value)
    out: dict[tuple[str, str, str], dict[int, float]] = defaultdict(dict)
    for (setting, strategy, kind, seed), vals in buckets.items():
        out[(setting, strategy, kind)][seed] = float(np.mean(vals))
    return dict(out)


def summary_rows(records: Sequence[MetricsRecord]) -> list[dict]:
    rows = []
    for (setting, strategy, kind), by_seed in sorted(final_accuracies(records).items()):
        m, s, n = mean_std(by_seed[k] for k in sorted(by_seed))
        rows.append({"setting": setting, "strategy": strategy, "statistic": kind, "mean": m, "std": s, "n": n})
    return rows


def dropout_rows(records: Sequence[MetricsRecord]) -> list[dict]:
    """Mean accuracy on the dropout clients' slices per strategy.

    The row labelled ``global_model_raw`` averages the final global model's
    per-class accuracy over the classes present on those slices.
    """
    dropped = {(r.run_id, r.client_id) for r in records
               if r.strategy == "setup" and r.metric == "dropout" and r.value == 1.0}
    if not dropped:
        return []
    acc = [r for r in records if r.split == "test" and (r.run_id, r.client_id) in dropped]
    last: dict[tuple[str, str], int] = {}
    for r in acc:
        k = (r.run_id, r.strategy)
        last[k] = max(last.get(k, r.round), r.round)
    per_seed: dict[tuple[str, str], dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    missing: dict[str, set[int]] = defaultdict(set)
    for r in acc:
        if r.round != last[(r.run_id, r.strategy)] or math.isnan(r.value):
            continue
        if r.metric == "accuracy":
            per_seed[(setting_of(r.run_id), r.strategy)][r.seed].append(r.value)
        elif r.metric.startswith("per_class_accuracy:"):
            missing[r.run_id].add(int(r.metric.split(":")[1]))
    # raw global model on the dropout clients' classes
    glob_last: dict[str, int] = {}
    for r in records:
        if r.strategy == "fedavg" and r.client_id == "global":
            glob_last[r.run_id] = max(glob_last.get(r.run_id, r.round), r.round)
    for r in records:
        if (r.strategy == "fedavg" and r.client_id == "global" and r.run_id in missing
                and r.round == glob_last[r.run_id] and r.metric.startswith("per_class_accuracy:")
                and int(r.metric.split(":")[1]) in missing[r.run_id] and not math.isnan(r.value)):
            per_seed[(setting_of(r.run_id), "global_model_raw")][r.seed].append(r.value)
    rows = []
    for (setting, strategy), by_seed in sorted(per_seed.items()):
        m, s, n = mean_std(float(np.mean(by_seed[k])) for k in sorted(by_seed))
        rows.append({"setting": setting, "strategy": strategy, "statistic": "dropout_slice", "mean": m, "std": s, "n": n})
    return rows


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "strategy", "statistic", "mean", "std", "n"])
    for r in rows:
        w.writerow([r["setting"], r["strategy"], r["statistic"], format_value(r["mean"]), format_value(r["std"]), r["n"]])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{100 * x:.2f}"


def _rows_md(title: str, rows: list[dict]) -> str:
    lines = [f"# {title}", "", "Accuracy in percent, mean ± sample std over seeds.", "",
             "| setting | strategy | statistic | mean ± std | n |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['setting']} | {r['strategy']} | {r['statistic']} | "
                     f"{_fmt(r['mean'])} ± {_fmt(r['std'])} | {r['n']} |")
    return "\n".join(lines) + "\n"


def curve_series(records: Sequence[MetricsRecord]) -> dict[str, dict[str, tuple[list[int], list[float]]]]:
    """``setting -> strategy -> (rounds, mean global accuracy over seeds)``."""
    pts: dict[tuple[str, str, int], list[float]] = defaultdict(list)
    for r in records:
        if r.client_id == "global" and r.metric == "accuracy" and r.split == "test" and r.round > 0:
            pts[(setting_of(r.run_id), r.strategy, r.round)].append(r.value)
    out: dict[str, dict[str, tuple[list[int], list[float]]]] = defaultdict(dict)
    for (setting, strategy, rnd) in sorted(pts):
        rounds, vals = out[setting].setdefault(strategy, ([], []))
        rounds.append(rnd)
        vals.append(float(np.mean(pts[(setting, strategy, rnd)])))
    return dict(out)


def _plot(setting: str, series: dict[str, tuple[list[int], list[float]]], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "fedmem", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for strategy in sorted(series):
            rounds, vals = series[strategy]
            ax.plot(rounds, [100 * v for v in vals], marker="o", markersize=3, label=strategy)
        ax.set_xlabel("round")
        ax.set_ylabel("global test accuracy (%)")
        ax.set_title(setting, fontsize=9)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]", "_", name) or "default"


def report(paths: Sequence[str | Path], out_dir: str | Path) -> Path:
    records = load_records(paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summ = summary_rows(records)
    (out / "summary.csv").write_text(_rows_csv(summ))
    (out / "summary.md").write_text(_rows_md("Final accuracy", summ))
    drop = dropout_rows(records)
    if drop:
        (out / "dropout.csv").write_text(_rows_csv(drop))
        (out / "dropout.md").write_text(_rows_md("Dropout clients", drop))
    for setting, series in sorted(curve_series(records).items()):
        _plot(setting, series, out / f"curves-{_safe(setting)}.svg")
    return out
