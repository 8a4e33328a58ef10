"""Metric records and their canonical CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .errors import ReportError

CSV_COLUMNS = ("run_id", "seed", "round", "strategy", "client_id", "split", "metric", "value")
ABSENT = "absent"


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    strategy: str
    client_id: str
    split: str
    metric: str
    value: float
    run_id: str = ""
    seed: int = 0

    def stamped(self, run_id: str, seed: int) -> "MetricsRecord":
        return replace(self, run_id=run_id, seed=seed)

    def key(self) -> tuple:
        return (self.run_id, self.seed, self.round, self.strategy, self.client_id, self.split, self.metric)


def _client_sort_key(client_id: str) -> tuple[int, int | str]:
    if client_id == "global":
        return (0, 0)
    try:
        return (1, int(client_id))
    except ValueError:
        return (2, client_id)


def canonical_order(records: Iterable[MetricsRecord]) -> list[MetricsRecord]:
    return sorted(
        records,
        key=lambda r: (
            r.run_id, r.seed, r.round, _client_sort_key(r.client_id),
            r.strategy, r.split, r.metric,
        ),
    )


def format_value(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ABSENT
    if not math.isfinite(v):
        raise ReportError(f"non-finite metric value {v}")
    return repr(float(v))


def parse_value(s: str) -> float:
    return math.nan if s == ABSENT else float(s)


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    """Canonically ordered CSV text; duplicate keys are rejected."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    seen = set()
    for r in canonical_order(records):
        k = r.key()
        if k in seen:
            raise ReportError(f"duplicate metrics record {k}")
        seen.add(k)
        w.writerow([r.run_id, r.seed, r.round, r.strategy, r.client_id, r.split, r.metric, format_value(r.value)])
    return buf.getvalue()


def write_csv(records: Iterable[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records))
    return path


def read_csv(path: str | Path) -> list[MetricsRecord]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ReportError(f"{path}: header {header} does not match {list(CSV_COLUMNS)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise ReportError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields")
            run_id, seed, rnd, strategy, client, split, metric, value = row
            try:
                out.append(MetricsRecord(int(rnd), strategy, client, split, metric,
                                         parse_value(value), run_id, int(seed)))
            except ValueError as exc:
                raise ReportError(f"{path}:{lineno}: {exc}") from None
    return out
