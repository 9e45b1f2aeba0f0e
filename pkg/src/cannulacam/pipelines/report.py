"""Experiment reports: per-sample metric rows plus aggregates, stored as CSV.

Layout (header ``id,metric,value``): per-sample rows keyed by sample id, then
rows whose id is ``AGGREGATE``, then ``PROVENANCE`` rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER = ["id", "metric", "value"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class ExperimentReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    aggregates: dict[str, object] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def add(self, sample_id, metric: str, value) -> None:
        self.rows.append((str(sample_id), metric, float(value)))

    def values(self, metric: str) -> np.ndarray:
        return np.array([v for _, m, v in self.rows if m == metric])

    def mean_of(self, metric: str) -> float:
        vals = self.values(metric)
        return float(vals.mean()) if len(vals) else float("nan")

    def recompute(self) -> dict[str, float]:
        """``mean_<metric>`` for every per-sample metric, from the rows alone."""
        metrics = sorted({m for _, m, _ in self.rows})
        return {f"mean_{m}": self.mean_of(m) for m in metrics}

    def finalize(self) -> "ExperimentReport":
        self.aggregates.update(self.recompute())
        return self

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(HEADER)
            for sid, m, v in self.rows:
                wr.writerow([sid, m, _fmt(v)])
            for k, v in self.aggregates.items():
                wr.writerow(["AGGREGATE", k, _fmt(v)])
            for k, v in self.provenance.items():
                wr.writerow(["PROVENANCE", k, v])

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        rep = cls()
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            if next(rd, None) != HEADER:
                raise ValueError(f"{path}: not an experiment report")
            for sid, m, v in rd:
                if sid == "AGGREGATE":
                    try:
                        rep.aggregates[m] = float(v)
                    except ValueError:
                        rep.aggregates[m] = v
                elif sid == "PROVENANCE":
                    rep.provenance[m] = v
                else:
                    rep.rows.append((sid, m, float(v)))
        return rep


def write_loss_curve(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            wr.writerow([i, repr(float(v))])
