"""Hyperparameter sweeps over a base experiment spec.

A sweep file looks like::

    {"schema_version": 1,
     "base": {... experiment spec ...},
     "grid": {"training.clip_norm": [0.1, 0.8, 2.0]},
     "points": [{"server.kind": "sgd", "server.learning_rate": 1.0}, ...],
     "workers": 2}

Each explicit point is combined with every grid combination (a missing
``points`` list counts as one empty point). Every override key must already
exist in the base spec. Sweeps only run on public or generated corpora.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fedmem.errors import ConfigError, FedmemError
from fedmem.experiment import (
    MANIFEST,
    SCHEMA_VERSION,
    ExperimentSpec,
    apply_overrides,
    load_bundle,
    run_experiment,
    write_json,
)
from fedmem.fedavg import read_metrics_csv

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("point", "overrides", "status", "top1_recall", "final_loss",
                   "mean_fraction_clipped")


@dataclass
class SweepSpec:
    base: ExperimentSpec
    grid: dict[str, list] = field(default_factory=dict)
    points: list[dict[str, Any]] = field(default_factory=list)
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid entry {key!r} needs a non-empty list")
        if not self.base.corpus.public:
            raise ConfigError("sweeps run only on public or generated corpora "
                              "(corpus.public is false)")
        base = self.base.to_dict()
        for overrides in self.expand():
            apply_overrides(base, overrides)

    def expand(self) -> list[dict[str, Any]]:
        """Override dict of every sweep point, in a fixed order."""
        keys = list(self.grid)
        combos = [dict(zip(keys, vals)) for vals in itertools.product(*self.grid.values())]
        return [{**p, **g} for p in (self.points or [{}]) for g in combos]

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "base": self.base.to_dict(),
                "grid": self.grid, "points": self.points, "workers": self.workers}

    @classmethod
    def from_dict(cls, data: dict) -> SweepSpec:
        if not isinstance(data, dict):
            raise ConfigError("sweep spec must be an object")
        unknown = set(data) - {"schema_version", "base", "grid", "points", "workers"}
        if unknown:
            raise ConfigError(f"sweep: unknown keys {sorted(unknown)}")
        if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {data['schema_version']}")
        if "base" not in data:
            raise ConfigError("sweep: missing 'base' spec")
        return cls(base=ExperimentSpec.from_dict(data["base"]), grid=dict(data.get("grid", {})),
                   points=list(data.get("points", [])), workers=int(data.get("workers", 1)))

    @classmethod
    def load(cls, path: str | Path) -> SweepSpec:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class SweepRow:
    point: int
    overrides: dict
    status: str
    summary: dict
    clipped: list[float]

    def record(self) -> dict:
        return {
            "point": self.point,
            "overrides": json.dumps(self.overrides, sort_keys=True),
            "status": self.status,
            "top1_recall": self.summary.get("top1_recall"),
            "final_loss": self.summary.get("final_loss"),
            "mean_fraction_clipped": self.summary.get("mean_fraction_clipped"),
        }


def _run_point(args) -> SweepRow:
    index, overrides, base, out = args
    try:
        spec = ExperimentSpec.from_dict(apply_overrides(base, overrides))
        bundle = run_experiment(spec, out)
        clipped = [r["fraction_clipped"] for r in read_metrics_csv(bundle.path / "metrics.csv")]
        return SweepRow(index, overrides, "ok", bundle.summary, clipped)
    except (FedmemError, ValueError, FloatingPointError) as exc:
        log.warning("sweep point %d failed: %s", index, exc)
        return SweepRow(index, overrides, f"failed: {exc}", {}, [])


def summary_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.record())
    return buf.getvalue()


def clipped_csv(rows: list[SweepRow]) -> str:
    """Long format: one line per (point, round) with the fraction of clients clipped."""
    lines = ["point,round,fraction_clipped"]
    for row in rows:
        lines += [f"{row.point},{t},{v!r}" for t, v in enumerate(row.clipped)]
    return "\n".join(lines) + "\n"


def run_sweep(sweep: SweepSpec, output_dir: str | Path) -> list[SweepRow]:
    """Run every point in its own directory; failed points are recorded, not raised."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "sweep.json", sweep.to_dict())
    base = sweep.base.to_dict()
    jobs = [(i, o, base, out / f"point_{i:03d}") for i, o in enumerate(sweep.expand())]
    if sweep.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(job) for job in jobs]
    (out / "sweep.csv").write_text(summary_csv(rows), encoding="utf-8")
    (out / "clipped.csv").write_text(clipped_csv(rows), encoding="utf-8")
    failed = sum(r.status != "ok" for r in rows)
    write_json(out / MANIFEST, {
        "schema_version": SCHEMA_VERSION,
        "kind": "sweep",
        "points": len(rows),
        "failed": failed,
        "stages": {"sweep": {"status": "ok" if not failed else "partial",
                             "artifacts": ["sweep.json", "sweep.csv", "clipped.csv"]}},
    })
    return rows


def read_summary_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def load_sweep_rows(path: str | Path) -> list[dict]:
    bundle = load_bundle(path)
    return read_summary_csv(bundle.artifact("sweep.csv").read_text(encoding="utf-8"))


__all__ = ["SUMMARY_COLUMNS", "SweepRow", "SweepSpec", "clipped_csv", "load_sweep_rows",
           "read_summary_csv", "run_sweep", "summary_csv"]
