"""Append-only result records (JSON lines) with CSV export."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

FIELDS = ("run_id", "config_hash", "command", "metric", "context_length", "value", "seed", "step", "note", "wall_time")


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form of a resolved config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def run_id(command: str, chash: str) -> str:
    return f"{command}-{chash[:16]}"


@dataclass
class ResultRecord:
    run_id: str
    config_hash: str
    command: str
    metric: str
    context_length: Optional[int]
    value: Optional[float]
    seed: int
    step: Optional[int] = None
    note: str = ""
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class ResultLog:
    """Single appender for ``results.jsonl``; ``export_csv`` rewrites ``results.csv``."""

    path: Path
    run_id: str
    config_hash: str
    command: str
    seed: int
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def add(self, metric, value, context_length=None, step=None, note="", wall_time=0.0) -> ResultRecord:
        rec = ResultRecord(self.run_id, self.config_hash, self.command, metric,
                           None if context_length is None else int(context_length),
                           None if value is None else float(value), self.seed,
                           None if step is None else int(step), note, float(wall_time))
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")
        self.records.append(rec)
        return rec

    def export_csv(self, csv_path=None) -> Path:
        csv_path = Path(csv_path) if csv_path else self.path.with_suffix(".csv")
        rows = read_records(self.path)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: r.get(k) for k in FIELDS})
        return csv_path


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def strip_wall_time(records) -> list:
    return [{k: v for k, v in (r if isinstance(r, dict) else asdict(r)).items() if k != "wall_time"} for r in records]
