from __future__ import annotations

import csv
import dataclasses
import json
import logging
import subprocess
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from .config import RunConfig
from .experiments import ExperimentResult

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.10g"


def git_describe(cwd: Optional[Path] = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd or Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)


class ResultStore:
    """Writes <out>/<experiment>.csv and a JSON sidecar next to it.

    The CSV carries no timings, so identical configs give identical bytes;
    wall-times and timestamps live in the sidecar only.
    """

    def __init__(self, out_dir: str) -> None:
        self.out_dir = Path(out_dir)

    def init(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def paths(self, experiment: str) -> tuple[Path, Path]:
        return self.out_dir / f"{experiment}.csv", self.out_dir / f"{experiment}.json"

    def save_table(self, result: ExperimentResult) -> Path:
        csv_path, _ = self.paths(result.experiment)
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(result.columns)
            for row in result.rows:
                writer.writerow([_cell(v) for v in row])
        return csv_path

    def save_metadata(
        self,
        result: ExperimentResult,
        cfg: RunConfig,
        started: datetime,
        finished: datetime,
    ) -> Path:
        _, json_path = self.paths(result.experiment)
        doc: Dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "experiment": result.experiment,
            "config": dataclasses.asdict(cfg),
            "seed": cfg.seed,
            "git": git_describe(),
            "rows": len(result.rows),
            "wall_times": {str(M): t for M, t in sorted(result.wall_times.items())},
            "clamp_events": result.stats.clamp_events,
            "floor_events": result.stats.floor_events,
            "notes": result.notes,
            "started": started.isoformat(),
            "finished": finished.isoformat(),
            "duration_seconds": (finished - started).total_seconds(),
        }
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, default=float)
        return json_path

    def save(self, result: ExperimentResult, cfg: RunConfig, started: datetime) -> tuple[Path, Path]:
        self.init()
        finished = datetime.now(timezone.utc)
        csv_path = self.save_table(result)
        json_path = self.save_metadata(result, cfg, started, finished)
        logger.info("Wrote %s and %s", csv_path, json_path)
        return csv_path, json_path

    def load_metadata(self, experiment: str) -> Optional[dict]:
        _, json_path = self.paths(experiment)
        if not json_path.is_file():
            return None
        with open(json_path, encoding="utf-8") as f:
            return json.load(f)
