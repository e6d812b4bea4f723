from __future__ import annotations

import csv
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional

from framework.errors import RunIOError
from models.checkpoint import CheckpointManifest
from models.config import RunConfig, Stage

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "stage", "loss", "mse_albedo", "mse_rm", "gm_rm", "rec", "kl", "lr", "checkpoint")


class RunDirectory:
    """run_dir/{config.json, metrics.csv, train.log, checkpoints/<stage>/step_N.{pt,json}, reports/}"""

    def __init__(self, path: Path):
        self.path = Path(path)

    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.csv"

    @property
    def log_path(self) -> Path:
        return self.path / "train.log"

    @property
    def checkpoints_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def reports_dir(self) -> Path:
        return self.path / "reports"

    def create(self, config: RunConfig) -> "RunDirectory":
        try:
            for d in (self.path, self.checkpoints_dir, self.reports_dir):
                d.mkdir(parents=True, exist_ok=True)
            self.config_path.write_text(config.model_dump_json(indent=2) + "\n")
        except OSError as exc:
            raise RunIOError(f"cannot prepare run directory {self.path}: {exc}") from exc
        return self

    @contextmanager
    def lock(self) -> Iterator[None]:
        """Exclusive training lock; a second writer fails instead of interleaving."""
        lock_path = self.path / ".lock"
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunIOError(f"{self.path} is locked by another training process ({lock_path})") from exc
        except OSError as exc:
            raise RunIOError(f"cannot lock {self.path}: {exc}") from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    def append_metrics(self, row: Dict[str, object]) -> None:
        if not self.config_path.is_file():
            raise RunIOError(f"{self.config_path} must exist before metrics are recorded")
        new = not self.metrics_path.is_file()
        try:
            with open(self.metrics_path, "a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, extrasaction="ignore")
                if new:
                    writer.writeheader()
                writer.writerow({k: row.get(k, "") for k in METRICS_FIELDS})
        except OSError as exc:
            raise RunIOError(f"cannot append to {self.metrics_path}: {exc}") from exc

    def checkpoint_path(self, stage: Stage, step: int) -> Path:
        return self.checkpoints_dir / stage.value / f"step_{step}.pt"

    def checkpoints(self, stage: Optional[Stage] = None) -> List[Path]:
        """Checkpoint payloads (with sidecars) ordered by step."""
        found = []
        for sidecar in self.checkpoints_dir.glob("*/step_*.json"):
            try:
                manifest = CheckpointManifest.model_validate_json(sidecar.read_text())
            except (OSError, ValueError):
                logger.warning("skipping unreadable sidecar %s", sidecar)
                continue
            payload = sidecar.with_suffix(".pt")
            if payload.is_file() and (stage is None or manifest.module is stage):
                found.append((manifest.step, payload))
        return [p for _, p in sorted(found)]

    def latest_checkpoint(self, stage: Optional[Stage] = None) -> Optional[Path]:
        found = self.checkpoints(stage)
        return found[-1] if found else None
