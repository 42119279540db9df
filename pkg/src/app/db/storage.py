from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel

from src.app.core.config import settings
from src.app.core.errors import ArtifactExistsError
from src.app.db.repositories import (
    FileCheckpointRepository,
    FilePairCacheRepository,
    FilePhantomRepository,
    FileRunRepository,
)
from src.app.models.reports import MetricReport, RunManifest

logger = logging.getLogger(__name__)


def config_hash(config: BaseModel) -> str:
    """SHA-256 канонического JSON (ключи отсортированы) проверенного конфига."""
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class RunDirectory:
    """Каталог запуска ``<out>/<command>-<hash12>`` и его репозитории."""

    command: str
    config: BaseModel
    root: Path
    seed: int
    overrides: dict[str, Any] = field(default_factory=dict)
    manifest: Optional[RunManifest] = None

    @classmethod
    def open(
        cls,
        command: str,
        config: BaseModel,
        *,
        out: Optional[Path] = None,
        seed: int = 0,
        overrides: Optional[dict[str, Any]] = None,
        force: bool = False,
    ) -> "RunDirectory":
        """Создаёт каталог запуска; существующий перезаписывается только с ``force``.

        Raises:
            ArtifactExistsError: Каталог с тем же хэшем уже содержит манифест
        """
        digest = config_hash(config)
        root = Path(out or settings.RUNS_DIR) / f"{command}-{digest[:12]}"
        if (root / "manifest.json").exists():
            if not force:
                raise ArtifactExistsError(f"{root} already holds a run; pass --force to overwrite")
            logger.warning("overwriting run directory %s", root)
            shutil.rmtree(root)
        root.mkdir(parents=True, exist_ok=True)
        run = cls(command, config, root, seed, dict(overrides or {}))
        run.manifest = RunManifest(
            command=command,
            config_hash=digest,
            code_version=settings.VERSION,
            seed=seed,
            started_at=utcnow(),
            overrides=run.overrides,
            config=config.model_dump(mode="json"),
        )
        run.runs.write_manifest(run.manifest)
        return run

    @property
    def runs(self) -> FileRunRepository:
        return FileRunRepository(self.root)

    @property
    def checkpoints(self) -> FileCheckpointRepository:
        return FileCheckpointRepository(self.root)

    @property
    def pair_cache(self) -> FilePairCacheRepository:
        # общий для всех запусков в каталоге: пары зависят только от учителя и сида
        return FilePairCacheRepository(self.root.parent / "pair-cache")

    def phantoms(self, name: str = "phantoms") -> FilePhantomRepository:
        return FilePhantomRepository(self.root / name)

    def record(self, artifact: str) -> str:
        assert self.manifest is not None
        if artifact not in self.manifest.artifacts:
            self.manifest.artifacts.append(artifact)
        return artifact

    def check(self, name: str, holds: bool) -> bool:
        assert self.manifest is not None
        self.manifest.invariants[name] = bool(holds)
        logger.info("invariant %s: %s", name, "ok" if holds else "VIOLATED")
        return holds

    def metric(self, report: MetricReport) -> None:
        self.runs.append_metric(report)
        self.record("metrics.jsonl")

    def finish(self, exit_code: int) -> RunManifest:
        assert self.manifest is not None
        self.manifest.finished_at = utcnow()
        self.manifest.exit_code = exit_code
        self.manifest.status = "ok" if exit_code == 0 else "failed"
        self.runs.write_manifest(self.manifest)
        return self.manifest
