from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

from src.app.core.errors import ConfigError, InvariantViolation, StateError
from src.app.db import codecs
from src.app.models.reports import MetricReport, RunManifest
from src.app.services.flow import PairBatch
from src.app.services.lora import AdapterSet
from src.app.services.nn import VelocityNet
from src.app.services.phantom import PhantomSample, Severity

logger = logging.getLogger(__name__)

Row = dict[str, Any]


class CheckpointRepository(Protocol):
    def save(self, name: str, net: VelocityNet, meta: Optional[dict[str, Any]] = None) -> str: ...
    def load(self, name: str) -> codecs.Checkpoint: ...
    def checksum(self, name: str) -> str: ...
    def save_adapters(self, name: str, adapters: AdapterSet, base_checksum: str) -> None: ...
    def load_adapters(self, name: str, base_checksum: str) -> AdapterSet: ...


class PairCacheRepository(Protocol):
    def get(self, key: str, seed: int) -> Optional[PairBatch]: ...
    def put(self, key: str, seed: int, pairs: PairBatch) -> None: ...


class PhantomRepository(Protocol):
    def save(self, samples: Sequence[PhantomSample]) -> None: ...
    def load(self) -> list[PhantomSample]: ...


class RunRepository(Protocol):
    def write_manifest(self, manifest: RunManifest) -> None: ...
    def read_manifest(self) -> RunManifest: ...
    def append_metric(self, report: MetricReport) -> None: ...
    def metrics(self) -> list[MetricReport]: ...
    def write_table(self, name: str, rows: Sequence[Row]) -> str: ...
    def read_table(self, name: str) -> list[Row]: ...
    def write_bytes(self, name: str, blob: bytes) -> str: ...
    def read_bytes(self, name: str) -> bytes: ...
    def write_text(self, name: str, text: str) -> str: ...


def _adapter_set(record: codecs.AdapterRecord) -> AdapterSet:
    return AdapterSet(record.rank, record.alpha, record.layers, record.a, record.b)


def _encode_adapters(adapters: AdapterSet, base_checksum: str) -> bytes:
    return codecs.encode_adapters(
        adapters.rank, adapters.alpha, adapters.layers, adapters.a, adapters.b, base_checksum
    )


class FileCheckpointRepository(CheckpointRepository):
    """Чекпоинты ``<name>.bin`` с текстовым манифестом ``<name>.json``."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def _path(self, name: str, suffix: str) -> Path:
        return self.root / f"{name}{suffix}"

    def save(self, name: str, net: VelocityNet, meta: Optional[dict[str, Any]] = None) -> str:
        self.root.mkdir(parents=True, exist_ok=True)
        self._path(name, ".bin").write_bytes(codecs.encode_checkpoint(net, meta))
        manifest = codecs.checkpoint_manifest(net)
        self._path(name, ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        logger.info("checkpoint %s saved (%s)", name, manifest["checksum"][:12])
        return manifest["checksum"]

    def load(self, name: str) -> codecs.Checkpoint:
        path = self._path(name, ".bin")
        if not path.exists():
            raise StateError(f"no checkpoint at {path}")
        return codecs.decode_checkpoint(path.read_bytes())

    def checksum(self, name: str) -> str:
        return self.load(name).checksum

    def save_adapters(self, name: str, adapters: AdapterSet, base_checksum: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._path(name, ".lora").write_bytes(_encode_adapters(adapters, base_checksum))

    def load_adapters(self, name: str, base_checksum: str) -> AdapterSet:
        path = self._path(name, ".lora")
        if not path.exists():
            raise StateError(f"no adapters at {path}")
        return _adapter_set(codecs.decode_adapters(path.read_bytes(), base_checksum))


class InMemoryCheckpointRepository(CheckpointRepository):
    def __init__(self) -> None:
        self._items: dict[str, bytes] = {}
        self._adapters: dict[str, bytes] = {}

    def save(self, name: str, net: VelocityNet, meta: Optional[dict[str, Any]] = None) -> str:
        self._items[name] = codecs.encode_checkpoint(net, meta)
        return codecs.parameters_checksum(net.parameters())

    def load(self, name: str) -> codecs.Checkpoint:
        if name not in self._items:
            raise StateError(f"no checkpoint named {name!r}")
        return codecs.decode_checkpoint(self._items[name])

    def checksum(self, name: str) -> str:
        return self.load(name).checksum

    def save_adapters(self, name: str, adapters: AdapterSet, base_checksum: str) -> None:
        self._adapters[name] = _encode_adapters(adapters, base_checksum)

    def load_adapters(self, name: str, base_checksum: str) -> AdapterSet:
        if name not in self._adapters:
            raise StateError(f"no adapters named {name!r}")
        return _adapter_set(codecs.decode_adapters(self._adapters[name], base_checksum))


class FilePairCacheRepository(PairCacheRepository):
    """Кэш пар учителя: ``pairs-<key12>-<seed>.bin``."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def _path(self, key: str, seed: int) -> Path:
        return self.root / f"pairs-{key[:12]}-{seed}.bin"

    def get(self, key: str, seed: int) -> Optional[PairBatch]:
        path = self._path(key, seed)
        if not path.exists():
            return None
        header, x0, x1 = codecs.decode_pairs(path.read_bytes())
        if header["key"] != key or header["seed"] != seed:
            raise InvariantViolation(f"pair cache {path.name} belongs to another teacher, prior or seed")
        return PairBatch(x0, x1)

    def put(self, key: str, seed: int, pairs: PairBatch) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        blob = codecs.encode_pairs(pairs.x0, pairs.x1, key=key, seed=seed)
        self._path(key, seed).write_bytes(blob)


class InMemoryPairCacheRepository(PairCacheRepository):
    def __init__(self) -> None:
        self._items: dict[tuple[str, int], PairBatch] = {}

    def get(self, key: str, seed: int) -> Optional[PairBatch]:
        return self._items.get((key, seed))

    def put(self, key: str, seed: int, pairs: PairBatch) -> None:
        self._items[(key, seed)] = pairs


MANIFEST_COLUMNS = ("file", "seed", "severity", "split")


class FilePhantomRepository(PhantomRepository):
    """Один бинарный файл на фантом и ``manifest.csv`` (seed, severity, split)."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def save(self, samples: Sequence[PhantomSample]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with (self.root / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            for idx, sample in enumerate(samples):
                name = f"phantom-{idx:05d}.bin"
                blob = codecs.encode_phantom(sample.image, sample.mask, int(sample.severity), sample.seed)
                (self.root / name).write_bytes(blob)
                writer.writerow(
                    {"file": name, "seed": sample.seed, "severity": int(sample.severity), "split": sample.split or ""}
                )
        logger.info("exported %d phantoms to %s", len(samples), self.root)

    def load(self) -> list[PhantomSample]:
        manifest = self.root / "manifest.csv"
        if not manifest.exists():
            raise ConfigError(f"no phantom manifest in {self.root}")
        samples: list[PhantomSample] = []
        with manifest.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                image, mask, severity, seed = codecs.decode_phantom((self.root / row["file"]).read_bytes())
                if severity != int(row["severity"]) or seed != int(row["seed"]):
                    raise InvariantViolation(f"{row['file']} disagrees with the manifest")
                samples.append(PhantomSample(image, mask, Severity(severity), seed, row["split"] or None))
        return samples


def _columns(rows: Sequence[Row]) -> list[str]:
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


class FileRunRepository(RunRepository):
    """Каталог одного запуска: manifest.json, metrics.jsonl, CSV-таблицы и бинарные артефакты."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def _file(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.root / name

    def write_manifest(self, manifest: RunManifest) -> None:
        self._file("manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")

    def read_manifest(self) -> RunManifest:
        path = self.root / "manifest.json"
        if not path.exists():
            raise StateError(f"no manifest in {self.root}")
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))

    def append_metric(self, report: MetricReport) -> None:
        with self._file("metrics.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(report.model_dump_json() + "\n")

    def metrics(self) -> list[MetricReport]:
        path = self.root / "metrics.jsonl"
        if not path.exists():
            return []
        lines = path.read_text(encoding="utf-8").splitlines()
        return [MetricReport.model_validate_json(line) for line in lines if line.strip()]

    def write_table(self, name: str, rows: Sequence[Row]) -> str:
        path = self._file(name)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_columns(rows))
            writer.writeheader()
            writer.writerows(rows)
        return name

    def read_table(self, name: str) -> list[Row]:
        path = self.root / name
        if not path.exists():
            raise StateError(f"no table {name} in {self.root}")
        with path.open(newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def write_bytes(self, name: str, blob: bytes) -> str:
        self._file(name).write_bytes(blob)
        return name

    def read_bytes(self, name: str) -> bytes:
        path = self.root / name
        if not path.exists():
            raise StateError(f"no artifact {name} in {self.root}")
        return path.read_bytes()

    def write_text(self, name: str, text: str) -> str:
        self._file(name).write_text(text, encoding="utf-8")
        return name


class InMemoryRunRepository(RunRepository):
    def __init__(self) -> None:
        self._manifest: Optional[RunManifest] = None
        self._metrics: list[MetricReport] = []
        self._tables: dict[str, list[Row]] = {}
        self._blobs: dict[str, bytes] = {}

    def write_manifest(self, manifest: RunManifest) -> None:
        self._manifest = manifest.model_copy(deep=True)

    def read_manifest(self) -> RunManifest:
        if self._manifest is None:
            raise StateError("no manifest written")
        return self._manifest

    def append_metric(self, report: MetricReport) -> None:
        self._metrics.append(report)

    def metrics(self) -> list[MetricReport]:
        return list(self._metrics)

    def write_table(self, name: str, rows: Sequence[Row]) -> str:
        # как и в CSV, значения читаются обратно строками
        self._tables[name] = [{k: str(v) for k, v in row.items()} for row in rows]
        return name

    def read_table(self, name: str) -> list[Row]:
        if name not in self._tables:
            raise StateError(f"no table {name}")
        return list(self._tables[name])

    def write_bytes(self, name: str, blob: bytes) -> str:
        self._blobs[name] = bytes(blob)
        return name

    def read_bytes(self, name: str) -> bytes:
        if name not in self._blobs:
            raise StateError(f"no artifact {name}")
        return self._blobs[name]

    def write_text(self, name: str, text: str) -> str:
        return self.write_bytes(name, text.encode("utf-8"))
