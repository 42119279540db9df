from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from src.app.core.errors import ConfigError, InvariantViolation, ShapeMismatchError
from src.app.models.networks import NetConfig
from src.app.services.nn import Tensor, VelocityNet

FORMAT_VERSION = 1
FLOAT = np.dtype("<f8")
_PREFIX = struct.Struct("<4sII")

CHECKPOINT_MAGIC = b"RFCK"
ADAPTERS_MAGIC = b"RFAD"
PAIRS_MAGIC = b"RFPR"
PHANTOM_MAGIC = b"RFPH"
SAMPLES_MAGIC = b"RFSM"


def parameters_checksum(arrays: Sequence[Tensor]) -> str:
    """SHA-256 по байтам массивов (little-endian float64) в порядке объявления."""
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype=FLOAT).tobytes())
    return digest.hexdigest()


def _pack(magic: bytes, header: dict[str, Any], payload: bytes) -> bytes:
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, FORMAT_VERSION, len(text)) + text + payload


def _unpack(blob: bytes, magic: bytes) -> tuple[dict[str, Any], memoryview]:
    if len(blob) < _PREFIX.size:
        raise ConfigError("file is too short to hold a header")
    found, version, length = _PREFIX.unpack_from(blob)
    if found != magic:
        raise ConfigError(f"expected {magic!r} container, found {found!r}")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported format version {version}")
    end = _PREFIX.size + length
    header = json.loads(bytes(blob[_PREFIX.size : end]).decode("utf-8"))
    return header, memoryview(blob)[end:]


def _arrays_bytes(arrays: Sequence[Tensor]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=FLOAT).tobytes() for a in arrays)


def _read_arrays(payload: memoryview, shapes: Sequence[Sequence[int]]) -> tuple[list[Tensor], memoryview]:
    arrays: list[Tensor] = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        size = count * FLOAT.itemsize
        if offset + size > len(payload):
            raise ConfigError("payload ends before all arrays were read")
        arrays.append(np.frombuffer(payload[offset : offset + size], dtype=FLOAT).reshape(shape).astype(np.float64))
        offset += size
    return arrays, payload[offset:]


@dataclass
class TensorEntry:
    name: str
    shape: tuple[int, ...]

    def as_dict(self) -> dict[str, Any]:
        return {"name": self.name, "shape": list(self.shape)}


@dataclass
class Checkpoint:
    net: VelocityNet
    checksum: str
    meta: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(net: VelocityNet, meta: Optional[dict[str, Any]] = None) -> bytes:
    params = net.parameters()
    header = {
        "kind": "checkpoint",
        "config": net.config.model_dump(mode="json"),
        "tensors": [TensorEntry(n, p.shape).as_dict() for n, p in zip(net.parameter_names(), params)],
        "checksum": parameters_checksum(params),
        "meta": meta or {},
    }
    return _pack(CHECKPOINT_MAGIC, header, _arrays_bytes(params))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    """Разбор контейнера чекпоинта с проверкой контрольной суммы.

    Raises:
        ConfigError: Неверная сигнатура, версия или обрезанный файл
        InvariantViolation: Контрольная сумма не совпадает с содержимым
    """
    header, payload = _unpack(blob, CHECKPOINT_MAGIC)
    config = NetConfig.model_validate(header["config"])
    arrays, _ = _read_arrays(payload, [t["shape"] for t in header["tensors"]])
    checksum = parameters_checksum(arrays)
    if checksum != header["checksum"]:
        raise InvariantViolation("checkpoint checksum does not match its contents")
    net = VelocityNet.zeros(config).load_parameters(arrays)
    return Checkpoint(net, checksum, dict(header.get("meta", {})))


def checkpoint_manifest(net: VelocityNet) -> dict[str, Any]:
    params = net.parameters()
    return {
        "format_version": FORMAT_VERSION,
        "config": net.config.model_dump(mode="json"),
        "tensors": [TensorEntry(n, p.shape).as_dict() for n, p in zip(net.parameter_names(), params)],
        "checksum": parameters_checksum(params),
    }


@dataclass
class AdapterRecord:
    rank: int
    alpha: float
    layers: tuple[int, ...]
    a: list[Tensor]
    b: list[Tensor]
    base_checksum: str


def encode_adapters(
    rank: int, alpha: float, layers: Sequence[int], a: Sequence[Tensor], b: Sequence[Tensor], base_checksum: str
) -> bytes:
    header = {
        "kind": "adapters",
        "rank": rank,
        "alpha": alpha,
        "layers": list(layers),
        "a_shapes": [list(x.shape) for x in a],
        "b_shapes": [list(x.shape) for x in b],
        "base_checksum": base_checksum,
    }
    return _pack(ADAPTERS_MAGIC, header, _arrays_bytes(list(a) + list(b)))


def decode_adapters(blob: bytes, base_checksum: Optional[str] = None) -> AdapterRecord:
    """Адаптеры и контрольная сумма базы, к которой они обучены.

    Raises:
        InvariantViolation: ``base_checksum`` задан и не совпадает с записанным
    """
    header, payload = _unpack(blob, ADAPTERS_MAGIC)
    if base_checksum is not None and header["base_checksum"] != base_checksum:
        raise InvariantViolation(
            f"adapters were trained on base {header['base_checksum'][:12]}, not {base_checksum[:12]}"
        )
    a, rest = _read_arrays(payload, header["a_shapes"])
    b, _ = _read_arrays(rest, header["b_shapes"])
    return AdapterRecord(int(header["rank"]), float(header["alpha"]), tuple(header["layers"]), a, b, header["base_checksum"])


def encode_pairs(x0: Tensor, x1: Tensor, *, key: str, seed: int) -> bytes:
    if x0.shape != x1.shape or x0.ndim != 2:
        raise ShapeMismatchError("pairs must be two (n, d) arrays of equal shape")
    header = {
        "kind": "pairs",
        "key": key,
        "seed": seed,
        "count": int(x0.shape[0]),
        "dim": int(x0.shape[1]),
    }
    return _pack(PAIRS_MAGIC, header, _arrays_bytes([x0, x1]))


def decode_pairs(blob: bytes) -> tuple[dict[str, Any], Tensor, Tensor]:
    header, payload = _unpack(blob, PAIRS_MAGIC)
    shape = (header["count"], header["dim"])
    (x0, x1), _ = _read_arrays(payload, [shape, shape])
    return header, x0, x1


def encode_phantom(image: Tensor, mask: np.ndarray, severity: int, seed: int) -> bytes:
    if image.shape != mask.shape or image.ndim != 2:
        raise ShapeMismatchError("image and mask must be equal 2-D arrays")
    header = {"kind": "phantom", "shape": list(image.shape), "seed": int(seed)}
    payload = (
        np.ascontiguousarray(image, dtype=FLOAT).tobytes()
        + np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
        + bytes([int(severity)])
    )
    return _pack(PHANTOM_MAGIC, header, payload)


def decode_phantom(blob: bytes) -> tuple[Tensor, np.ndarray, int, int]:
    """(изображение, маска, степень тяжести, сид)."""
    header, payload = _unpack(blob, PHANTOM_MAGIC)
    shape = tuple(header["shape"])
    (image,), rest = _read_arrays(payload, [shape])
    pixels = int(np.prod(shape))
    if len(rest) != pixels + 1:
        raise ConfigError("phantom payload has the wrong size")
    mask = np.frombuffer(rest[:pixels], dtype=np.uint8).reshape(shape).copy()
    return image, mask, int(rest[pixels]), int(header["seed"])


def encode_samples(samples: Tensor, meta: Optional[dict[str, Any]] = None) -> bytes:
    samples = np.atleast_2d(samples)
    header = {"kind": "samples", "shape": list(samples.shape), "meta": meta or {}}
    return _pack(SAMPLES_MAGIC, header, _arrays_bytes([samples]))


def decode_samples(blob: bytes) -> tuple[Tensor, dict[str, Any]]:
    header, payload = _unpack(blob, SAMPLES_MAGIC)
    (samples,), _ = _read_arrays(payload, [header["shape"]])
    return samples, dict(header.get("meta", {}))
