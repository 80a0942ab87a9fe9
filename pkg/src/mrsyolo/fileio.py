"""Checkpoint (MRSW), tensor (MRST) and JSON-lines record files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .evalkit import DetectionRecord
from .model import DetectorModel, ModelConfig

CKPT_MAGIC = b"MRSW"
CKPT_VERSION = 1
TENSOR_MAGIC = b"MRST"
TENSOR_VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``field`` names the offending part."""

    def __init__(self, path, field: str, detail: str):
        self.path, self.field = str(path), field
        super().__init__(f"{path}: {field}: {detail}")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: DetectorModel, path) -> None:
    table, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        table.append({"name": name, "shape": list(p.shape), "offset": offset, "count": arr.size})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    header = json.dumps({"config": model.config.to_json(), "tensors": table},
                        separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple:
    """Return ``(config_dict, {name: float64 array})`` after validating layout."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(path, "header", f"file too short ({len(raw)} bytes)")
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(path, "magic", f"expected {CKPT_MAGIC!r}, got {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise FormatError(path, "version", f"unsupported version {version}")
    if 12 + hlen > len(raw):
        raise FormatError(path, "header length", f"{hlen} exceeds file size")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        config, table = header["config"], header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(path, "header", f"invalid JSON header ({e})") from None
    blob = raw[12 + hlen:]
    expected, tensors = 0, {}
    for i, entry in enumerate(table):
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            offset, count = int(entry["offset"]), int(entry["count"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(path, f"tensor table[{i}]", "missing name/shape/offset/count") from None
        if int(np.prod(shape)) != count:
            raise FormatError(path, f"tensor {name} shape", f"{shape} does not hold {count} elements")
        if offset != expected:
            raise FormatError(path, f"tensor {name} offset",
                              f"expected {expected}, got {offset} (overlap or gap)")
        expected += count * 4
        tensors[name] = (shape, offset, count)
    if len(blob) != expected:
        raise FormatError(path, "blob length", f"expected {expected} bytes, got {len(blob)}")
    out = {name: np.frombuffer(blob, "<f4", count, offset).astype(np.float64).reshape(shape)
           for name, (shape, offset, count) in tensors.items()}
    return config, out


def load_checkpoint(path) -> DetectorModel:
    config, tensors = read_checkpoint(path)
    model = DetectorModel(ModelConfig.from_json(config))
    try:
        model.load_state_dict(tensors)
    except KeyError as e:
        raise FormatError(path, "tensor table", str(e)) from None
    return model


# ---------------------------------------------------------------------------
# tensor files

def save_tensor(array, path) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank above 255 not representable")
    head = TENSOR_MAGIC + struct.pack("<BB", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError(path, "header", f"file too short ({len(raw)} bytes)")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(path, "magic", f"expected {TENSOR_MAGIC!r}, got {raw[:4]!r}")
    version, rank = raw[4], raw[5]
    if version != TENSOR_VERSION:
        raise FormatError(path, "version", f"unsupported version {version}")
    end = 6 + 4 * rank
    if len(raw) < end:
        raise FormatError(path, "dims", f"need {rank} dims, file ends early")
    dims = struct.unpack(f"<{rank}I", raw[6:end])
    payload = raw[end:]
    want = int(np.prod(dims)) * 4
    if len(payload) != want:
        raise FormatError(path, "payload length", f"expected {want} bytes, got {len(payload)}")
    return np.frombuffer(payload, "<f4").astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# records

def read_records(path, require_score=None) -> list:
    """Parse a JSON-lines record file; blank lines are ignored.

    ``require_score`` True/False enforces prediction/ground-truth rows.
    """
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("not a JSON object")
                if require_score is True and "score" not in row:
                    raise ValueError("prediction row without 'score'")
                if require_score is False and "score" in row:
                    raise ValueError("ground-truth row with 'score'")
                out.append(DetectionRecord.from_json(row))
            except (ValueError, KeyError, TypeError) as e:
                detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                raise FormatError(path, f"line {lineno}", detail) from None
    return out


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package (``config``, ``sweep``, ...)."""
    from importlib.resources import files
    return json.loads(files("mrsyolo").joinpath("schemas", f"{name}.json").read_text("utf-8"))
