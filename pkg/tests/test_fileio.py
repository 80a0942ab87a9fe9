import json
import struct

import numpy as np
import pytest

from mrsyolo.evalkit import DetectionRecord
from mrsyolo.fileio import (FormatError, load_checkpoint, load_tensor, read_records, save_checkpoint,
                            save_tensor, write_records)
from mrsyolo.model import ModelConfig, build
from mrsyolo.prune import channel_prune
from mrsyolo.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def small():
    return build(ModelConfig(widths=(12, 24, 24, 48), input_size=(32, 32)), 3)


def outputs(model, x):
    with no_grad():
        return [t.data for lvl in model(Tensor(x)) for t in lvl]


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-30)


def test_checkpoint_roundtrip(tmp_path, small):
    path = tmp_path / "m.mrsw"
    save_checkpoint(small, path)
    back = load_checkpoint(path)
    assert back.config == small.config
    sa, sb = small.state_dict(), back.state_dict()
    assert all(np.array_equal(sa[k].astype(np.float32), sb[k]) for k in sa)
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
    for a, b in zip(outputs(small, x), outputs(back, x)):
        assert rel(a, b) <= 1e-6


def test_pruned_checkpoint_roundtrip(tmp_path, small):
    pruned, _ = channel_prune(small, 0.4)
    save_checkpoint(pruned, tmp_path / "p.mrsw")
    back = load_checkpoint(tmp_path / "p.mrsw")
    assert back.num_params() == pruned.num_params()
    x = np.random.default_rng(1).normal(size=(1, 3, 32, 32))
    for a, b in zip(outputs(pruned, x), outputs(back, x)):
        assert rel(a, b) <= 1e-6


def corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))


@pytest.mark.parametrize("mutate,field", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 9) + r[8:], "version"),
    (lambda r: r[:-1], "blob length"),
    (lambda r: r + b"\0\0\0\0", "blob length"),
    (lambda r: r[:8] + struct.pack("<I", 10 ** 9) + r[12:], "header length"),
    (lambda r: r[:12] + b"#" + r[13:], "header"),
    (lambda r: r[:6], "header"),
])
def test_checkpoint_diagnostics(tmp_path, small, mutate, field):
    path = tmp_path / "m.mrsw"
    save_checkpoint(small, path)
    corrupt(path, mutate)
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.field == field
    assert field in str(e.value)


def test_checkpoint_offset_inconsistency(tmp_path, small):
    path = tmp_path / "m.mrsw"
    save_checkpoint(small, path)
    raw = path.read_bytes()
    hlen = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12:12 + hlen])
    header["tensors"][1]["offset"] = 0
    new = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<I", len(new)) + new + raw[12 + hlen:])
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert "offset" in e.value.field


def test_tensor_roundtrip_and_diagnostics(tmp_path):
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
    save_tensor(x, tmp_path / "x.mrst")
    assert np.array_equal(load_tensor(tmp_path / "x.mrst"), x)
    raw = (tmp_path / "x.mrst").read_bytes()
    assert raw[:4] == b"MRST" and raw[4] == 1 and raw[5] == 4
    assert struct.unpack("<4I", raw[6:22]) == (2, 3, 4, 5)
    for bad, field in ((raw[:-1], "payload length"), (b"NOPE" + raw[4:], "magic"),
                       (raw[:4] + b"\x07" + raw[5:], "version"), (raw[:10], "dims")):
        (tmp_path / "b.mrst").write_bytes(bad)
        with pytest.raises(FormatError) as e:
            load_tensor(tmp_path / "b.mrst")
        assert e.value.field == field


def test_records_roundtrip(tmp_path):
    recs = [DetectionRecord("a", 0, (0, 0, 1, 1), 0.5), DetectionRecord("b", 2, (1, 2, 3, 4), 0.25)]
    write_records(recs, tmp_path / "p.jsonl")
    assert read_records(tmp_path / "p.jsonl", require_score=True) == recs


def test_records_bad_line_reports_line_number(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text('{"image_id": "a", "class_id": 0, "box": [0, 0, 1, 1]}\n'
                    '{"image_id": "a", "class_id": 0, "box": [0, 0\n'
                    '{"image_id": "b", "class_id": 1, "box": [0, 0, 2, 2]}\n')
    with pytest.raises(FormatError) as e:
        read_records(path)
    assert e.value.field == "line 2" and "line 2" in str(e.value)
    path.write_text('{"image_id": "a", "class_id": 0, "box": [3, 0, 1, 1]}\n')
    with pytest.raises(FormatError, match="line 1"):
        read_records(path)
