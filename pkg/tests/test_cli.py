import json

import jsonschema
import numpy as np
import pytest

from mrsyolo.cli import main, parse_rates
from mrsyolo.fileio import load_checkpoint, load_schema, save_tensor


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"widths": [12, 24, 24, 48], "input_size": [32, 32], "num_classes": 3}))
    path = d / "m.mrsw"
    assert main(["build", "--config", str(cfg), "--seed", "5", "--out", str(path)]) == 0
    return path


def test_build_deterministic(tmp_path, capsys, monkeypatch):
    a, b = tmp_path / "a.mrsw", tmp_path / "b.mrsw"
    assert run(capsys, "build", "--seed", 3, "--out", a)[0] == 0
    monkeypatch.setenv("MRS_SEED", "3")
    assert run(capsys, "build", "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_summarize_json_schema(capsys, ckpt):
    code, out, _ = run(capsys, "summarize", "--ckpt", ckpt, "--json")
    assert code == 0
    rep = json.loads(out)
    jsonschema.validate(rep, load_schema("cost_report"))
    assert rep["total_params"] == load_checkpoint(ckpt).num_params()
    code, out, _ = run(capsys, "summarize", "--ckpt", ckpt, "--input-size", 64, 64)
    assert "GFLOPs" in out


def test_gradcheck_cmd(capsys):
    code, out, _ = run(capsys, "gradcheck", "--block", "akdc", "--seed", 2, "--json")
    assert code == 0
    obj = json.loads(out)
    jsonschema.validate(obj, load_schema("gradcheck"))
    assert obj["passed"]


def test_prune_rate_zero_keeps_params(capsys, ckpt, tmp_path):
    code, out, _ = run(capsys, "prune", "--ckpt", ckpt, "--rate", 0, "--out", tmp_path / "p.mrsw",
                       "--plan", tmp_path / "plan.json", "--json")
    obj = json.loads(out)
    jsonschema.validate(obj, load_schema("prune_summary"))
    assert code == 0 and obj["params_before"] == obj["params_after"]
    jsonschema.validate(json.loads((tmp_path / "plan.json").read_text()), load_schema("prune_plan"))


@pytest.mark.parametrize("mode", ["channel", "unstructured"])
def test_prune_modes(capsys, ckpt, tmp_path, mode):
    code, out, _ = run(capsys, "prune", "--ckpt", ckpt, "--rate", 0.5, "--mode", mode,
                       "--out", tmp_path / "p.mrsw", "--plan", tmp_path / "plan.json", "--json")
    obj = json.loads(out)
    assert code == 0 and obj["params_after"] < obj["params_before"]
    plan = json.loads((tmp_path / "plan.json").read_text())
    jsonschema.validate(plan, load_schema("prune_plan"))
    assert plan["mode"] == mode


def test_sweep_monotone(capsys, ckpt):
    code, out, _ = run(capsys, "sweep", "--ckpt", ckpt, "--rates", "0.1:0.9:0.1", "--json")
    obj = json.loads(out)
    jsonschema.validate(obj, load_schema("sweep"))
    params = [r["params"] for r in obj["rows"]]
    assert len(params) == 9 and all(a >= b for a, b in zip(params, params[1:]))
    assert all(r["finite"] for r in obj["rows"])


def test_parse_rates():
    assert parse_rates("0.1:0.9:0.1") == [round(0.1 * i, 10) for i in range(1, 10)]
    assert parse_rates("0.2,0.5") == [0.2, 0.5]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_eval_fixture(capsys, tmp_path):
    write_jsonl(tmp_path / "g.jsonl", [{"image_id": "i", "class_id": 0, "box": [0, 0, 10, 10]},
                                       {"image_id": "i", "class_id": 0, "box": [20, 20, 30, 30]}])
    write_jsonl(tmp_path / "p.jsonl", [
        {"image_id": "i", "class_id": 0, "score": 0.9, "box": [0, 0, 10, 10]},
        {"image_id": "i", "class_id": 0, "score": 0.8, "box": [50, 50, 60, 60]},
        {"image_id": "i", "class_id": 0, "score": 0.7, "box": [20, 20, 30, 30]}])
    code, out, _ = run(capsys, "eval", "--preds", tmp_path / "p.jsonl", "--gts", tmp_path / "g.jsonl")
    assert code == 0 and "0.8333" in out
    code, out, _ = run(capsys, "eval", "--preds", tmp_path / "p.jsonl", "--gts", tmp_path / "g.jsonl",
                       "--coco-range", "--json")
    obj = json.loads(out)
    jsonschema.validate(obj, load_schema("eval"))
    assert len(obj["ap_thresholds"]) == 10 and obj["map50"] == pytest.approx(5 / 6)


def test_run_writes_records(capsys, ckpt, tmp_path):
    save_tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)), tmp_path / "x.mrst")
    code, out, _ = run(capsys, "run", "--ckpt", ckpt, "--input", tmp_path / "x.mrst",
                       "--conf", 0.0, "--nms", 0.65, "--out", tmp_path / "d.jsonl")
    assert code == 0
    rows = [json.loads(l) for l in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert rows
    schema = load_schema("record")
    for r in rows:
        jsonschema.validate(r, schema)
    assert {r["image_id"] for r in rows} <= {"0", "1"}


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["build", "--out", "x", "--bogus"],
    ["summarize", "--ckpt", "/nonexistent/file.mrsw"],
    ["prune", "--ckpt", "/nonexistent", "--rate", "0.5", "--out", "o"],
    ["sweep", "--ckpt", "x", "--rates", "a:b"],
])
def test_errors_single_line(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error:")


def test_invalid_config_error(capsys, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"widths": [10, 20, 30, 40]}))
    code, _, err = run(capsys, "build", "--config", cfg, "--out", tmp_path / "m.mrsw")
    assert code != 0 and err.startswith("error:") and "widths[0]=10" in err


def test_config_schema_accepts_default():
    from mrsyolo.model import ModelConfig
    jsonschema.validate(ModelConfig().to_json(), load_schema("config"))
