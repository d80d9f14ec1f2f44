import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from layoutattn import __version__
from layoutattn.cli import main
from layoutattn.errors import DivergenceError, NonFiniteLossError
from layoutattn.layout.io import write_pgm

FAST = ["--steps", "5", "--iterations", "4"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(autouse=True)
def one_thread(monkeypatch):
    monkeypatch.setenv("LAYOUTATTN_THREADS", "1")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.jsonl"
    ckpt = root / "m.ckpt"
    assert main(["gen-data", "--out", str(data), "--counts", "2:1=24,3:2=16", "--seed", "3"]) == 0
    assert main(["train", "--data", str(data), "--epochs", "2", "--out", str(ckpt), "--seed", "1"]) == 0
    return data, ckpt


def test_gen_data_default_table(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    assert main(["gen-data", "--out", str(out), "--seed", "0"]) == 0
    assert len(out.read_text().splitlines()) == 500
    meta = json.loads((tmp_path / "d.jsonl.meta.json").read_text())
    assert meta["version"] == __version__ and meta["items"] == 500
    assert "total 500" in capsys.readouterr().out


def test_gen_data_counts_and_determinism(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["gen-data", "--out", str(p), "--counts", "2:1=10", "--seed", "5"]) == 0
    assert len(a.read_text().splitlines()) == 10
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("counts", ["2:2=3", "7:1=2", "garbage"])
def test_gen_data_config_errors(tmp_path, counts):
    assert main(["gen-data", "--out", str(tmp_path / "x.jsonl"), "--counts", counts]) == 2


def test_train_outputs(trained):
    data, ckpt = trained
    curve = json.loads(ckpt.with_name(ckpt.name + ".loss.json").read_text())
    assert curve["version"] == __version__ and len(curve["loss_curve"]) == 2
    assert curve["config"]["train"]["loss"]["xi"] == 20.0
    assert ckpt.with_name(ckpt.name + ".loss.png").stat().st_size > 0


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "m.ckpt")]) == 2


def test_train_divergence_exit_code(trained, tmp_path, monkeypatch):
    import layoutattn.layout.model as model

    def explode(*args, **kwargs):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(model, "train", explode)
    assert main(["train", "--data", str(trained[0]), "--out", str(tmp_path / "m.ckpt")]) == 3


def test_generate_outputs_and_no_optimization(trained, tmp_path):
    _, ckpt = trained
    out = tmp_path / "g"
    args = ["generate", "--text", "a red car is to the left of a black mailbox", "--ckpt", str(ckpt),
            "--variant", "no-optimization", "--out", str(out), *FAST]
    assert main(args) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert np.all(np.array(meta["lambda"]) == 0.5)
    assert meta["provenance"]["version"] == __version__
    for name in ("scene.ppm", "layout.json", "lambda.json", "overlay.png", "loss.png", "lambda.png"):
        assert (out / name).stat().st_size > 0
    assert (out / "scene.ppm").read_text().startswith("P3")


def test_generate_trace(trained, tmp_path):
    out = tmp_path / "g"
    assert main(["generate", "--text", "a dog is above a cat", "--ckpt", str(trained[1]), "--trace",
                 "--out", str(out), *FAST]) == 0
    lam = json.loads((out / "lambda.json").read_text())
    assert len(lam["lambda_trace"]) == len(lam["loss_trace"]) == 5


def test_generate_with_mask_layout(tmp_path):
    mask = np.zeros((32, 32), bool)
    mask[8:24, 4:14] = True
    write_pgm(mask, tmp_path / "m1.pgm")
    (tmp_path / "lay.json").write_text(json.dumps(
        {"objects": [{"id": 1, "mask_pgm": "m1.pgm"}, {"id": 2, "cx": 0.75, "cy": 0.5, "r": 0.2}]}))
    out = tmp_path / "g"
    assert main(["generate", "--text", "a red car is left of a dog", "--layout-file", str(tmp_path / "lay.json"),
                 "--out", str(out), *FAST]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    report = meta["objects"][0]["mask_report"]
    assert report["mask_pixels"] == int(mask.sum())
    assert "mask_report" not in meta["objects"][1]
    assert (out / "layout_mask1.pgm").exists()


@pytest.mark.parametrize(
    "text", ["a cat is above a bed and the bed is above the cat", "a flurble is left of a car", "a car is"]
)
def test_generate_user_errors(trained, tmp_path, text):
    assert main(["generate", "--text", text, "--ckpt", str(trained[1]), "--out", str(tmp_path / "g")]) == 2


def test_generate_layout_object_count_mismatch(tmp_path):
    (tmp_path / "lay.json").write_text(json.dumps({"objects": [{"id": 1, "cx": 0.5, "cy": 0.5}]}))
    assert main(["generate", "--text", "a car is left of a dog", "--layout-file", str(tmp_path / "lay.json"),
                 "--out", str(tmp_path / "g")]) == 2


def test_generate_non_finite_loss(trained, tmp_path, monkeypatch):
    import layoutattn.cli as cli

    def explode(*args, **kwargs):
        raise NonFiniteLossError("nan")

    monkeypatch.setattr(cli, "optimize", explode)
    assert main(["generate", "--text", "a dog", "--ckpt", str(trained[1]), "--out", str(tmp_path / "g")]) == 4


def test_unknown_config_keys_rejected(trained, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generator": {"grid": 32, "wobble": 1}}))
    assert main(["generate", "--text", "a dog", "--ckpt", str(trained[1]), "--config", str(cfg),
                 "--out", str(tmp_path / "g")]) == 2
    cfg.write_text(json.dumps({"sampler": {}}))
    assert main(["generate", "--text", "a dog", "--ckpt", str(trained[1]), "--config", str(cfg),
                 "--out", str(tmp_path / "g")]) == 2


def test_bad_thread_cap(trained, tmp_path, monkeypatch):
    monkeypatch.setenv("LAYOUTATTN_THREADS", "zero")
    assert main(["eval", "--data", str(trained[0]), "--out", str(tmp_path / "e"), *FAST]) == 2


def test_eval_report(trained, tmp_path, capsys):
    data, ckpt = trained
    out = tmp_path / "e"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--limit", "5", "--ground-truth-layout",
                 "--out", str(out), *FAST]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["rows"]) == {"full", "no-spatial", "no-temporal", "no-optimization", "ground-truth-layout"}
    assert rep["config"]["version"] == __version__
    assert (out / "report.csv").read_text().startswith("row,scope,key")
    assert (out / "ablation.png").exists()
    assert "recall" in capsys.readouterr().out


def test_eval_all_items_failing(trained, tmp_path, monkeypatch):
    import layoutattn.evaluation as ev

    def explode(*args, **kwargs):
        raise NonFiniteLossError("nan")

    monkeypatch.setattr(ev, "optimize", explode)
    assert main(["eval", "--data", str(trained[0]), "--limit", "3", "--variants", "full",
                 "--out", str(tmp_path / "e"), *FAST]) == 4


def test_eval_unknown_variant(trained, tmp_path):
    assert main(["eval", "--data", str(trained[0]), "--variants", "full,sideways", "--out", str(tmp_path / "e")]) == 2


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--text", "a dog"])
    assert info.value.code == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "layoutattn.cli", "eval", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--data", "--ckpt", "--variants", "--seed", "--out", "--ground-truth-layout"):
        assert flag in res.stdout
