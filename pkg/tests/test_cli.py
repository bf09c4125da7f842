import json

import numpy as np
import pytest

from noctis.cli import main
from noctis.core import DESK, load_manifest, read_panoptic
from noctis.fusion import heads_from_labels, write_heads
from noctis.metrics import MetricReport
from noctis.scenegen import DAY, compose_scene, render


@pytest.fixture(scope="module")
def day_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--count", "3", "--seed", "4", "--dims", "32x48", "--out", str(root / "day")]) == 0
    return root


def test_generate_writes_manifest(day_set):
    index = load_manifest(day_set / "day" / "manifest.json")
    assert len(index) == 3 and all(e.domain == "day" for e in index.entries)


def test_convert_with_params(day_set, tmp_path):
    params = tmp_path / "n.txt"
    params.write_text("gain = 0.4\ngamma = 1.5\n")
    rc = main(["convert", "--manifest", str(day_set / "day" / "manifest.json"), "--fraction", "1.0",
               "--params", str(params), "--out", str(tmp_path / "conv")])
    assert rc == 0
    assert all(e.domain == "converted" for e in load_manifest(tmp_path / "conv" / "manifest.json").entries)


def test_train_infer_evaluate_compare(day_set, tmp_path, capsys):
    manifest = str(day_set / "day" / "manifest.json")
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"iterations": 3, "hidden": 8, "seed": 1}))
    assert main(["train", "--manifest", manifest, "--config", str(cfg), "--out", str(tmp_path / "m.npz")]) == 0
    assert main(["infer", "--model", str(tmp_path / "m.npz"), "--manifest", manifest,
                 "--out", str(tmp_path / "pred")]) == 0
    assert main(["evaluate", "--pred", str(tmp_path / "pred" / "manifest.json"), "--gt", manifest,
                 "--out", str(tmp_path / "a.json")]) == 0
    assert main(["evaluate", "--pred", manifest, "--gt", manifest, "--out", str(tmp_path / "b.json")]) == 0
    perfect = MetricReport.from_dict(json.loads((tmp_path / "b.json").read_text()))
    assert perfect.value("pq_all") == 100.0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a.json"), str(tmp_path / "b.json"),
                 "--out", str(tmp_path / "d.csv")]) == 0
    assert "PQ" in capsys.readouterr().out and (tmp_path / "d.csv").exists()


def test_infer_from_heads_round_trip(tmp_path):
    _, gt = render(compose_scene(5), DAY, (64, 128))
    write_heads(tmp_path / "h.bin", heads_from_labels(gt, DESK))
    assert main(["infer", "--heads", str(tmp_path / "h.bin"), "--out", str(tmp_path / "p.png")]) == 0
    assert read_panoptic(tmp_path / "p.png", DESK).sem.shape == (64, 128)


def test_train_translator(day_set, tmp_path):
    manifest = str(day_set / "day" / "manifest.json")
    cfg = tmp_path / "gan.json"
    cfg.write_text(json.dumps({"epochs": 1, "crop": 16}))
    assert main(["train-translator", "--day", manifest, "--night", manifest, "--config", str(cfg),
                 "--out", str(tmp_path / "t.npz")]) == 0
    assert (tmp_path / "t.npz").exists()


def test_validation_errors_exit_2(day_set, tmp_path, capsys):
    manifest = str(day_set / "day" / "manifest.json")
    assert main(["convert", "--manifest", manifest, "--fraction", "1.5", "--params", "x",
                 "--out", str(tmp_path / "c")]) == 2
    assert main(["convert", "--manifest", manifest, "--out", str(tmp_path / "c")]) == 2
    assert main(["evaluate", "--pred", str(tmp_path / "missing.json"), "--gt", manifest]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeed": 1}))
    assert main(["experiment", "--config", str(bad), "--out", str(tmp_path / "e")]) == 2
    assert "error" in capsys.readouterr().err


def test_non_finite_heads_exit_3(tmp_path):
    _, gt = render(compose_scene(5), DAY, (32, 48))
    path = tmp_path / "h.bin"
    write_heads(path, heads_from_labels(gt, DESK))
    raw = bytearray(path.read_bytes())
    raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    assert main(["infer", "--heads", str(path), "--out", str(tmp_path / "p.png")]) == 3


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == 2
