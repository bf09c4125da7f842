import json
from dataclasses import replace
from pathlib import Path

import pytest

from noctis.core import ValidationError
from noctis.harness import (ExperimentConfig, MixPart, Stage, StageError, delta_table, emit_report, load_config,
                            load_result, metric_table, run_approach1, run_approach2, run_experiment, worker_count)
from noctis.learner import TrainConfig, load_checkpoint
from noctis.nightshift import GanConfig

from fixture_grid import COLUMNS, fixture_result

ROOT = Path(__file__).resolve().parents[1]


def small_config(**kw) -> ExperimentConfig:
    base = ExperimentConfig(
        name="small", seed=5, dims=(32, 48), train_count=4, val_count=2,
        train=TrainConfig(iterations=6, lr_base=1e-2, seed=1, hidden=8, center_sigma=2.0),
        gan=GanConfig(epochs=1, lr_base=2e-3, seed=2, crop=16),
        mix=(MixPart("sodium", 1, 3), MixPart("dark", 1, 3)),
        stages=(Stage("refined-1", 2), Stage("refined-2", 3)),
    )
    return replace(base, **kw)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = small_config(night_params={"gain": 0.5})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"iterations": 10}}))
    loaded = load_config(p)
    assert loaded.seed == 3 and loaded.train.iterations == 10 and loaded.train.hidden == 64


def test_shipped_preset_matches_defaults():
    assert load_config(ROOT / "configs" / "desk.json") == load_config("desk") == ExperimentConfig()


def test_preset_values():
    cfg = ExperimentConfig()
    assert cfg.fraction == 0.28 and [s.iterations for s in cfg.stages] == [700, 1300]
    assert cfg.train.iterations == 2000
    assert len(set(cfg.seeds.values())) == len(cfg.seeds)


@pytest.mark.parametrize("bad", [
    {"fraction": 1.5}, {"converter": "magic"}, {"converter": "translator"}, {"retrain": "hot"},
    {"dims": (16, 64)}, {"night_params": {"brightness": 1}},
])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        small_config(**bad)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({"seeed": 1})
    with pytest.raises(ValidationError):
        Stage("x", -1)
    with pytest.raises(ValidationError):
        MixPart("sodium", 5, 3)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("NOCTIS_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("NOCTIS_THREADS", "zero")
    with pytest.raises(ValidationError):
        worker_count()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_fixture_table_rendering(tmp_path):
    result = fixture_result()
    _, txt = metric_table(result.section("approach1"))
    lines = txt.splitlines()
    assert lines[0].split() == ["Model", "Dataset", "PQ", "SQ", "RQ", "PQ_th", "SQ_th", "RQ_th", "PQ_st", "SQ_st",
                                "RQ_st", "mIoU", "fwIoU", "mACC", "pACC", "AP", "AP50"]
    assert lines[2].split()[:3] == ["baseline", "original", "53.78"]
    emit_report(result, tmp_path, formats=("json", "csv", "txt"))
    head = (tmp_path / "table1.csv").read_text().splitlines()[0]
    assert head == "model,dataset," + ",".join(COLUMNS)
    assert not (tmp_path / "table3.csv").exists()


def test_fixture_deltas():
    d = fixture_result().deltas["retrained-vs-baseline/converted"].columns
    assert d["pq_all"] == 10.63 and d["sq_all"] == 2.92 and d["miou"] == 14.43
    o = fixture_result().deltas["retrained-vs-baseline/original"].columns
    assert o["pq_all"] == -0.63 and o["rq_all"] == -0.57 and o["sq_all"] == -0.32
    _, txt = delta_table(fixture_result().deltas)
    assert "+10.63" in txt and "-0.63" in txt


def test_report_round_trip_is_byte_identical(tmp_path):
    emit_report(fixture_result(), tmp_path / "a")
    emit_report(load_result(tmp_path / "a" / "result.json"), tmp_path / "b")
    for name in ("table1.csv", "table2.csv", "deltas.csv", "table1.txt", "result.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------------------
# Pipeline on a tiny configuration
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    result = run_experiment(small_config(), out, threads=1, formats=("json", "csv", "txt", "png"))
    return out, result


def test_small_run_grid(small_run):
    out, result = small_run
    assert [(c.model, c.dataset) for c in result.section("approach1")] == [
        ("baseline", "original"), ("baseline", "converted"), ("retrained", "original"), ("retrained", "converted")]
    a2 = [(c.model, c.dataset, c.iterations) for c in result.section("approach2")]
    assert a2[:2] == [("baseline", "varied-night", 6), ("retrained", "varied-night", 6)]
    assert [x[0] for x in a2[2:]] == ["refined-1"] * 3 + ["refined-2"] * 3
    assert a2[-1][2] == 11
    assert set(result.deltas) == {"retrained-vs-baseline/original", "retrained-vs-baseline/converted",
                                  "refined-2-vs-retrained/varied-night", "refined-2-vs-retrained/original",
                                  "refined-2-vs-retrained/converted"}
    for name in ("result.json", "table1.csv", "table2.txt", "table3.csv", "table3_per_class.csv", "deltas.csv",
                 "per_class_pq.png", "loss_curves.png", "deltas.png"):
        assert (out / "reports" / name).exists(), name


def test_small_run_provenance(small_run):
    out, result = small_run
    for c in result.cells:
        model, _, _ = load_checkpoint(out / c.checkpoint)
        assert model.digest() == c.checkpoint_sha256
        assert (out / c.manifest).exists() and len(c.manifest_sha256) == 64


def test_small_run_is_deterministic_across_threads(small_run, tmp_path):
    out, _ = small_run
    run_experiment(small_config(), tmp_path, threads=2, formats=("json", "csv"))
    for p in sorted((out / "reports").glob("*.csv")) + [out / "reports" / "result.json"]:
        assert p.read_bytes() == (tmp_path / "reports" / p.name).read_bytes(), p.name


def test_zero_fraction_gives_identical_models(tmp_path):
    result, art = run_approach1(small_config(fraction=0.0), tmp_path, threads=1)
    assert art.baseline.model.equals(art.retrained.model)
    assert result.cell("baseline", "original").report == result.cell("retrained", "original").report


def test_zero_iteration_stage_keeps_metrics(small_run, tmp_path):
    out, _ = small_run
    cfg = small_config(stages=(Stage("refined-0", 0),))
    res = run_approach2(cfg, tmp_path, out / "checkpoints" / "retrained.npz", threads=1)
    assert res.cell("refined-0", "varied-night").report == res.cell("retrained", "varied-night").report


def test_no_stages_omits_refinement_tables(tmp_path):
    result = run_experiment(small_config(stages=()), tmp_path, threads=1)
    assert not result.section("approach2")
    assert (tmp_path / "reports" / "table1.csv").exists()
    assert not (tmp_path / "reports" / "table3.csv").exists()


def test_stage_failure_names_stage_and_keeps_partial_report(tmp_path):
    cfg = small_config(mix=(MixPart("sodium", 1, 3),))
    # a pool larger than the generator can serve is fine; an unreadable base checkpoint is not
    with pytest.raises(StageError) as exc:
        run_approach2(cfg, tmp_path, tmp_path / "missing.npz", threads=1)
    assert exc.value.stage == "load-base"
