import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from nfsubspace import harness
from nfsubspace.array_signal import ConfigError, SourceScene, load_dataset
from nfsubspace.classical import Estimate
from nfsubspace.cli import main

FAST = {
    "scenario": "unit",
    "seed": 3,
    "dataset": {"coherence": "non-coherent", "num_sources": 2, "snr_db": 20.0,
                "num_snapshots": 50},
    "train_size": 8,
    "test_size": 6,
    "grid": {"angle_step_deg": 2.0, "range_step": 2.0},
    "train": {"epochs": 1, "batch_size": 8, "monitor_samples": 2},
}


def _cfg(**over):
    return harness.ExperimentConfig.from_dict(harness._merge(FAST, over))


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


# ----------------------------------------------------------------------------- scoring

class _Fixed:
    """Estimator replaying a list of prepared estimates."""

    def __init__(self, estimates):
        self.estimates = iter(estimates)

    def __call__(self, x, scene, rule):
        return next(self.estimates)


def _dataset(scenes):
    class _DS:
        samples = [(np.zeros((4, 2)), s) for s in scenes]

        def __iter__(self):
            return iter(self.samples)
    return _DS()


def test_rmspe_matches_hand_computation():
    scenes = [SourceScene([0.0], [10.0]), SourceScene([0.5], [20.0]), SourceScene([-0.3], [15.0])]
    ests = [Estimate([0.0], [12.0], [False]),        # 2 m range error
            Estimate([0.5], [20.0], [False]),        # exact
            Estimate([-0.3 + 0.01], [15.0], [False])]
    e3 = 2 * 15.0 * math.sin(0.005)                  # chord of a 0.01 rad arc
    row = harness.evaluate_method(_Fixed(ests), _dataset(scenes), "known", "hand")
    assert row.rmspe_m == pytest.approx(math.sqrt((4.0 + 0.0 + e3 ** 2) / 3), rel=1e-12)
    assert row.range_rmspe_m == pytest.approx(math.sqrt(4.0 / 3), rel=1e-12)
    assert row.angle_rmspe_rad == pytest.approx(0.01 / math.sqrt(3), rel=1e-9)
    assert row.accuracy_pct == 100.0 and row.trials == 3 and row.scored == 3


def test_oracle_is_perfect():
    cfg = _cfg()
    ds = harness.generate_dataset(cfg.dataset_config("test", 10.0), 1)
    row = harness.evaluate_method(harness.oracle_estimator, ds, "known", "oracle")
    assert row.rmspe_m == 0 and row.accuracy_pct == 100.0 and row.mismatch_pct == 0.0


def test_empty_estimates_give_zero_accuracy():
    scenes = [SourceScene([0.1], [10.0])] * 4
    row = harness.evaluate_method(lambda x, s, r: Estimate.empty(), _dataset(scenes), "mdl")
    assert row.accuracy_pct == 0 and row.scored == 0 and math.isnan(row.rmspe_m)


def test_mismatch_scores_best_subset():
    scene = SourceScene([0.1, -0.4], [10.0, 30.0])
    score = harness.score_sample(scene, Estimate([-0.4], [30.0], [False]))
    assert not score.order_correct and score.position == pytest.approx(0, abs=1e-12)
    over = harness.score_sample(scene, Estimate([0.1, 0.9, -0.4], [10.0, 5.0, 30.0], [False] * 3))
    assert not over.order_correct and over.angle == pytest.approx(0, abs=1e-12)


# ----------------------------------------------------------------------------- config

def test_defaults_and_overrides():
    cfg = harness.ExperimentConfig.from_dict({})
    assert cfg.geometry().num_elements == 15 and cfg.raw["train_size"] == 4096
    assert cfg.raw["test_size"] == 410 and cfg.grid().angles.size == 241
    assert cfg.with_seed(9).seed == 9 and cfg.with_seed(None) is cfg
    assert _cfg().dataset_config("test", 5.0).snr_db == 5.0
    assert _cfg().dataset_config("train", 5.0).snr_db == 20.0
    assert _cfg().train_config().seed == 3
    assert _cfg(dataset={"num_sources": [2, 8]}).max_sources == 8


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"sweep": {"variable": "snr_db", "values": []}},
    {"sweep": {"variable": "temperature", "values": [1]}},
    {"methods": [{"name": "beamscan"}]},
    {"rules": ["bic"]},
    {"seed": -1},
    {"geometry": {"preset": "custom"}},
    {"train": {"lr": -1}},
    {"network": {"widths": []}},
    {"dataset": {"num_sources": 20}},
])
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.load(tmp_path / "broken.json")


def test_training_key_ignores_evaluation_settings():
    a = _cfg()
    b = _cfg(rules=["mdl"], sweep={"variable": "snr_db", "values": [0.0, 5.0]})
    assert a.training_key("nf-subspacenet") == b.training_key("nf-subspacenet")
    assert a.training_key("nf-subspacenet") != _cfg(seed=4).training_key("nf-subspacenet")


# ----------------------------------------------------------------------------- experiments

def test_sweep_cardinality_and_artifacts(tmp_path):
    cfg = _cfg(sweep={"variable": "snr_db", "values": [-5.0, 0.0, 5.0, 10.0]})
    report = harness.run_experiment(cfg, tmp_path)
    assert report.ok and len(report.rows) == 8
    rows = harness.read_results_csv(tmp_path / "results.csv")
    assert len(rows) == 8 and list(rows[0]) == harness.RESULT_FIELDS
    for r in rows:
        assert float(r["rmspe_m"]) >= 0 and 0 <= float(r["accuracy_pct"]) <= 100
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash() and manifest["seed"] == 3
    for name in ("results.png", "spectra/spectrum_2d-music.csv",
                 "spectra/spectrum_2d-music-sps.png", "beampattern/beampattern_mvdr.csv"):
        assert name in manifest["artifacts"] and (tmp_path / name).exists()


def test_rerun_is_bit_identical(tmp_path):
    cfg = _cfg(methods=[{"name": "2d-music"}, {"name": "nf-subspacenet"}], rules=["known", "mdl"])
    harness.run_experiment(cfg, tmp_path / "a", tmp_path / "ck_a")
    harness.run_experiment(cfg, tmp_path / "b", tmp_path / "ck_b")
    for name in ("results.csv", "training_nf-subspacenet.csv", "spectra/spectrum_2d-music.csv",
                 "results.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_cache_skips_training(tmp_path, monkeypatch):
    cfg = _cfg(methods=[{"name": "nf-subspacenet"}])
    res, trained = harness.train_or_load(cfg, "nf-subspacenet", None, tmp_path)
    assert trained
    monkeypatch.setattr(harness, "train_nf_subspacenet",
                        lambda *a, **k: pytest.fail("training ran despite a checkpoint"))
    again, trained = harness.train_or_load(cfg, "nf-subspacenet", None, tmp_path)
    assert not trained and again.trace == res.trace
    for k, v in res.params["net"].items():
        assert np.array_equal(v.detach().numpy(), again.params["net"][k].detach().numpy())
    report = harness.run_experiment(cfg, tmp_path / "out", tmp_path)
    assert report.ok


def test_missing_checkpoint_and_untrained_method(tmp_path):
    cfg = _cfg(methods=[{"name": "dcd-music"}])
    with pytest.raises(ConfigError):
        harness.load_trained(cfg, "dcd-music", tmp_path)
    with pytest.raises(ConfigError):
        harness.make_estimator("dcd-music", cfg.geometry(), cfg.grid(), {}, {},
                               cfg.network_config(), 2)


def test_failed_stage_yields_partial_report(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("training exploded")
    monkeypatch.setattr(harness, "train_nf_subspacenet", boom)
    cfg = _cfg(methods=[{"name": "2d-music"}, {"name": "nf-subspacenet"}])
    report = harness.run_experiment(cfg, tmp_path)
    assert not report.ok and len(report.rows) == 1
    err = json.loads((tmp_path / "error_manifest.json").read_text())
    stages = [e["stage"] for e in err["errors"]]
    assert "train:nf-subspacenet" in stages and err["status"] == "failed"
    assert (tmp_path / "results.csv").exists()


def test_complexity_table_counts(tmp_path):
    cfg = harness.ExperimentConfig.from_dict({})
    nfs, dcd = harness.complexity_table(cfg)
    grid = cfg.grid()
    assert nfs.grid_cells == 241 * grid.ranges.size and dcd.grid_cells == grid.ranges.size
    assert nfs.network_macs == 6_379_008
    assert nfs.symbolic_cost == 225 * (800 + 6_379_008 + 241 * grid.ranges.size)
    assert dcd.symbolic_cost == 225 * (800 + 2 * 6_379_008 + 2 * grid.ranges.size)
    harness.complexity_report(cfg, tmp_path, measure=False)
    with (tmp_path / "complexity.csv").open() as fh:
        assert [r["method"] for r in csv.DictReader(fh)] == ["nf-subspacenet", "dcd-music"]


def test_simulate_round_trip(tmp_path):
    cfg = _cfg(sweep={"variable": "num_snapshots", "values": [20, 40]})
    harness.simulate(cfg, tmp_path)
    train = load_dataset(tmp_path / "train")
    assert len(train) == 8
    fresh = harness.generate_dataset(cfg.dataset_config("train"), cfg.seed)
    assert np.array_equal(train.samples[0][0], fresh.samples[0][0])
    assert load_dataset(tmp_path / "test_01").samples[0][0].shape == (15, 40)


# ----------------------------------------------------------------------------- CLI

def test_cli_schema(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "nfsubspace experiment"


def test_cli_invalid_config_exit_code(tmp_path):
    path = _write(tmp_path / "bad.json", {"methods": [{"name": "nope"}]})
    assert main(["evaluate", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    err = json.loads((tmp_path / "o" / "error_manifest.json").read_text())
    assert err["status"] == "failed" and err["errors"][0]["type"] == "ConfigError"


def test_cli_missing_checkpoint_exit_code(tmp_path):
    path = _write(tmp_path / "c.json", harness._merge(FAST, {"methods": [{"name": "dcd-music"}]}))
    code = main(["spectrum", "--config", str(path), "--out-dir", str(tmp_path / "o")])
    assert code == 2 and (tmp_path / "o" / "error_manifest.json").exists()


def test_cli_commands_end_to_end(tmp_path):
    cfg = harness._merge(FAST, {"methods": [{"name": "2d-music"}, {"name": "nf-subspacenet"}]})
    path = _write(tmp_path / "c.json", cfg)
    out, ck = tmp_path / "out", tmp_path / "ck"
    common = ["--config", str(path), "--out-dir", str(out), "--checkpoint", str(ck), "--seed", "5"]
    assert main(["train", "--method", "nf-subspacenet", *common]) == 0
    assert (out / "training_nf-subspacenet.csv").exists()
    assert main(["evaluate", *common]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 5
    assert main(["spectrum", "--index", "2", *common]) == 0
    assert (out / "spectra" / "spectrum_nf-subspacenet.csv").exists()
    assert main(["beampattern", *common]) == 0
    assert main(["complexity", "--no-timing", *common]) == 0
    assert main(["simulate", *common]) == 0
    assert main(["spectrum", "--index", "99", *common]) == 2


def test_cli_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nfsubspace.cli", "complexity", "--no-timing",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "complexity.csv").exists()
