"""Configuration-driven experiments: datasets, training, evaluation and reports."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .array_signal import (ArrayGeometry, Coherence, ConfigError, DatasetConfig,
                           LabeledDataset, SourceScene, SteeringModel, generate_dataset,
                           save_dataset)
from .autodiff import load_checkpoint
from .classical import (Estimate, SearchGrid, beampattern, localize_2d_music,
                        music_spectrum_2d, range_music_1d, write_range_spectrum_csv,
                        write_spectrum_csv)
from .localizers import (SpectrumCounter, TrainConfig, TrainResult, dcd_infer,
                         nf_subspacenet_infer, train_dcd, train_nf_subspacenet,
                         write_metrics_csv)
from .losses import _angle_cost, best_permutation, cartesian
from .models import AutoencoderConfig, multiply_accumulate_count, surrogate_covariance
from .subspace import ModelOrderCriterion, empirical_covariance, hermitian_evd

logger = logging.getLogger(__name__)

PRESETS = {
    "n15_300mhz": {"num_elements": 15, "carrier_hz": 300e6},
    "n64_5ghz": {"num_elements": 64, "carrier_hz": 5e9},
}
LEARNED = ("nf-subspacenet", "dcd-music")
CLASSICAL = ("2d-music", "2d-music-sps")
METHODS = CLASSICAL + LEARNED
SWEEP_VARIABLES = ("snr_db", "num_snapshots", "eta")

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "nfsubspace experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenario": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["n15_300mhz", "n64_5ghz", "custom"]},
                "num_elements": {"type": "integer", "minimum": 4},
                "carrier_hz": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "coherence": {"enum": ["non-coherent", "coherent"]},
                "num_sources": {"oneOf": [
                    {"type": "integer", "minimum": 1},
                    {"type": "array", "items": {"type": "integer", "minimum": 1},
                     "minItems": 2, "maxItems": 2}]},
                "num_snapshots": {"type": "integer", "minimum": 2},
                "snr_db": {"type": "number"},
                "eta": {"type": "number", "minimum": 0},
                "model": {"enum": ["fresnel", "amplitude", "exact"]},
                "angle_support": {"type": "array", "items": {"type": "number"},
                                  "minItems": 2, "maxItems": 2},
                "range_support": {"type": ["array", "null"], "items": {"type": "number"},
                                  "minItems": 2, "maxItems": 2},
            },
        },
        "test_dataset": {"type": "object",
                         "description": "overrides applied to the dataset section for test data"},
        "train_size": {"type": "integer", "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["variable", "values"],
            "properties": {
                "variable": {"enum": list(SWEEP_VARIABLES)},
                "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            },
        },
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {"name": {"enum": list(METHODS)},
                               "options": {"type": "object"}},
            },
        },
        "rules": {"type": "array", "minItems": 1,
                  "items": {"type": "string",
                            "pattern": "^(mdl|aic|known|threshold(:[0-9.eE+-]+)?)$"}},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "angle_step_deg": {"type": "number", "exclusiveMinimum": 0},
                "angle_limit_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 90},
                "range_step": {"type": "number", "exclusiveMinimum": 0},
                "range_limit": {"enum": ["half", "full"]},
            },
        },
        "network": {"type": "object"},
        "train": {"type": "object"},
        "max_sources": {"type": "integer", "minimum": 1},
    },
}

DEFAULT_CONFIG = {
    "scenario": "default",
    "seed": 0,
    "geometry": {"preset": "n15_300mhz"},
    "dataset": {"coherence": "coherent", "num_sources": 2, "num_snapshots": 100,
                "snr_db": 10.0, "eta": 0.0, "model": "fresnel"},
    "test_dataset": {},
    "train_size": 4096,
    "test_size": 410,
    "sweep": {"variable": "snr_db", "values": [10.0]},
    "methods": [{"name": "2d-music"}, {"name": "2d-music-sps"}],
    "rules": ["known"],
    "grid": {},
    "network": {},
    "train": {},
}

RESULT_FIELDS = ["method", "rule", "sweep_variable", "sweep_value", "rmspe_m",
                 "angle_rmspe_rad", "range_rmspe_m", "accuracy_pct", "mismatch_pct",
                 "scored", "trials"]


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the merged JSON document."""

    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid experiment config: {exc.message}") from exc
        cfg = cls(_merge(DEFAULT_CONFIG, d))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def check(self):
        # Build everything once so inconsistent values fail before any work starts.
        self.geometry()
        self.dataset_config("train", self.sweep_values[0])
        self.dataset_config("test", self.sweep_values[0])
        self.train_config()
        self.network_config()
        for r in self.rules:
            self.parse_rule(r)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        return ExperimentConfig(_merge(self.raw, {"seed": int(seed)}))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    @property
    def sweep_variable(self) -> str:
        return self.raw["sweep"]["variable"]

    @property
    def sweep_values(self) -> list[float]:
        return list(self.raw["sweep"]["values"])

    @property
    def methods(self) -> list[dict]:
        return self.raw["methods"]

    @property
    def rules(self) -> list[str]:
        return self.raw["rules"]

    @property
    def max_sources(self) -> int:
        if "max_sources" in self.raw:
            return int(self.raw["max_sources"])
        n = self.raw["dataset"].get("num_sources", 2)
        return int(max(n)) if isinstance(n, list) else int(n)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:12]

    def geometry(self) -> ArrayGeometry:
        g = self.raw["geometry"]
        preset = g.get("preset", "n15_300mhz")
        if preset == "custom":
            if "num_elements" not in g or "carrier_hz" not in g:
                raise ConfigError("custom geometry needs num_elements and carrier_hz")
            params = {"num_elements": g["num_elements"], "carrier_hz": g["carrier_hz"]}
        else:
            params = dict(PRESETS[preset])
        return ArrayGeometry.half_wavelength(int(params["num_elements"]),
                                             float(params["carrier_hz"]))

    def grid(self, geometry: ArrayGeometry | None = None) -> SearchGrid:
        return SearchGrid.default(geometry or self.geometry(), **self.raw["grid"])

    def dataset_config(self, split: str, sweep_value: float | None = None) -> DatasetConfig:
        d = dict(self.raw["dataset"])
        if split == "test":
            d.update(self.raw.get("test_dataset", {}))
        if sweep_value is not None and split == "test":
            d[self.sweep_variable] = sweep_value
        if isinstance(d.get("num_sources"), list):
            d["num_sources"] = tuple(d["num_sources"])
        for key in ("angle_support", "range_support"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "num_snapshots" in d:
            d["num_snapshots"] = int(d["num_snapshots"])
        size = self.raw["train_size"] if split == "train" else self.raw["test_size"]
        try:
            cfg = DatasetConfig(geometry=self.geometry(), num_samples=int(size),
                                coherence=Coherence(d.pop("coherence", "non-coherent").replace("-", "_")),
                                model=SteeringModel(d.pop("model", "fresnel")), **d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {split} dataset settings: {exc}") from exc
        return cfg

    def train_config(self) -> TrainConfig:
        d = dict(self.raw["train"])
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train settings: {exc}") from exc

    def network_config(self) -> AutoencoderConfig:
        try:
            return AutoencoderConfig(**self.raw["network"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid network settings: {exc}") from exc

    @staticmethod
    def parse_rule(rule: str) -> ModelOrderCriterion | None:
        """``"known"`` means the true source count is supplied (no model-order step)."""
        if rule == "known":
            return None
        try:
            return ModelOrderCriterion.parse(rule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def training_key(self, method: str) -> str:
        """Hash of everything that influences a learned method's parameters."""
        part = {"method": method, "seed": self.seed, "geometry": self.raw["geometry"],
                "dataset": self.raw["dataset"], "train_size": self.raw["train_size"],
                "network": self.raw["network"], "train": self.raw["train"],
                "grid": self.raw["grid"]}
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()[:12]


# ----------------------------------------------------------------------------- scoring

@dataclass
class SampleScore:
    position: float | None
    angle: float | None
    range: float | None
    order_correct: bool


def score_sample(scene: SourceScene, est: Estimate) -> SampleScore:
    """Errors of one estimate against its scene.

    With equal counts the permutation is exhaustive; otherwise the best
    ``min(M, M_hat)`` subset is matched by assignment. Angle and range errors
    share the angle matching; the position error uses its own Cartesian one.
    An empty estimate yields no errors.
    """
    theta = np.asarray(scene.angles, dtype=float)
    rho = np.asarray(scene.ranges, dtype=float)
    ok = est.num_sources == scene.num_sources
    if est.num_sources == 0:
        return SampleScore(None, None, None, ok)
    k = min(theta.size, est.num_sources)
    ang_cost = _angle_cost(theta, est.angles)
    c, c_hat = cartesian(theta, rho), cartesian(est.angles, est.ranges)
    pos_cost = ((c[:, None, :] - c_hat[None, :, :]) ** 2).sum(-1)
    if ok:
        rows = np.arange(k)
        cols = best_permutation(ang_cost)
        pos = float(np.sqrt(pos_cost[rows, best_permutation(pos_cost)].sum() / k))
    else:
        rows, cols = linear_sum_assignment(ang_cost)
        pr, pc = linear_sum_assignment(pos_cost)
        pos = float(np.sqrt(pos_cost[pr, pc].sum() / k))
    ang = float(np.sqrt(ang_cost[rows, cols].sum() / k))
    rng = float(np.sqrt(((rho[rows] - est.ranges[cols]) ** 2).sum() / k))
    return SampleScore(pos, ang, rng, ok)


@dataclass
class ResultRow:
    method: str
    rule: str
    sweep_variable: str
    sweep_value: float
    rmspe_m: float
    angle_rmspe_rad: float
    range_rmspe_m: float
    accuracy_pct: float
    mismatch_pct: float
    scored: int
    trials: int

    def as_csv(self) -> dict:
        d = self.__dict__.copy()
        return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in d.items()}


def _rms_or_nan(values: list[float]) -> float:
    return float(np.sqrt(np.mean(np.square(values)))) if values else float("nan")


def aggregate(scores: list[SampleScore], method: str, rule: str, variable: str,
              value: float) -> ResultRow:
    """RMSPE is the root of the mean squared per-sample errors over scored samples."""
    scored = [s for s in scores if s.position is not None]
    acc = 100.0 * sum(s.order_correct for s in scores) / len(scores) if scores else float("nan")
    return ResultRow(method, rule, variable, float(value),
                     _rms_or_nan([s.position for s in scored]),
                     _rms_or_nan([s.angle for s in scored]),
                     _rms_or_nan([s.range for s in scored]),
                     acc, 100.0 - acc, len(scored), len(scores))


Estimator = Callable[[np.ndarray, SourceScene, ModelOrderCriterion | None], Estimate]


def evaluate_method(estimator: Estimator, dataset: LabeledDataset, rule: str, method: str = "",
                    variable: str = "", value: float = float("nan")) -> ResultRow:
    """Score ``estimator`` on every sample; ``rule="known"`` hands it the true count."""
    criterion = ExperimentConfig.parse_rule(rule)
    scores = [score_sample(scene, estimator(x, scene, criterion)) for x, scene in dataset]
    return aggregate(scores, method, rule, variable, value)


def oracle_estimator(x, scene: SourceScene, rule) -> Estimate:
    return Estimate(scene.angles, scene.ranges, scene.far_field, "oracle")


def make_estimator(name: str, geometry: ArrayGeometry, grid: SearchGrid, options: dict,
                   trained: dict[str, TrainResult], net: AutoencoderConfig,
                   max_sources: int, counter: SpectrumCounter | None = None) -> Estimator:
    """Bind a configured method to a uniform ``(x, scene, rule) -> Estimate`` call."""
    model = SteeringModel(options.get("model", "fresnel"))

    def known(scene, rule):
        return scene.num_sources if rule is None else None

    if name in CLASSICAL:
        coherent = name == "2d-music-sps"
        sub = options.get("subarray_len")

        def run(x, scene, rule):
            return localize_2d_music(x, geometry, grid, rule, known(scene, rule), coherent,
                                     sub, model, max_sources)
        return run
    if name not in trained:
        raise ConfigError(f"method {name!r} has no trained parameters")
    if name == "nf-subspacenet":
        params = trained[name].params["net"]

        def run(x, scene, rule):
            return nf_subspacenet_infer(x, params, net, geometry, grid, rule,
                                        known(scene, rule), model, counter=counter)
        return run
    if name == "dcd-music":
        pa, pr = trained[name].params["angle"], trained[name].params["range"]

        def run(x, scene, rule):
            return dcd_infer(x, pa, pr, net, geometry, grid.ranges, rule, known(scene, rule),
                             model, counter=counter)
        return run
    raise ConfigError(f"unknown method {name!r}")


# ----------------------------------------------------------------------------- persistence

def write_results_csv(rows: list[ResultRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row.as_csv())
    return path


def read_results_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


CHECKPOINT_FILES = {
    "nf-subspacenet": {"net": "nf_subspacenet.ckpt"},
    "dcd-music": {"angle": "dcd_stage3_angle.ckpt", "range": "dcd_stage3_range.ckpt"},
}


def test_seed(cfg: ExperimentConfig, sweep_index: int) -> int:
    """Seed of the test set at one sweep point, independent of the training seed stream."""
    return int(np.random.SeedSequence([cfg.seed, 7, sweep_index]).generate_state(1)[0])


def _checkpoint_paths(cfg: ExperimentConfig, method: str, checkpoint_dir: Path):
    if method not in CHECKPOINT_FILES:
        raise ConfigError(f"{method!r} is not a learned method")
    base = Path(checkpoint_dir) / f"{method}-{cfg.training_key(method)}"
    return base, {k: base / v for k, v in CHECKPOINT_FILES[method].items()}


def load_trained(cfg: ExperimentConfig, method: str, checkpoint_dir: Path) -> TrainResult:
    """Cached parameters only; a missing checkpoint is a configuration error."""
    base, paths = _checkpoint_paths(cfg, method, checkpoint_dir)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise ConfigError(f"missing checkpoint for {method}: {', '.join(missing)}")
    return train_or_load(cfg, method, None, checkpoint_dir)[0]


def train_or_load(cfg: ExperimentConfig, method: str, dataset: LabeledDataset | None,
                  checkpoint_dir: Path) -> tuple[TrainResult, bool]:
    """Load cached parameters for ``method`` or train and cache them.

    Checkpoints live under ``<checkpoint_dir>/<method>-<training key>``.
    Returns the result and whether training actually ran.
    """
    base, paths = _checkpoint_paths(cfg, method, checkpoint_dir)
    key = cfg.training_key(method)
    if all(p.exists() for p in paths.values()):
        params = {k: load_checkpoint(p)[0] for k, p in paths.items()}
        trace = []
        metrics = base / "metrics.csv"
        if metrics.exists():
            with metrics.open() as fh:
                for row in csv.DictReader(fh):
                    trace.append({"epoch": int(row["epoch"]), "stage": row["stage"],
                                  "loss": float(row["loss"]),
                                  "angle_rmspe": float(row["angle_rmspe"]),
                                  "range_rmspe": float(row["range_rmspe"])})
        logger.info("loaded %s parameters from %s", method, base)
        return TrainResult(params, trace), False
    if dataset is None:
        dataset = generate_dataset(cfg.dataset_config("train"), cfg.seed)
    tcfg, net = cfg.train_config(), cfg.network_config()
    model = SteeringModel(cfg.raw["dataset"].get("model", "fresnel"))
    grid = cfg.grid()
    if method == "nf-subspacenet":
        result = train_nf_subspacenet(dataset, tcfg, net, model, grid, checkpoint_dir=base)
    else:
        result = train_dcd(dataset, tcfg, net, model, grid.ranges, checkpoint_dir=base)
    write_metrics_csv(result.trace, base / "metrics.csv")
    (base / "training.json").write_text(json.dumps(
        {"method": method, "key": key, "seed": cfg.seed, "train": tcfg.to_dict(),
         "network": net.to_dict()}, indent=2, sort_keys=True))
    return result, True


# ----------------------------------------------------------------------------- reports

@dataclass
class Report:
    directory: Path
    rows: list[ResultRow] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _record_error(report: Report, stage: str, exc: BaseException):
    logger.error("%s failed: %s", stage, exc)
    report.errors.append({"stage": stage, "type": type(exc).__name__, "message": str(exc),
                          "traceback": traceback.format_exc()})


def write_manifest(report: Report, cfg: ExperimentConfig, command: str) -> Path:
    manifest = {"command": command, "scenario": cfg.scenario, "seed": cfg.seed,
                "config_hash": cfg.config_hash(), "status": "ok" if report.ok else "failed",
                "artifacts": sorted(report.artifacts), "errors": report.errors,
                "config": cfg.raw,
                "notes": {"rmspe": "root of mean squared per-sample errors over samples "
                                   "with a non-empty estimate; when M_hat != M the best "
                                   "min(M, M_hat) subset is scored and counted as mismatch"}}
    name = "manifest.json" if report.ok else "error_manifest.json"
    path = report.directory / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _tag(cfg: ExperimentConfig) -> str:
    return f"{cfg.scenario} | config {cfg.config_hash()} | seed {cfg.seed}"


def dump_spectra(cfg: ExperimentConfig, trained: dict[str, TrainResult], x: np.ndarray,
                 scene: SourceScene, out_dir: Path) -> list[Path]:
    """2D spectra (and DCD range spectra) of every configured method for one sample."""
    from . import plotting

    geometry, grid, net = cfg.geometry(), cfg.grid(), cfg.network_config()
    out_dir.mkdir(parents=True, exist_ok=True)
    m = scene.num_sources
    written = []
    truth = (np.asarray(scene.angles), np.asarray(scene.ranges))
    for spec in cfg.methods:
        name = spec["name"]
        model = SteeringModel(spec.get("options", {}).get("model", "fresnel"))
        if name == "dcd-music":
            if name not in trained:
                continue
            pa, pr = trained[name].params["angle"], trained[name].params["range"]
            est = dcd_infer(x, pa, pr, net, geometry, grid.ranges, num_sources=m, model=model)
            with torch.no_grad():
                noise = hermitian_evd(surrogate_covariance(x, pr, net).numpy()).noise_subspace(m)
            for i, theta in enumerate(est.angles):
                _, values = range_music_1d(noise, theta, grid.ranges, geometry, model)
                p = write_range_spectrum_csv(grid.ranges, values,
                                             out_dir / f"spectrum_{name}_range_{i}.csv", theta)
                written += [p, plotting.plot_range_spectrum(
                    grid.ranges, values, p.with_suffix(".png"), theta, _tag(cfg))]
            continue
        if name == "nf-subspacenet":
            if name not in trained:
                continue
            with torch.no_grad():
                r = surrogate_covariance(x, trained[name].params["net"], net).numpy()
            geo = geometry
        elif name == "2d-music-sps":
            from .subspace import default_subarray_len, spatial_smoothing
            length = spec.get("options", {}).get("subarray_len") or default_subarray_len(
                geometry.num_elements, cfg.max_sources)
            r, geo = spatial_smoothing(x, length), geometry.subarray(length)
        else:
            r, geo = empirical_covariance(x), geometry
        spectrum = music_spectrum_2d(hermitian_evd(r).noise_subspace(m), grid, geo, model)
        p = write_spectrum_csv(spectrum, out_dir / f"spectrum_{name}.csv")
        written += [p, plotting.plot_spectrum_2d(spectrum, p.with_suffix(".png"),
                                                 f"{name}: {_tag(cfg)}", truth)]
    return written


def dump_beampatterns(cfg: ExperimentConfig, x: np.ndarray, scene: SourceScene,
                      out_dir: Path) -> list[Path]:
    from . import plotting

    geometry, grid = cfg.geometry(), cfg.grid()
    out_dir.mkdir(parents=True, exist_ok=True)
    r = empirical_covariance(x)
    written = []
    truth = (np.asarray(scene.angles), np.asarray(scene.ranges))
    for kind in ("bartlett", "mvdr"):
        bp = beampattern(r, grid, geometry, kind=kind)
        p = write_spectrum_csv(bp, out_dir / f"beampattern_{kind}.csv")
        written += [p, plotting.plot_spectrum_2d(bp, p.with_suffix(".png"),
                                                 f"{kind}: {_tag(cfg)}", truth, db=True)]
    return written


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path,
                   checkpoint_dir: str | Path | None = None,
                   command: str = "evaluate") -> Report:
    """Datasets, training (or cached checkpoints), sweep evaluation and artifacts.

    A failing stage is recorded and the remaining stages still run; the
    report then carries an error manifest instead of a plain manifest.
    """
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else out / "checkpoints"
    report = Report(out)
    geometry, grid, net = cfg.geometry(), cfg.grid(), cfg.network_config()

    trained: dict[str, TrainResult] = {}
    learned = [m["name"] for m in cfg.methods if m["name"] in LEARNED]
    train_ds = None
    for method in learned:
        try:
            if train_ds is None:
                train_ds = generate_dataset(cfg.dataset_config("train"), cfg.seed)
            trained[method], _ = train_or_load(cfg, method, train_ds, ckpt)
            if trained[method].trace:
                p = write_metrics_csv(trained[method].trace, out / f"training_{method}.csv")
                report.artifacts += [p.name, plotting.plot_training(
                    trained[method].trace, p.with_suffix(".png"), _tag(cfg)).name]
        except Exception as exc:  # noqa: BLE001 - any stage failure goes to the manifest
            _record_error(report, f"train:{method}", exc)

    first_test = None
    for i, value in enumerate(cfg.sweep_values):
        try:
            test = generate_dataset(cfg.dataset_config("test", value), test_seed(cfg, i))
        except Exception as exc:  # noqa: BLE001
            _record_error(report, f"dataset:{value}", exc)
            continue
        first_test = first_test or test
        for spec in cfg.methods:
            try:
                est = make_estimator(spec["name"], geometry, grid, spec.get("options", {}),
                                     trained, net, cfg.max_sources)
            except Exception as exc:  # noqa: BLE001
                _record_error(report, f"evaluate:{spec['name']}", exc)
                continue
            for rule in cfg.rules:
                try:
                    report.rows.append(evaluate_method(est, test, rule, spec["name"],
                                                       cfg.sweep_variable, value))
                except Exception as exc:  # noqa: BLE001
                    _record_error(report, f"evaluate:{spec['name']}:{rule}", exc)

    if report.rows:
        p = write_results_csv(report.rows, out / "results.csv")
        report.artifacts += [p.name, plotting.plot_results(
            report.rows, out / "results.png", _tag(cfg)).name]
    if first_test is not None:
        x, scene = first_test.samples[0]
        for stage, fn in (("spectra", lambda: dump_spectra(cfg, trained, x, scene, out / "spectra")),
                          ("beampattern", lambda: dump_beampatterns(cfg, x, scene,
                                                                     out / "beampattern"))):
            try:
                report.artifacts += [str(p.relative_to(out)) for p in fn()]
            except Exception as exc:  # noqa: BLE001
                _record_error(report, stage, exc)
    write_manifest(report, cfg, command)
    return report


# ----------------------------------------------------------------------------- complexity

@dataclass
class ComplexityRow:
    method: str
    num_elements: int
    tau_t: int
    network_macs: int
    grid_cells: int
    spectrum_evaluations: int
    symbolic_cost: int


def complexity_table(cfg: ExperimentConfig) -> list[ComplexityRow]:
    """Symbolic costs ``N^2 (tau T + C + G_2D)`` and ``N^2 (tau T + 2C + M G_R)``."""
    geometry, grid, net = cfg.geometry(), cfg.grid(), cfg.network_config()
    n = geometry.num_elements
    t = int(cfg.raw["dataset"].get("num_snapshots", 100))
    tau_t = net.tau_max * t
    c = multiply_accumulate_count(net, n)
    m = cfg.max_sources
    g2d, gr = grid.size, grid.ranges.size
    return [
        ComplexityRow("nf-subspacenet", n, tau_t, c, g2d, g2d, n * n * (tau_t + c + g2d)),
        ComplexityRow("dcd-music", n, tau_t, c, gr, m * gr, n * n * (tau_t + 2 * c + m * gr)),
    ]


def time_inference(cfg: ExperimentConfig, repeats: int = 3) -> dict[str, float]:
    """Median wall-clock seconds per inference with freshly initialized networks."""
    from .models import init_parameters

    geometry, grid, net = cfg.geometry(), cfg.grid(), cfg.network_config()
    dcfg = cfg.dataset_config("test", cfg.sweep_values[0])
    dcfg.num_samples = 1
    x, scene = generate_dataset(dcfg, test_seed(cfg, 0)).samples[0]
    m = scene.num_sources
    pa = init_parameters(net, 0)
    pr = init_parameters(net, 1)
    calls = {
        "2d-music": lambda: localize_2d_music(x, geometry, grid, num_sources=m),
        "nf-subspacenet": lambda: nf_subspacenet_infer(x, pa, net, geometry, grid, num_sources=m),
        "dcd-music": lambda: dcd_infer(x, pa, pr, net, geometry, grid.ranges, num_sources=m),
    }
    out = {}
    for name, fn in calls.items():
        fn()  # warm caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out[name] = float(np.median(times))
    return out


def complexity_report(cfg: ExperimentConfig, out_dir: str | Path,
                      measure: bool = True) -> Report:
    """Writes ``complexity.csv`` (deterministic counts) and ``timing.json`` (wall clock)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = Report(out)
    rows = complexity_table(cfg)
    path = out / "complexity.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ComplexityRow.__dataclass_fields__))
        w.writeheader()
        for row in rows:
            w.writerow(row.__dict__)
    report.artifacts.append(path.name)
    if measure:
        timing = {"seconds_per_inference": time_inference(cfg), "config_hash": cfg.config_hash(),
                  "seed": cfg.seed}
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
        report.artifacts.append("timing.json")
    write_manifest(report, cfg, "complexity")
    return report


def simulate(cfg: ExperimentConfig, out_dir: str | Path) -> Report:
    """Generate and persist the training set and one test set per sweep value."""
    out = Path(out_dir)
    report = Report(out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(generate_dataset(cfg.dataset_config("train"), cfg.seed), out / "train")
    report.artifacts.append("train")
    for i, value in enumerate(cfg.sweep_values):
        name = f"test_{i:02d}"
        save_dataset(generate_dataset(cfg.dataset_config("test", value), test_seed(cfg, i)),
                     out / name)
        report.artifacts.append(name)
    write_manifest(report, cfg, "simulate")
    return report
