import math

import numpy as np
import pytest
import torch

from nfsubspace.array_signal import (ArrayGeometry, Coherence, DatasetConfig, SourceScene,
                                     SteeringModel, generate_dataset, simulate_snapshots,
                                     steering_vector)
from nfsubspace.autodiff import CDTYPE, DTYPE, hermitian_evd_diff, load_checkpoint
from nfsubspace.classical import (SearchGrid, esprit_doa, find_peaks_2d, music_spectrum_2d)
from nfsubspace.localizers import (SpectrumCounter, TrainConfig, TrainingDivergedError,
                                   dcd_infer, esprit_torch, nf_subspacenet_infer, train_dcd,
                                   train_nf_subspacenet, write_metrics_csv)
from nfsubspace.losses import rmspe_angle
from nfsubspace.models import AutoencoderConfig, init_parameters, surrogate_covariance
from nfsubspace.subspace import ModelOrderCriterion, empirical_covariance, hermitian_evd

NET = AutoencoderConfig()
G8 = ArrayGeometry.half_wavelength(8, 300e6)
G15 = ArrayGeometry.half_wavelength(15, 300e6)


def _ideal_params(logit=20.0):
    """Zero network (K = 0), so the surrogate is ``I + sigmoid(logit) * R_x[0]``."""
    p = init_parameters(NET, 0)
    with torch.no_grad():
        for k, v in p.items():
            v.zero_()
        p["alpha_logit"].fill_(logit)
    return p


def _noiseless(scene, geometry, t=200, seed=0):
    return simulate_snapshots(scene, geometry, SteeringModel.FRESNEL, 300.0, t,
                              np.random.default_rng(seed))


def _toy(geometry=G15, n=64, seed=3, coherence=Coherence.COHERENT, m=2):
    return generate_dataset(DatasetConfig(geometry=geometry, num_samples=n, coherence=coherence,
                                          num_sources=m, snr_db=10.0), seed)


# ----------------------------------------------------------------------------- inference

def test_ideal_surrogate_is_identity_plus_covariance():
    scene = SourceScene([0.3], [6.0])
    x = _noiseless(scene, G8)
    r = surrogate_covariance(x, _ideal_params(), NET).detach().numpy()
    np.testing.assert_allclose(r, np.eye(8) + empirical_covariance(x), atol=1e-7)


def test_nf_infer_matches_manual_composition():
    scene = SourceScene([0.3, -0.2], [6.0, 12.0])
    x = _noiseless(scene, G8)
    grid = SearchGrid.default(G8, angle_step_deg=1.0, range_step=0.25)
    counter = SpectrumCounter()
    est = nf_subspacenet_infer(x, _ideal_params(), NET, G8, grid, num_sources=2, counter=counter)
    r = surrogate_covariance(x, _ideal_params(), NET).detach().numpy()
    spec = music_spectrum_2d(hermitian_evd(r).noise_subspace(2), grid, G8)
    manual = find_peaks_2d(spec, 2, "NF-SubspaceNet", None, grid.steering(G8, "fresnel"), 0.99)
    np.testing.assert_array_equal(est.angles, manual.angles)
    np.testing.assert_array_equal(est.ranges, manual.ranges)
    assert counter.count == grid.size
    assert rmspe_angle(scene.angles, est.angles) < np.deg2rad(1.0)


def test_zero_sources_gives_empty_estimate():
    x = _noiseless(SourceScene([0.1], [8.0]), G8)
    grid = SearchGrid.default(G8)
    counter = SpectrumCounter()
    never = ModelOrderCriterion.threshold(1e9)
    est = nf_subspacenet_infer(x, _ideal_params(), NET, G8, grid, rule=never, counter=counter)
    assert est.angles.size == 0 and counter.count == 0
    est = dcd_infer(x, _ideal_params(), _ideal_params(), NET, G8, grid.ranges, rule=never,
                    counter=counter)
    assert est.angles.size == 0 and counter.count == 0
    with pytest.raises(ValueError):
        nf_subspacenet_infer(x, _ideal_params(), NET, G8, grid)


def _inject_surrogates(monkeypatch, by_params):
    """Make ``surrogate_covariance`` return fixed matrices keyed by the parameter object."""
    import nfsubspace.localizers as loc
    monkeypatch.setattr(loc, "surrogate_covariance",
                        lambda x, params, net: torch.tensor(by_params[id(params)]))


def test_dcd_single_source_near_ideal(monkeypatch):
    theta, rho, eps = 0.25, 7.0, 1e-3
    a_far = steering_vector(theta, 1e12, G8, SteeringModel.FRESNEL)[:, None]
    a_near = steering_vector(theta, rho, G8, SteeringModel.FRESNEL)[:, None]
    pa, pr = _ideal_params(), _ideal_params()
    _inject_surrogates(monkeypatch, {id(pa): a_far @ a_far.conj().T + eps * np.eye(8),
                                     id(pr): a_near @ a_near.conj().T + eps * np.eye(8)})
    axis = SearchGrid.default(G8, range_step=0.05).ranges
    counter = SpectrumCounter()
    est = dcd_infer(np.zeros((8, 100), complex), pa, pr, NET, G8, axis,
                    rule=ModelOrderCriterion("mdl"), counter=counter)
    assert est.angles.size == 1
    assert abs(est.angles[0] - theta) < 1e-9
    assert abs(est.ranges[0] - rho) <= 0.05 / 2 + 1e-9
    assert counter.count == axis.size  # M_hat * G_R, never the 2D grid
    assert not est.far_field[0]


def test_dcd_counter_scales_with_sources():
    scene = SourceScene([0.3, -0.4], [6.0, 10.0])
    x = _noiseless(scene, G8)
    axis = SearchGrid.default(G8).ranges
    counter = SpectrumCounter()
    dcd_infer(x, _ideal_params(), _ideal_params(), NET, G8, axis, num_sources=2,
              counter=counter)
    assert counter.count == 2 * axis.size


def test_dcd_shared_angle_recovers_at_most_one():
    scene = SourceScene([0.2, 0.2], [4.0, 11.0])
    x = _noiseless(scene, G8)
    axis = SearchGrid.default(G8, range_step=0.1).ranges
    est = dcd_infer(x, _ideal_params(), _ideal_params(), NET, G8, axis, num_sources=2)
    hits = 0
    for th, rh in zip(scene.angles, scene.ranges):
        hits += any(abs(a - th) < 1e-2 and abs(r - rh) < 0.5
                    for a, r in zip(est.angles, est.ranges))
    assert hits <= 1


def test_dcd_far_field_flag_at_axis_edge():
    scene = SourceScene([0.1], [24.5], regimes=("far_field",), physical_ranges=(500.0,))
    x = simulate_snapshots(scene, G8, SteeringModel.EXACT, 300.0, 200, np.random.default_rng(1))
    axis = SearchGrid.default(G8, range_limit="full").ranges
    est = dcd_infer(x, _ideal_params(), _ideal_params(), NET, G8, axis, num_sources=1)
    assert est.far_field[0] and est.ranges[0] == axis[-1]


def test_esprit_torch_exact_far_field():
    angles = np.array([-0.5, 0.1, 0.7])
    a = np.stack([steering_vector(t, 1e9, G8, SteeringModel.EXACT) for t in angles], axis=1)
    eig = hermitian_evd(a @ a.conj().T)
    u = torch.tensor(eig.signal_subspace(3), dtype=CDTYPE)[None]
    est = np.sort(esprit_torch(u, G8).numpy()[0])
    assert np.abs(est - angles).max() < 1e-6
    np.testing.assert_allclose(est, esprit_doa(a @ a.conj().T, 3, G8), atol=1e-9)


def test_esprit_torch_is_differentiable():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    r = torch.tensor(z @ z.conj().T, dtype=CDTYPE, requires_grad=True)
    _, vectors = hermitian_evd_diff(r)
    theta = esprit_torch(vectors[None, :, :2], G8)
    theta.sum().backward()
    assert torch.isfinite(torch.view_as_real(r.grad)).all()


# ----------------------------------------------------------------------------- config

def test_train_config_schedule_and_validation():
    cfg = TrainConfig()
    widths = [cfg.mask_half_width(e) for e in range(80)]
    assert widths[0] == 16 and min(widths) == 1
    assert all(b <= a for a, b in zip(widths, widths[1:]))
    assert TrainConfig.from_dict(TrainConfig(stage_epochs=(1, 2, 3)).to_dict()) \
        == TrainConfig(stage_epochs=(1, 2, 3))
    for bad in ({"lr": 0}, {"mu_e": -1}, {"regularizer": "x"}, {"optimizer": "rmsprop"},
                {"mask_l0": 0}, {"stage_epochs": (1, 2)}, {"epochs": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ----------------------------------------------------------------------------- training

def test_toy_training_halves_loss():
    res = train_nf_subspacenet(_toy(), TrainConfig(epochs=50, batch_size=16, monitor_samples=0))
    losses = res.losses()
    assert len(losses) == 50 and all(math.isfinite(v) for v in losses)
    assert losses[-1] <= 0.5 * losses[0]


def test_training_is_deterministic(tmp_path):
    ds = _toy(G8, n=24)
    cfg = TrainConfig(epochs=3, batch_size=8, monitor_samples=4, seed=11)
    a = train_nf_subspacenet(ds, cfg, checkpoint_dir=tmp_path / "a")
    b = train_nf_subspacenet(ds, cfg, checkpoint_dir=tmp_path / "b")
    for k in a.params["net"]:
        assert torch.equal(a.params["net"][k], b.params["net"][k])
    assert a.trace == b.trace
    assert (tmp_path / "a" / "nf_subspacenet.ckpt").read_bytes() == \
        (tmp_path / "b" / "nf_subspacenet.ckpt").read_bytes()
    loaded, extra = load_checkpoint(tmp_path / "a" / "nf_subspacenet.ckpt")
    assert extra["method"] == "nf-subspacenet"
    assert torch.equal(loaded["alpha_logit"], a.params["net"]["alpha_logit"].detach())


def test_zero_weight_means_pure_spectrum_loss():
    ds = _toy(G8, n=16)
    base = dict(epochs=2, batch_size=8, monitor_samples=0)
    a = train_nf_subspacenet(ds, TrainConfig(mu_e=0.0, **base))
    b = train_nf_subspacenet(ds, TrainConfig(regularizer="none", **base))
    assert a.losses() == b.losses()


def test_mixed_source_counts_train():
    ds = generate_dataset(DatasetConfig(geometry=G8, num_samples=24, num_sources=(1, 3),
                                        snr_db=10.0), 5)
    res = train_nf_subspacenet(ds, TrainConfig(epochs=2, batch_size=8, monitor_samples=4,
                                               regularizer="ic"))
    assert all(math.isfinite(r["loss"]) and math.isfinite(r["angle_rmspe"]) for r in res.trace)


def test_divergence_is_reported(monkeypatch):
    import nfsubspace.localizers as loc
    monkeypatch.setattr(loc, "spectrum_loss",
                        lambda *a, **k: torch.full((a[1].shape[0],), float("nan"), dtype=DTYPE))
    with pytest.raises(TrainingDivergedError) as info:
        train_nf_subspacenet(_toy(G8, n=8), TrainConfig(epochs=1, monitor_samples=0))
    assert info.value.stage == "nf-subspacenet" and info.value.epoch == 0


def test_empty_dataset_rejected():
    ds = _toy(G8, n=4)
    ds.samples = []
    with pytest.raises(ValueError):
        train_nf_subspacenet(ds, TrainConfig(epochs=1))


def test_dcd_three_stage_traces(tmp_path):
    ds = _toy(G8, n=16, coherence=Coherence.NON_COHERENT)
    cfg = TrainConfig(batch_size=8, stage_epochs=(2, 3, 2), warmup_epochs=1)
    res = train_dcd(ds, cfg, checkpoint_dir=tmp_path)
    stages = [r["stage"] for r in res.trace]
    assert stages == ["dcd-angle"] * 2 + ["dcd-range"] * 3 + ["dcd-joint"] * 2
    assert all(math.isfinite(r["loss"]) for r in res.trace)
    rng_rows = [r for r in res.trace if r["stage"] == "dcd-range"]
    # warm-up epoch uses true angles, so no angle error is recorded there
    assert math.isnan(rng_rows[0]["angle_rmspe"])
    assert all(math.isfinite(r["angle_rmspe"]) for r in rng_rows[1:])
    for s in (1, 2, 3):
        for part in ("angle", "range"):
            assert (tmp_path / f"dcd_stage{s}_{part}.ckpt").exists()
    path = write_metrics_csv(res.trace, tmp_path / "m.csv")
    assert path.read_text().splitlines()[0] == "epoch,stage,loss,angle_rmspe,range_rmspe"


def test_dcd_full_warmup_never_uses_predictions():
    ds = _toy(G8, n=8, coherence=Coherence.NON_COHERENT)
    cfg = TrainConfig(batch_size=8, stage_epochs=(1, 3, 0), warmup_epochs=3)
    res = train_dcd(ds, cfg)
    assert all(math.isnan(r["angle_rmspe"]) for r in res.trace if r["stage"] == "dcd-range")


def test_dcd_stage_one_beats_plain_esprit():
    ds = _toy()
    res = train_dcd(ds, TrainConfig(batch_size=16, stage_epochs=(40, 0, 0), mu_e=0.0))
    learned, plain = [], []
    for x, scene in ds:
        with torch.no_grad():
            r = surrogate_covariance(x, res.params["angle"], NET).numpy()
        learned.append(rmspe_angle(scene.angles, esprit_doa(r, 2, G15)))
        plain.append(rmspe_angle(scene.angles, esprit_doa(empirical_covariance(x), 2, G15)))
    rms = lambda v: float(np.sqrt(np.mean(np.square(v))))  # noqa: E731
    assert rms(learned) < rms(plain)
