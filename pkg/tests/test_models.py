import numpy as np
import pytest

from extgaze import tensor as tt
from extgaze.errors import InvalidInputError, TrainingError
from extgaze.experiment import ArrayDataset, DataConfig, build_test_set
from extgaze.grid import GridCell, GridConfig, HeatMap
from extgaze.models import (LEARNED_KINDS, AdamConfig, ModelSpec, build, detect, forward, load_model,
                            loss_and_grads, model_input, predict, predict_batch, save_model, train,
                            write_loss_log)
from extgaze.render import GazeSequence


def _inputs(spec, B, rng):
    seqs = (rng.uniform(size=(B, spec.T, spec.s_u, spec.s_v)) < 0.1) * rng.choice([0.5, 1.0], size=(B, spec.T, spec.s_u, spec.s_v))
    targets = rng.uniform(size=(B, spec.s_u, spec.s_v)) ** 6
    return seqs, targets


def test_parameter_shapes():
    lin = build(ModelSpec("LinearReg"))
    assert {k: p.shape for k, p in lin.params.items()} == {"out.W": (1024, 1024), "out.b": (1024,)}
    fc3 = build(ModelSpec("FC3"))
    assert [fc3.params[f"fc{i}.W"].shape for i in (1, 2, 3)] == [(1024, 1024)] * 3
    enc2d = build(ModelSpec("Enc2D", T=20))
    assert enc2d.params["enc1.k"].shape == (16, 20, 3, 3)
    unet = build(ModelSpec("UNet3D2D"))
    assert unet.params["enc1.k"].shape == (16, 1, 3, 3, 3)
    assert unet.params["dec1.k"].shape == (32, 128, 3, 3)
    assert unet.params["dec3.k"].shape == (1, 32, 3, 3)
    with pytest.raises(InvalidInputError):
        ModelSpec("Enc3D", s_u=20)
    with pytest.raises(InvalidInputError):
        ModelSpec("Transformer")


def test_same_seed_same_init():
    a, b = build(ModelSpec("UNet3D2D", seed=3)), build(ModelSpec("UNet3D2D", seed=3))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build(ModelSpec("UNet3D2D", seed=4))
    assert not np.array_equal(a.params["enc1.k"].data, c.params["enc1.k"].data)


@pytest.mark.parametrize("kind", LEARNED_KINDS)
@pytest.mark.parametrize("T", [4, 8, 20])
def test_output_is_grid_shaped(kind, T):
    spec = ModelSpec(kind, 16, 16, T, (4, 4, 8))
    seqs, _ = _inputs(spec, 2, np.random.default_rng(T))
    out = forward(build(spec), model_input(spec, seqs)).data
    assert out.shape == (2, 16, 16)
    if kind != "LinearReg":
        assert np.all((out > 0) & (out < 1))
    pred = predict_batch(build(spec), seqs)
    assert pred.shape == (2, 16, 16) and pred.min() >= 0 and pred.max() <= 1


@pytest.mark.parametrize("kind", LEARNED_KINDS)
def test_full_model_gradients(kind):
    spec = ModelSpec(kind, 16, 16, 4, (3, 4, 5), seed=1)
    model = build(spec)
    rng = np.random.default_rng(2)
    for p in model.params.values():
        # nonzero biases exercise every path; init is too tame to hit corner cases
        p.data += rng.normal(scale=0.05, size=p.shape)
    seqs, targets = _inputs(spec, 2, rng)
    x = model_input(spec, seqs)
    rep = tt.grad_check(lambda *_: tt.mse_loss(forward(model, x), targets), model.parameter_list(),
                        tolerance=1e-4, max_coords=12, rng=np.random.default_rng(0))
    assert rep.passed, rep


def test_unet_skips_are_live():
    spec = ModelSpec("UNet3D2D", 16, 16, 4, (4, 4, 8))
    model = build(spec)
    seqs, _ = _inputs(spec, 2, np.random.default_rng(0))
    with_skips = forward(model, seqs).data
    without = forward(model, seqs, skip_scale=0.0).data
    enc3d = forward(build(ModelSpec("Enc3D", 16, 16, 4, (4, 4, 8))), seqs).data
    assert without.shape == with_skips.shape == enc3d.shape
    assert not np.allclose(with_skips, without)


def test_linear_reg_zero_weights_give_zero_map():
    spec = ModelSpec("LinearReg", 16, 16, 4)
    model = build(spec)
    model.params["out.W"].data[:] = 0
    model.params["out.b"].data[:] = 0.3
    seqs, _ = _inputs(spec, 1, np.random.default_rng(0))
    assert not predict(model, seqs[0]).values.any()


def test_identical_batch_gradient_matches_single_sample():
    spec = ModelSpec("Mean2DEnc", 16, 16, 4, (4, 4, 8))
    model = build(spec)
    seqs, targets = _inputs(spec, 1, np.random.default_rng(0))
    x = model_input(spec, seqs)
    l1, g1 = loss_and_grads(model, x, targets)
    l4, g4 = loss_and_grads(model, np.repeat(x, 4, axis=0), np.repeat(targets, 4, axis=0))
    assert l1 == pytest.approx(l4)
    for a, b in zip(g1, g4):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-15)


class IdentityTask:
    """Targets equal the mean gaze map, which a linear map represents exactly."""

    def __init__(self, spec):
        self.spec = spec

    def batch(self, step, B):
        seqs, _ = _inputs(self.spec, B, np.random.default_rng(step))
        return seqs, seqs.mean(axis=1)


def test_linear_reg_learns_identity():
    spec = ModelSpec("LinearReg", 8, 8, 4)
    model = train(spec, IdentityTask(spec), steps=400, batch_size=32, optim=AdamConfig(lr=1e-2))
    seqs, target = IdentityTask(spec).batch(10_000, 64)
    x = model_input(spec, seqs)
    mse = float(np.mean((forward(model, x).data - target) ** 2))
    assert mse < 1e-4 < float(np.mean(target ** 2))


@pytest.fixture(scope="module")
def frozen_set():
    dc = DataConfig()
    test = build_test_set(dc, 99, 64)
    return ArrayDataset(np.stack([s.gaze for s in test]), np.stack([s.omega for s in test]), seed=0)


def test_mean2denc_loss_decreases(frozen_set):
    model = train(ModelSpec("Mean2DEnc"), frozen_set, steps=200, batch_size=16, optim=AdamConfig(lr=3e-3))
    assert len(model.log) == 200
    assert np.mean(model.log[-20:]) < np.mean(model.log[:20])


def test_training_is_deterministic(frozen_set):
    spec = ModelSpec("FC1", seed=5)
    a = train(spec, frozen_set, steps=5, batch_size=8)
    b = train(spec, frozen_set, steps=5, batch_size=8)
    assert a.log == b.log
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_rejects_divergence():
    spec = ModelSpec("LinearReg", 8, 8, 4)

    class Exploding:
        def batch(self, step, B):
            return np.full((B, 4, 8, 8), 1e200), np.ones((B, 8, 8))

    with pytest.raises(TrainingError):
        train(spec, Exploding(), steps=3, batch_size=2)
    with pytest.raises(InvalidInputError):
        train(ModelSpec("Cone"), Exploding(), steps=1)


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec("UNet3D2D", 16, 16, 4, (4, 4, 8), seed=2)
    model = build(spec)
    model.log.extend([0.5, 0.25])
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.spec == spec
    seqs, _ = _inputs(spec, 2, np.random.default_rng(0))
    assert np.array_equal(forward(back, seqs).data, forward(model, seqs).data)
    write_loss_log(model, tmp_path / "loss.tsv")
    assert (tmp_path / "loss.tsv").read_text() == "step\tloss\n0\t0.5\n1\t0.25\n"


def test_predict_and_detect_inputs():
    cfg = GridConfig(16, 16)
    seq = GazeSequence(cfg, np.zeros((4, 16, 16)))
    mean_model = build(ModelSpec("FC1", 16, 16, 4))
    seq_model = build(ModelSpec("Enc3D", 16, 16, 4, (4, 4, 8)))
    assert predict(mean_model, seq).config == cfg
    assert predict(mean_model, HeatMap.zeros(cfg)).values.shape == (16, 16)
    assert predict(seq_model, seq).values.shape == (16, 16)
    with pytest.raises(InvalidInputError):
        predict(seq_model, HeatMap.zeros(cfg))
    with pytest.raises(InvalidInputError):
        predict(build(ModelSpec("Enc3D", 16, 16, 8, (4, 4, 8))), seq)
    gaze = np.zeros((4, 16, 16))
    gaze[:, 5, 7] = 1.0
    assert detect(build(ModelSpec("Cone", 16, 16, 4)), gaze) == [GridCell(6, 8)]
