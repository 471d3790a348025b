import numpy as np
import pytest
import torch

from mivec import modelzip, training
from mivec.errors import TrainingDivergedError, ValidationError
from mivec.explicit2d import ExplicitCodecConfig, encode_view
from mivec.inrnet import ModelConfig, init_model
from mivec.training import TrainConfig, fake_quantize, joint_loss, ste, train


@pytest.fixture(scope="module")
def setup(small_seq):
    explicit = encode_view(small_seq.view(1), ExplicitCodecConfig(qp=22)).reconstructed
    cfg = ModelConfig(32, 32, 4, 3, 4, 4, 8, (4, 2))
    return small_seq, explicit, cfg


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_joint_loss_examples(rng):
    gt = torch.tensor(rng.random((2, 3, 16, 16)))
    assert joint_loss(gt, gt, 0.7).item() == pytest.approx(0.0, abs=1e-12)
    pred = (gt + 0.05).clamp(0, 1)
    l1 = (gt - pred).abs().mean().item()
    assert joint_loss(gt, pred, 1.0).item() == pytest.approx(l1, abs=1e-12)
    mixed = joint_loss(gt, pred, 0.7).item()
    s = training.ssim_torch(gt, pred).mean().item()
    assert mixed == pytest.approx(0.7 * l1 + 0.3 * (1 - s), abs=1e-9)
    assert mixed > 0
    with pytest.raises(ValueError):
        joint_loss(gt, gt[:1], 0.7)


def test_ssim_torch_matches_metric(rng):
    from mivec import metrics
    from mivec.seqdata import from_bytes

    a = from_bytes(rng.integers(0, 256, (20, 20, 3)).astype(np.uint8))
    b = from_bytes(rng.integers(0, 256, (20, 20, 3)).astype(np.uint8))
    ta = torch.tensor(a, dtype=torch.float64).permute(2, 0, 1)[None]
    tb = torch.tensor(b, dtype=torch.float64).permute(2, 0, 1)[None]
    assert training.ssim_torch(ta, tb).item() == pytest.approx(metrics.ssim(a, b), abs=1e-9)


@pytest.mark.parametrize("d, level", [(0.0, 0), (1.0, 96), (-0.1, -12), (50.0, 127)])
def test_fake_quantize_values(d, level):
    q = fake_quantize(torch.tensor([d]))
    assert q.item() == pytest.approx(level / 127, abs=1e-7)
    assert modelzip.quantize(np.array([d]))[0] == level


def test_ste_passes_gradient_exactly(rng):
    d = torch.tensor(rng.normal(size=(5, 7)), dtype=torch.float32, requires_grad=True)
    g = torch.tensor(rng.normal(size=(5, 7)), dtype=torch.float32)
    ste(d).backward(g)
    assert torch.equal(d.grad, g)


def test_zero_epochs_leaves_model_unchanged(setup):
    seq, explicit, cfg = setup
    model = init_model(cfg)
    before = _params(model)
    model, report = train(model, seq, 1, explicit, TrainConfig(epochs=0))
    assert report.epochs == 0
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n])


def test_training_deterministic_and_decreasing(setup):
    seq, explicit, cfg = setup
    tc = TrainConfig(epochs=6, seed=3)
    m1, r1 = train(init_model(cfg), seq, 1, explicit, tc)
    m2, r2 = train(init_model(cfg), seq, 1, explicit, tc)
    assert r1.epoch_losses == r2.epoch_losses
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(a, b)
    assert r1.epoch_losses[-1] < r1.epoch_losses[0]
    assert set(r1.view_psnr) == {0, 2}
    assert r1.parameter_count == m1.parameter_count()


def test_basic_view_excluded_from_training(setup):
    seq, explicit, cfg = setup
    model = init_model(cfg)
    before = _params(model)
    model, _ = train(model, seq, 1, explicit, TrainConfig(epochs=2))
    after = dict(model.named_parameters())
    assert torch.equal(after["grid_view"][1], before["grid_view"][1])
    assert not torch.equal(after["grid_view"][0], before["grid_view"][0])
    assert training.training_coordinates(3, 2, 1) == [(0, 0), (0, 1), (2, 0), (2, 1)]


def test_divergence_guard(setup):
    seq, explicit, cfg = setup
    model = init_model(cfg)
    with torch.no_grad():
        model.rgb_head_bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train(model, seq, 1, explicit, TrainConfig(epochs=1))


def test_explicit_shape_checked(setup):
    seq, explicit, cfg = setup
    with pytest.raises(ValidationError):
        train(init_model(cfg), seq, 1, explicit[:2], TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValidationError):
        TrainConfig(prune_fraction=1.0)


def test_compress_schedule_keeps_mask(setup):
    seq, explicit, cfg = setup
    model, _ = train(init_model(cfg), seq, 1, explicit, TrainConfig(epochs=2))
    res = training.compress_train_schedule(model, seq, 1, explicit, TrainConfig(qat_epochs=2, prune_fraction=0.4))
    flat = modelzip.flatten_quantizable(model)
    assert np.all(flat[~res.prune.mask] == 0)
    assert res.compressed.levels.min() >= -127 and res.compressed.levels.max() <= 127
    assert model.param_transform is None
    n = flat.size
    assert res.compressed.kept_count == n - int(np.floor(0.4 * n))


def test_quantization_only_schedule(setup):
    seq, explicit, cfg = setup
    model = init_model(cfg)
    before = _params(model)
    res = training.compress_train_schedule(model, seq, 1, explicit, TrainConfig(qat_epochs=0, prune_fraction=0.0))
    assert res.prune is None and res.compressed.mask is None
    expected = modelzip.quantize(modelzip.flatten_quantizable(model))
    assert np.array_equal(res.compressed.levels, expected)
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n])
