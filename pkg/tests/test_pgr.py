import numpy as np
import pytest
import torch

from px3d import pgr
from px3d.errors import ConfigError, ShapeError
from px3d.harness import checkpoint as ckpt_io
from px3d.nnprims import init_params


@pytest.fixture(scope="module")
def desk_model():
    return init_params(pgr.PGRModel(input_hw=(32, 64), depth=32), 0)


def test_forward_contract_full_dims():
    model = init_params(pgr.PGRModel(input_hw=(128, 256), depth=128), 0)
    recon, stages = model(torch.rand(1, 1, 128, 256))
    assert recon.shape == (1, 128, 128, 256)
    assert stages[3].shape == (1, 128, 16, 32)
    assert stages[5].shape == (1, 128, 32, 64)
    assert len(stages) == 8


def test_forward_deterministic(desk_model):
    x = torch.rand(2, 1, 32, 64)
    r1, _ = desk_model(x)
    r2, _ = desk_model(x)
    assert torch.equal(r1, r2)


def test_forward_rejects_wrong_dims(desk_model):
    with pytest.raises(ShapeError):
        desk_model(torch.rand(1, 1, 64, 64))


def test_guidable_stage_channels(desk_model):
    _, stages = desk_model(torch.rand(1, 1, 32, 64))
    for i in pgr.GUIDABLE_STAGES:
        assert stages[i].shape[1] == desk_model.depth


# ---------------------------------------------------------------------------
# label scaling


def test_scale_label_stage7_identity(desk_model):
    gt = torch.rand(2, 32, 32, 64)
    assert torch.equal(pgr.scale_label(gt, 7, desk_model), gt)


def test_scale_label_constant(desk_model):
    gt = torch.full((1, 32, 32, 64), 0.37)
    y = pgr.scale_label(gt, 3, desk_model)
    assert y.shape == (1, 32, 4, 8)
    assert torch.allclose(y, torch.full_like(y, 0.37))


def test_scale_label_rejects_unguided_stage(desk_model):
    with pytest.raises(ConfigError):
        pgr.scale_label(torch.rand(1, 32, 32, 64), 2, desk_model)


def test_scale_label_roundtrip_psnr_on_smooth_phantoms():
    # stage-5 factor (4x down in H/W) then back; smooth = noise-free phantoms
    import torch.nn.functional as F

    from px3d import geometry as geo
    from px3d import metrics as qm
    from px3d.phantom import PhantomConfig, generate_phantom

    cfg = geo.ProjectionConfig(unit_mm=0.4, depth_mm=12.8, height_mm=19.2,
                               out_px_dims=(64, 128), out_vol_dims=(64, 128, 64))
    vals = []
    for seed in range(10):
        ph = generate_phantom(PhantomConfig(seed=seed, noise_sigma=0.0))
        unf = geo.reformat_unfolded(ph.volume, ph.arch_curve, cfg)
        t = torch.from_numpy(unf.values)[None]
        down = F.interpolate(t, size=(16, 32), mode="bilinear", align_corners=False)
        up = F.interpolate(down, size=(64, 128), mode="bilinear", align_corners=False)
        vals.append(qm.psnr(up[0].numpy(), unf.values))
    assert np.mean(vals) >= 30.0


# ---------------------------------------------------------------------------
# losses


def test_sse_loss_examples():
    f = torch.zeros(1, 2, 2, 2)
    assert float(pgr.sse_loss(f, f)) == 0.0
    assert float(pgr.sse_loss(f, torch.ones(1, 2, 2, 2))) == 8.0
    a, b = torch.rand(2, 3, 4, 4, dtype=torch.float64), torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert abs(float(pgr.sse_loss(3 * a, 3 * b)) - 9 * float(pgr.sse_loss(a, b))) < 1e-9


def test_sse_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        pgr.sse_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 3))


def test_default_schedule_values():
    assert pgr.WeightSchedule.paper().alphas == [0.0, 0.0, 0.0, 16.0, 8.0, 4.0, 2.0, 1.0]
    assert pgr.WeightSchedule.reversed_().alphas == [0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0]
    a = pgr.WeightSchedule.paper().alphas
    assert a[3] > a[4] > a[5] > a[6] > a[7] > 0
    assert a[0] == a[1] == a[2] == 0


def _unit_sse_intermediates(model, gt):
    """Fake stage outputs whose SSE against the scaled label is exactly 1."""
    stages = [torch.zeros(1)] * 3
    for i in pgr.GUIDABLE_STAGES:
        y = pgr.scale_label(gt, i, model).double()
        c = (1.0 / y[0].numel()) ** 0.5
        stages.append(y + c)
    return stages


def test_progressive_loss_all_ones_totals_31(desk_model):
    gt = torch.rand(1, 32, 32, 64, dtype=torch.float64)
    stages = _unit_sse_intermediates(desk_model, gt)
    total = pgr.progressive_loss(stages, gt, pgr.WeightSchedule.paper(), desk_model)
    assert abs(float(total) - 31.0) < 1e-6


def test_progressive_loss_perfect_reconstruction_is_zero(desk_model):
    gt = torch.rand(1, 32, 32, 64)
    stages = [torch.zeros(1)] * 3 + [pgr.scale_label(gt, i, desk_model)
                                     for i in pgr.GUIDABLE_STAGES]
    total = pgr.progressive_loss(stages, gt, pgr.WeightSchedule.paper(), desk_model)
    assert float(total) == 0.0


def test_progressive_one_hot_decomposition(desk_model):
    gt = torch.rand(2, 32, 32, 64)
    _, stages = desk_model(torch.rand(2, 1, 32, 64))
    for stage in (3, 5, 7):
        sched = pgr.WeightSchedule.one_hot(stage, alpha=3.0)
        whole = pgr.progressive_loss(stages, gt, sched, desk_model)
        part = 3.0 * pgr.sse_loss(stages[stage], pgr.scale_label(gt, stage, desk_model))
        assert float(whole) == float(part)


def test_progressive_rejects_weight_on_early_stage(desk_model):
    gt = torch.rand(1, 32, 32, 64)
    _, stages = desk_model(torch.rand(1, 1, 32, 64))
    sched = pgr.WeightSchedule([1.0] + [0.0] * 7)
    with pytest.raises(ConfigError):
        pgr.progressive_loss(stages, gt, sched, desk_model)


def test_gradient_reaches_stem(desk_model):
    desk_model.zero_grad(set_to_none=True)
    gt = torch.rand(1, 32, 32, 64)
    _, stages = desk_model(torch.rand(1, 1, 32, 64))
    total = pgr.progressive_loss(stages, gt, pgr.WeightSchedule.paper(), desk_model)
    total.backward()
    assert torch.linalg.vector_norm(desk_model.stem.weight.grad) > 0


# ---------------------------------------------------------------------------
# training


def test_lr_schedule_halves_every_5000():
    assert pgr.lr_at_step(4e-4, 5000, 0) == 4e-4
    assert pgr.lr_at_step(4e-4, 5000, 4999) == 4e-4
    assert pgr.lr_at_step(4e-4, 5000, 5000) == 2e-4
    assert pgr.lr_at_step(4e-4, 5000, 10000) == 1e-4


def test_zero_steps_checkpoint_equals_init(tiny_dataset, tmp_path):
    cfg = pgr.TrainReconConfig(out_dir=str(tmp_path), steps=0, seed=5)
    ckpt_path, log = pgr.train_pgr(tiny_dataset, cfg)
    assert log == []
    ck = ckpt_io.load_checkpoint(ckpt_path)
    torch.manual_seed(5)
    fresh = init_params(pgr.PGRModel(**ck["model_kwargs"]), 5)
    assert ckpt_io.state_hash(ck["model_state"], 0) == ckpt_io.state_hash(
        fresh.state_dict(), 0)


def test_training_deterministic(tiny_dataset, tmp_path):
    losses = []
    for run in range(2):
        cfg = pgr.TrainReconConfig(out_dir=str(tmp_path / f"run{run}"), steps=4,
                                   batch_size=2, seed=3)
        _, log = pgr.train_pgr(tiny_dataset, cfg)
        losses.append([e["loss"] for e in log])
    assert np.abs(np.array(losses[0]) - np.array(losses[1])).max() <= 1e-6


def test_training_reduces_loss(tiny_dataset, tmp_path):
    cfg = pgr.TrainReconConfig(out_dir=str(tmp_path), steps=25, batch_size=2, seed=0)
    _, log = pgr.train_pgr(tiny_dataset, cfg)
    first = np.mean([e["loss"] for e in log[:5]])
    last = np.mean([e["loss"] for e in log[-5:]])
    assert last < first
