import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from px3d import fusion
from px3d.errors import ConfigError, DegenerateBatchError, ShapeError
from px3d.nnprims import init_params


# ---------------------------------------------------------------------------
# depth fusion


def test_depth_fuse_quoted_shape_rule():
    f2 = torch.rand(1, 128, 16, 32)
    f3 = torch.rand(1, 128, 16, 16, 32)
    m2, m3 = fusion.depth_fuse(f2, f3)
    assert m3.shape == (1, 128, 17, 16, 32)
    assert m2.shape == (1, 128, 16, 32)


def test_depth_fuse_zero_volume():
    f2 = torch.rand(2, 4, 5, 6)
    m2, m3 = fusion.depth_fuse(f2, torch.zeros(2, 4, 3, 5, 6))
    assert torch.allclose(m2, f2 / 4)
    assert torch.equal(m3[:, :, 3], f2)        # appended as the last slice


def test_depth_fuse_matches_loop_mean():
    rng = np.random.default_rng(0)
    for _ in range(6):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 6))
        d, h, w = (int(v) for v in rng.integers(1, 7, size=3))
        f2 = torch.tensor(rng.random((n, c, h, w)), dtype=torch.float64)
        f3 = torch.tensor(rng.random((n, c, d, h, w)), dtype=torch.float64)
        m2, m3 = fusion.depth_fuse(f2, f3)
        assert m3.shape[2] == d + 1
        want = np.zeros((n, c, h, w))
        for k in range(d):
            want += f3[:, :, k].numpy()
        want = (want + f2.numpy()) / (d + 1)
        assert np.abs(m2.numpy() - want).max() < 1e-6


def test_depth_fuse_channel_mismatch():
    with pytest.raises(ShapeError):
        fusion.depth_fuse(torch.rand(1, 4, 5, 6), torch.rand(1, 8, 3, 5, 6))


# ---------------------------------------------------------------------------
# contrastive alignment


def test_cma_literal_orthonormal_n2():
    z = F.normalize(torch.eye(8, dtype=torch.float64)[:2], dim=1)
    assert abs(float(fusion.cma_loss(z, z, tau=1.0)) - (-2.0)) < 1e-9


def test_cma_equal_similarities():
    for n in (2, 3, 5):
        z = F.normalize(torch.ones(n, 16, dtype=torch.float64), dim=1)
        got = float(fusion.cma_loss(z, z, tau=0.37))
        want = 0.0 if n == 2 else n * math.log(n - 1)
        assert abs(got - want) < 1e-9


def test_cma_literal_orthonormal_general_n():
    n, tau = 4, 0.25
    z = F.normalize(torch.eye(8, dtype=torch.float64)[:n], dim=1)
    got = float(fusion.cma_loss(z, z, tau=tau))
    assert abs(got - (-n / tau + n * math.log(n - 1))) < 1e-9


def test_cma_inclusive_closed_form():
    n, tau = 5, 0.3
    z = F.normalize(torch.eye(8, dtype=torch.float64)[:n], dim=1)
    got = float(fusion.cma_loss(z, z, tau=tau, mode="inclusive"))
    assert abs(got - n * math.log(1 + (n - 1) * math.exp(-1 / tau))) < 1e-9


def test_cma_batch_permutation_invariance():
    rng = np.random.default_rng(1)
    z = F.normalize(torch.tensor(rng.normal(size=(6, 16))), dim=1)
    zs = F.normalize(torch.tensor(rng.normal(size=(6, 16))), dim=1)
    perm = torch.tensor(rng.permutation(6))
    a = float(fusion.cma_loss(z, zs, tau=0.1))
    b = float(fusion.cma_loss(z[perm], zs[perm], tau=0.1))
    assert abs(a - b) < 1e-9


def test_cma_degenerate_batch():
    z = F.normalize(torch.ones(1, 8), dim=1)
    with pytest.raises(DegenerateBatchError):
        fusion.cma_loss(z, z, tau=1.0)


def test_cma_gradients_reach_both_branches():
    rng = np.random.default_rng(2)
    z = F.normalize(torch.tensor(rng.normal(size=(4, 8))), dim=1).requires_grad_(True)
    zs = F.normalize(torch.tensor(rng.normal(size=(4, 8))), dim=1).requires_grad_(True)
    fusion.cma_loss(z, zs, tau=0.1).backward()
    assert torch.linalg.vector_norm(z.grad) > 0
    assert torch.linalg.vector_norm(zs.grad) > 0


def test_cma_gradient_check():
    from px3d.nnprims import grad_check

    def op(a, b):
        return fusion.cma_loss(F.normalize(a, dim=1), F.normalize(b, dim=1), tau=0.5)

    r = grad_check(op, [(3, 6), (3, 6)], tolerance=1e-6, seed=0)
    assert r.ok, r.per_group


# ---------------------------------------------------------------------------
# joint model


@pytest.fixture(scope="module")
def cls_model():
    return init_params(
        fusion.JointModel((32, 64), (32, 32, 64), task="cls", num_classes=5), 0)


def test_classify_forward_contract(cls_model):
    px, vol = torch.rand(2, 1, 32, 64), torch.rand(2, 1, 32, 32, 64)
    logits, emb = fusion.classify_forward(px, vol, cls_model)
    assert logits.shape == (2, 5)
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(2))
    assert torch.allclose(torch.linalg.vector_norm(emb.z, dim=1),
                          torch.ones(2), atol=1e-6)
    assert torch.allclose(torch.linalg.vector_norm(emb.z_star, dim=1),
                          torch.ones(2), atol=1e-6)
    assert emb.z.shape == (2, 128) and emb.z_star.shape == (2, 128)


def test_duplicated_pair_gives_identical_logits(cls_model):
    cls_model.eval()
    px, vol = torch.rand(1, 1, 32, 64), torch.rand(1, 1, 32, 32, 64)
    logits = cls_model(px.repeat(2, 1, 1, 1), vol.repeat(2, 1, 1, 1, 1))["logits"]
    assert torch.allclose(logits[0], logits[1], atol=1e-6)


def test_fused_depth_rule_at_every_level(cls_model):
    out = cls_model(torch.rand(1, 1, 32, 64), torch.rand(1, 1, 32, 32, 64))
    assert len(out["fused_depths"]) == 4
    for d_before, d_after in out["fused_depths"]:
        assert d_after == d_before + 1


def test_segment_forward_contract():
    model = init_params(fusion.JointModel((32, 64), (32, 32, 64), task="seg"), 1)
    logits = fusion.segment_forward(torch.rand(1, 1, 32, 64),
                                    torch.rand(1, 1, 32, 32, 64), model)
    assert logits.shape == (1, 1, 32, 64)
    s = torch.sigmoid(logits)
    assert (s > 0).all() and (s < 1).all()
    emb = model(torch.rand(1, 1, 32, 64), torch.rand(1, 1, 32, 32, 64))["embeddings"]
    assert emb.z.shape == (1, 128)      # second decoder block carries 128 channels


def test_joint_model_rejects_bad_vol(cls_model):
    with pytest.raises(ShapeError):
        cls_model(torch.rand(1, 1, 32, 64), torch.rand(1, 1, 16, 32, 64))
    with pytest.raises(ShapeError):
        cls_model(torch.rand(1, 1, 32, 64), None)


def test_2d_only_model_has_no_embeddings():
    model = init_params(
        fusion.JointModel((32, 64), None, task="cls", num_classes=2, fusion=False), 2)
    out = model(torch.rand(2, 1, 32, 64))
    assert out["logits"].shape == (2, 2)
    assert out["embeddings"] is None


# ---------------------------------------------------------------------------
# schedulers and task losses


def test_cosine_lr_paper_value():
    assert abs(fusion.cosine_lr(1e-4, 100, 200) - 5e-5) < 1e-18
    assert fusion.cosine_lr(1e-4, 0, 200) == 1e-4


def test_step_decay():
    assert fusion.step_decay_lr(1e-4, 0, 100) == 1e-4
    assert fusion.step_decay_lr(1e-4, 59, 100) == 1e-4
    assert fusion.step_decay_lr(1e-4, 60, 100) == 5e-5


def test_cross_entropy_batch_invariance():
    logits = torch.tensor([[2.0, -1.0, 0.3], [0.1, 0.9, -0.5]])
    labels = torch.tensor([0, 1])
    whole = F.cross_entropy(logits, labels)
    parts = (F.cross_entropy(logits[:1], labels[:1])
             + F.cross_entropy(logits[1:], labels[1:])) / 2
    assert abs(float(whole) - float(parts)) < 1e-7


def test_dice_bce_perfect_prediction_is_small():
    target = torch.zeros(1, 1, 8, 8)
    target[0, 0, 2:5, 2:5] = 1.0
    logits = (target * 2 - 1) * 20.0      # confident correct prediction
    assert float(fusion.dice_bce_loss(logits, target)) < 1e-3


# ---------------------------------------------------------------------------
# training behavior


def test_lambda_zero_reduces_to_task_loss(tiny_dataset, tmp_path):
    cfg = fusion.TrainJointConfig(out_dir=str(tmp_path / "a"), task="cls5", steps=1,
                                  batch_size=2, seed=0, lam=0.0)
    _, log = fusion.train_joint(tiny_dataset, cfg)
    assert log[0]["cma_loss"] is None
    assert log[0]["loss"] == log[0]["task_loss"]
    cfg = fusion.TrainJointConfig(out_dir=str(tmp_path / "b"), task="cls5", steps=1,
                                  batch_size=2, seed=0, lam=0.1)
    _, log = fusion.train_joint(tiny_dataset, cfg)
    assert abs(log[0]["loss"] - (log[0]["task_loss"] + 0.1 * log[0]["cma_loss"])) < 1e-5


def test_train_joint_deterministic(tiny_dataset, tmp_path):
    curves = []
    for run in range(2):
        cfg = fusion.TrainJointConfig(out_dir=str(tmp_path / f"r{run}"), task="cls2",
                                      steps=2, batch_size=2, seed=4)
        _, log = fusion.train_joint(tiny_dataset, cfg)
        curves.append([e["loss"] for e in log])
    assert np.abs(np.array(curves[0]) - np.array(curves[1])).max() <= 1e-6


def test_recon_checkpoint_drives_3d_inputs(tiny_dataset, tmp_path):
    from px3d import pgr
    from px3d.harness.data import SampleStore

    cfg = pgr.TrainReconConfig(out_dir=str(tmp_path / "pgr"), steps=2,
                               batch_size=2, seed=0)
    pgr_ckpt, _ = pgr.train_pgr(tiny_dataset, cfg)
    store = SampleStore(tiny_dataset, split="test")
    vols = fusion.resolve_volumes(store, pgr_ckpt)
    assert vols.shape == (len(store), *store.vol_dhw)
    assert vols.min() >= 0.0 and vols.max() <= 1.0
    jcfg = fusion.TrainJointConfig(out_dir=str(tmp_path / "joint"), task="cls2",
                                   steps=1, batch_size=2, seed=0, recon=pgr_ckpt,
                                   split="test")
    _, log = fusion.train_joint(tiny_dataset, jcfg)
    assert len(log) == 1 and np.isfinite(log[0]["loss"])


def test_3d_path_influences_prediction(tiny_dataset, tmp_path):
    cfg = fusion.TrainJointConfig(out_dir=str(tmp_path), task="cls5", steps=2,
                                  batch_size=2, seed=0)
    ckpt, _ = fusion.train_joint(tiny_dataset, cfg)
    model, _ = fusion.load_joint(ckpt)
    px = torch.rand(1, 1, 32, 64)
    gt_vol = torch.rand(1, 1, 32, 32, 64)
    with torch.no_grad():
        a = model(px, gt_vol)["logits"]
        b = model(px, torch.zeros_like(gt_vol))["logits"]
    assert float((a - b).abs().max()) > 0
