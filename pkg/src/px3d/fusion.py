"""2D-3D joint analysis: parallel panoramic / volume branches exchanging
features by depth fusion at every pyramid level, a contrastive alignment
loss on pooled embeddings, and classification / segmentation heads.

Depth fusion appends the 2D feature map as one extra depth slice of the 3D
feature tensor (depth becomes D+1) and averages over depth to form the mixed
2D features.  The contrastive loss follows the literal formulation (the
positive pair is excluded from the denominator); an `inclusive` mode adds it
back, which is the standard NT-Xent form.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatchError, ShapeError, TrainingError
from .nnprims import ConvBlock, ConvBlock3d, init_params, maxpool2x2, upsample2x2
from .harness import checkpoint as ckpt_io
from .harness import io as hio
from .harness.data import SampleStore, batch_indices
from . import metrics as qmetrics
from . import pgr as pgr_mod

FUSION_CHANNELS = (32, 64, 128, 128)


def depth_fuse(f2d: torch.Tensor, f3d: torch.Tensor):
    """(f2d_mixed, f3d_mixed): the 2D map becomes the last depth slice of the
    3D tensor; the mixed 2D map is the mean over the D+1 slices."""
    if f2d.dim() != 4 or f3d.dim() != 5:
        raise ShapeError(
            f"depth_fuse: expected 4D + 5D inputs, got {tuple(f2d.shape)} / {tuple(f3d.shape)}")
    if f2d.shape[1] != f3d.shape[1]:
        raise ShapeError(
            f"depth_fuse: channel mismatch {f2d.shape[1]} vs {f3d.shape[1]}")
    if f2d.shape[0] != f3d.shape[0] or f2d.shape[2:] != f3d.shape[3:]:
        raise ShapeError(
            f"depth_fuse: batch/spatial mismatch {tuple(f2d.shape)} vs {tuple(f3d.shape)}")
    f3d_mixed = torch.cat([f3d, f2d.unsqueeze(2)], dim=2)
    f2d_mixed = f3d_mixed.mean(dim=2)
    return f2d_mixed, f3d_mixed


@dataclass
class EmbeddingPair:
    z: torch.Tensor        # (N, C) unit-norm, 2D branch
    z_star: torch.Tensor   # (N, C) unit-norm, 3D branch


def cma_loss(z: torch.Tensor, z_star: torch.Tensor, tau: float = 0.1,
             mode: str = "literal") -> torch.Tensor:
    """Contrastive multimodality alignment over a batch of embedding pairs.

    literal: -sum_i log[ exp(s_ii/tau) / sum_{k!=i} exp(s_ik/tau) ]
    inclusive: the positive term joins the denominator (NT-Xent style).
    """
    if mode not in ("literal", "inclusive"):
        raise ConfigError(f"mode: unknown cma mode {mode!r}")
    if z.dim() != 2 or z.shape != z_star.shape:
        raise ShapeError(f"cma_loss: expected matching (N,C), got "
                         f"{tuple(z.shape)} vs {tuple(z_star.shape)}")
    n = z.shape[0]
    if n < 2 and mode == "literal":
        raise DegenerateBatchError(
            "cma_loss: literal mode needs N >= 2 (denominator is empty for N = 1)")
    sims = (z @ z_star.T) / tau
    pos = sims.diagonal()
    if mode == "literal":
        eye = torch.eye(n, dtype=torch.bool, device=z.device)
        denom = torch.logsumexp(sims.masked_fill(eye, float("-inf")), dim=1)
    else:
        denom = torch.logsumexp(sims, dim=1)
    return -(pos - denom).sum()


def _pool_norm(feat: torch.Tensor) -> torch.Tensor:
    pooled = feat.mean(dim=tuple(range(2, feat.dim())))
    return F.normalize(pooled, dim=1, eps=1e-12)


class JointModel(nn.Module):
    """Two 4-level pyramids (2D Conv blocks / 3D Conv blocks, matched channel
    schedules) with depth fusion after every level; a linear classification
    head on the pooled 2D features, or a mirrored 2D decoder for per-pixel
    segmentation logits."""

    def __init__(self, input_hw, input_dhw=None, task: str = "cls",
                 num_classes: int = 5, fusion: bool = True,
                 cma_tap: str | None = None, channels=FUSION_CHANNELS):
        super().__init__()
        if task not in ("cls", "seg"):
            raise ConfigError(f"task: expected cls or seg, got {task!r}")
        if fusion and input_dhw is None:
            raise ConfigError("input_dhw: required when the 3D branch is enabled")
        self.input_hw = tuple(int(v) for v in input_hw)
        self.input_dhw = tuple(int(v) for v in input_dhw) if input_dhw else None
        self.task = task
        self.num_classes = int(num_classes)
        self.fusion = bool(fusion)
        self.channels = tuple(channels)
        if cma_tap is None:
            cma_tap = "encoder3" if task == "cls" else "decoder1"
        self.cma_tap = cma_tap

        c_prev = 1
        enc2d, enc3d = [], []
        for c in self.channels:
            enc2d.append(ConvBlock(c_prev, c))
            if self.fusion:
                enc3d.append(ConvBlock3d(c_prev, c))
            c_prev = c
        self.enc2d = nn.ModuleList(enc2d)
        self.enc3d = nn.ModuleList(enc3d) if self.fusion else None

        top = self.channels[-1]
        if task == "cls":
            self.head = nn.Linear(top, self.num_classes)
        else:
            self.dec = nn.ModuleList([
                ConvBlock(top + self.channels[2], top),
                ConvBlock(top + self.channels[1], top),
                ConvBlock(top + self.channels[0], top),
            ])
            self.out_conv = nn.Conv2d(top, 1, 1)

    def _tap_feature(self, name, enc_feats, dec_feats):
        kind, idx = name[:-1], int(name[-1])
        if kind == "encoder" and 0 <= idx < len(enc_feats):
            return enc_feats[idx]
        if kind == "decoder" and self.task == "seg" and 0 <= idx < len(dec_feats):
            return dec_feats[idx]
        raise ConfigError(f"cma_tap: no feature named {name!r} for task {self.task}")

    def forward(self, px, vol=None):
        if px.dim() != 4 or px.shape[1] != 1 or tuple(px.shape[2:]) != self.input_hw:
            raise ShapeError(f"joint forward: expected px (N,1,{self.input_hw[0]},"
                             f"{self.input_hw[1]}), got {tuple(px.shape)}")
        if self.fusion:
            if vol is None:
                raise ShapeError("joint forward: 3D branch enabled but vol is None")
            if (vol.dim() != 5 or vol.shape[1] != 1
                    or tuple(vol.shape[2:]) != self.input_dhw):
                raise ShapeError(f"joint forward: expected vol (N,1,{self.input_dhw[0]},"
                                 f"{self.input_dhw[1]},{self.input_dhw[2]}), "
                                 f"got {tuple(vol.shape)}")
        f2, f3 = px, vol
        enc_feats = []
        fused_depths = []
        for lvl in range(len(self.channels)):
            f2 = self.enc2d[lvl](f2)
            if self.fusion:
                f3 = self.enc3d[lvl](f3)
                d_before = f3.shape[2]
                f2, f3 = depth_fuse(f2, f3)
                fused_depths.append((d_before, f3.shape[2]))
            enc_feats.append(f2)
            if lvl < len(self.channels) - 1:
                f2 = maxpool2x2(f2)
                if self.fusion:
                    f3 = maxpool2x2(f3)

        dec_feats = []
        if self.task == "seg":
            d = enc_feats[-1]
            for lvl, skip_idx in enumerate((2, 1, 0)):
                skip = enc_feats[skip_idx]
                d = upsample2x2(d, target_size=skip.shape[-2:])
                d = self.dec[lvl](torch.cat([d, skip], dim=1))
                dec_feats.append(d)
            logits = self.out_conv(dec_feats[-1])
        else:
            logits = self.head(enc_feats[-1].mean(dim=(2, 3)))

        embeddings = None
        if self.fusion:
            embeddings = EmbeddingPair(
                z=_pool_norm(self._tap_feature(self.cma_tap, enc_feats, dec_feats)),
                z_star=_pool_norm(f3))
        return {"logits": logits, "embeddings": embeddings,
                "fused_depths": fused_depths}


def classify_forward(px, vol, model: JointModel):
    """(logits, embeddings) for a classification model."""
    out = model(px, vol)
    return out["logits"], out["embeddings"]


def segment_forward(px, vol, model: JointModel):
    """Per-pixel logits (N,1,H,W) for a segmentation model."""
    return model(px, vol)["logits"]


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of soft-Dice and BCE-with-logits losses."""
    if logits.shape != target.shape:
        raise ShapeError(f"dice_bce: shape mismatch {tuple(logits.shape)} vs "
                         f"{tuple(target.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    eps = 1e-6
    dims = tuple(range(1, logits.dim()))
    dice = 1.0 - ((2 * (p * target).sum(dims) + eps)
                  / (p.sum(dims) + target.sum(dims) + eps)).mean()
    return (bce + dice) / 2.0


def cosine_lr(base_lr: float, step: int, t_max: int) -> float:
    t = min(step, t_max)
    return base_lr * (1.0 + math.cos(math.pi * t / t_max)) / 2.0


def step_decay_lr(base_lr: float, step: int, total_steps: int, frac: float = 0.6) -> float:
    return base_lr * (0.5 if step >= int(frac * total_steps) else 1.0)


@dataclass
class TrainJointConfig:
    out_dir: str
    task: str = "cls5"            # cls2 | cls5 | seg
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    cosine_t_max: int = 200
    seg_decay_frac: float = 0.6
    tau: float = 0.1
    lam: float = 0.1
    cma_mode: str = "literal"
    recon: str = "gt"             # "gt" or a PGR checkpoint path
    fusion: bool = True
    cma_tap: str | None = None
    seed: int = 0
    split: str = "train"
    ckpt_every: int = 0
    resume: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _task_kind(task: str):
    if task == "cls2":
        return "cls", 2
    if task == "cls5":
        return "cls", 5
    if task == "seg":
        return "seg", 1
    raise ConfigError(f"task: expected cls2, cls5 or seg, got {task!r}")


def _labels_for(store: SampleStore, task: str):
    if task == "cls2":
        return torch.from_numpy(store.binary_labels)
    if task == "cls5":
        return torch.from_numpy(store.class_ids)
    masks = np.stack([m.astype(np.float32) for m in store.masks])
    return torch.from_numpy(masks)[:, None]     # (n,1,H,W)


def resolve_volumes(store: SampleStore, recon: str) -> np.ndarray:
    """3D inputs: ground-truth unfolded volumes, or reconstructions from a
    frozen PGR checkpoint."""
    if recon == "gt":
        return np.stack(store.unfolded)
    model, _ = pgr_mod.load_pgr(recon)
    vols = [pgr_mod.reconstruct(model, px) for px in store.px]
    return np.stack(vols)


def train_joint(manifest_path, cfg: TrainJointConfig):
    """Adam training of the joint network; total loss = task loss +
    lambda * contrastive alignment.  Returns (checkpoint_path, log)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind, num_classes = _task_kind(cfg.task)
    store = SampleStore(manifest_path, split=cfg.split, require_mask=kind == "seg")
    labels = _labels_for(store, cfg.task)
    vols = resolve_volumes(store, cfg.recon) if cfg.fusion else None

    model_kwargs = dict(input_hw=store.px_hw, input_dhw=store.vol_dhw if cfg.fusion else None,
                        task=kind, num_classes=num_classes, fusion=cfg.fusion,
                        cma_tap=cfg.cma_tap)
    torch.manual_seed(cfg.seed)
    model = init_params(JointModel(**model_kwargs), cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    start_step = 0
    if cfg.resume:
        ck = ckpt_io.load_checkpoint(cfg.resume)
        model.load_state_dict(ck["model_state"])
        opt.load_state_dict(ck["optimizer_state"])
        start_step = ck["step"]
        restored = ckpt_io.restore_rng(ck)
        if restored is not None:
            rng = restored

    px_all = torch.from_numpy(np.stack(store.px)[:, None])
    vol_all = torch.from_numpy(vols[:, None]) if vols is not None else None

    resolved = {"kind": f"train-{cfg.task}", "manifest": str(manifest_path),
                **cfg.as_dict(), "model_kwargs": {k: (list(v) if isinstance(v, tuple) else v)
                                                  for k, v in model_kwargs.items()},
                "n_samples": len(store)}
    hio.atomic_write_bytes(out / "config.json",
                           json.dumps(resolved, indent=2, sort_keys=True).encode())

    log = []
    t0 = time.time()
    model.train()
    for step in range(start_step, cfg.steps):
        if kind == "cls":
            lr = cosine_lr(cfg.lr, step, cfg.cosine_t_max)
        else:
            lr = step_decay_lr(cfg.lr, step, cfg.steps, cfg.seg_decay_frac)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = batch_indices(rng, len(store), cfg.batch_size)
        px = px_all[idx]
        vol = vol_all[idx] if vol_all is not None else None
        out_fwd = model(px, vol)
        if kind == "cls":
            task_loss = F.cross_entropy(out_fwd["logits"], labels[idx])
        else:
            task_loss = dice_bce_loss(out_fwd["logits"], labels[idx])
        total = task_loss
        align = None
        if cfg.fusion and cfg.lam > 0.0:
            emb = out_fwd["embeddings"]
            align = cma_loss(emb.z, emb.z_star, tau=cfg.tau, mode=cfg.cma_mode)
            total = task_loss + cfg.lam * align
        if not torch.isfinite(total):
            batch_ids = [store.ids[i] for i in idx]
            raise TrainingError(
                f"non-finite loss at step {step}; batch samples: {batch_ids}")
        opt.zero_grad()
        total.backward()
        opt.step()
        log.append({"step": step, "lr": lr, "loss": float(total.detach()),
                    "task_loss": float(task_loss.detach()),
                    "cma_loss": None if align is None else float(align.detach())})
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and (step + 1) < cfg.steps:
            ckpt_io.save_checkpoint(out / f"ckpt_{step + 1:07d}.pt", model=model,
                                    model_kind="joint", model_kwargs=model_kwargs,
                                    optimizer=opt, step=step + 1, config=resolved,
                                    batch_rng=rng)
    ckpt_path = out / "ckpt_final.pt"
    ckpt_io.save_checkpoint(ckpt_path, model=model, model_kind="joint",
                            model_kwargs=model_kwargs, optimizer=opt,
                            step=cfg.steps, config=resolved, batch_rng=rng)
    hio.atomic_write_bytes(
        out / "train_log.jsonl",
        ("\n".join(json.dumps(e, sort_keys=True) for e in log) + "\n").encode())
    hio.atomic_write_bytes(
        out / "summary.json",
        json.dumps({"steps": cfg.steps - start_step, "seconds": time.time() - t0},
                   sort_keys=True).encode())
    return str(ckpt_path), log


def load_joint(path) -> tuple[JointModel, dict]:
    ck = ckpt_io.load_checkpoint(path)
    if ck["model_kind"] != "joint":
        raise ConfigError(f"checkpoint {path} is {ck['model_kind']!r}, expected 'joint'")
    model = JointModel(**ck["model_kwargs"])
    model.load_state_dict(ck["model_state"])
    model.eval()
    return model, ck


def predict_cls(model: JointModel, px_batch: np.ndarray,
                vol_batch: np.ndarray | None, batch_size: int = 16) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for b0 in range(0, len(px_batch), batch_size):
            px = torch.from_numpy(px_batch[b0 : b0 + batch_size])[:, None]
            vol = None
            if model.fusion:
                vol = torch.from_numpy(vol_batch[b0 : b0 + batch_size])[:, None]
            logits = model(px, vol)["logits"]
            preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def predict_seg(model: JointModel, px_batch: np.ndarray,
                vol_batch: np.ndarray | None, batch_size: int = 16) -> np.ndarray:
    model.eval()
    masks = []
    with torch.no_grad():
        for b0 in range(0, len(px_batch), batch_size):
            px = torch.from_numpy(px_batch[b0 : b0 + batch_size])[:, None]
            vol = None
            if model.fusion:
                vol = torch.from_numpy(vol_batch[b0 : b0 + batch_size])[:, None]
            logits = model(px, vol)["logits"]
            masks.append((torch.sigmoid(logits)[:, 0] > 0.5).numpy())
    return np.concatenate(masks)


def eval_joint(model: JointModel, store: SampleStore, task: str,
               recon: str = "gt") -> dict:
    """Metric report for one split: classification report or mean mask
    metrics across samples."""
    kind, num_classes = _task_kind(task)
    px = np.stack(store.px)
    vols = resolve_volumes(store, recon) if model.fusion else None
    if kind == "cls":
        preds = predict_cls(model, px, vols)
        labels = store.binary_labels if task == "cls2" else store.class_ids
        return qmetrics.classification_report(preds, labels, num_classes)
    preds = predict_seg(model, px, vols)
    gts = np.stack([m for m in store.masks])
    per = [qmetrics.mask_metrics(p.astype(float), g.astype(float))
           for p, g in zip(preds, gts)]
    report = {k: float(np.mean([m[k] for m in per])) for k in per[0]}
    report["count"] = len(per)
    return report
