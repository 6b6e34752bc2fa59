"""Progressive guided reconstruction: a U-shaped encoder/decoder that maps a
panoramic image to the unfolded volume, with SSE penalties on intermediate
stage outputs.

Stages 0-3 are the encoder Conv blocks, 4-7 the decoder HB blocks; stage 7
is the reconstruction.  Stages 3..7 carry exactly `depth` channels
(interpreted as the volume's depth axis) and are the guidable ones; the
default weight schedule is alpha_i = 2^(n-1-i) with alpha_{i<=2} forced to
0, so for n = 8 it is [0, 0, 0, 16, 8, 4, 2, 1].
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, TrainingError
from .nnprims import ConvBlock, HBBlock, init_params, maxpool2x2, upsample2x2
from .harness import checkpoint as ckpt_io
from .harness import io as hio
from .harness.data import SampleStore, batch_indices

N_STAGES = 8
GUIDABLE_STAGES = tuple(range(3, 8))


@dataclass
class WeightSchedule:
    alphas: list

    def __post_init__(self):
        if len(self.alphas) != N_STAGES:
            raise ConfigError(f"alphas: need {N_STAGES} entries, got {len(self.alphas)}")
        if any(a < 0 for a in self.alphas):
            raise ConfigError(f"alphas: must be non-negative, got {self.alphas}")

    @classmethod
    def paper(cls) -> "WeightSchedule":
        # 2^(n-1-i), zeroed for the first three stages
        alphas = [0.0 if i <= 2 else float(2 ** (N_STAGES - 1 - i)) for i in range(N_STAGES)]
        return cls(alphas)

    @classmethod
    def reversed_(cls) -> "WeightSchedule":
        # the stated intent: emphasis grows toward the output layer
        paper = cls.paper().alphas
        guided = [paper[i] for i in GUIDABLE_STAGES]
        alphas = [0.0] * 3 + list(reversed(guided))
        return cls(alphas)

    @classmethod
    def one_hot(cls, stage: int, alpha: float = 1.0) -> "WeightSchedule":
        alphas = [0.0] * N_STAGES
        alphas[stage] = float(alpha)
        return cls(alphas)

    @classmethod
    def named(cls, name: str) -> "WeightSchedule":
        if name == "paper":
            return cls.paper()
        if name == "reversed":
            return cls.reversed_()
        raise ConfigError(f"alpha_schedule: unknown schedule {name!r}")


class PGRModel(nn.Module):
    """Encoder: stem conv (1->16) + 4 Conv blocks (32, 64, 128, depth) with
    maxpool after blocks 0-2; bottleneck conv to 256; decoder: 4 HB blocks
    (each `depth` channels out) with upsampling before blocks 1-3 and skip
    connections from encoder stage s to decoder stage 7-s."""

    def __init__(self, input_hw=(128, 256), depth: int = 128, base: int = 16,
                 bottleneck: int = 256, block_size: int = 8, reduction: int = 4):
        super().__init__()
        h, w = input_hw
        if h % 8 or w % 8:
            raise ConfigError(f"input_hw: dims must be divisible by 8, got {input_hw}")
        self.input_hw = (int(h), int(w))
        self.depth = int(depth)
        self.enc_channels = [base * 2, base * 4, base * 8, depth]
        self.stem = nn.Conv2d(1, base, 3, padding=1)
        self.enc_blocks = nn.ModuleList([
            ConvBlock(base, self.enc_channels[0]),
            ConvBlock(self.enc_channels[0], self.enc_channels[1]),
            ConvBlock(self.enc_channels[1], self.enc_channels[2]),
            ConvBlock(self.enc_channels[2], self.enc_channels[3]),
        ])
        self.bottleneck_conv = nn.Conv2d(depth, bottleneck, 3, padding=1)
        self.bottleneck_bn = nn.BatchNorm2d(bottleneck)
        self.dec_blocks = nn.ModuleList([
            HBBlock(bottleneck, depth, depth, block_size, reduction),
            HBBlock(depth, self.enc_channels[2], depth, block_size, reduction),
            HBBlock(depth, self.enc_channels[1], depth, block_size, reduction),
            HBBlock(depth, self.enc_channels[0], depth, block_size, reduction),
        ])

    def stage_hw(self, stage: int) -> tuple[int, int]:
        h, w = self.input_hw
        scale = {0: 1, 1: 2, 2: 4, 3: 8, 4: 8, 5: 4, 6: 2, 7: 1}[stage]
        return h // scale, w // scale

    def forward(self, px):
        if px.dim() != 4 or px.shape[1] != 1 or tuple(px.shape[2:]) != self.input_hw:
            raise ShapeError(
                f"pgr_forward: expected (N,1,{self.input_hw[0]},{self.input_hw[1]}), "
                f"got {tuple(px.shape)}")
        stages = []
        x = self.stem(px)
        for i, block in enumerate(self.enc_blocks):
            x = block(x)
            stages.append(x)
            if i < 3:
                x = maxpool2x2(x)
        x = F.relu(self.bottleneck_bn(self.bottleneck_conv(stages[3])))
        for i, block in enumerate(self.dec_blocks):
            skip = stages[3 - i]
            if i > 0:
                x = upsample2x2(x, target_size=skip.shape[-2:])
            x = block(x, skip)
            stages.append(x)
        return stages[-1], stages


def pgr_forward(px, model: PGRModel):
    """Returns (reconstruction, per-stage intermediate outputs); the
    reconstruction is linear, clamp to [0,1] only for metrics/reports."""
    return model(px)


def scale_label(gt, stage: int, model: PGRModel) -> torch.Tensor:
    """Ground truth as (N, depth, H, W), bilinearly downsampled in H/W to the
    stage's spatial dims; the depth axis is untouched."""
    if stage not in GUIDABLE_STAGES:
        raise ConfigError(
            f"stage: {stage} is not guidable (stages {GUIDABLE_STAGES[0]}.."
            f"{GUIDABLE_STAGES[-1]} carry the full {model.depth} depth channels)")
    if torch.is_tensor(gt):
        t = gt
    elif hasattr(gt, "values") and isinstance(gt.values, np.ndarray):
        t = torch.from_numpy(gt.values)
    else:
        t = torch.as_tensor(np.asarray(gt, dtype=np.float32))
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[1] != model.depth:
        raise ShapeError(
            f"scale_label: expected (N,{model.depth},H,W) ground truth, got {tuple(t.shape)}")
    hw = model.stage_hw(stage)
    if tuple(t.shape[2:]) == hw:
        return t
    return F.interpolate(t, size=hw, mode="bilinear", align_corners=False)


def sse_loss(f: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sum of squared errors over all elements, divided by batch size."""
    if f.shape != y.shape:
        raise ShapeError(f"sse_loss: shape mismatch {tuple(f.shape)} vs {tuple(y.shape)}")
    return ((f - y) ** 2).sum() / f.shape[0]


def progressive_loss(intermediates, gt, schedule: WeightSchedule, model: PGRModel,
                     return_stages: bool = False):
    """Sum over stages of alpha_i * SSE(f_i, scaled label); zero-weight
    stages are skipped entirely (no label scaling happens for them)."""
    if len(schedule.alphas) != len(intermediates):
        raise ConfigError(
            f"alphas: schedule length {len(schedule.alphas)} != {len(intermediates)} stages")
    total = None
    per_stage = {}
    for i, alpha in enumerate(schedule.alphas):
        if alpha == 0.0:
            continue
        if i not in GUIDABLE_STAGES:
            raise ConfigError(
                f"alphas: stage {i} has weight {alpha} but only stages "
                f"{GUIDABLE_STAGES[0]}..{GUIDABLE_STAGES[-1]} are guidable")
        y = scale_label(gt, i, model).to(intermediates[i].dtype)
        li = sse_loss(intermediates[i], y)
        per_stage[i] = float(li.detach())
        total = alpha * li if total is None else total + alpha * li
    if total is None:
        total = torch.zeros((), dtype=intermediates[-1].dtype)
    return (total, per_stage) if return_stages else total


def lr_at_step(base_lr: float, halve_every: int, step: int) -> float:
    return base_lr * 0.5 ** (step // halve_every)


@dataclass
class TrainReconConfig:
    out_dir: str
    steps: int = 2000
    batch_size: int = 8
    lr: float = 4e-4
    lr_halve_every: int = 5000
    seed: int = 0
    alpha_schedule: str = "paper"
    split: str = "train"
    ckpt_every: int = 0          # 0: only final
    log_every: int = 25
    base: int = 16
    bottleneck: int = 256
    resume: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


LABEL_CACHE_LIMIT = 64


def train_pgr(manifest_path, cfg: TrainReconConfig):
    """Adam training of the reconstruction backbone with the progressive
    loss; deterministic given cfg.seed.  Returns (checkpoint_path, log)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = SampleStore(manifest_path, split=cfg.split)
    h, w = store.px_hw
    d = store.vol_dhw[0]
    schedule = WeightSchedule.named(cfg.alpha_schedule)
    model_kwargs = dict(input_hw=(h, w), depth=d, base=cfg.base, bottleneck=cfg.bottleneck)

    torch.manual_seed(cfg.seed)
    model = init_params(PGRModel(**model_kwargs), cfg.seed)
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

    px_all = torch.from_numpy(np.stack(store.px)[:, None])          # (n,1,H,W)
    gt_all = torch.from_numpy(np.stack(store.unfolded))             # (n,D,H,W)
    label_cache = None
    if len(store) <= LABEL_CACHE_LIMIT:
        label_cache = {
            i: scale_label(gt_all, i, model)
            for i, a in enumerate(schedule.alphas) if a > 0.0
        }

    resolved = {"kind": "train-recon", "manifest": str(manifest_path), **cfg.as_dict(),
                "model_kwargs": model_kwargs, "n_samples": len(store)}
    hio.atomic_write_bytes(out / "config.json",
                           json.dumps(resolved, indent=2, sort_keys=True).encode())

    log = []
    t0 = time.time()
    model.train()
    for step in range(start_step, cfg.steps):
        lr = lr_at_step(cfg.lr, cfg.lr_halve_every, step)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = batch_indices(rng, len(store), cfg.batch_size)
        px = px_all[idx]
        _, stages = model(px)
        if label_cache is not None:
            total = None
            per_stage = {}
            for i, alpha in enumerate(schedule.alphas):
                if alpha == 0.0:
                    continue
                li = sse_loss(stages[i], label_cache[i][idx])
                per_stage[i] = float(li.detach())
                total = alpha * li if total is None else total + alpha * li
        else:
            total, per_stage = progressive_loss(stages, gt_all[idx], schedule, model,
                                                return_stages=True)
        if not torch.isfinite(total):
            batch_ids = [store.ids[i] for i in idx]
            raise TrainingError(
                f"non-finite loss at step {step}; batch samples: {batch_ids}")
        opt.zero_grad()
        total.backward()
        opt.step()
        entry = {"step": step, "lr": lr, "loss": float(total.detach()),
                 "stages": per_stage}
        log.append(entry)
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and (step + 1) < cfg.steps:
            ckpt_io.save_checkpoint(out / f"ckpt_{step + 1:07d}.pt",
                                    model=model, model_kind="pgr",
                                    model_kwargs=model_kwargs, optimizer=opt,
                                    step=step + 1, config=resolved, batch_rng=rng)
    ckpt_path = out / "ckpt_final.pt"
    ckpt_io.save_checkpoint(ckpt_path, model=model, model_kind="pgr",
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


def load_pgr(path) -> tuple[PGRModel, dict]:
    ck = ckpt_io.load_checkpoint(path)
    if ck["model_kind"] != "pgr":
        raise ConfigError(f"checkpoint {path} is {ck['model_kind']!r}, expected 'pgr'")
    model = PGRModel(**ck["model_kwargs"])
    model.load_state_dict(ck["model_state"])
    model.eval()
    return model, ck


def reconstruct(model: PGRModel, px: np.ndarray) -> np.ndarray:
    """Clamped [0,1] reconstruction volume (D,H,W) for one panoramic image."""
    model.eval()
    with torch.no_grad():
        t = torch.from_numpy(np.asarray(px, dtype=np.float32))[None, None]
        recon, _ = model(t)
    return recon.clamp(0.0, 1.0)[0].numpy()
