"""Loss, optimizer, augmentation and the two-phase training loop.

The loop follows the backbone recipe: Adam at 1e-4 for a first phase, then
1e-5 for a shorter second phase, with random crop / flip / rescale
augmentation. Measurements are regenerated from each augmented clip, so the
label always matches the input. A quantized model must start from a
full-precision checkpoint with identical backbone geometry; its quantizer
ranges are then calibrated on one batch before the first step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import zoom as nd_zoom

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .evaluation import psnr
from .network import QNet, QNetConfig
from .quantize import ALPHA_FLOOR
from .sci import MaskSet, VideoClip, encode, generate_masks, initial_estimate, synth_video


def mse_loss(pred: Tensor, gt) -> Tensor:
    """Mean squared error over all frame pixels: for a [T, H, W] pair this is
    exactly (1/(T*nx*ny)) * sum_t ||pred_t - gt_t||^2; batched inputs are
    additionally averaged over the batch."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float32))
    if pred.shape != gt_t.shape:
        raise ShapeError(f"loss operands differ in shape: {pred.shape} vs {gt_t.shape}")
    diff = pred - gt_t
    return ad.mean(diff * diff)


class Adam:
    """Standard Adam with bias correction; optional per-parameter positive
    floors applied after each step (used for quantizer scales)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, floors=()):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.floors = list(floors)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)
        for p, floor in self.floors:
            p.data = np.maximum(p.data, np.float32(floor))

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainConfig:
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    epochs_phase1: int = 60
    epochs_phase2: int = 20
    batch_size: int = 8
    crop: int = 32
    aug_crop: bool = True
    aug_flip: bool = True
    aug_scale: bool = True
    noise_sigma: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


SCALE_RANGE = (0.75, 1.25)


def _apply_flips(frames: np.ndarray, do_h: bool, do_v: bool) -> np.ndarray:
    if do_h:
        frames = frames[:, :, ::-1]
    if do_v:
        frames = frames[:, ::-1, :]
    return frames


def augment(clip: VideoClip, crop: int, rng: np.random.Generator,
            do_crop=True, do_flip=True, do_scale=True) -> VideoClip:
    """Random rescale (bilinear, factor in [0.75, 1.25]) then random crop to
    the training size, then 0.5-probability horizontal/vertical flips. With
    all switches off the clip passes through untouched."""
    frames = clip.frames
    if do_scale:
        t, h, w = frames.shape
        lo = SCALE_RANGE[0]
        if do_crop:
            # keep the rescaled clip croppable (+0.5 covers zoom rounding)
            lo = max(lo, (crop + 0.5) / h, (crop + 0.5) / w)
        lo = min(lo, SCALE_RANGE[1])
        factor = float(rng.uniform(lo, SCALE_RANGE[1]))
        scaled = [nd_zoom(f, factor, order=1, prefilter=False) for f in frames]
        frames = np.clip(np.stack(scaled), 0.0, 1.0).astype(np.float32)
    if do_crop:
        t, h, w = frames.shape
        if h < crop or w < crop:
            raise ShapeError(f"clip {h}x{w} smaller than crop {crop}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        frames = frames[:, top:top + crop, left:left + crop]
    if do_flip:
        frames = _apply_flips(frames, bool(rng.random() < 0.5), bool(rng.random() < 0.5))
    return VideoClip(frames=np.ascontiguousarray(frames, dtype=np.float32))


@dataclass
class Dataset:
    """Training clips (any size >= crop), a crop-sized mask set, and
    crop-sized held-out clips evaluated without augmentation."""

    train_clips: list
    holdout_clips: list
    masks: MaskSet


def make_synth_dataset(seed: int, n_train: int, n_holdout: int, t: int,
                       train_hw: int, crop: int, mask_p: float = 0.5) -> Dataset:
    masks = generate_masks(seed + 99_000, t, crop, crop, mask_p)
    train = [synth_video(seed + i, t, train_hw, train_hw) for i in range(n_train)]
    hold = [synth_video(seed + 50_000 + i, t, crop, crop) for i in range(n_holdout)]
    return Dataset(train_clips=train, holdout_clips=hold, masks=masks)


def evaluate_psnr(net: QNet, dataset: Dataset, packed: bool = False,
                  batch_size: int = 8) -> float:
    """Mean held-out PSNR of noiseless reconstructions (batched forwards)."""
    clips = dataset.holdout_clips
    if not clips:
        return float("nan")
    vals = []
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        stacks, gts = _batch_stacks(chunk, dataset.masks, 0.0, 0)
        out = net.forward_stack(Tensor(stacks), packed=packed).data
        vals.extend(psnr(out[i], gts[i]) for i in range(len(chunk)))
    return float(np.mean(vals))


def _batch_stacks(clips, masks: MaskSet, noise_sigma: float, noise_seed: int):
    stacks, gts = [], []
    for i, clip in enumerate(clips):
        meas = encode(clip, masks, noise_sigma, noise_seed + i)
        stacks.append(initial_estimate(meas, masks))
        gts.append(clip.frames)
    return np.concatenate(stacks, axis=0), np.stack(gts)


@dataclass
class TrainResult:
    state: dict
    fingerprint: str
    curve: list = field(default_factory=list)   # per-epoch records

    @property
    def final_psnr(self) -> float:
        return self.curve[-1]["val_psnr"] if self.curve else float("nan")


def train(cfg: TrainConfig, netcfg: QNetConfig, dataset: Dataset,
          init_state: Optional[dict] = None,
          init_geometry: Optional[str] = None) -> TrainResult:
    """Run both learning-rate phases; returns the final parameter state and
    the per-epoch loss / held-out PSNR curve. Deterministic per seed."""
    if netcfg.cr != dataset.masks.t:
        raise ConfigError(f"model T={netcfg.cr} but mask set has T={dataset.masks.t}")
    net = QNet(netcfg, seed=cfg.seed)

    if netcfg.quantized:
        if init_state is None:
            raise ConfigError(
                "quantized training requires a full-precision init checkpoint "
                "with identical geometry (pass init_state)"
            )
        net.init_from_backbone(init_state, init_geometry or netcfg.backbone_geometry())
        calib_rng = np.random.default_rng(cfg.seed)
        calib = [augment(c, cfg.crop, calib_rng, cfg.aug_crop, False, False)
                 for c in dataset.train_clips[: cfg.batch_size]]
        stacks, _ = _batch_stacks(calib, dataset.masks, 0.0, 0)
        net.calibrate_quantizers(stacks)
    elif init_state is not None:
        net.init_from_backbone(init_state, init_geometry or netcfg.backbone_geometry())

    floors = [(p, ALPHA_FLOOR) for p in net.alpha_params()]
    opt = Adam(net.params(), cfg.lr_phase1, cfg.beta1, cfg.beta2, cfg.eps, floors)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(3,)))

    result = TrainResult(state={}, fingerprint=netcfg.fingerprint())
    n = len(dataset.train_clips)
    epoch_global = 0
    for phase, (lr, epochs) in enumerate(
            [(cfg.lr_phase1, cfg.epochs_phase1), (cfg.lr_phase2, cfg.epochs_phase2)], start=1):
        opt.lr = lr
        for _ in range(epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = [augment(dataset.train_clips[i], cfg.crop, rng,
                                 cfg.aug_crop, cfg.aug_flip, cfg.aug_scale) for i in idx]
                noise_seed = cfg.seed * 1_000_003 + epoch_global * 1009 + start
                stacks, gts = _batch_stacks(batch, dataset.masks, cfg.noise_sigma, noise_seed)
                with ad.Tape():
                    pred = net.forward_stack(Tensor(stacks))
                    loss = mse_loss(pred, gts)
                ad.backward(loss)
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            epoch_global += 1
            result.curve.append({
                "epoch": epoch_global,
                "phase": phase,
                "lr": lr,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_psnr": evaluate_psnr(net, dataset),
            })
    result.state = net.state_dict()
    return result
