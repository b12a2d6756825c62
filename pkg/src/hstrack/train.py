"""Training loop: pair sampling, augmentation, AdamW steps, scheduling.

Template/search pairs are drawn from one sequence within a frame gap,
cropped to fixed patch sizes, and augmented (flip, small rotation, crop
jitter). Batches are bucketed by band count so one model trains across
mixed-band datasets without ragged batching. The optimizer runs two
parameter groups (backbone vs everything else) at their own learning
rates, both dropped by 10x at the configured epoch. Per-band
normalization statistics are computed from the training set once and
stored on the model; the spectral loss always sees un-normalized
reflectance.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import BoundingBox
from .hsv_io import HSVFrame, HSVSequence, crop_patch_with_geom, resize_bilinear
from .loss import LossWeights, iou_cxcywh, spectral_loss, token_labels
from .model import TrackerNet
from .tracker import TrackerConfig, decode_box_in_patch


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 1e-5
    lr_other: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    iters_per_epoch: int = 1000
    lr_drop_epoch: int = 50
    freeze_spatial: bool = False
    max_pair_gap: int = 30
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_crop: bool = True
    rotate_max_deg: float = 15.0
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    normalize: bool = True
    spectral_reduce: str = "sum"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if min(self.lr_backbone, self.lr_other, self.weight_decay) < 0:
            raise ValueError("rates must be non-negative")
        if self.lr_drop_epoch > self.epochs:
            raise ValueError("lr_drop_epoch must not exceed epochs")


@dataclass
class TrainExample:
    template_patch: HSVFrame
    template_box: BoundingBox
    search_patch: HSVFrame
    search_box: BoundingBox


# ---------------------------------------------------------------------------
# sampling


def sample_pair(dataset: list[HSVSequence], rng: np.random.Generator, max_gap: int = 30):
    """Pick (sequence, template index, search index) with |gap| <= max_gap."""
    usable = [i for i, s in enumerate(dataset) if s.ground_truth and len(s) >= 2]
    if not usable:
        raise ValueError("no sequence with at least 2 annotated frames")
    seq_idx = int(usable[rng.integers(len(usable))])
    seq = dataset[seq_idx]
    t_idx = int(rng.integers(len(seq)))
    lo = max(0, t_idx - max_gap)
    hi = min(len(seq) - 1, t_idx + max_gap)
    s_idx = int(rng.integers(lo, hi + 1))
    return seq_idx, t_idx, s_idx


def make_example(
    seq: HSVSequence,
    t_idx: int,
    s_idx: int,
    tcfg: TrackerConfig,
    rng: np.random.Generator | None = None,
) -> TrainExample:
    """Crop one training pair.

    With an rng, the search crop is taken around a center/scale-jittered
    box instead of the exact ground truth, mimicking the imperfect
    previous-frame box the tracker crops around at test time.
    """
    t_box = seq.ground_truth[t_idx]
    s_box = seq.ground_truth[s_idx]
    crop_box = s_box
    if rng is not None:
        extent = math.sqrt(s_box.w * s_box.h)
        scale = math.exp(rng.uniform(-0.2, 0.2))
        crop_box = BoundingBox(
            s_box.cx + float(rng.uniform(-0.3, 0.3)) * extent,
            s_box.cy + float(rng.uniform(-0.3, 0.3)) * extent,
            s_box.w * scale,
            s_box.h * scale,
        ).clamped_to(seq.width, seq.height)
    t_patch, t_geom = crop_patch_with_geom(
        seq.frames[t_idx], t_box, tcfg.template_context, (tcfg.template_size, tcfg.template_size)
    )
    s_patch, s_geom = crop_patch_with_geom(
        seq.frames[s_idx], crop_box, tcfg.search_context, (tcfg.search_size, tcfg.search_size)
    )
    return TrainExample(
        template_patch=t_patch,
        template_box=t_geom.box_to_patch(t_box),
        search_patch=s_patch,
        search_box=s_geom.box_to_patch(s_box),
    )


class PairSampler:
    """Draws batches bucketed by band count (one band count per batch)."""

    def __init__(self, dataset: list[HSVSequence], tcfg: TrackerConfig, max_gap: int, rng: np.random.Generator):
        self.dataset = dataset
        self.tcfg = tcfg
        self.max_gap = max_gap
        self.rng = rng
        self.buckets: dict[int, list[int]] = {}
        for i, s in enumerate(dataset):
            if s.ground_truth and len(s) >= 2:
                self.buckets.setdefault(s.bands, []).append(i)
        if not self.buckets:
            raise ValueError("dataset has no trainable sequences")

    def sample_batch(self, n: int) -> list[TrainExample]:
        bands_keys = sorted(self.buckets)
        weights = np.array([len(self.buckets[b]) for b in bands_keys], dtype=np.float64)
        bucket = bands_keys[int(self.rng.choice(len(bands_keys), p=weights / weights.sum()))]
        subset = [self.dataset[i] for i in self.buckets[bucket]]
        out = []
        for _ in range(n):
            seq_idx, t_idx, s_idx = sample_pair(subset, self.rng, self.max_gap)
            out.append(make_example(subset[seq_idx], t_idx, s_idx, self.tcfg, rng=self.rng))
        return out


# ---------------------------------------------------------------------------
# augmentation


def _rotate_patch(data: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate band-by-band about the patch center; fill with band means."""
    if angle_deg == 0.0:
        return data.copy()
    bands, h, w = data.shape
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse rotation of output coordinates into the source image
    rel_x = xs - cx
    rel_y = ys - cy
    src_x = cos_t * rel_x + sin_t * rel_y + cx
    src_y = -sin_t * rel_x + cos_t * rel_y + cy
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    wx = src_x - x0
    wy = src_y - y0
    valid = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    out = np.empty_like(data)
    means = data.reshape(bands, -1).mean(axis=1)
    for b in range(bands):
        img = data[b]
        val = (
            img[y0c, x0c] * (1 - wy) * (1 - wx)
            + img[y0c, x1c] * (1 - wy) * wx
            + img[y1c, x0c] * wy * (1 - wx)
            + img[y1c, x1c] * wy * wx
        )
        out[b] = np.where(valid, val, means[b])
    return out


def _rotate_box(box: BoundingBox, angle_deg: float, center: tuple[float, float]) -> BoundingBox:
    """Axis-aligned hull of the box corners rotated about a center."""
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx0, cy0 = center
    xs, ys = [], []
    for x, y in ((box.x0, box.y0), (box.x1, box.y0), (box.x0, box.y1), (box.x1, box.y1)):
        rx, ry = x - cx0, y - cy0
        xs.append(cos_t * rx - sin_t * ry + cx0)
        ys.append(sin_t * rx + cos_t * ry + cy0)
    return BoundingBox(
        (min(xs) + max(xs)) / 2, (min(ys) + max(ys)) / 2, max(xs) - min(xs), max(ys) - min(ys)
    )


def _flip(patch: np.ndarray, box: BoundingBox) -> tuple[np.ndarray, BoundingBox]:
    flipped = patch[:, :, ::-1].copy()
    return flipped, BoundingBox(patch.shape[2] - box.cx, box.cy, box.w, box.h)


def _crop_jitter(
    patch: np.ndarray, box: BoundingBox, rng: np.random.Generator,
    scale_range: tuple[float, float], retries: int = 8,
) -> tuple[np.ndarray, BoundingBox]:
    """Random sub-crop that keeps the target box inside, resized back."""
    bands, h, w = patch.shape
    for _ in range(retries):
        s = float(rng.uniform(*scale_range))
        ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        x_lo = max(0, int(math.ceil(box.x1 - cw)))
        x_hi = min(w - cw, int(math.floor(box.x0)))
        y_lo = max(0, int(math.ceil(box.y1 - ch)))
        y_hi = min(h - ch, int(math.floor(box.y0)))
        if x_hi < x_lo or y_hi < y_lo:
            continue
        ox = int(rng.integers(x_lo, x_hi + 1))
        oy = int(rng.integers(y_lo, y_hi + 1))
        sub = patch[:, oy : oy + ch, ox : ox + cw]
        out = np.empty((bands, h, w), dtype=patch.dtype)
        for b in range(bands):
            out[b] = resize_bilinear(sub[b].astype(np.float64), (h, w)).astype(patch.dtype)
        sx, sy = w / cw, h / ch
        new_box = BoundingBox((box.cx - ox) * sx, (box.cy - oy) * sy, box.w * sx, box.h * sy)
        return out, new_box
    return patch.copy(), box


def augment(example: TrainExample, rng: np.random.Generator, cfg: TrainConfig) -> TrainExample:
    """Geometric augmentation of a pair; patches stay in raw reflectance.

    Per-band normalization (the remaining augmentation step) is applied at
    batch assembly from dataset statistics stored on the model, so the
    spectral loss keeps seeing physical spectra.
    """
    t_data, t_box = example.template_patch.data, example.template_box
    s_data, s_box = example.search_patch.data, example.search_box

    if cfg.augment_flip and rng.random() < 0.5:
        t_data, t_box = _flip(t_data, t_box)
        s_data, s_box = _flip(s_data, s_box)

    if cfg.augment_rotate:
        ang_t = float(rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
        ang_s = float(rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
        center_t = (t_data.shape[2] / 2.0, t_data.shape[1] / 2.0)
        center_s = (s_data.shape[2] / 2.0, s_data.shape[1] / 2.0)
        t_data = _rotate_patch(t_data, ang_t).astype(np.float32)
        s_data = _rotate_patch(s_data, ang_s).astype(np.float32)
        t_box = _rotate_box(t_box, ang_t, center_t)
        s_box = _rotate_box(s_box, ang_s, center_s)

    if cfg.augment_crop:
        s_data, s_box = _crop_jitter(s_data, s_box, rng, cfg.crop_scale_range)

    t_box = t_box.clamped_to(t_data.shape[2], t_data.shape[1])
    s_box = s_box.clamped_to(s_data.shape[2], s_data.shape[1])
    return TrainExample(HSVFrame(t_data), t_box, HSVFrame(s_data), s_box)


def compute_band_stats(dataset: list[HSVSequence], max_frames: int = 64) -> dict:
    """Per-band mean/std for each band count present in the dataset."""
    grouped: dict[int, list[np.ndarray]] = {}
    for seq in dataset:
        frames = seq.frames[:: max(1, len(seq) // max_frames)]
        grouped.setdefault(seq.bands, []).extend(f.data for f in frames)
    stats = {}
    for bands, frames in grouped.items():
        stack = np.stack(frames)  # (n, bands, h, w)
        mean = stack.mean(axis=(0, 2, 3)).astype(np.float32)
        std = np.maximum(stack.std(axis=(0, 2, 3)), 1e-6).astype(np.float32)
        stats[bands] = (mean, std)
    return stats


# ---------------------------------------------------------------------------
# optimization


def build_optimizer(model: TrackerNet, cfg: TrainConfig) -> torch.optim.AdamW:
    frozen = set()
    if cfg.freeze_spatial:
        for p in model.spatial_parameters():
            p.requires_grad_(False)
            frozen.add(id(p))
    backbone = [p for p in model.backbone_parameters() if id(p) not in frozen]
    other = model.other_parameters()
    return torch.optim.AdamW(
        [
            {"params": backbone, "lr": cfg.lr_backbone, "name": "backbone"},
            {"params": other, "lr": cfg.lr_other, "name": "other"},
        ],
        weight_decay=cfg.weight_decay,
    )


def set_learning_rates(optimizer, cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    scale = 0.1 if epoch >= cfg.lr_drop_epoch else 1.0
    lrs = (cfg.lr_backbone * scale, cfg.lr_other * scale)
    for group in optimizer.param_groups:
        group["lr"] = lrs[0] if group.get("name") == "backbone" else lrs[1]
    return lrs


def train_step(
    model: TrackerNet,
    batch: list[TrainExample],
    optimizer: torch.optim.Optimizer,
    weights: LossWeights = LossWeights(),
    spectral_reduce: str = "sum",
) -> dict:
    """One optimization step over a band-homogeneous batch (in place)."""
    model.train()
    search = torch.stack([model.normalize(ex.search_patch.data) for ex in batch])
    template = torch.stack([model.normalize(ex.template_patch.data) for ex in batch])
    pred = model(search, template)
    fh, fw = pred.feat_hw
    patch_h, patch_w = batch[0].search_patch.height, batch[0].search_patch.width

    labels = torch.stack(
        [token_labels((fh, fw), (patch_h, patch_w), ex.search_box) for ex in batch]
    )
    cls_loss = torch.nn.functional.cross_entropy(
        pred.cls.reshape(-1, 2), labels.reshape(-1)
    )

    gt_norm = torch.stack(
        [
            torch.tensor(
                [
                    ex.search_box.cx / patch_w,
                    ex.search_box.cy / patch_h,
                    ex.search_box.w / patch_w,
                    ex.search_box.h / patch_h,
                ],
                dtype=pred.reg.dtype,
            )
            for ex in batch
        ]
    )
    pos = labels == 1
    reg_valid = bool(pos.any())
    if reg_valid:
        reg_pos = pred.reg[pos]
        gt_pos = gt_norm[:, None, :].expand(-1, fh * fw, -1)[pos]
        reg_loss = (1.0 - iou_cxcywh(reg_pos, gt_pos)).mean()
    else:
        reg_loss = torch.zeros((), dtype=pred.reg.dtype)

    spec_val = 0.0
    if weights.lambda_spec != 0.0:
        with torch.no_grad():
            for i, ex in enumerate(batch):
                one = type(pred)(cls=pred.cls[i], reg=pred.reg[i], feat_hw=pred.feat_hw)
                pred_box = decode_box_in_patch(one, (patch_h, patch_w)).clamped_to(patch_w, patch_h)
                spec_val += float(
                    spectral_loss(
                        ex.template_patch.data, ex.template_box,
                        ex.search_patch.data, pred_box,
                        reduce=spectral_reduce,
                    )
                )
        spec_val /= len(batch)

    total = cls_loss + weights.lambda_reg * reg_loss + weights.lambda_spec * spec_val
    stats = {
        "cls": float(cls_loss.detach()),
        "reg": float(reg_loss.detach()),
        "spec": spec_val,
        "reg_valid": reg_valid,
        "rejected": False,
    }
    stats["total"] = stats["cls"] + weights.lambda_reg * stats["reg"] + weights.lambda_spec * stats["spec"]

    if not torch.isfinite(total):
        stats["rejected"] = True
        optimizer.zero_grad(set_to_none=True)
        return stats

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return stats


def fit(
    model: TrackerNet,
    dataset: list[HSVSequence],
    cfg: TrainConfig,
    tracker_cfg: TrackerConfig = TrackerConfig(),
    weights: LossWeights = LossWeights(),
    log_path: str | Path | None = None,
    start_epoch: int = 0,
    progress: bool = False,
) -> list[dict]:
    """Run the full schedule; returns the per-step history (also logged)."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if cfg.normalize and not model.band_stats:
        model.band_stats = compute_band_stats(dataset)

    sampler = PairSampler(dataset, tracker_cfg, cfg.max_pair_gap, rng)
    optimizer = build_optimizer(model, cfg)

    log_file = open(log_path, "a") if log_path else None
    history = []
    t0 = time.monotonic()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr_backbone, lr_other = set_learning_rates(optimizer, cfg, epoch)
            for it in range(cfg.iters_per_epoch):
                batch = [augment(ex, rng, cfg) for ex in sampler.sample_batch(cfg.batch_size)]
                stats = train_step(model, batch, optimizer, weights, cfg.spectral_reduce)
                record = {
                    "epoch": epoch,
                    "iter": it,
                    "cls": stats["cls"],
                    "reg": stats["reg"],
                    "spec": stats["spec"],
                    "total": stats["total"],
                    "lr_backbone": lr_backbone,
                    "lr_other": lr_other,
                }
                if stats["rejected"]:
                    record["rejected"] = True
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
            if progress:
                done = [h for h in history if h["epoch"] == epoch]
                mean_total = sum(h["total"] for h in done) / len(done)
                print(
                    f"epoch {epoch + 1}/{cfg.epochs} total={mean_total:.4f} "
                    f"({time.monotonic() - t0:.0f}s)",
                    flush=True,
                )
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return history
