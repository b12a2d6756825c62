"""Online Siamese tracking loop with a momentum template update.

Per frame: crop a search region around the previous box, run the network
against the stored template features, pick the best-scoring token (with an
optional Hanning motion prior), decode its box back to frame coordinates,
then update the accumulation threshold ``theta = eta*theta + (1-eta)*s``
and refresh the template only when the score beats it.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .geometry import BoundingBox
from .head import Prediction
from .hsv_io import CropGeom, HSVFrame, HSVSequence, crop_patch_with_geom
from .model import TrackerNet


@dataclass(frozen=True)
class TrackerConfig:
    template_size: int = 48
    search_size: int = 96
    template_context: float = 2.0
    search_context: float = 4.0
    window_weight: float = 0.3
    eta: float = 0.7

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise ValueError("eta must lie in (0, 1)")
        if self.template_size % 8 or self.search_size % 8:
            raise ValueError("patch sizes must be divisible by 8")
        if not (0.0 <= self.window_weight <= 1.0):
            raise ValueError("window weight must lie in [0, 1]")


@dataclass
class TrackerState:
    model: TrackerNet
    template_patch: HSVFrame
    template_features: torch.Tensor
    theta: float
    eta: float
    last_box: BoundingBox
    config: TrackerConfig


def _embed_patch(model: TrackerNet, patch: HSVFrame) -> torch.Tensor:
    with torch.no_grad():
        return model.embed(model.normalize(patch.data))


def tracker_init(
    model: TrackerNet,
    frame: HSVFrame,
    box: BoundingBox,
    config: TrackerConfig = TrackerConfig(),
) -> TrackerState:
    """Start tracking from an annotated first frame; theta starts at 0."""
    if box.w < 1 or box.h < 1:
        raise ValueError("degenerate init box")
    box = box.clamped_to(frame.width, frame.height)
    model.eval()
    patch, _ = crop_patch_with_geom(
        frame, box, config.template_context, (config.template_size, config.template_size)
    )
    return TrackerState(
        model=model,
        template_patch=patch,
        template_features=_embed_patch(model, patch),
        theta=0.0,
        eta=config.eta,
        last_box=box,
        config=config,
    )


def _hanning_window(hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    win_y = np.hanning(h + 2)[1:-1] if h > 1 else np.ones(1)
    win_x = np.hanning(w + 2)[1:-1] if w > 1 else np.ones(1)
    return np.outer(win_y, win_x).ravel()


def decode_box(
    pred: Prediction,
    geom: CropGeom,
    window_weight: float = 0.0,
) -> tuple[BoundingBox, float]:
    """Pick the best token and map its box to frame coordinates.

    The foreground probability is optionally blended with a Hanning window
    centered on the patch; the returned score is the un-windowed
    probability of the chosen token. Ties break toward the lowest token
    index.
    """
    probs = torch.softmax(pred.cls.detach(), dim=-1)[..., 1].cpu().numpy()
    scores = probs
    if window_weight > 0.0 and pred.feat_hw is not None:
        window = _hanning_window(pred.feat_hw)
        scores = probs * ((1.0 - window_weight) + window_weight * window)
    idx = int(np.argmax(scores))
    reg = pred.reg.detach().cpu().numpy()[idx]
    patch_box = BoundingBox(
        float(reg[0]) * geom.out_w,
        float(reg[1]) * geom.out_h,
        max(float(reg[2]) * geom.out_w, 1e-3),
        max(float(reg[3]) * geom.out_h, 1e-3),
    )
    return geom.box_to_frame(patch_box), float(probs[idx])


def decode_box_in_patch(pred: Prediction, patch_hw: tuple[int, int]) -> BoundingBox:
    """Plain-argmax decode in patch pixels (no window); used at train time."""
    probs = torch.softmax(pred.cls.detach(), dim=-1)[..., 1].cpu().numpy()
    idx = int(np.argmax(probs))
    reg = pred.reg.detach().cpu().numpy()[idx]
    h, w = patch_hw
    return BoundingBox(
        float(reg[0]) * w,
        float(reg[1]) * h,
        max(float(reg[2]) * w, 1e-3),
        max(float(reg[3]) * h, 1e-3),
    )


def update_template(state: TrackerState, frame: HSVFrame, box: BoundingBox, score: float) -> TrackerState:
    """Momentum threshold update; the template refreshes only above it."""
    theta = state.eta * state.theta + (1.0 - state.eta) * score
    new_state = replace(state, theta=theta, last_box=box)
    if score > theta:
        cfg = state.config
        patch, _ = crop_patch_with_geom(
            frame, box, cfg.template_context, (cfg.template_size, cfg.template_size)
        )
        new_state = replace(
            new_state,
            template_patch=patch,
            template_features=_embed_patch(state.model, patch),
        )
    return new_state


def track_frame(state: TrackerState, frame: HSVFrame) -> tuple[BoundingBox, float, TrackerState]:
    """Track one frame; never raises on valid frames (boxes clamp to bounds)."""
    cfg = state.config
    model = state.model
    search, geom = crop_patch_with_geom(
        frame, state.last_box, cfg.search_context, (cfg.search_size, cfg.search_size)
    )
    with torch.no_grad():
        feat_x = model.embed(model.normalize(search.data))
        fused = model.interact(feat_x, state.template_features)
        pred = model.head(fused, feat_hw=(feat_x.shape[-2], feat_x.shape[-1]))
    box, score = decode_box(pred, geom, cfg.window_weight)
    box = box.clamped_to(frame.width, frame.height)
    new_state = update_template(state, frame, box, score)
    return box, score, new_state


def track_sequence(
    model: TrackerNet,
    seq: HSVSequence,
    init_box: BoundingBox | None = None,
    config: TrackerConfig = TrackerConfig(),
) -> tuple[list[BoundingBox], list[float]]:
    """Track a whole sequence from its first-frame box."""
    if init_box is None:
        if not seq.ground_truth:
            raise ValueError("need an init box or sequence ground truth")
        init_box = seq.ground_truth[0]
    state = tracker_init(model, seq.frames[0], init_box, config)
    boxes = [state.last_box]
    scores = [1.0]
    for frame in seq.frames[1:]:
        box, score, state = track_frame(state, frame)
        boxes.append(box)
        scores.append(score)
    return boxes, scores


def save_results(path, boxes: list[BoundingBox], scores: list[float]) -> None:
    """Write results.txt (one x,y,w,h line per frame) plus scores.txt."""
    from pathlib import Path

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for b in boxes:
        x, y, w, h = b.to_xywh()
        # repr keeps the shortest decimal that parses back to the same float
        lines.append(f"{x!r},{y!r},{w!r},{h!r}")
    (out / "results.txt").write_text("\n".join(lines) + "\n")
    (out / "scores.txt").write_text("\n".join(f"{s:.6f}" for s in scores) + "\n")


def load_results(path) -> list[BoundingBox]:
    from pathlib import Path

    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        x, y, w, h = (float(v) for v in line.split(","))
        boxes.append(BoundingBox.from_xywh(x, y, w, h))
    return boxes
