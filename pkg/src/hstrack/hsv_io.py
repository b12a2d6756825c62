"""Hyperspectral sequence data model, on-disk format, cropping, synthesis.

A sequence directory looks like::

    <seq>/
      meta.json          {"bands":B,"height":H,"width":W,"frames":T,
                          "dtype":"float32","layout":"BSQ",
                          "wavelengths_nm":[...]}   (wavelengths optional)
      frames/frame_000000.raw   little-endian float32, band-major (BSQ)
      groundtruth.txt           optional, one "x,y,w,h" line per frame
                                (top-left corner, pixels)
      attributes.json           optional, list of challenge tags

Frames are stored band-sequential so the spectral axis round-trips
bit-exactly across languages.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox

CHALLENGE_TAGS = {"FM", "BC", "IV", "OPR", "OCC", "MB", "LR", "SV", "IPR", "OV", "DEF", "CM"}

# synthetic ground truth is quantized to this grid so the top-left file
# convention converts to/from the internal center form without rounding
_GT_QUANTUM = 1.0 / 256.0


class FormatError(Exception):
    """Sequence directory is missing or malformed."""


class IntegrityError(Exception):
    """Sequence directory is structurally valid but internally inconsistent."""


@dataclass(frozen=True)
class HSVFrame:
    """One hyperspectral frame: float32 array shaped (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"frame data must be 3-D (bands, h, w), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("frame needs at least one band")
        if not np.isfinite(self.data).all():
            raise ValueError("frame contains non-finite values")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class HSVSequence:
    frames: list[HSVFrame]
    ground_truth: list[BoundingBox] | None = None
    attributes: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.frames:
            shape = self.frames[0].data.shape
            for f in self.frames:
                if f.data.shape != shape:
                    raise ValueError("all frames in a sequence must share one shape")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.frames):
            raise ValueError("ground truth length must match frame count")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def bands(self) -> int:
        return self.frames[0].bands

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width


@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic sequence.

    ``motion`` is "linear" (constant velocity, bouncing off frame edges) or
    "sinusoidal" (center oscillates around the frame middle). Challenge
    toggles map onto the usual tracking attributes: ``occlusions`` (OCC),
    ``scale_range`` (SV), ``deform_amp`` (DEF), ``illum_range`` (IV),
    ``distractors`` (BC).
    """

    bands: int
    height: int
    width: int
    frame_count: int
    target_signature: np.ndarray
    background_signatures: list[np.ndarray]
    target_size: tuple[float, float] = (16.0, 16.0)
    motion: str = "linear"
    speed: float = 2.0
    occlusions: list[tuple[int, int]] = field(default_factory=list)
    scale_range: tuple[float, float] = (1.0, 1.0)
    deform_amp: float = 0.0
    illum_range: tuple[float, float] = (1.0, 1.0)
    distractors: int = 0
    distractor_similarity: float = 0.5
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.target_signature = np.asarray(self.target_signature, dtype=np.float64)
        self.background_signatures = [np.asarray(s, dtype=np.float64) for s in self.background_signatures]
        if self.bands < 1 or self.height < 1 or self.width < 1 or self.frame_count < 1:
            raise ValueError("bands/height/width/frame_count must be positive")
        if self.target_signature.shape != (self.bands,):
            raise ValueError("target signature length must equal band count")
        for s in self.background_signatures:
            if s.shape != (self.bands,):
                raise ValueError("background signature length must equal band count")
        if not self.background_signatures:
            raise ValueError("need at least one background signature")
        if self.motion not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown motion model: {self.motion}")
        w, h = self.target_size
        smax = max(self.scale_range)
        if w * smax >= self.width or h * smax >= self.height:
            raise ValueError("target larger than frame")
        if not (0.0 <= self.distractor_similarity <= 1.0):
            raise ValueError("distractor similarity must be in [0, 1]")


# ---------------------------------------------------------------------------
# on-disk format

def save_sequence(seq: HSVSequence, path: str | Path) -> None:
    """Write a sequence directory; load_sequence(save_sequence(s)) == s."""
    if not seq.frames:
        raise FormatError("refusing to write a sequence with no frames")
    root = Path(path)
    frames_dir = root / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "bands": seq.bands,
        "height": seq.height,
        "width": seq.width,
        "frames": len(seq),
        "dtype": "float32",
        "layout": "BSQ",
    }
    try:
        (root / "meta.json").write_text(json.dumps(meta, indent=2))
        for i, frame in enumerate(seq.frames):
            raw = np.ascontiguousarray(frame.data, dtype="<f4")
            (frames_dir / f"frame_{i:06d}.raw").write_bytes(raw.tobytes())
        if seq.ground_truth is not None:
            lines = []
            for box in seq.ground_truth:
                x, y, w, h = box.to_xywh()
                lines.append(f"{x!r},{y!r},{w!r},{h!r}")
            (root / "groundtruth.txt").write_text("\n".join(lines) + "\n")
        if seq.attributes:
            (root / "attributes.json").write_text(json.dumps(sorted(seq.attributes)))
    except OSError as e:
        raise OSError(f"failed writing sequence to {root}: {e}") from e


def load_sequence(path: str | Path) -> HSVSequence:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"missing meta.json in {root}")
    try:
        meta = json.loads(meta_path.read_text())
    except (json.JSONDecodeError, OSError) as e:
        raise FormatError(f"corrupt meta.json in {root}: {e}") from e
    try:
        bands, height, width = int(meta["bands"]), int(meta["height"]), int(meta["width"])
        count = int(meta["frames"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"meta.json missing required fields in {root}: {e}") from e
    if meta.get("layout", "BSQ") != "BSQ" or meta.get("dtype", "float32") != "float32":
        raise FormatError(f"unsupported layout/dtype in {root}")

    frames = []
    expected = bands * height * width * 4
    for i in range(count):
        fp = root / "frames" / f"frame_{i:06d}.raw"
        if not fp.is_file():
            raise IntegrityError(f"missing frame file {fp}")
        raw = fp.read_bytes()
        if len(raw) != expected:
            raise IntegrityError(
                f"frame {fp} has {len(raw)} bytes, expected {expected} for "
                f"({bands},{height},{width}) float32"
            )
        data = np.frombuffer(raw, dtype="<f4").reshape(bands, height, width).copy()
        frames.append(HSVFrame(data))

    ground_truth = None
    gt_path = root / "groundtruth.txt"
    if gt_path.is_file():
        ground_truth = []
        for ln, line in enumerate(gt_path.read_text().splitlines()):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").split(",")
            if len(parts) != 4:
                raise IntegrityError(f"bad ground-truth line {ln} in {gt_path}: {line!r}")
            x, y, w, h = (float(p) for p in parts)
            ground_truth.append(BoundingBox.from_xywh(x, y, w, h))
        if len(ground_truth) != count:
            raise IntegrityError(
                f"{gt_path} has {len(ground_truth)} boxes for {count} frames"
            )

    attributes: set[str] = set()
    attr_path = root / "attributes.json"
    if attr_path.is_file():
        attributes = set(json.loads(attr_path.read_text()))

    return HSVSequence(frames=frames, ground_truth=ground_truth, attributes=attributes)


# ---------------------------------------------------------------------------
# cropping

def resize_bilinear(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D array using half-pixel-centered sampling.

    Identity when the output size equals the input size.
    """
    in_h, in_w = image.shape
    out_h, out_w = out_hw
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass(frozen=True)
class CropGeom:
    """Maps patch pixel coordinates back to frame coordinates."""

    x0: int
    y0: int
    side: int
    out_h: int
    out_w: int

    @property
    def scale_x(self) -> float:
        return self.side / self.out_w

    @property
    def scale_y(self) -> float:
        return self.side / self.out_h

    def box_to_frame(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            self.x0 + box.cx * self.scale_x,
            self.y0 + box.cy * self.scale_y,
            box.w * self.scale_x,
            box.h * self.scale_y,
        )

    def box_to_patch(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            (box.cx - self.x0) / self.scale_x,
            (box.cy - self.y0) / self.scale_y,
            box.w / self.scale_x,
            box.h / self.scale_y,
        )


def crop_patch_with_geom(
    frame: HSVFrame,
    box: BoundingBox,
    context_factor: float,
    out_hw: tuple[int, int],
) -> tuple[HSVFrame, CropGeom]:
    """Square crop of side ``context_factor * sqrt(w*h)`` centered on the box.

    Out-of-frame area is padded with the per-band frame mean so borders do
    not introduce a spurious dark "material"; the crop is then resized to
    ``out_hw`` band by band (the spectral axis is never interpolated).
    """
    if context_factor < 1.0:
        raise ValueError("context_factor must be >= 1")
    out_h, out_w = out_hw
    if out_h < 1 or out_w < 1:
        raise ValueError("out_hw must be positive")
    if not all(math.isfinite(v) for v in (box.cx, box.cy, box.w, box.h)):
        raise ValueError("non-finite box")

    side_f = context_factor * math.sqrt(box.w * box.h)
    side = max(1, int(math.floor(side_f + 0.5)))
    x0 = int(math.floor(box.cx - side / 2.0 + 0.5))
    y0 = int(math.floor(box.cy - side / 2.0 + 0.5))

    bands = frame.bands
    pad_value = frame.data.reshape(bands, -1).mean(axis=1)
    patch = np.empty((bands, side, side), dtype=np.float64)
    patch[:] = pad_value[:, None, None]

    sy0, sy1 = max(y0, 0), min(y0 + side, frame.height)
    sx0, sx1 = max(x0, 0), min(x0 + side, frame.width)
    if sy1 > sy0 and sx1 > sx0:
        patch[:, sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = frame.data[:, sy0:sy1, sx0:sx1]

    out = np.empty((bands, out_h, out_w), dtype=np.float32)
    for b in range(bands):
        out[b] = resize_bilinear(patch[b], (out_h, out_w)).astype(np.float32)
    return HSVFrame(out), CropGeom(x0=x0, y0=y0, side=side, out_h=out_h, out_w=out_w)


def crop_patch(
    frame: HSVFrame,
    box: BoundingBox,
    context_factor: float,
    out_hw: tuple[int, int],
) -> HSVFrame:
    patch, _ = crop_patch_with_geom(frame, box, context_factor, out_hw)
    return patch


# ---------------------------------------------------------------------------
# synthetic sequences

def _quantize(v: float) -> float:
    return round(v / _GT_QUANTUM) * _GT_QUANTUM


def _smooth_field(rng: np.random.Generator, hw: tuple[int, int], coarse: int = 6) -> np.ndarray:
    grid = rng.random((coarse, coarse))
    return resize_bilinear(grid, hw)


def _object_path(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    w0, h0 = spec.target_size
    margin_x = w0 * max(spec.scale_range) / 2 + 1
    margin_y = h0 * max(spec.scale_range) / 2 + 1
    lo_x, hi_x = margin_x, spec.width - margin_x
    lo_y, hi_y = margin_y, spec.height - margin_y
    cx = rng.uniform(lo_x, hi_x)
    cy = rng.uniform(lo_y, hi_y)
    if spec.motion == "linear":
        angle = rng.uniform(0, 2 * math.pi)
        vx, vy = spec.speed * math.cos(angle), spec.speed * math.sin(angle)
        path = []
        for _ in range(spec.frame_count):
            path.append((cx, cy))
            cx += vx
            cy += vy
            if cx < lo_x or cx > hi_x:
                vx = -vx
                cx = min(max(cx, lo_x), hi_x)
            if cy < lo_y or cy > hi_y:
                vy = -vy
                cy = min(max(cy, lo_y), hi_y)
        return path
    # sinusoidal: oscillate around the starting point
    amp_x = min(cx - lo_x, hi_x - cx)
    amp_y = min(cy - lo_y, hi_y - cy)
    period = max(spec.frame_count / 2.0, 8.0)
    phase = rng.uniform(0, 2 * math.pi)
    path = []
    for t in range(spec.frame_count):
        path.append(
            (
                cx + amp_x * math.sin(2 * math.pi * t / period + phase),
                cy + amp_y * math.sin(4 * math.pi * t / period + phase) * 0.5,
            )
        )
    return path


def generate_synthetic(spec: SynthSpec) -> HSVSequence:
    """Render a synthetic sequence; a pure function of the spec (incl. seed)."""
    rng = np.random.default_rng(spec.seed)
    background = np.zeros((spec.bands, spec.height, spec.width), dtype=np.float64)
    weights = np.stack(
        [_smooth_field(rng, (spec.height, spec.width)) for _ in spec.background_signatures]
    )
    weights = weights / weights.sum(axis=0, keepdims=True)
    for sig, w in zip(spec.background_signatures, weights):
        background += sig[:, None, None] * w[None, :, :]

    target_path = _object_path(spec, rng)

    # distractor signatures interpolate toward the target signature
    distractor_sigs = []
    distractor_paths = []
    for _ in range(spec.distractors):
        other = rng.uniform(0.1, 0.9, size=spec.bands)
        sim = spec.distractor_similarity
        distractor_sigs.append(sim * spec.target_signature + (1.0 - sim) * other)
        distractor_paths.append(_object_path(spec, rng))

    occluder_sig = spec.background_signatures[0]
    w0, h0 = spec.target_size
    scale_phase = rng.uniform(0, 2 * math.pi)
    deform_phase = rng.uniform(0, 2 * math.pi)
    illum_phase = rng.uniform(0, 2 * math.pi)

    ys = np.arange(spec.height) + 0.5
    xs = np.arange(spec.width) + 0.5

    frames = []
    ground_truth = []
    for t in range(spec.frame_count):
        frame = background.copy()

        s_lo, s_hi = spec.scale_range
        scale = s_lo + (s_hi - s_lo) * 0.5 * (1 + math.sin(2 * math.pi * t / max(spec.frame_count, 2) + scale_phase))
        deform = spec.deform_amp * math.sin(2 * math.pi * t / 12.0 + deform_phase)
        w_t = w0 * scale * (1.0 + deform)
        h_t = h0 * scale * (1.0 - deform)

        cx, cy = target_path[t]
        box = BoundingBox(_quantize(cx), _quantize(cy), _quantize(w_t), _quantize(h_t))

        def paint(sig, b):
            mask_y = (ys >= b.y0) & (ys <= b.y1)
            mask_x = (xs >= b.x0) & (xs <= b.x1)
            region = np.outer(mask_y, mask_x)
            frame[:, region] = sig[:, None]

        for sig, path in zip(distractor_sigs, distractor_paths):
            dcx, dcy = path[t]
            paint(sig, BoundingBox(dcx, dcy, w0, h0))

        occluded = any(start <= t < end for start, end in spec.occlusions)
        paint(spec.target_signature, box)
        if occluded:
            paint(occluder_sig, box)

        g_lo, g_hi = spec.illum_range
        gain = g_lo + (g_hi - g_lo) * 0.5 * (1 + math.sin(2 * math.pi * t / max(spec.frame_count, 2) + illum_phase))
        frame = frame * gain
        if spec.noise_std > 0:
            frame = frame + rng.normal(0.0, spec.noise_std, size=frame.shape)
        frame = np.clip(frame, 0.0, 1.0)

        frames.append(HSVFrame(frame.astype(np.float32)))
        ground_truth.append(box)

    attributes = set()
    if spec.occlusions:
        attributes.add("OCC")
    if spec.scale_range[0] != spec.scale_range[1]:
        attributes.add("SV")
    if spec.deform_amp > 0:
        attributes.add("DEF")
    if spec.illum_range[0] != spec.illum_range[1]:
        attributes.add("IV")
    if spec.distractors > 0:
        attributes.add("BC")
    if spec.speed >= 4.0:
        attributes.add("FM")

    return HSVSequence(frames=frames, ground_truth=ground_truth, attributes=attributes)
