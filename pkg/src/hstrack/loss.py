"""Material-consistency (spectral) loss, IoU, classification loss, totals.

The spectral loss compares mean spectra of matched elliptical sub-regions
of the template and predicted boxes. Each box is divided into elliptical
rings around its center, every ring is cut into vertical strips (separately
for the upper and lower halves), and the loss per matched region is
``1 - exp(-n * angle)`` where ``n`` is the ring index and ``angle`` the
angle between the two mean spectra. Boxes are treated as constants here;
gradients flow through the predicted patch values only, while the
regression branch owns box gradients via the IoU loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import BoundingBox
from .hsv_io import HSVFrame

DEFAULT_REGION_AXIS = 5.0
_NORM_EPS = 1e-12
# keeps d(arccos)/d(cos) bounded at collinearity, equivalent to clamping
# |cos| at 1 - 1e-7 in the derivative
_GRAD_EPS = 2.0e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 2.0
    lambda_spec: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_spec < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RegionPartition:
    """Pixel-index sets tagged (ring n, strip k, half) over a patch grid."""

    n_rings: int
    ax_w: float
    ax_h: float
    grid_hw: tuple[int, int]
    regions: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict)
    degenerate: bool = False
    is_template: bool = True


def _template_axes(box: BoundingBox, d_major: float) -> tuple[float, float]:
    # the major axis of the innermost ellipse is capped so regions stay
    # local; the minor axis follows the box aspect ratio
    if box.w >= box.h:
        return d_major, d_major * box.h / box.w
    return d_major * box.w / box.h, d_major


def partition_regions(
    box: BoundingBox,
    grid_hw: tuple[int, int],
    is_template: bool = True,
    n_override: int | None = None,
    d_major: float = DEFAULT_REGION_AXIS,
) -> RegionPartition:
    """Divide the patch grid into tagged elliptical-ring strip regions.

    Template mode derives the innermost-ellipse axes from the box aspect
    ratio; predicted mode takes the ring count from the template partition
    so regions pair one-to-one. Boxes too small for a single ring collapse
    to a degenerate whole-box region, flagged on the result.
    """
    h, w = grid_hw
    if is_template:
        ax_w, ax_h = _template_axes(box, d_major)
        n_rings = int(math.floor(min(box.w / ax_w, box.h / ax_h)))
        if n_rings >= 1:
            # rescale so the N rings tile the box exactly; the predicted
            # partition uses the same rule, making regions correspond
            # one-to-one between the two boxes (identical boxes then yield
            # identical partitions)
            ax_w = box.w / n_rings
            ax_h = box.h / n_rings
    else:
        if n_override is None:
            raise ValueError("predicted-mode partition needs the template ring count")
        n_rings = int(n_override)
        if n_rings >= 1:
            ax_w = box.w / n_rings
            ax_h = box.h / n_rings
        else:
            ax_w, ax_h = box.w, box.h

    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    px = cols.ravel() + 0.5
    py = rows.ravel() + 0.5
    rel_x = px - box.cx
    rel_y = py - box.cy
    flat = np.arange(h * w)

    if n_rings < 1:
        inside = (
            (rel_x >= -box.w / 2)
            & (rel_x <= box.w / 2)
            & (rel_y >= -box.h / 2)
            & (rel_y <= box.h / 2)
        )
        part = RegionPartition(
            n_rings=1, ax_w=ax_w, ax_h=ax_h, grid_hw=grid_hw,
            degenerate=True, is_template=is_template,
        )
        if inside.any():
            part.regions[(1, 0, "full")] = flat[inside]
        return part

    rho2 = rel_x**2 / ax_w**2 + rel_y**2 / ax_h**2
    # ring n covers (n-1)^2 < rho2 <= n^2, evaluated on squared radii so
    # boundaries are hit exactly; the center pixel joins ring 1 so the
    # rings tile the whole ellipse disk
    bounds_sq = np.arange(1, n_rings + 1, dtype=np.float64) ** 2
    ring = 1 + np.searchsorted(bounds_sq, rho2, side="left")
    keep = ring <= n_rings

    strip = np.floor(rel_x / ax_w).astype(np.int64)
    half = np.where(rel_y >= 0.0, 0, 1)  # ties on the center line join "upper"

    part = RegionPartition(
        n_rings=n_rings, ax_w=ax_w, ax_h=ax_h, grid_hw=grid_hw,
        degenerate=False, is_template=is_template,
    )
    kept = flat[keep]
    if len(kept):
        rk, sk, hk = ring[keep], strip[keep], half[keep]
        order = np.lexsort((hk, sk, rk))
        kept, rk, sk, hk = kept[order], rk[order], sk[order], hk[order]
        splits = np.flatnonzero((np.diff(rk) != 0) | (np.diff(sk) != 0) | (np.diff(hk) != 0)) + 1
        starts = np.concatenate(([0], splits))
        for s, chunk in zip(starts, np.split(kept, splits)):
            tag = (int(rk[s]), int(sk[s]), "upper" if hk[s] == 0 else "lower")
            part.regions[tag] = chunk
    return part


@dataclass(frozen=True)
class RegionSpectrum:
    tag: tuple[int, int, str]
    mean: np.ndarray
    pixel_count: int


def region_mean_spectra(patch: HSVFrame | np.ndarray, part: RegionPartition) -> list[RegionSpectrum]:
    """Average spectrum of every non-empty region of the partition."""
    data = patch.data if isinstance(patch, HSVFrame) else np.asarray(patch)
    bands = data.shape[0]
    if data.shape[1:] != part.grid_hw:
        raise ValueError(f"patch grid {data.shape[1:]} does not match partition {part.grid_hw}")
    flat = data.reshape(bands, -1)
    out = []
    for tag in sorted(part.regions):
        idx = part.regions[tag]
        out.append(RegionSpectrum(tag=tag, mean=flat[:, idx].mean(axis=1), pixel_count=len(idx)))
    if not out:
        raise ValueError("partition has no populated regions")
    return out


class _SpectralAngle(torch.autograd.Function):
    """Angle between two spectra.

    The forward pass uses the atan2 form, which is exactly zero for
    identical inputs and accurate near 0 and pi. The backward pass is the
    arccos-form derivative with the denominator floored so gradients stay
    finite at collinearity.
    """

    @staticmethod
    def forward(ctx, mt, ms):
        nt = torch.linalg.vector_norm(mt).clamp_min(_NORM_EPS)
        ns = torch.linalg.vector_norm(ms).clamp_min(_NORM_EPS)
        u = mt / nt
        v = ms / ns
        cos = (u * v).sum().clamp(-1.0, 1.0)
        theta = 2.0 * torch.atan2(
            torch.linalg.vector_norm(u - v), torch.linalg.vector_norm(u + v)
        )
        ctx.save_for_backward(mt, ms, nt, ns, cos)
        return theta

    @staticmethod
    def backward(ctx, grad_out):
        mt, ms, nt, ns, cos = ctx.saved_tensors
        denom = torch.sqrt((1.0 - cos * cos).clamp_min(_GRAD_EPS))
        dcos_dmt = ms / (nt * ns) - cos * mt / (nt * nt)
        dcos_dms = mt / (nt * ns) - cos * ms / (ns * ns)
        g = -grad_out / denom
        return g * dcos_dmt, g * dcos_dms


def spectral_angle(mt: torch.Tensor, ms: torch.Tensor) -> torch.Tensor:
    return _SpectralAngle.apply(mt, ms)


def _matched_means(
    template_patch, template_box, pred_patch, pred_box, d_major
) -> list[tuple[tuple[int, int, str], torch.Tensor, torch.Tensor]]:
    t_data = template_patch.data if isinstance(template_patch, HSVFrame) else template_patch
    p_data = pred_patch.data if isinstance(pred_patch, HSVFrame) else pred_patch
    t = torch.as_tensor(t_data)
    p = p_data if isinstance(p_data, torch.Tensor) else torch.as_tensor(p_data)
    if t.shape[0] != p.shape[0]:
        raise ValueError(f"band counts differ: {t.shape[0]} vs {p.shape[0]}")

    part_t = partition_regions(template_box, (t.shape[1], t.shape[2]), is_template=True, d_major=d_major)
    part_s = partition_regions(
        pred_box, (p.shape[1], p.shape[2]), is_template=False,
        n_override=0 if part_t.degenerate else part_t.n_rings, d_major=d_major,
    )
    t_flat = t.reshape(t.shape[0], -1)
    p_flat = p.reshape(p.shape[0], -1)
    matched = []
    for tag in sorted(set(part_t.regions) & set(part_s.regions)):
        it = torch.as_tensor(part_t.regions[tag], dtype=torch.long)
        ip = torch.as_tensor(part_s.regions[tag], dtype=torch.long)
        matched.append((tag, t_flat[:, it].mean(dim=1), p_flat[:, ip].mean(dim=1)))
    return matched


def spectral_loss(
    template_patch,
    template_box: BoundingBox,
    pred_patch,
    pred_box: BoundingBox,
    d_major: float = DEFAULT_REGION_AXIS,
    reduce: str = "sum",
) -> torch.Tensor:
    """Sum over matched regions of ``1 - exp(-n * angle(m_t, m_s))``.

    ``reduce="mean"`` divides by the matched-region count, which keeps the
    magnitude comparable across box sizes (the summed form grows with the
    ring count).
    """
    matched = _matched_means(template_patch, template_box, pred_patch, pred_box, d_major)
    if not matched:
        raise ValueError("no matched regions between template and predicted partitions")
    total = None
    for tag, mt, ms in matched:
        n = tag[0]
        term = 1.0 - torch.exp(-float(n) * spectral_angle(mt, ms))
        total = term if total is None else total + term
    if reduce == "mean":
        total = total / len(matched)
    elif reduce != "sum":
        raise ValueError(f"unknown reduce mode {reduce!r}")
    return total


def spectral_loss_terms(
    template_patch,
    template_box: BoundingBox,
    pred_patch,
    pred_box: BoundingBox,
    d_major: float = DEFAULT_REGION_AXIS,
) -> tuple[float, list[dict]]:
    """Per-region breakdown used by the loss-score CLI command."""
    matched = _matched_means(template_patch, template_box, pred_patch, pred_box, d_major)
    terms = []
    total = 0.0
    for tag, mt, ms in matched:
        angle = float(spectral_angle(mt, ms))
        term = 1.0 - math.exp(-tag[0] * angle)
        total += term
        terms.append(
            {"ring": tag[0], "strip": tag[1], "half": tag[2], "angle": angle, "loss": term}
        )
    return total, terms


# ---------------------------------------------------------------------------
# box overlap

def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1].

    Areas come from the same corner coordinates as the intersection so
    identical boxes give exactly 1.0.
    """
    ax0, ay0, ax1, ay1 = a.x0, a.y0, a.x1, a.y1
    bx0, by0, bx1, by1 = b.x0, b.y0, b.x1, b.y1
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def iou_cxcywh(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable IoU for (..., 4) tensors in (cx, cy, w, h) form."""
    ax0, ay0 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax1, ay1 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx0, by0 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx1, by1 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    ix = (torch.minimum(ax1, bx1) - torch.maximum(ax0, bx0)).clamp_min(0)
    iy = (torch.minimum(ay1, by1) - torch.maximum(ay0, by0)).clamp_min(0)
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union.clamp_min(1e-12)


def token_labels(feat_hw: tuple[int, int], patch_hw: tuple[int, int], box: BoundingBox) -> torch.Tensor:
    """1 for tokens whose grid centers fall inside the box, else 0."""
    fh, fw = feat_hw
    ph, pw = patch_hw
    sy, sx = ph / fh, pw / fw
    ys = (torch.arange(fh, dtype=torch.float64) + 0.5) * sy
    xs = (torch.arange(fw, dtype=torch.float64) + 0.5) * sx
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    inside = (xx >= box.x0) & (xx <= box.x1) & (yy >= box.y0) & (yy <= box.y1)
    return inside.reshape(-1).long()


def total_loss(pred, labels, gt_box_norm, spectral_inputs=None, weights: LossWeights = LossWeights()):
    """Combine classification, regression, and spectral terms.

    ``pred`` carries per-token class logits (N, 2) and normalized box
    regressions (N, 4); ``labels`` marks foreground tokens; ``gt_box_norm``
    is the target box in normalized patch coordinates. ``spectral_inputs``
    is an optional (template_patch, template_box, pred_patch, pred_box)
    tuple. Returns (total, components dict); the regression term is omitted
    and flagged when no token is positive.
    """
    cls_loss = torch.nn.functional.cross_entropy(pred.cls, labels)
    components = {"cls": float(cls_loss)}

    pos = labels == 1
    reg_valid = bool(pos.any())
    total = cls_loss
    if reg_valid:
        gt = torch.as_tensor(gt_box_norm, dtype=pred.reg.dtype).expand_as(pred.reg[pos])
        reg_loss = (1.0 - iou_cxcywh(pred.reg[pos], gt)).mean()
        total = total + weights.lambda_reg * reg_loss
        components["reg"] = float(reg_loss)
    else:
        components["reg"] = 0.0
    components["reg_valid"] = reg_valid

    spec_val = 0.0
    if weights.lambda_spec != 0.0 and spectral_inputs is not None:
        spec = spectral_loss(*spectral_inputs)
        total = total + weights.lambda_spec * spec
        spec_val = float(spec)
    components["spec"] = spec_val
    components["total"] = (
        components["cls"]
        + weights.lambda_reg * components["reg"]
        + weights.lambda_spec * components["spec"]
    )
    return total, components
