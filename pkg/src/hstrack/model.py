"""Full tracking network and the binary checkpoint format.

Checkpoints are one file: an 8-byte magic, a little-endian uint64 giving
the JSON manifest length, the manifest, then a raw blob of little-endian
float32 tensors. The manifest maps tensor names to shape/dtype/offset and
carries the model configuration, training epoch, and per-band-count
normalization statistics so a checkpoint is self-describing.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, SpectralSpatialBackbone
from .head import Prediction, PredictionHead
from .interaction import (
    AttentionConfig,
    BandInteraction,
    InclusionExclusionFusion,
    sine_positional_encoding,
    sum_fusion,
)

_MAGIC = b"HSTCKPT1"

FUSION_MODES = ("union", "sum")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 48
    stage_widths: tuple[int, ...] = (24, 48)
    heads: int = 8
    ffn_dim: int | None = None
    fusion: str = "union"
    share_fusion_context: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")

    def attention(self) -> AttentionConfig:
        return AttentionConfig(dim=self.channels, heads=self.heads, ffn_dim=self.ffn_dim)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(channels=self.channels, stage_widths=tuple(self.stage_widths), seed=self.seed)


class TrackerNet(nn.Module):
    """Siamese pipeline: shared backbone, band interaction, fusion, head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.backbone = SpectralSpatialBackbone(cfg.backbone())
        attn_cfg = cfg.attention()
        self.interaction = BandInteraction(attn_cfg)
        self.fusion = (
            InclusionExclusionFusion(attn_cfg, share_context=cfg.share_fusion_context)
            if cfg.fusion == "union"
            else None
        )
        self.head = PredictionHead(cfg.channels)
        # per-band-count normalization stats {bands: (mean, std)}, filled in
        # by training and persisted with the checkpoint
        self.band_stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def normalize(self, patch: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Apply stored per-band normalization for this band count, if any."""
        x = torch.as_tensor(np.asarray(patch), dtype=torch.float32)
        stats = self.band_stats.get(int(x.shape[-3]))
        if stats is not None:
            mean = torch.as_tensor(stats[0], dtype=torch.float32)[:, None, None]
            std = torch.as_tensor(stats[1], dtype=torch.float32)[:, None, None]
            x = (x - mean) / std
        return x

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        """(batch, bands, h, w) or (bands, h, w) patches to 4/5-D features."""
        single = patches.ndim == 3
        if single:
            patches = patches[None]
        feats = self.backbone(patches[:, None])
        return feats[0] if single else feats

    def interact(self, feat_x: torch.Tensor, feat_z: torch.Tensor) -> torch.Tensor:
        bands = self.interaction(feat_x, feat_z)
        if self.fusion is not None:
            hw = (feat_x.shape[-2], feat_x.shape[-1])
            pos = sine_positional_encoding(*hw, self.cfg.channels, dtype=bands[0].dtype)
            return self.fusion(bands, pos).fused
        return sum_fusion(bands)

    def forward(self, search: torch.Tensor, template: torch.Tensor) -> Prediction:
        feat_x = self.embed(search)
        feat_z = self.embed(template)
        fused = self.interact(feat_x, feat_z)
        return self.head(fused, feat_hw=(feat_x.shape[-2], feat_x.shape[-1]))

    def spatial_parameters(self):
        return self.backbone.spatial_parameters()

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def other_parameters(self):
        backbone_ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in backbone_ids]


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(model: TrackerNet, path: str | Path, epoch: int = 0, extra_meta: dict | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0

    def add(name: str, array: np.ndarray):
        nonlocal offset
        arr = np.ascontiguousarray(array, dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])

    for name, tensor in model.state_dict().items():
        add(name, tensor.detach().cpu().numpy())
    for bands, (mean, std) in sorted(model.band_stats.items()):
        add(f"band_stats/{bands}/mean", mean)
        add(f"band_stats/{bands}/std", std)

    meta = {
        "format": 1,
        "epoch": epoch,
        "model": asdict(model.cfg),
        "band_stats_keys": sorted(model.band_stats),
    }
    if extra_meta:
        meta.update(extra_meta)
    manifest = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[TrackerNet, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    blob_start = start + mlen

    def read(name: str) -> np.ndarray:
        entry = manifest["tensors"][name]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        off = blob_start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        return arr.reshape(entry["shape"]).copy()

    meta = manifest["meta"]
    cfg_dict = dict(meta["model"])
    cfg_dict["stage_widths"] = tuple(cfg_dict["stage_widths"])
    model = TrackerNet(ModelConfig(**cfg_dict))
    state = {
        name: torch.from_numpy(read(name))
        for name in manifest["tensors"]
        if not name.startswith("band_stats/")
    }
    model.load_state_dict(state)
    for bands in meta.get("band_stats_keys", []):
        model.band_stats[int(bands)] = (
            read(f"band_stats/{bands}/mean"),
            read(f"band_stats/{bands}/std"),
        )
    model.eval()
    return model, meta
