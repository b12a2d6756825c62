"""Prediction head: per-token classification and box regression."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class Prediction:
    """Per-token outputs: class logits (N, 2) and boxes (N, 4) in [0, 1].

    Regression is (cx, cy, w, h) normalized to the search patch. A leading
    batch dimension is carried through when present.
    """

    cls: torch.Tensor
    reg: torch.Tensor
    feat_hw: tuple[int, int] | None = None


class Mlp(nn.Module):
    """Three linear layers with ReLU between, hidden width = input width."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, out_dim)

    def forward(self, x):
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        return self.fc3(x)


class PredictionHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.cls_branch = Mlp(dim, 2)
        self.reg_branch = Mlp(dim, 4)

    def forward(self, tokens: torch.Tensor, feat_hw: tuple[int, int] | None = None) -> Prediction:
        if tokens.shape[-1] != self.dim:
            raise ValueError(f"token dim {tokens.shape[-1]} does not match head dim {self.dim}")
        return Prediction(
            cls=self.cls_branch(tokens),
            reg=torch.sigmoid(self.reg_branch(tokens)),
            feat_hw=feat_hw,
        )
