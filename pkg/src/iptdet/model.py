"""Multi-task downstream heads over frame-level features.

Two branches: an onset branch (per-frame MLP to one sigmoid unit) and a
factorized technique-by-pitch branch whose final FC is reshaped to an
order-3 tensor and marginalized into raw technique and pitch
posteriorgrams. Two refinement sub-networks (self-attention + FC) combine
the detached onset posterior with each marginal to produce the final
frame-level outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .dataset import ClassMap
from .encoder import FEATURE_DIM, LayerWeights

VARIANTS = ("IPT_probing", "IPT_finetune", "IPT+Pitch", "IPT+Pitch+Onset", "MERTech")


@dataclass
class PosteriorSet:
    """Model outputs for one batch, all (batch, n_time, ...)."""

    onset: torch.Tensor | None  # (B, T, 1), post-sigmoid
    p_ipt: torch.Tensor | None  # (B, T, n_ipt), raw marginal
    p_pitch: torch.Tensor | None  # (B, T, n_pitch), raw marginal
    y_ipt: torch.Tensor  # (B, T, n_ipt), post-sigmoid
    y_pitch: torch.Tensor | None  # (B, T, n_pitch), post-sigmoid


def _init_fan_in_uniform(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / (m.in_features ** 0.5)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class BranchMLP(nn.Module):
    """One 512-unit hidden layer (dropout 0.2 + ReLU), then a
    time-distributed FC to the target size. No output nonlinearity."""

    def __init__(self, out_features: int, hidden: int = 512, dropout: float = 0.2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(FEATURE_DIM, hidden),
            nn.Dropout(dropout),
            nn.ReLU(),
            nn.Linear(hidden, out_features),
        )
        _init_fan_in_uniform(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def marginalize(d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum the (..., n_ipt, n_pitch) tensor over each factor axis.

    Returns (p_ipt, p_pitch): summing over pitch gives the technique
    marginal and vice versa.
    """
    p_ipt = d.sum(dim=-1)
    p_pitch = d.sum(dim=-2)
    return p_ipt, p_pitch


class RefineHead(nn.Module):
    """Self-attention refinement: concat(marginal, onset) -> attention over
    time -> FC -> sigmoid. Q, K, and V all come from the input."""

    def __init__(self, k: int, n_heads: int = 4):
        super().__init__()
        in_dim = k + 1
        # Attention width: in_dim rounded up to a multiple of the head count.
        d_model = ((in_dim + n_heads - 1) // n_heads) * n_heads
        self.in_proj = nn.Linear(in_dim, d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.out = nn.Linear(d_model, k)
        _init_fan_in_uniform(self)

    def forward(
        self, marginal: torch.Tensor, onset: torch.Tensor, detach_onset: bool = True
    ) -> torch.Tensor:
        if marginal.shape[:-1] != onset.shape[:-1]:
            raise ValueError(
                f"time-length mismatch: {tuple(marginal.shape)} vs {tuple(onset.shape)}"
            )
        gate = onset.detach() if detach_onset else onset
        x = torch.cat([marginal, gate], dim=-1)
        x = self.in_proj(x)
        x, _ = self.attn(x, x, x, need_weights=False)
        return torch.sigmoid(self.out(x))


class DetectionModel(nn.Module):
    """Full two-branch head: onset + factorized technique/pitch with
    refinement. Input is the (13, B, T, 768) layer stack."""

    def __init__(self, class_map: ClassMap, detach_onset: bool = True, n_heads: int = 4):
        super().__init__()
        self.class_map = class_map
        self.detach_onset = detach_onset
        self.layer_weights = LayerWeights()
        self.onset_branch = BranchMLP(1)
        self.factor_branch = BranchMLP(class_map.n_ipt * class_map.n_pitch)
        self.refine_ipt = RefineHead(class_map.n_ipt, n_heads)
        self.refine_pitch = RefineHead(class_map.n_pitch, n_heads)

    def forward_features(self, features: torch.Tensor) -> PosteriorSet:
        """Run the heads on already-summed features (B, T, 768)."""
        cm = self.class_map
        onset = torch.sigmoid(self.onset_branch(features))  # (B, T, 1)
        flat = self.factor_branch(features)  # (B, T, n_ipt * n_pitch)
        d = flat.reshape(*flat.shape[:-1], cm.n_ipt, cm.n_pitch)
        p_ipt, p_pitch = marginalize(d)
        y_ipt = self.refine_ipt(p_ipt, onset, self.detach_onset)
        y_pitch = self.refine_pitch(p_pitch, onset, self.detach_onset)
        return PosteriorSet(onset, p_ipt, p_pitch, y_ipt, y_pitch)

    def forward(self, layer_stack: torch.Tensor) -> PosteriorSet:
        return self.forward_features(self.layer_weights(layer_stack))


class FactorOnlyModel(nn.Module):
    """Bottom branch only: joint technique/pitch prediction, no onset or
    refinement. Final outputs are sigmoids of the raw marginals."""

    def __init__(self, class_map: ClassMap):
        super().__init__()
        self.class_map = class_map
        self.layer_weights = LayerWeights()
        self.factor_branch = BranchMLP(class_map.n_ipt * class_map.n_pitch)

    def forward(self, layer_stack: torch.Tensor) -> PosteriorSet:
        cm = self.class_map
        features = self.layer_weights(layer_stack)
        flat = self.factor_branch(features)
        d = flat.reshape(*flat.shape[:-1], cm.n_ipt, cm.n_pitch)
        p_ipt, p_pitch = marginalize(d)
        return PosteriorSet(None, p_ipt, p_pitch, torch.sigmoid(p_ipt), torch.sigmoid(p_pitch))


class SingleTaskModel(nn.Module):
    """Technique-only head for the probing and single-task variants."""

    def __init__(self, class_map: ClassMap):
        super().__init__()
        self.class_map = class_map
        self.layer_weights = LayerWeights()
        self.ipt_branch = BranchMLP(class_map.n_ipt)

    def forward(self, layer_stack: torch.Tensor) -> PosteriorSet:
        features = self.layer_weights(layer_stack)
        y_ipt = torch.sigmoid(self.ipt_branch(features))
        return PosteriorSet(None, None, None, y_ipt, None)


def build_model(variant: str, class_map: ClassMap) -> nn.Module:
    if variant in ("IPT_probing", "IPT_finetune"):
        return SingleTaskModel(class_map)
    if variant == "IPT+Pitch":
        return FactorOnlyModel(class_map)
    if variant in ("IPT+Pitch+Onset", "MERTech"):
        return DetectionModel(class_map)
    raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
