"""Frame-level loss terms and their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the combined loss."""

    lambda_ipt: float = 1.0
    lambda_pitch: float = 0.5
    lambda_onset: float = 0.5

    def __post_init__(self):
        if min(self.lambda_ipt, self.lambda_pitch, self.lambda_onset) < 0:
            raise ValueError("loss weights must be non-negative")


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    total = mask.sum()
    if total == 0:
        warnings.warn("empty mask in loss; returning 0")
        return values.sum() * 0.0
    return (values * mask).sum() / total


def _expand_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    mask = mask.to(like.dtype)
    while mask.ndim < like.ndim:
        mask = mask.unsqueeze(-1)
    return mask.expand_as(like)


def bce(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy over mask-valid elements.

    ``mask`` is per frame (broadcast over trailing class dims) or
    elementwise; predictions are clipped to [eps, 1-eps].
    """
    p = pred.clamp(EPS, 1.0 - EPS)
    target = target.to(p.dtype)
    elem = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    m = _expand_mask(mask, elem)
    return _masked_mean(elem, m)


def weighted_bce(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """BCE with the positive term of class c scaled by weights[c].

    The last dim of ``pred`` indexes classes; ``weights`` has that length.
    """
    weights = torch.as_tensor(weights, dtype=pred.dtype, device=pred.device)
    if weights.shape != (pred.shape[-1],):
        raise ValueError(
            f"weights length {tuple(weights.shape)} != class dim {pred.shape[-1]}"
        )
    p = pred.clamp(EPS, 1.0 - EPS)
    target = target.to(p.dtype)
    elem = -(weights * target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    m = _expand_mask(mask, elem)
    return _masked_mean(elem, m)


def total_loss(posteriors, targets, loss_weights: LossWeights, class_weights) -> dict:
    """Combined loss: weighted technique BCE plus pitch and onset BCE.

    ``posteriors`` is a PosteriorSet; ``targets`` a FrameGrid-shaped bundle
    of tensors (ipt, pitch, onset, mask). The pitch term is skipped when
    the corpus carries no pitch labels; onset likewise when the variant has
    no onset branch. Returns {"total", "ipt", "pitch", "onset"}.
    """
    mask = targets["mask"]
    l_ipt = weighted_bce(posteriors.y_ipt, targets["ipt"], mask, class_weights)
    zero = l_ipt.detach() * 0.0

    has_pitch = targets.get("has_pitch", True)
    if posteriors.y_pitch is not None and has_pitch:
        l_pitch = bce(posteriors.y_pitch, targets["pitch"], mask)
    else:
        l_pitch = zero

    if posteriors.onset is not None:
        l_onset = bce(posteriors.onset.squeeze(-1), targets["onset"], mask)
    else:
        l_onset = zero

    total = (
        loss_weights.lambda_ipt * l_ipt
        + loss_weights.lambda_pitch * l_pitch
        + loss_weights.lambda_onset * l_onset
    )
    return {"total": total, "ipt": l_ipt, "pitch": l_pitch, "onset": l_onset}
