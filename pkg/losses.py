"""Segmentation objectives over softmax probabilities: Dice, cross-entropy, DCEL and GDL.

Logits are (B, K, x, y, z) or unbatched (K, x, y, z); targets hold integer classes
with the class axis removed. Sums run over batch and space together.
"""
from __future__ import annotations
from dataclasses import dataclass
from functools import partial
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from errors import ContractError, DegenerateTargetError

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class LossInputs:
    logits: torch.Tensor
    target: torch.Tensor
    class_weights: Sequence[float] | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")
        logits, target = _batched(self.logits, self.target)
        if self.class_weights is not None and len(self.class_weights) != logits.shape[1]:
            raise ContractError(f"class_weights has {len(self.class_weights)} entries for {logits.shape[1]} classes")


def _batched(logits: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if not torch.is_floating_point(logits):
        raise ContractError("logits must be floating point")
    if target.dtype.is_floating_point:
        raise ContractError("target must hold integer class ids")
    if logits.dim() == target.dim() + 1 and logits.shape[1:] == target.shape:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    elif not (logits.dim() == target.dim() + 1 and logits.shape[0] == target.shape[0]
              and logits.shape[2:] == target.shape[1:]):
        raise ContractError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not line up")
    k = logits.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise ContractError(f"target values must lie in [0, {k - 1}]")
    return logits, target.long()


def _probs_onehot(logits: torch.Tensor, target: torch.Tensor):
    logits, target = _batched(logits, target)
    k = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, k).movedim(-1, 1).to(probs.dtype)
    dims = (0, *range(2, logits.dim()))
    return probs, onehot, dims


def dice_loss(logits: torch.Tensor, target: torch.Tensor, *, epsilon: float = DEFAULT_EPSILON,
              include_background: bool = True, class_weights: Sequence[float] | None = None) -> torch.Tensor:
    probs, onehot, dims = _probs_onehot(logits, target)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + epsilon) / (denom + epsilon)
    first = 0 if include_background else 1
    dice = dice[first:]
    if class_weights is None:
        return 1 - dice.mean()
    w = torch.as_tensor(class_weights, dtype=dice.dtype, device=dice.device)[first:]
    return 1 - (w * dice).sum() / w.sum()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor, **_) -> torch.Tensor:
    # registry keywords (epsilon, include_background, class_weights) do not apply to CE
    logits, target = _batched(logits, target)
    return F.cross_entropy(logits, target)


def dcel(logits: torch.Tensor, target: torch.Tensor, *, epsilon: float = DEFAULT_EPSILON,
         include_background: bool = True, class_weights: Sequence[float] | None = None) -> torch.Tensor:
    return (dice_loss(logits, target, epsilon=epsilon, include_background=include_background,
                      class_weights=class_weights)
            + cross_entropy_loss(logits, target))


def gdl(logits: torch.Tensor, target: torch.Tensor, *, epsilon: float = DEFAULT_EPSILON,
        include_background: bool = True, class_weights: Sequence[float] | None = None) -> torch.Tensor:
    """Generalized Dice: class weights 1 / volume**2, zero for classes absent from the target.

    class_weights, when given, scale the volume weights; epsilon smooths the ratio as in dice_loss.
    """
    probs, onehot, dims = _probs_onehot(logits, target)
    first = 0 if include_background else 1
    volume = onehot.sum(dims)[first:]
    present = volume > 0
    if not bool(present.any()):
        raise DegenerateTargetError("every class is absent from the target")
    w = torch.where(present, 1.0 / volume.clamp_min(1.0) ** 2, torch.zeros_like(volume))
    if class_weights is not None:
        w = w * torch.as_tensor(class_weights, dtype=w.dtype, device=w.device)[first:]
    inter = (probs * onehot).sum(dims)[first:]
    denom = (probs.sum(dims) + onehot.sum(dims))[first:]
    return 1 - (2 * (w * inter).sum() + epsilon) / ((w * denom).sum() + epsilon)


def flt_presence_loss(logits: torch.Tensor, has_flt: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on the classifier's FLT-presence logit."""
    logits = logits.reshape(-1)
    has_flt = has_flt.reshape(-1).to(logits.dtype)
    if logits.shape != has_flt.shape:
        raise ContractError(f"{logits.numel()} logits for {has_flt.numel()} targets")
    return F.binary_cross_entropy_with_logits(logits, has_flt)


LOSSES: dict[str, Callable[..., torch.Tensor]] = {
    "dice": dice_loss,
    "ce": cross_entropy_loss,
    "dcel": dcel,
    "gdl": gdl,
}


def get_loss(name: str, *, include_background: bool = True, epsilon: float = DEFAULT_EPSILON) -> Callable:
    try:
        fn = LOSSES[name]
    except KeyError:
        raise ContractError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
    return partial(fn, include_background=include_background, epsilon=epsilon)


def evaluate_loss(name: str, inputs: LossInputs, *, include_background: bool = True) -> torch.Tensor:
    fn = LOSSES.get(name)
    if fn is None:
        raise ContractError(f"unknown loss {name!r}")
    return fn(inputs.logits, inputs.target, epsilon=inputs.epsilon,
              include_background=include_background, class_weights=inputs.class_weights)
