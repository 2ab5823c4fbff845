"""Training objectives: soft Dice, Cox partial likelihood, combined loss.

All losses are differentiable torch expressions. The Cox loss follows the
negative log partial likelihood for right-censored data: a subject's risk
set contains every subject whose observed time is no less than its own
(ties and the subject itself included).
"""

from __future__ import annotations

import torch

from .nncore import ShapeError

DICE_EPS = 1e-7
DEFAULT_L2_LAMBDA = 0.1


class NoEventError(ValueError):
    """A Cox loss batch contained no observed events."""


def dice_loss(prob: torch.Tensor, truth: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss, -2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), in [-1, 0].

    ``prob`` holds foreground probabilities, ``truth`` a binary mask on the
    same grid. When both carry a batch axis the loss is averaged per sample.
    """
    if prob.shape != truth.shape:
        raise ShapeError(
            f"grid mismatch: prob {tuple(prob.shape)} vs truth {tuple(truth.shape)}"
        )
    truth = truth.to(prob.dtype)
    if prob.dim() == 4:  # (batch, D, H, W): one term per sample
        axes = (1, 2, 3)
    else:
        axes = tuple(range(prob.dim()))
    num = 2.0 * (prob * truth).sum(dim=axes)
    den = (prob * prob).sum(dim=axes) + (truth * truth).sum(dim=axes) + eps
    return (-num / den).mean()


def cox_ph_loss(risk: torch.Tensor, time: torch.Tensor, event: torch.Tensor) -> torch.Tensor:
    """Negative log Cox partial likelihood averaged over observed events.

    risk: (n,) predicted log-relative-hazards; time: (n,) observed times;
    event: (n,) 1 for an observed event, 0 for right-censoring. The log-sum
    over each risk set {j : T_j >= T_i} is computed with max-subtraction.
    """
    risk = risk.reshape(-1)
    time = time.reshape(-1)
    event = event.reshape(-1)
    if not (risk.shape == time.shape == event.shape):
        raise ShapeError("risk, time and event must have equal lengths")
    event_mask = event.to(torch.bool)
    n_events = int(event_mask.sum())
    if n_events == 0:
        raise NoEventError("no-event batch: Cox loss undefined")
    # in_set[i, j] = subject j is at risk at subject i's event time
    in_set = time.unsqueeze(0) >= time.unsqueeze(1)
    neg_inf = torch.tensor(float("-inf"), dtype=risk.dtype, device=risk.device)
    masked = torch.where(in_set, risk.unsqueeze(0).expand(len(risk), -1), neg_inf)
    log_den = torch.logsumexp(masked, dim=1)
    partial = risk[event_mask] - log_den[event_mask]
    return -partial.sum() / n_events


def l2_penalty(weights) -> torch.Tensor:
    """Accumulated sum of squared weights over the given tensors."""
    total = None
    for w in weights:
        term = (w * w).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("l2_penalty needs at least one weight tensor")
    return total


def combined_loss(seg_loss, sur_loss, l2_acc, lam: float = DEFAULT_L2_LAMBDA):
    """Total objective: seg_loss + sur_loss + lam * l2_acc."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return seg_loss + sur_loss + lam * l2_acc
