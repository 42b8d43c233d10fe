"""Training losses: Laplace-KL regression in the ground-truth box frame,
wrapped-heading Huber, winner-takes-all reduction (joint or marginal), and
the future-classification cross-entropy.

Only cells that are hidden under the task mask, non-padded in the ground
truth, and belong to predicted agents carry loss; everything else
contributes exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import masking, tensor as T
from .model import PredictionSet
from .scene import Scene

LAPLACE_TARGET_SCALE = 1.0
HEADING_HUBER_DELTA = 1.0
REGRESSION_WEIGHT = 1.0
CLASSIFICATION_WEIGHT = 0.1


@dataclass
class LossBreakdown:
    regression: float
    heading: float
    classification: float
    total: T.Tensor  # scalar, differentiable
    best_future: int | np.ndarray  # scalar index (joint) or [A] indices (marginal)


def laplace_kl(pred_mu, pred_b, gt_mu, target_scale: float = LAPLACE_TARGET_SCALE):
    """KL(Laplace(gt_mu, target_scale) || Laplace(pred_mu, pred_b)).

    Closed form: ln(b2/b1) + (b1 * exp(-|dmu|/b1) + |dmu|) / b2 - 1 with
    b1 the target scale and b2 the predicted scale.
    """
    if target_scale <= 0.0:
        raise ValueError(f"target scale must be positive, got {target_scale}")
    if isinstance(pred_b, T.Tensor):
        if (pred_b.data <= 0.0).any():
            raise ValueError("predicted Laplace scale must be positive")
    elif pred_b <= 0.0:
        raise ValueError(f"predicted Laplace scale must be positive, got {pred_b}")
    b1 = target_scale
    dmu = T.absolute(T.sub(gt_mu, pred_mu))
    return T.log(pred_b) - np.log(b1) + (b1 * T.exp(dmu * (-1.0 / b1)) + dmu) / pred_b - 1.0


def rotate_to_box_frame(residual_xy: T.Tensor, gt_heading: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """Express xy residuals in the ground-truth box frame.

    Returns (longitudinal, lateral) components so the paired uncertainty
    channels mean along-track and across-track error.
    """
    c = T.Tensor(np.cos(gt_heading))
    s = T.Tensor(np.sin(gt_heading))
    dx = residual_xy[..., 0]
    dy = residual_xy[..., 1]
    lon = dx * c + dy * s
    lat = dy * c - dx * s
    return lon, lat


def heading_loss(pred_heading, gt_heading, delta: float = HEADING_HUBER_DELTA) -> T.Tensor:
    """Huber of the wrapped angular error, elementwise."""
    return T.huber(T.wrap_angle(T.sub(pred_heading, gt_heading)), delta)


def loss_eligibility(scene: Scene, mask: masking.MaskSpec) -> np.ndarray:
    """[A, T] bool: hidden under the mask, observed in ground truth, and
    belonging to a predicted agent."""
    pad = masking.effective_padding(scene, mask)
    predicted = np.array([a.is_predicted for a in scene.agents], dtype=bool)
    return mask.hidden & ~pad & predicted[:, None]


def per_future_loss(
    pred: PredictionSet, scene: Scene, mask: masking.MaskSpec
) -> tuple[T.Tensor, T.Tensor, np.ndarray]:
    """Sum the per-cell regression and heading penalties over time/channels.

    Returns ([F, A] regression, [F, A] heading, [A] eligible-agent flags);
    ineligible cells contribute exactly zero.
    """
    eligible = loss_eligibility(scene, mask)
    elig_f = T.Tensor(eligible.astype(np.float64))
    gt_pos = np.stack([a.positions for a in scene.agents])  # [A, T, 3]
    gt_heading = np.stack([a.heading for a in scene.agents])  # [A, T]
    # garbage at ineligible cells is masked out after the pointwise math
    safe_heading = np.where(eligible, gt_heading, 0.0)

    traj = pred.trajectories  # [F, A, T, 7]
    res = T.sub(T.Tensor(gt_pos), traj[:, :, :, 0:3])  # [F, A, T, 3]
    lon, lat = rotate_to_box_frame(res, safe_heading)
    dz = res[..., 2]
    scales = traj[:, :, :, 3:6]
    zero = T.Tensor(np.zeros(1))
    kl = (
        laplace_kl(zero, scales[..., 0], lon)
        + laplace_kl(zero, scales[..., 1], lat)
        + laplace_kl(zero, scales[..., 2], dz)
    )
    head = heading_loss(traj[:, :, :, 6], T.Tensor(safe_heading))
    reg = T.tsum(kl * elig_f, axis=2)  # [F, A]
    head = T.tsum(head * elig_f, axis=2)  # [F, A]
    return reg, head, eligible.any(axis=1)


def reduce_marginal(per_future: T.Tensor) -> tuple[T.Tensor, np.ndarray]:
    """Per-agent minimum over futures, summed over agents.

    Gradients flow only through each agent's argmin future; ties break
    toward the lowest future index.
    """
    best = np.argmin(per_future.data, axis=0)  # [A]
    picked = T.select_per_column(per_future, best)
    return T.tsum(picked), best


def reduce_joint(per_future: T.Tensor) -> tuple[T.Tensor, int]:
    """Sum over agents per future, then minimum over futures.

    Gradients flow only through the argmin future; ties break toward the
    lowest index.
    """
    sums = T.tsum(per_future, axis=1)  # [F]
    best = int(np.argmin(sums.data))
    return sums[best], best


def classification_loss(
    logits: T.Tensor,
    best,
    smoothing: float = 0.0,
    agent_mask: np.ndarray | None = None,
) -> T.Tensor:
    """Cross-entropy against the winner-takes-all target(s).

    Joint mode: logits [F] with a scalar best index. Marginal mode: logits
    [F, A] with best [A]; agents flagged False in agent_mask are excluded.
    With smoothing eps the target is (1 - eps) * onehot + eps / F.
    """
    f = logits.shape[0]
    logp = T.log_softmax(T.transpose(logits, (1, 0))) if logits.ndim == 2 else T.log_softmax(logits)
    if logits.ndim == 1:
        target = np.full(f, smoothing / f)
        target[int(best)] += 1.0 - smoothing
        return -T.tsum(logp * T.Tensor(target))
    a = logits.shape[1]
    best = np.asarray(best, dtype=np.int64)
    target = np.full((a, f), smoothing / f)
    target[np.arange(a), best] += 1.0 - smoothing
    if agent_mask is not None:
        target = target * agent_mask[:, None]
    return -T.tsum(logp * T.Tensor(target))


def scene_loss(
    pred: PredictionSet,
    scene: Scene,
    mask: masking.MaskSpec,
    mode: str,
    smoothing: float = 0.0,
    classification_weight: float = CLASSIFICATION_WEIGHT,
    regression_weight: float = REGRESSION_WEIGHT,
) -> LossBreakdown:
    """Combine regression, heading, and classification for one scene."""
    reg, head, agent_ok = per_future_loss(pred, scene, mask)
    combined = reg + head
    if mode == "marginal":
        # drop agents with no eligible cells from the sum and the targets
        keep = T.Tensor(agent_ok.astype(np.float64))
        total_rh, best = reduce_marginal(combined * keep)
        cls = classification_loss(pred.trajectory_logits, best, smoothing, agent_mask=agent_ok)
        reg_val = float((reg.data[best, np.arange(reg.shape[1])] * agent_ok).sum())
        head_val = float((head.data[best, np.arange(head.shape[1])] * agent_ok).sum())
    elif mode == "joint":
        total_rh, best = reduce_joint(combined)
        cls = classification_loss(pred.future_logits, best, smoothing)
        reg_val = float(reg.data[best].sum())
        head_val = float(head.data[best].sum())
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    total = regression_weight * total_rh + classification_weight * cls
    return LossBreakdown(
        regression=reg_val,
        heading=head_val,
        classification=float(cls.data),
        total=total,
        best_future=best,
    )
