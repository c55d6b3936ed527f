"""Softmax, cross-entropy, temperature distillation and adversarial losses.

Class scores live on ``axis`` (default last). Per-pixel losses are averaged
over every non-class position, so a LossValue's scalar is the mean of its
per-sample means. The leading axis indexes samples when there is more than
one non-class axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-12
DEFAULT_TEMPERATURE = 2.0
SOURCE, TARGET = 0, 1


@dataclass
class LossValue:
    scalar: Tensor
    per_sample: list[float]

    @property
    def value(self) -> float:
        return self.scalar.item()


def check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    return T


def softmax(logits: Tensor, T: float = 1.0, axis: int = -1) -> Tensor:
    T = check_temperature(T)
    z = logits if T == 1.0 else tc.mul(logits, 1.0 / T)
    return tc.softmax(z, axis=axis)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.clip(probs, PROB_FLOOR, None)
    return -(probs * np.log(p)).sum(axis=axis)


def _per_sample(per_position: np.ndarray) -> list[float]:
    if per_position.ndim == 0:
        return [float(per_position)]
    return per_position.reshape(per_position.shape[0], -1).mean(axis=1).tolist()


def cross_entropy(target_probs, pred_probs: Tensor, axis: int = -1) -> LossValue:
    """Mean over positions of -sum_k target_k log(pred_k), pred clamped at 1e-12."""
    target = tc.as_tensor(target_probs)
    if target.shape != pred_probs.shape:
        raise ShapeError("cross_entropy", target.shape, pred_probs.shape)
    logp = tc.log(tc.clip_min(pred_probs, PROB_FLOOR))
    per_position = tc.neg(tc.reduce_sum(tc.mul(target, logp), axis=axis))
    return LossValue(tc.reduce_mean(per_position), _per_sample(per_position.data))


def distillation_loss(
    teacher_logits,
    student_logits: Tensor,
    T: float = DEFAULT_TEMPERATURE,
    axis: int = -1,
    soften_student: bool = False,
) -> LossValue:
    """Cross-entropy of the student's softmax against the teacher's softmax at T.

    By default only the teacher side is divided by T. ``soften_student`` gives
    the classical variant: both sides at T and the loss scaled by T**2 so
    gradient magnitudes stay comparable across temperatures.
    """
    T = check_temperature(T)
    teacher = tc.as_tensor(teacher_logits).detach()
    if teacher.shape != student_logits.shape:
        raise ShapeError("distillation_loss", teacher.shape, student_logits.shape)
    target = softmax(teacher, T, axis).detach()
    if not soften_student:
        return cross_entropy(target, softmax(student_logits, 1.0, axis), axis)
    loss = cross_entropy(target, softmax(student_logits, T, axis), axis)
    scale = T * T
    return LossValue(tc.mul(loss.scalar, scale), [v * scale for v in loss.per_sample])


def domain_onehot(true_domain) -> np.ndarray:
    labels = np.asarray(true_domain, dtype=int).reshape(-1)
    if labels.size and not np.isin(labels, (SOURCE, TARGET)).all():
        raise ValueError("domain labels must be 0 (source) or 1 (target)")
    return np.eye(2)[labels]


def adversarial_losses(domain_logits: Tensor, true_domain) -> tuple[LossValue, LossValue]:
    """(discriminator loss, confusion loss) for (B, 2) domain logits.

    The discriminator is trained on one-hot domain targets; the segmenter is
    trained toward the uniform target, i.e. to make the domains indistinguishable.
    """
    onehot = domain_onehot(true_domain)
    if domain_logits.shape != onehot.shape:
        raise ShapeError("adversarial_losses", domain_logits.shape, onehot.shape)
    probs = softmax(domain_logits, 1.0, axis=-1)
    disc = cross_entropy(onehot, probs, axis=-1)
    confusion = cross_entropy(np.full(onehot.shape, 0.5), probs, axis=-1)
    return disc, confusion
