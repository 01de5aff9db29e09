"""Iterative logits-targeting attack.

The attack descends the Euclidean loss ``0.5 * ||t - logits(x)||^2`` with
L-infinity normalised steps on a continuous copy of the image, and tests the
classifier on the rounded (deliverable) copy after every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Network, forward, input_gradient
from .openmax import UNKNOWN
from .targets import TargetVector

REACHED = "reached"
ORIGINAL = "original"
MAX_STEPS = "max_steps"
STALL = "stall"


class GradientStall(RuntimeError):
    """The loss gradient vanished before the target was reached."""


@dataclass(frozen=True)
class AttackConfig:
    max_steps: int = 500
    step_linf: float = 1.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not self.step_linf > 0:
            raise ValueError("step_linf must be positive")


@dataclass
class AttackState:
    x_continuous: np.ndarray
    x_quantized: np.ndarray
    step_count: int = 0

    @classmethod
    def start(cls, image):
        x = np.asarray(image, dtype=np.float64)
        return cls(x.copy(), quantize(x), 0)


@dataclass
class AttackResult:
    perturbed: np.ndarray
    success: bool
    steps_used: int
    achieved_class: int
    certainty: float
    target: TargetVector
    reason: str
    pass_score: float | None = None
    extra: dict = field(default_factory=dict)


def quantize(x) -> np.ndarray:
    """Round to the nearest integer pixel, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError("quantize expects values in [0, 255]; clamp first")
    return np.floor(x + 0.5).astype(np.uint8)


def lots_gradient(net: Network, image, target: TargetVector | np.ndarray) -> np.ndarray:
    """Pixel-space gradient of ``0.5 * ||t - logits(image)||^2``."""
    t = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if t.shape != (net.num_classes,):
        raise ValueError(f"target must have length {net.num_classes}, got shape {t.shape}")
    _, logits = forward(net, image)
    return input_gradient(net, image, logits - t)


def lots_loss(net: Network, image, target) -> float:
    t = np.asarray(getattr(target, "values", target), dtype=np.float64)
    return 0.5 * float(np.sum((t - net.logits(image)) ** 2))


def lots_step(state: AttackState, gradient, step_linf: float = 1.0) -> AttackState:
    """Move against ``gradient`` by exactly ``step_linf`` in L-infinity, then clamp and round."""
    g = np.asarray(gradient, dtype=np.float64)
    scale = np.abs(g).max() if g.size else 0.0
    if not scale > 0:
        raise GradientStall("zero gradient: the loss is at a stationary point")
    x = np.clip(state.x_continuous - g * (step_linf / scale), 0.0, 255.0)
    return AttackState(x, quantize(x), state.step_count + 1)


def iterative_lots(net: Network, classifier, x_o, target: TargetVector,
                   config: AttackConfig | None = None) -> AttackResult:
    """Step until ``classifier`` labels the rounded image as the target class.

    ``classifier`` maps an image to ``(label, certainty)``; it is tested before
    the first step, so an image already in the target class succeeds with
    zero steps.
    """
    config = config or AttackConfig()
    x_o = np.asarray(x_o)
    if x_o.size and (not np.all(x_o == np.floor(x_o)) or x_o.min() < 0 or x_o.max() > 255):
        raise ValueError("x_o must be a discrete image with integer pixels in [0, 255]")
    labels = getattr(classifier, "labels", None)
    if labels is not None and target.target_class not in labels:
        raise ValueError(f"target class {target.target_class} is not a label of the classifier")

    state = AttackState.start(x_o)
    while True:
        label, certainty = classifier(state.x_quantized)
        if label == target.target_class:
            reason = ORIGINAL if state.step_count == 0 else REACHED
            return AttackResult(state.x_quantized, True, state.step_count, label, certainty, target, reason)
        if state.step_count >= config.max_steps:
            return AttackResult(state.x_quantized, False, state.step_count, label, certainty, target, MAX_STEPS)
        grad = lots_gradient(net, state.x_continuous, target)
        try:
            state = lots_step(state, grad, config.step_linf)
        except GradientStall:
            return AttackResult(state.x_quantized, False, state.step_count, label, certainty, target, STALL)


__all__ = ["AttackConfig", "AttackState", "AttackResult", "GradientStall", "quantize", "lots_gradient",
           "lots_loss", "lots_step", "iterative_lots", "UNKNOWN", "REACHED", "ORIGINAL", "MAX_STEPS", "STALL"]
