"""Gradient reversal: identity forward, gradient scaled by a negative factor backward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class GrlFactor:
    gamma: float

    def __post_init__(self):
        if not self.gamma < 0:
            raise ValueError(f"gradient reversal factor must be strictly negative, got {self.gamma}")


def _value(gamma) -> float:
    return float(gamma.gamma if isinstance(gamma, GrlFactor) else gamma)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gamma):
        ctx.gamma = gamma
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grl_backward(grad_output, ctx.gamma), None


def grl(x: torch.Tensor, gamma) -> torch.Tensor:
    """Pass ``x`` through unchanged; multiply its incoming gradient by ``gamma``.

    ``gamma = 0`` cuts the adversarial gradient entirely; positive values are
    rejected.
    """
    g = _value(gamma)
    if g > 0:
        raise ValueError(f"gradient reversal factor must be <= 0, got {g}")
    return _GradientReversal.apply(x, g)


def grl_forward(x: torch.Tensor, gamma) -> torch.Tensor:
    return grl(x, gamma)


def grl_backward(upstream: torch.Tensor, gamma) -> torch.Tensor:
    return upstream * _value(gamma)


class GradientReversal(torch.nn.Module):
    def __init__(self, gamma):
        super().__init__()
        self.gamma = _value(gamma)

    def forward(self, x):
        return grl(x, self.gamma)

    def extra_repr(self):
        return f"gamma={self.gamma}"


def scheduled_gamma(gamma: float, progress: float, kind: str = "constant") -> float:
    """Factor at training progress in [0, 1]; ``ramp`` is the 2/(1+e^-10p) - 1 warm-up."""
    if kind == "constant":
        return gamma
    if kind == "ramp":
        return gamma * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    raise ValueError(f"unknown gradient reversal schedule {kind!r}")
