"""Shared fixtures."""

from typing import Callable, Sequence

import pytest
import torch


def directional_derivatives(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    seed: int = 0,
    eps: float = 1e-7,
) -> tuple[float, float]:
    """Analytic and central-difference derivative along a random unit direction."""
    generator = torch.Generator().manual_seed(seed)
    direction = [torch.randn(p.shape, generator=generator, dtype=p.dtype) for p in params]
    norm = torch.sqrt(sum((d**2).sum() for d in direction))
    direction = [d / norm for d in direction]

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = float(sum((p.grad * d).sum() for p, d in zip(params, direction)))

    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(eps * d)
        plus = float(loss_fn())
        for p, d in zip(params, direction):
            p.sub_(2 * eps * d)
        minus = float(loss_fn())
        for p, d in zip(params, direction):
            p.add_(eps * d)
    return analytic, (plus - minus) / (2 * eps)


@pytest.fixture
def grad_check():
    """Assert analytic and numeric directional derivatives agree."""

    def check(loss_fn, params, seeds=(0, 1, 2), rel_tol=1e-4):
        for seed in seeds:
            analytic, numeric = directional_derivatives(loss_fn, list(params), seed)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / scale < rel_tol, (seed, analytic, numeric)

    return check
