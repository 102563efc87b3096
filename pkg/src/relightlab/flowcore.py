"""Linear-interpolation flow primitives: time and step-size sampling, Euler
integration, and the two-half-steps-vs-one-double-step consistency target.

A velocity callable has signature model(x, t, d, cond) -> v, where t and d are
per-sample 1-D tensors. The consistency target is always evaluated without
gradients and detached: the doubled-step prediction is regressed onto a frozen
average of two small-step velocities (self-teacher, no separate student).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

import torch

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, Any], torch.Tensor]


class ShapeMismatchError(ValueError):
    pass


class StepError(ValueError):
    """An Euler step or consistency pair would leave the [0, 1] time interval."""


@dataclass(eq=False)
class FlowBatch:
    """A materialized interpolation batch: x_t = t*x1 + (1-t)*x0 with step sizes d."""

    x0: torch.Tensor
    x1: torch.Tensor
    x_t: torch.Tensor
    t: torch.Tensor
    d: torch.Tensor
    cond: Any = None


def _expand(t: torch.Tensor | float, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    if t.shape != (x.shape[0],):
        raise ShapeMismatchError(f"per-sample vector of shape {tuple(t.shape)} for batch {x.shape[0]}")
    return t.reshape(-1, *([1] * (x.ndim - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """x_t = t*x1 + (1-t)*x0, exact at both endpoints."""

    if x0.shape != x1.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    tb = _expand(t, x0)
    return tb * x1 + (1.0 - tb) * x0


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """The constant-in-time target velocity x1 - x0."""

    if x0.shape != x1.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    return x1 - x0


def sample_time(
    rng: torch.Generator,
    n: int,
    mu: float = 0.0,
    sigma: float = 1.0,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Logit-normal times: sigmoid(z), z ~ N(mu, sigma^2), clamped inside (0, 1)."""

    z = mu + sigma * torch.randn(n, generator=rng, dtype=dtype, device=device)
    t = torch.sigmoid(z)
    eps = 1e-7 if dtype == torch.float32 else 1e-12
    return t.clamp(eps, 1.0 - eps)


def stepsize_grid(k_max: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if k_max < 1:
        raise StepError(f"k_max must be >= 1, got {k_max}")
    return torch.tensor([2.0 ** -k for k in range(k_max + 1)], dtype=dtype)


def sample_stepsize(
    rng: torch.Generator,
    n: int,
    k_max: int,
    min_k: int = 0,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Uniform draw from the dyadic grid {2^-k : min_k <= k <= k_max}.

    Consistency pairs use min_k=1 so the doubled step 2d stays on the grid.
    """

    if k_max < 1:
        raise StepError(f"k_max must be >= 1, got {k_max}")
    if not 0 <= min_k <= k_max:
        raise StepError(f"min_k must lie in [0, {k_max}], got {min_k}")
    ks = torch.randint(min_k, k_max + 1, (n,), generator=rng, device=device)
    return torch.pow(torch.tensor(2.0, dtype=dtype, device=device), -ks.to(dtype))


def sample_pair_time(
    rng: torch.Generator,
    d: torch.Tensor,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Start times for consistency pairs: multiples of 2d, uniform over [0, 1-2d].

    The doubled step must fit inside [0, 1]; for d = 1/2 the only valid start
    is t = 0, which is why pair times live on the dyadic grid rather than on
    the logit-normal draw used for the plain flow loss.
    """

    two_d = 2.0 * d
    slots = torch.round(1.0 / two_d).to(torch.long)  # number of valid start positions
    if (slots < 1).any():
        raise StepError("step size too large: t + 2d <= 1 admits no start time")
    picks = torch.stack(
        [torch.randint(int(s), (1,), generator=rng, device=device)[0] for s in slots]
    )
    return picks.to(d.dtype) * two_d


def euler_step(
    model: VelocityFn,
    x_t: torch.Tensor,
    t: torch.Tensor | float,
    d: torch.Tensor | float,
    cond: Any = None,
) -> torch.Tensor:
    """x_{t+d} = x_t + d * v(x_t, t, d)."""

    t_vec = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).expand(x_t.shape[0]) \
        if not torch.is_tensor(t) or t.ndim == 0 else t
    d_vec = torch.as_tensor(d, dtype=x_t.dtype, device=x_t.device).expand(x_t.shape[0]) \
        if not torch.is_tensor(d) or d.ndim == 0 else d
    if (d_vec <= 0).any():
        raise StepError("step size must be positive")
    if (t_vec + d_vec > 1.0 + 1e-9).any():
        raise StepError("t + d exceeds 1")
    v = model(x_t, t_vec, d_vec, cond)
    if v.shape != x_t.shape:
        raise ShapeMismatchError(f"velocity {tuple(v.shape)} vs state {tuple(x_t.shape)}")
    return x_t + _expand(d_vec, x_t) * v


def shortcut_target(
    model: VelocityFn,
    x_t: torch.Tensor,
    t: torch.Tensor | float,
    d: torch.Tensor | float,
    cond: Any = None,
) -> torch.Tensor:
    """Frozen consistency target 0.5 * [v(x_t, t, d) + v(x_{t+d}, t+d, d)].

    Computed without gradients and detached; the caller regresses the doubled
    step prediction v(x_t, t, 2d) onto it.
    """

    t_vec = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).expand(x_t.shape[0]) \
        if not torch.is_tensor(t) or t.ndim == 0 else t
    d_vec = torch.as_tensor(d, dtype=x_t.dtype, device=x_t.device).expand(x_t.shape[0]) \
        if not torch.is_tensor(d) or d.ndim == 0 else d
    if (t_vec + 2.0 * d_vec > 1.0 + 1e-9).any():
        raise StepError("t + 2d exceeds 1")
    with torch.no_grad():
        v_a = model(x_t, t_vec, d_vec, cond)
        x_next = x_t + _expand(d_vec, x_t) * v_a
        v_b = model(x_next, t_vec + d_vec, d_vec, cond)
        target = 0.5 * (v_a + v_b)
    return target.detach()


def sample(
    model: VelocityFn,
    cond: Any = None,
    steps: int = 16,
    x0: Optional[torch.Tensor] = None,
    shape: Optional[tuple[int, ...]] = None,
    rng: Optional[torch.Generator] = None,
    k_max: int = 7,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Integrate the velocity field with `steps` Euler steps of size 1/steps.

    steps must be a power of two <= 2**k_max so every step size lies on the
    trained dyadic grid. Provide x0 for deterministic sampling, otherwise a
    standard normal draw of `shape` is used.
    """

    if steps < 1 or steps & (steps - 1) or steps > 2 ** k_max:
        raise StepError(f"steps must be a power of two in [1, {2 ** k_max}], got {steps}")
    if x0 is None:
        if shape is None:
            raise ShapeMismatchError("either x0 or shape is required")
        x0 = torch.randn(shape, generator=rng, dtype=dtype, device=device)
    x = x0
    d = 1.0 / steps
    for i in range(steps):
        x = euler_step(model, x, i * d, d, cond)
    return x
