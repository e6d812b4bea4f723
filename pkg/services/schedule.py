"""Noise schedule with zero terminal SNR and the v-parameterization algebra.

Convention: index t runs over 0..T, alpha_bar[0] is (near) full signal and
alpha_bar[T] == 0 exactly, so a terminal sample z_T is pure noise.

    z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps
    v   = sqrt(ab_t) * eps - sqrt(1 - ab_t) * z0
    z0  = sqrt(ab_t) * z_t - sqrt(1 - ab_t) * v

At t = T the v target is -z0, which is what one-step prediction relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import torch

from framework.errors import InvalidArgumentError
from models.config import BaseSchedule, Task

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: torch.Tensor  # float64, length T + 1
    base_kind: BaseSchedule = BaseSchedule.LINEAR_BETA

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if self.T < 1 or ab.shape != (self.T + 1,):
            raise InvalidArgumentError(f"alpha_bar must have T+1={self.T + 1} entries, got {tuple(ab.shape)}")
        if not bool(torch.all(ab[1:] <= ab[:-1])):
            raise InvalidArgumentError("alpha_bar must be nonincreasing")
        if float(ab[0]) < 1.0 - 1e-6:
            raise InvalidArgumentError(f"alpha_bar[0]={float(ab[0])} is not near full signal")
        if float(ab[self.T]) != 0.0:
            raise InvalidArgumentError("alpha_bar[T] must be exactly 0 (zero terminal SNR)")

    def coefficients(self, t: Timestep, like: torch.Tensor) -> Tuple[Union[float, torch.Tensor], Union[float, torch.Tensor]]:
        """(sqrt(ab_t), sqrt(1 - ab_t)) as python floats for an int t, or as a
        tensor broadcastable against ``like`` (leading dim) for a tensor t."""
        if isinstance(t, int):
            self._check_range(t, t)
            ab = float(self.alpha_bar[t])
            return math.sqrt(ab), math.sqrt(1.0 - ab)
        t = t.to(torch.long)
        if t.ndim != 1 or t.shape[0] != like.shape[0]:
            raise InvalidArgumentError(f"timestep tensor {tuple(t.shape)} does not match leading dim of {tuple(like.shape)}")
        self._check_range(int(t.min()), int(t.max()))
        ab = self.alpha_bar.to(like.device)[t.to(like.device)]
        shape = (-1,) + (1,) * (like.ndim - 1)
        return ab.sqrt().to(like.dtype).view(shape), (1.0 - ab).sqrt().to(like.dtype).view(shape)

    def _check_range(self, lo: int, hi: int) -> None:
        if lo < 0 or hi > self.T:
            raise InvalidArgumentError(f"timestep out of range [0, {self.T}]: [{lo}, {hi}]")


def _rescale_zero_terminal_snr(alpha_bar: torch.Tensor) -> torch.Tensor:
    """Affine rescale of sqrt(alpha_bar): terminal value -> 0, initial value kept."""
    s = alpha_bar.sqrt()
    s0, sT = s[0].clone(), s[-1].clone()
    s = (s - sT) * (s0 / (s0 - sT))
    s[0], s[-1] = s0, 0.0
    return s * s


def make_schedule(
    T: int,
    base_kind: Union[BaseSchedule, str] = BaseSchedule.LINEAR_BETA,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    base_kind = BaseSchedule(base_kind)
    if base_kind is BaseSchedule.LINEAR_BETA:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    else:
        # squared-cosine schedule; offset keeps early betas from vanishing
        offset = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((steps + offset) / (1.0 + offset) * math.pi / 2) ** 2
        alpha_bar = (f / f[0]).clamp(min=0.0, max=1.0)
    return NoiseSchedule(T=T, alpha_bar=_rescale_zero_terminal_snr(alpha_bar), base_kind=base_kind)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_pair(z0, eps)
    a, b = s.coefficients(t, z0)
    return a * z0 + b * eps


def v_target(z0: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_pair(z0, eps)
    a, b = s.coefficients(t, z0)
    return a * eps - b * z0


def z0_from_v(z_t: torch.Tensor, v: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_pair(z_t, v)
    a, b = s.coefficients(t, z_t)
    return a * z_t - b * v


def eps_from_v(z_t: torch.Tensor, v: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_pair(z_t, v)
    a, b = s.coefficients(t, z_t)
    return b * z_t + a * v


DenoiserFn = Callable[..., torch.Tensor]


def one_step_predict(
    eps: torch.Tensor,
    z_c: torch.Tensor,
    denoiser: DenoiserFn,
    task: Union[Task, Sequence[Task]],
) -> torch.Tensor:
    """z0_hat = -mu(concat(eps, z_c), T, task).

    ``denoiser`` is anything with ``predict_v`` and a ``num_timesteps``
    attribute; ``task`` is a Task, or a sequence of Tasks stacked on the
    component axis of ``eps`` (z_c may then be shared across components).
    """
    if isinstance(task, (Task, str)):
        _check_pair(eps, z_c)
    T = denoiser.num_timesteps
    return -denoiser.predict_v(eps, z_c, T, task)


__all__ = [
    "NoiseSchedule",
    "add_noise",
    "eps_from_v",
    "make_schedule",
    "one_step_predict",
    "v_target",
    "z0_from_v",
]
