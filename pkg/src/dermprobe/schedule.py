"""Forward-diffusion noise schedule.

The schedule is a table of per-step variances ``betas`` together with the
cumulative signal fractions ``alphas_cumprod`` (the running product of
``1 - beta``). Noising an image at step ``t`` is the closed form

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps

with ``eps`` standard normal. Steps are 1-based in the table; ``t = 0`` is
accepted by the public API and means "no noise" (``abar_0 = 1``), so
timestep sweeps can include a clean endpoint.

This module never draws randomness: callers supply ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance table for the forward noising process."""

    betas: np.ndarray
    alphas_cumprod: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if betas.ndim != 1 or abar.ndim != 1 or len(betas) != len(abar):
            raise ParameterError("betas and alphas_cumprod must be 1-D arrays of equal length")
        if len(betas) < 1:
            raise ParameterError("schedule must have at least one step")
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ParameterError("every beta must lie in (0, 1)")
        if not (np.all(abar > 0.0) and np.all(abar < 1.0)):
            raise ParameterError("every alphas_cumprod entry must lie in (0, 1)")
        if np.any(np.diff(abar) >= 0.0):
            raise ParameterError("alphas_cumprod must be strictly decreasing")
        betas.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cumprod", abar)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step ``t``; ``t = 0`` is the clean image."""
        if not isinstance(t, (int, np.integer)):
            raise ParameterError(f"timestep must be an integer, got {t!r}")
        if not 0 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alphas_cumprod[t - 1])


def build_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a schedule whose betas interpolate linearly from start to end inclusive.

    The defaults match the frozen-backbone lineage this package targets; a
    loaded checkpoint's embedded schedule always takes precedence over them.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got start={beta_start!r} end={beta_end!r}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    abar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alphas_cumprod=abar)


def forward_noise(x0: np.ndarray, t: int, epsilon: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noise ``x0`` to step ``t``: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``.

    Deterministic given ``epsilon``; ``t = 0`` returns ``x0`` unchanged.
    """
    x0 = np.asarray(x0)
    epsilon = np.asarray(epsilon)
    if x0.shape != epsilon.shape:
        raise ParameterError(f"x0 shape {x0.shape} != epsilon shape {epsilon.shape}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * epsilon
