"""Linear beta noise schedule and the closed-form forward process."""

import numpy as np

from story.exceptions import NumericError


class NoiseSchedule:
    """Precomputed beta, alpha and cumulative alpha arrays in float64."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if timesteps < 2:
            raise ValueError(f"a schedule needs at least 2 timesteps, got {timesteps}")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise ValueError(f"betas must satisfy 0 < start < end < 1, got {beta_start}, {beta_end}")
        self.timesteps = timesteps
        self.betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sqrt_alpha_bars = np.sqrt(self.alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - self.alpha_bars)

    def __len__(self):
        return self.timesteps

    def check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.timesteps):
            raise NumericError(f"timestep outside [0, {self.timesteps}): {t}", site="schedule")
        return t

    def coefficients(self, t, ndim: int, dtype):
        """(sqrt(abar_t), sqrt(1 - abar_t)) shaped to broadcast over a batch of images."""
        t = self.check(t)
        shape = t.shape + (1,) * (ndim - t.ndim)
        a = self.sqrt_alpha_bars[t].astype(dtype).reshape(shape)
        b = self.sqrt_one_minus_alpha_bars[t].astype(dtype).reshape(shape)
        return a, b


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one step per leading row."""
    x0 = np.asarray(x0)
    a, b = schedule.coefficients(t, x0.ndim, x0.dtype)
    return a * x0 + b * np.asarray(eps, dtype=x0.dtype)
