"""Conditional DDPM over latent vectors with feasibility-guided denoising.

Each reverse step forms the epsilon-parameterized posterior mean, optionally
shifts it down the classifier's infeasibility gradient and the regressor's
self-consistency loss gradient (both evaluated at the current noisy latent,
in that order), then adds posterior-variance noise. The final step is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import (
    LinearRegressor,
    Mlp,
    denoiser_features,
    mlp_forward,
    mlp_grad_input,
    regressor_loss_grad,
    regressor_predict,
)


class DiffusionError(Exception):
    pass


class BadRange(DiffusionError):
    pass


class StepOutOfRange(DiffusionError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise constants; index t-1 holds the step-t values."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class GuidanceConfig:
    use_classifier: bool = False
    use_regressor: bool = False
    classifier_scale: float = 10.0
    regressor_scale: float = 10.0
    stop_gradient_y: bool = False

    def __post_init__(self):
        if self.classifier_scale < 0.0 or self.regressor_scale < 0.0:
            raise ValueError("guidance scales must be >= 0")


UNGUIDED = GuidanceConfig()


def build_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule with precomputed alphas and posterior variances."""
    if T < 2:
        raise BadRange(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise BadRange(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variance = betas * (1.0 - prev_bars) / (1.0 - alpha_bars)
    return DiffusionSchedule(betas, alphas, alpha_bars, posterior_variance)


def _check_step(t: int, schedule: DiffusionSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise StepOutOfRange(f"step {t} outside [1, {schedule.T}]")


def forward_diffuse(z0, t: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    _check_step(t, schedule)
    ab = schedule.alpha_bars[t - 1]
    return np.sqrt(ab) * np.asarray(z0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(
        eps, dtype=float
    )


def posterior_mean(z_t, t: int, eps_hat, schedule: DiffusionSchedule) -> np.ndarray:
    """Epsilon-parameterized posterior mean of the reverse transition."""
    _check_step(t, schedule)
    beta = schedule.betas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    z_t = np.asarray(z_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    return (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(schedule.alphas[t - 1])


def classifier_guide(mu, z_t, classifier: Mlp, scale: float) -> np.ndarray:
    """Shift the mean against the infeasibility-probability gradient at z_t."""
    if scale == 0.0:
        return mu
    grad_infeasible = -mlp_grad_input(classifier, z_t)
    return mu - scale * grad_infeasible


def regressor_guide(
    mu, z_t, regressor: LinearRegressor, scale: float, stop_gradient_y: bool = False
) -> np.ndarray:
    """Shift the mean against the regressor self-consistency loss gradient at z_t."""
    if scale == 0.0:
        return mu
    z_t = np.asarray(z_t, dtype=float)
    if stop_gradient_y:
        grad = 2.0 * (z_t - regressor_predict(regressor, z_t))
    else:
        _, grad = regressor_loss_grad(regressor, z_t)
    return mu - scale * grad


def sample_step(
    z_t,
    t: int,
    eps_hat,
    noise,
    schedule: DiffusionSchedule,
    guidance: GuidanceConfig = UNGUIDED,
    classifier: Mlp | None = None,
    regressor: LinearRegressor | None = None,
) -> np.ndarray:
    """One reverse step: posterior mean, guidance shifts, then noise (none at t=1)."""
    mu = posterior_mean(z_t, t, eps_hat, schedule)
    if guidance.use_classifier:
        if classifier is None:
            raise ValueError("classifier guidance enabled but no classifier given")
        mu = classifier_guide(mu, z_t, classifier, guidance.classifier_scale)
    if guidance.use_regressor:
        if regressor is None:
            raise ValueError("regressor guidance enabled but no regressor given")
        mu = regressor_guide(mu, z_t, regressor, guidance.regressor_scale, guidance.stop_gradient_y)
    if t == 1:
        return mu
    return mu + np.sqrt(schedule.posterior_variance[t - 1]) * np.asarray(noise, dtype=float)


def initial_latent(seed, dim: int) -> np.ndarray:
    """The standard-normal starting latent that sample() draws for this seed."""
    return np.random.default_rng(seed).standard_normal(dim)


def sample(
    condition,
    denoiser: Mlp,
    guidance: GuidanceConfig,
    schedule: DiffusionSchedule,
    seed,
    classifier: Mlp | None = None,
    regressor: LinearRegressor | None = None,
) -> np.ndarray:
    """Draw one latent by iterating the reverse chain from t=T down to 1.

    Deterministic for a given seed; the noise stream never depends on the
    guidance configuration, so paired-seed comparisons across configs share
    both the starting latent and every per-step noise draw.
    """
    condition = np.asarray(condition, dtype=float)
    latent_dim = denoiser.weights[-1].shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(latent_dim)
    for t in range(schedule.T, 0, -1):
        eps_hat, _ = mlp_forward(denoiser, denoiser_features(z, t, condition))
        noise = rng.standard_normal(latent_dim) if t > 1 else None
        z = sample_step(z, t, eps_hat, noise, schedule, guidance, classifier, regressor)
    return z
