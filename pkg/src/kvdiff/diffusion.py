"""DDPM forward process, noise-prediction loss, and guided ancestral sampling."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NumericalFailure


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Timesteps are 1-based; alpha_bar[t-1] stores
    the cumulative product at step t and alpha_bar_at(0) == 1 by convention."""

    betas: np.ndarray
    alpha_bar: np.ndarray
    T: int

    @classmethod
    def linear(cls, T=100, beta_start=1e-4, beta_end=0.02, rescale=True):
        if T < 1:
            raise InvalidInput("T must be >= 1")
        # betas are tuned for 1000-step chains; rescale keeps alpha_bar_T
        # comparable when running shorter chains.
        scale = 1000.0 / T if rescale else 1.0
        betas = np.linspace(beta_start, beta_end, T) * scale
        if np.any(betas >= 1.0):
            raise InvalidInput("beta schedule leaves (0,1); reduce beta_end or increase T")
        alpha_bar = np.cumprod(1.0 - betas)
        return cls(betas=betas, alpha_bar=alpha_bar, T=T)

    def alpha_bar_at(self, t):
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise InvalidInput(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def forward_noise(x0, t, eps, sched):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidInput(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar_at(t)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return NoisySample(x_t=x_t, t=t, eps=eps)


def simple_loss(eps, eps_pred, w_t=1.0):
    """Weighted mean squared error between true and predicted noise."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps.shape != eps_pred.shape:
        raise InvalidInput(f"shape mismatch: {eps.shape} vs {eps_pred.shape}")
    if w_t < 0:
        raise InvalidInput("w_t must be non-negative")
    diff = eps - eps_pred
    return float(w_t * np.mean(diff * diff))


def masked_loss(eps, eps_pred, mask, w_t=1.0):
    """MSE restricted to pixels where mask == 1; used for valid-region training."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (eps.shape == eps_pred.shape == mask.shape):
        raise InvalidInput("shape mismatch in masked_loss")
    total = mask.sum()
    if total == 0:
        raise InvalidInput("mask selects no pixels")
    diff = (eps - eps_pred) * mask
    return float(w_t * np.sum(diff * diff) / total)


def sampling_timesteps(T, steps):
    """Descending, deduplicated timestep ladder for a respaced reverse chain."""
    if steps < 1:
        raise InvalidInput("steps must be >= 1")
    if steps > T:
        raise InvalidInput(f"steps ({steps}) cannot exceed chain length T ({T})")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return ts[::-1]


def sample_cfg(model, cond, steps, scale, seed, sched, uncond=None, clip_x0=True):
    """Ancestral DDPM sampling with classifier-free guidance.

    model must expose predict(x_t, t, c) -> eps and image_shape. Guidance is
    eps_u + scale * (eps_c - eps_u); at scale == 1 the unconditional branch is
    skipped. Deterministic for a fixed seed.
    """
    if scale < 0:
        raise InvalidInput("scale must be non-negative")
    if scale != 1.0 and uncond is None:
        raise InvalidInput("uncond features required when scale != 1")
    ts = sampling_timesteps(sched.T, steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(model.image_shape)
    for i, t in enumerate(ts):
        t = int(t)
        eps_c = model.predict(x, t, cond)
        if scale == 1.0:
            eps_hat = eps_c
        else:
            eps_u = model.predict(x, t, uncond)
            eps_hat = eps_u + scale * (eps_c - eps_u)
        if not np.all(np.isfinite(eps_hat)):
            raise NumericalFailure(f"non-finite noise prediction at t={t}")
        ab_t = sched.alpha_bar_at(t)
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        ab_p = sched.alpha_bar_at(t_prev)
        x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        if clip_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        beta_eff = 1.0 - ab_t / ab_p
        coef_x0 = np.sqrt(ab_p) * beta_eff / (1.0 - ab_t)
        coef_xt = np.sqrt(ab_t / ab_p) * (1.0 - ab_p) / (1.0 - ab_t)
        mean = coef_x0 * x0_hat + coef_xt * x
        var = beta_eff * (1.0 - ab_p) / (1.0 - ab_t)
        if t_prev == 0 or var <= 0:
            x = mean
        else:
            x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"non-finite sample state at t={t}")
    return x
