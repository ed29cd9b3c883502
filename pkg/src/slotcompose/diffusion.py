"""Forward diffusion process, schedules, and the two training losses.

Timesteps are discrete integers t in [1, T]. The corruption is

    x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps,   abar_t = prod_{i<=t} (1 - beta_i)

with a linear beta ramp. The prior loss implements the score-distillation
gradient: it returns a scalar whose autodiff gradient w.r.t. anything upstream
of ``x_c`` equals w(t) * (eps_hat - eps) * d(x_c)/d(theta), with the residual
detached so no gradient ever reaches the denoiser.
"""

import dataclasses

import numpy as np
import torch

from .errors import ConfigError, ContractError

WEIGHT_FNS = ("one", "sigma_sq", "one_minus_alpha_bar")


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # (T,) float64
    alpha_bars: np.ndarray  # (T,) float64
    weight_fn: str = "one"

    def __post_init__(self):
        if self.weight_fn not in WEIGHT_FNS:
            raise ConfigError(f"unknown weight_fn {self.weight_fn!r}")
        b = self.betas
        if len(b) != self.T or len(self.alpha_bars) != self.T:
            raise ConfigError("schedule table length != T")
        if not (b[0] > 0 and b[-1] < 1 and np.all(np.diff(b) >= 0)):
            raise ConfigError("betas must be nondecreasing within (0, 1)")
        ab = self.alpha_bars
        if not (np.all(ab > 0) and np.all(ab < 1) and np.all(np.diff(ab) < 0)):
            raise ConfigError("alpha_bars must be strictly decreasing within (0, 1)")

    def check_t(self, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > self.T:
            raise ValueError(f"timestep outside schedule range [1, {self.T}]")
        return t

    def _gather(self, table, t, like):
        t = self.check_t(t)
        vals = torch.as_tensor(table, dtype=like.dtype, device=like.device)[t - 1]
        return vals.reshape(-1, *([1] * (like.ndim - 1)))

    def alpha_bar(self, t, like):
        return self._gather(self.alpha_bars, t, like)

    def beta(self, t, like):
        return self._gather(self.betas, t, like)

    def weight(self, t, like):
        if self.weight_fn == "one":
            t = self.check_t(t)
            return torch.ones(t.numel(), dtype=like.dtype, device=like.device).reshape(
                -1, *([1] * (like.ndim - 1))
            )
        if self.weight_fn == "sigma_sq":
            return self._gather(self.betas, t, like)
        return self._gather(1.0 - self.alpha_bars, t, like)


def make_schedule(T, beta_start=1e-4, beta_end=0.02, weight_fn="one"):
    if T < 2:
        raise ConfigError("schedule needs T >= 2")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars, weight_fn=weight_fn)


@dataclasses.dataclass(frozen=True)
class TimestepRange:
    t_min: float = 0.02
    t_max: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError("need 0 <= t_min < t_max <= 1")

    def sample_steps(self, schedule, n, rng):
        lo = max(1, int(round(self.t_min * schedule.T)))
        hi = max(lo, int(round(self.t_max * schedule.T)))
        return torch.randint(lo, hi + 1, (n,), generator=rng)


def forward_corrupt(x, t, eps, schedule):
    """x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps, with eps supplied by the caller."""
    ab = schedule.alpha_bar(t, x)
    return torch.sqrt(ab) * x + torch.sqrt(1.0 - ab) * eps


def tweedie_one_step(x_t, t, eps_hat, schedule):
    """Closed-form x0 estimate inverting forward_corrupt at the given step."""
    ab = schedule.alpha_bar(t, x_t)
    if float(ab.min()) < 1e-8:
        raise ValueError("alpha_bar below 1e-8; one-step inversion is ill-conditioned")
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def diffusion_loss(denoiser, x, slots, rng, schedule):
    """Denoising auto-encoding loss: mean_{batch,pixels} w(t) (eps_hat - eps)^2."""
    b = x.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=rng)
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    x_t = forward_corrupt(x, t, eps, schedule)
    eps_hat = denoiser(x_t, t, slots)
    w = schedule.weight(t, x)
    return (w * (eps_hat - eps) ** 2).mean()


def prior_gradient_loss(denoiser, x_c, slots_c, rng, schedule, trange, reduce="sum"):
    """Score-distillation surrogate: sum of detach(w(t)(eps_hat - eps)) * x_c.

    The denoiser runs on detached inputs under no_grad, so its parameters and
    the conditioning slots receive no gradient; the only differentiable factor
    is ``x_c`` itself, which realizes the approximate likelihood gradient.
    reduce="mean" divides by the per-image element count (a constant rescale of
    the same gradient) so the term lives on the per-pixel scale of the other
    losses.
    """
    if x_c.grad_fn is None and not x_c.requires_grad:
        raise ContractError("x_c is not connected to any parameters in the autodiff graph")
    if reduce not in ("sum", "mean"):
        raise ConfigError(f"unknown reduce {reduce!r}")
    b = x_c.shape[0]
    t = trange.sample_steps(schedule, b, rng)
    eps = torch.randn(x_c.shape, generator=rng, dtype=x_c.dtype, device=x_c.device)
    with torch.no_grad():
        x_t = forward_corrupt(x_c.detach(), t, eps, schedule)
        slots_in = slots_c.detach() if torch.is_tensor(slots_c) else slots_c
        eps_hat = denoiser(x_t, t, slots_in)
        residual = schedule.weight(t, x_c) * (eps_hat - eps)
    scale = b if reduce == "sum" else x_c.numel()
    return (residual * x_c).sum() / scale


def sample(denoiser, slots, schedule, steps, rng, shape, clip=True):
    """Ancestral sampling conditioned on slots, from pure Gaussian noise.

    With steps == T this is plain DDPM; smaller values walk an evenly strided
    timestep subsequence with the matching posterior variances.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    steps = min(steps, schedule.T)
    ts = np.unique(np.linspace(1, schedule.T, steps).round().astype(np.int64))[::-1]
    x = torch.randn(shape, generator=rng)
    for i, t in enumerate(ts):
        t_b = torch.full((shape[0],), int(t), dtype=torch.long)
        with torch.no_grad():
            eps_hat = denoiser(x, t_b, slots)
        x0_hat = tweedie_one_step(x, t_b, eps_hat, schedule)
        if clip:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        if i == len(ts) - 1:
            x = x0_hat
            break
        t_prev = int(ts[i + 1])
        ab_t = float(schedule.alpha_bars[t - 1])
        ab_prev = float(schedule.alpha_bars[t_prev - 1])
        beta_eff = 1.0 - ab_t / ab_prev
        var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
        mean = (
            np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t) * x0_hat
            + np.sqrt(ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t) * x
        )
        noise = torch.randn(shape, generator=rng)
        x = mean + np.sqrt(var) * noise
    return x
