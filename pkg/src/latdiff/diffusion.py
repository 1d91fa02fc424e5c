"""Forward diffusion over latents: noise schedule, losses, warmup gate, self-conditioning."""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch


def _as_tensor(t):
    return t if isinstance(t, torch.Tensor) else torch.tensor(float(t), dtype=torch.float64)


@dataclass
class NoiseSchedule:
    """Signal-retention schedule alpha_bar(t) on [0,1], decreasing from 1 to 0.

    Variance-preserving parameterization throughout: alpha_t^2 = alpha_bar,
    sigma_t^2 = 1 - alpha_bar. `dlog_fn` is the analytic d/dt log alpha_bar when
    the family provides one; derived quantities fall back to central differences.
    """

    family: str
    alpha_bar_fn: Callable[[torch.Tensor], torch.Tensor]
    dlog_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
    params: dict = field(default_factory=dict)

    def alpha_bar(self, t):
        t_in = t
        t = _as_tensor(t)
        if ((t < 0) | (t > 1)).any():
            raise ValueError(f"t must be in [0,1], got {t_in}")
        a = self.alpha_bar_fn(t)
        a = torch.where(t <= 0, torch.ones_like(a), a)
        a = torch.where(t >= 1, torch.zeros_like(a), a)
        return a if isinstance(t_in, torch.Tensor) else float(a)

    def log_snr(self, t):
        """lambda(t) = log(alpha_bar / (1 - alpha_bar)); +inf at t=0, -inf at t=1."""
        t_in = t
        a = _as_tensor(self.alpha_bar(t))
        lam = torch.where(
            a >= 1, torch.full_like(a, math.inf),
            torch.where(a <= 0, torch.full_like(a, -math.inf), torch.log(a / (1 - a))),
        )
        return lam if isinstance(t_in, torch.Tensor) else float(lam)

    def dlog_alpha_bar(self, t):
        """d/dt log alpha_bar(t); analytic when available, else central difference."""
        t_in = t
        t = _as_tensor(t)
        if self.dlog_fn is not None:
            out = self.dlog_fn(t)
        else:
            eps = 1e-4
            lo = (t - eps).clamp(min=1e-9)
            hi = (t + eps).clamp(max=1 - 1e-9)
            out = (torch.log(self.alpha_bar_fn(hi)) - torch.log(self.alpha_bar_fn(lo))) / (hi - lo)
        return out if isinstance(t_in, torch.Tensor) else float(out)

    def log_snr_prime(self, t):
        """lambda'(t) = dlog_alpha_bar / (1 - alpha_bar); negative for monotone schedules."""
        t_in = t
        t = _as_tensor(t)
        a = self.alpha_bar_fn(t)
        out = self.dlog_alpha_bar(t) / (1 - a)
        return out if isinstance(t_in, torch.Tensor) else float(out)

    def elbo_weight(self, t):
        """Likelihood weight for x0-prediction: -1/2 * lambda'(t) * exp(lambda(t))."""
        t_in = t
        t = _as_tensor(t)
        if ((t <= 0) | (t >= 1)).any():
            raise ValueError("elbo_weight diverges at the endpoints; need t in (0,1)")
        a = self.alpha_bar_fn(t)
        out = -0.5 * self.log_snr_prime(t) * (a / (1 - a))
        return out if isinstance(t_in, torch.Tensor) else float(out)


def _cosine_alpha_bar(t):
    return torch.cos(0.5 * math.pi * t) ** 2


def _cosine_dlog(t):
    return -math.pi * torch.tan(0.5 * math.pi * t)


_FAMILIES = {
    "cosine": lambda **params: NoiseSchedule("cosine", _cosine_alpha_bar, _cosine_dlog, params),
}


def get_schedule(family: str = "cosine", **params) -> NoiseSchedule:
    if family == "tangent":
        raise NotImplementedError(
            "the tangent schedule family is an extension point; its closed form lives in "
            "an external reference and has not been wired in — use 'cosine'"
        )
    if family not in _FAMILIES:
        raise ValueError(f"unknown schedule family {family!r}; available: {sorted(_FAMILIES)}")
    return _FAMILIES[family](**params)


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps, with per-example t."""
    if eps.shape != z0.shape:
        raise ValueError("eps shape must match z0")
    t = torch.as_tensor(t, dtype=z0.dtype, device=z0.device)
    if t.dim() == 0:
        t = t.expand(z0.shape[0])
    a = schedule.alpha_bar(t.double()).to(z0.dtype).view(-1, *([1] * (z0.dim() - 1)))
    return torch.sqrt(a) * z0 + torch.sqrt(1 - a) * eps


def loss_diff(z0_gated: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the denoiser estimate and the (gated) clean latent."""
    if z0_gated.shape != z_hat.shape:
        raise ValueError("shape mismatch")
    return ((z_hat - z0_gated) ** 2).mean()


def per_example_loss_diff(z0_gated: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Per-example MSE, shape [B]; feeds the adaptive-sampler EMA."""
    return ((z_hat - z0_gated) ** 2).flatten(1).mean(dim=1)


@dataclass
class WarmupSchedule:
    """Normalized-sigmoid ramp for the diffusion-to-encoder gradient gate."""

    s_wu: int = 2000
    k: float = 10.0
    c: float = 0.8
    gamma_min: float = 1e-4

    def __post_init__(self):
        if self.s_wu < 0:
            raise ValueError("s_wu must be >= 0")
        if not 0.0 <= self.gamma_min < 1.0:
            raise ValueError("gamma_min must be in [0,1)")

    def gamma(self, s: int) -> float:
        """gamma(s): gamma_min at s=0, rising to exactly 1 at s=s_wu and beyond."""
        if s < 0:
            raise ValueError("step must be >= 0")
        if self.s_wu == 0 or s > self.s_wu:
            return 1.0
        sig = lambda x: 1.0 / (1.0 + math.exp(-x))
        tilde = lambda step: sig(self.k * (step / self.s_wu - self.c))
        frac = (tilde(s) - tilde(0)) / (tilde(self.s_wu) - tilde(0))
        return self.gamma_min + (1.0 - self.gamma_min) * frac


def gate_gradient(z0: torch.Tensor, gamma: float) -> torch.Tensor:
    """Forward-identity gate whose backward scales the gradient to z0 by gamma.

    Written as z0 + (gamma-1)*(z0 - sg(z0)) so the forward value is bit-identical
    to z0 (the correction term is exactly zero) while d/dz0 = gamma.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0,1], got {gamma}")
    if not z0.requires_grad or gamma == 1.0:
        return z0
    return z0 + (gamma - 1.0) * (z0 - z0.detach())


def self_cond_train_pass(denoiser, z_t: torch.Tensor, t: torch.Tensor, prob: float,
                         generator: torch.Generator):
    """Training-time denoiser pass with stochastic self-conditioning.

    With probability `prob` a gradient-free first pass (zero condition) produces
    the estimate that conditions the gradient-carrying second pass; otherwise a
    single zero-conditioned pass runs. Returns (z0_hat, used_self_cond).
    """
    use = prob > 0 and torch.rand((), generator=generator).item() < prob
    if use:
        with torch.no_grad():
            first = denoiser(z_t, t, self_cond=None)
        return denoiser(z_t, t, self_cond=first.detach()), True
    return denoiser(z_t, t, self_cond=None), False


def nelbo_estimate(autoencoder, denoiser, schedule: NoiseSchedule, ids: torch.Tensor,
                   sigma_dec: float, generator: torch.Generator,
                   weight_fn=None) -> dict:
    """Monte Carlo NELBO diagnostic (constants dropped, sigma_rec = 1 adopted).

    Returns each term separately; `total` is CE + 1/2 * MSE + weighted diffusion
    term. With weight_fn replaced by 1 the terms reduce to the training losses
    computed on the same draws. Monitoring only — training optimizes the
    unweighted sum.
    """
    weight_fn = weight_fn if weight_fn is not None else schedule.elbo_weight
    h = autoencoder.encode_tokens(ids)
    z0 = autoencoder.encode_latent(h)
    z_tilde = autoencoder.corrupt_latent(z0, sigma_dec, generator)
    h_hat = autoencoder.decode_hidden(z_tilde)
    mse_term = ((h - h_hat) ** 2).mean()
    ce_term = autoencoder.loss_w(ids, h_hat, stop_gradient=True)
    # open-interval draw for t: elbo_weight diverges at the endpoints
    u = torch.rand(ids.shape[0], generator=generator, dtype=torch.float64)
    t = (u * (1 - 2e-6) + 1e-6)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_noise(z0, t.to(z0.dtype), eps, schedule)
    z_hat = denoiser(z_t, t.to(z0.dtype))
    per_ex = per_example_loss_diff(z0, z_hat)
    w = torch.as_tensor(weight_fn(t), dtype=per_ex.dtype)
    if w.dim() == 0:
        w = w.expand_as(per_ex)
    diff_term = (w * per_ex).mean()
    total = ce_term + 0.5 * mse_term + diff_term
    return {"total": float(total), "ce": float(ce_term), "mse": float(mse_term),
            "diffusion": float(diff_term)}
