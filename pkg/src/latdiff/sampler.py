"""Reverse-time generation: Euler-Maruyama integration of the VP-SDE, then decoding."""

import math
from dataclasses import dataclass

import torch

from .diffusion import NoiseSchedule

# The cosine-family VP coefficients diverge at t=1 (tan(pi/2)); coefficients and
# the denoiser time are evaluated at min(t, 1 - T_EVAL_CLIP).
T_EVAL_CLIP = 1e-2


@dataclass
class SamplerConfig:
    num_steps: int = 128
    seed: int = 0
    batch: int = 1
    self_cond: bool = True    # condition each step on the previous estimate
    warm_start: bool = False  # extra zero-conditioned pass at step 1 only
    greedy: bool = False      # argmax token emission instead of sampling
    t_eval_clip: float = T_EVAL_CLIP

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


def score_from_x0(z_t: torch.Tensor, z0_hat: torch.Tensor, t: float,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Marginal score from an x0 estimate: (sqrt(abar)*z0_hat - z_t) / (1 - abar)."""
    a = schedule.alpha_bar(float(t))
    if a >= 1.0 - 1e-12:
        raise ValueError(f"score is singular where alpha_bar(t)=1 (t={t})")
    return (math.sqrt(a) * z0_hat - z_t) / (1.0 - a)


def em_step(z_t: torch.Tensor, t: float, dt: float, z0_hat: torch.Tensor,
            generator: torch.Generator, schedule: NoiseSchedule,
            last_step: bool | None = None, t_eval_clip: float = T_EVAL_CLIP) -> torch.Tensor:
    """One reverse Euler-Maruyama step of the VP-SDE from t to t - dt.

    Drift f(t) = 1/2 d log(abar)/dt and diffusion g^2(t) = -d log(abar)/dt follow
    from the variance-preserving identities. The stochastic term is omitted on the
    final step (t - dt == 0) so no noise is injected that no later step can remove.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if t - dt < -1e-12:
        raise ValueError(f"step would cross t=0 (t={t}, dt={dt})")
    if not torch.isfinite(z_t).all():
        raise FloatingPointError(f"nonfinite sampler state at t={t}")
    te = min(float(t), 1.0 - t_eval_clip)
    dlog = schedule.dlog_alpha_bar(te)
    f = 0.5 * dlog
    g2 = -dlog
    score = score_from_x0(z_t, z0_hat, te, schedule)
    drift = f * z_t - g2 * score
    z_next = z_t - drift * dt
    if last_step is None:
        last_step = t - dt <= 1e-12
    if not last_step:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device)
        z_next = z_next + math.sqrt(g2 * dt) * noise
    return z_next


def reverse_latents(config: SamplerConfig, denoiser, schedule: NoiseSchedule,
                    shape: tuple, generator: torch.Generator):
    """Integrate z_1 ~ N(0,I) down to a clean latent; returns (z0, last z0_hat, nfe)."""
    z = torch.randn(shape, generator=generator)
    steps = config.num_steps
    dt = 1.0 / steps
    z0_hat = None
    nfe = 0
    for k in range(steps):
        t = 1.0 - k * dt
        te = min(t, 1.0 - config.t_eval_clip)
        t_vec = torch.full((shape[0],), te, dtype=z.dtype)
        cond = z0_hat if (config.self_cond and z0_hat is not None) else None
        if k == 0 and config.self_cond and config.warm_start:
            with torch.no_grad():
                cond = denoiser(z, t_vec, self_cond=None)
            nfe += 1
        with torch.no_grad():
            z0_hat = denoiser(z, t_vec, self_cond=cond)
        nfe += 1
        z = em_step(z, t, dt, z0_hat, generator, schedule,
                    last_step=(k == steps - 1), t_eval_clip=config.t_eval_clip)
    return z, z0_hat, nfe


def generate(config: SamplerConfig, autoencoder, denoiser, schedule: NoiseSchedule,
             latent_token_decoder=None):
    """Sample token sequences from pure noise.

    The final latent is decoded without decoder-input corruption (sigma forced to
    zero) and tokens are drawn per position from the decoder distribution, or by
    argmax when config.greedy. When `latent_token_decoder` is given (a post-trained
    decoder reading latents directly), it replaces the two-stage decode path.

    Returns (tokens [batch, n], z0 [batch, m, d_z], info dict with the exact NFE).
    """
    generator = torch.Generator().manual_seed(config.seed)
    shape = (config.batch, autoencoder.m, autoencoder.d_z)
    z0, _, nfe = reverse_latents(config, denoiser, schedule, shape, generator)
    with torch.no_grad():
        if latent_token_decoder is not None:
            logits = latent_token_decoder(z0)
        else:
            h_hat = autoencoder.decode_hidden(z0)  # clean latent: no corrupt_latent call
            logits = autoencoder.decode_tokens(h_hat)
        if config.greedy:
            tokens = logits.argmax(dim=-1)
        else:
            probs = torch.softmax(logits, dim=-1)
            flat = probs.reshape(-1, probs.shape[-1])
            tokens = torch.multinomial(flat, 1, generator=generator).view(logits.shape[:2])
    info = {"nfe_per_sequence": nfe, "num_steps": config.num_steps, "seed": config.seed}
    return tokens, z0, info
