"""Adaptive timestep sampling: binned EMA loss estimates drive a non-uniform density.

Timesteps are drawn with density proportional to the discrete derivative of the
expected denoising loss over N equal bins, so that after reparameterization the
loss grows linearly in the sampled time. Bin probabilities are refreshed on a
fixed iteration interval, not per observation.
"""

import logging

import torch

logger = logging.getLogger(__name__)


class AdaptiveSampler:
    def __init__(self, num_bins: int = 100, refresh_every: int = 5000,
                 ema_decay: float = 0.99):
        if num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if not 0.0 < ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0,1)")
        self.num_bins = num_bins
        self.refresh_every = refresh_every
        self.ema_decay = ema_decay
        self.edges = torch.linspace(0.0, 1.0, num_bins + 1, dtype=torch.float64)
        self.ema_loss = torch.zeros(num_bins + 1, dtype=torch.float64)
        self.probs = torch.full((num_bins,), 1.0 / num_bins, dtype=torch.float64)
        self.iteration = 0

    def sample(self, batch_size: int, generator: torch.Generator) -> torch.Tensor:
        """Draw bin i with probability p_i, then u ~ Uniform(u_i, u_{i+1}]."""
        bins = torch.multinomial(self.probs, batch_size, replacement=True, generator=generator)
        left = self.edges[bins]
        right = self.edges[bins + 1]
        v = torch.rand(batch_size, generator=generator, dtype=torch.float64)  # in [0,1)
        return right - v * (right - left)

    def update(self, u: torch.Tensor, losses: torch.Tensor):
        """Fold one training iteration's per-example losses into the edge EMAs.

        Each observation is attributed to the upper edge of its containing bin.
        Nonfinite losses are dropped with a warning. Probabilities are recomputed
        only when the iteration counter crosses a refresh boundary.
        """
        u = torch.as_tensor(u, dtype=torch.float64).flatten()
        losses = torch.as_tensor(losses, dtype=torch.float64).flatten()
        if u.shape != losses.shape:
            raise ValueError("u and losses must have matching shapes")
        if ((u < 0) | (u > 1)).any():
            raise ValueError("timesteps must be in [0,1]")
        finite = torch.isfinite(losses)
        if not finite.all():
            logger.warning("dropping %d nonfinite loss observations", int((~finite).sum()))
            u, losses = u[finite], losses[finite]
        # upper edge of the containing bin (u_i, u_{i+1}] -> edge i+1
        idx = torch.clamp(torch.searchsorted(self.edges, u, right=False), 1, self.num_bins)
        for i, val in zip(idx.tolist(), losses.tolist()):
            self.ema_loss[i] = self.ema_decay * self.ema_loss[i] + (1 - self.ema_decay) * val
        self.iteration += 1
        if self.refresh_every > 0 and self.iteration % self.refresh_every == 0:
            self.refresh_probs()

    def refresh_probs(self):
        """p_i from clipped EMA increments; uniform fallback when the profile is flat."""
        inc = torch.clamp(self.ema_loss[1:] - self.ema_loss[:-1], min=0.0)
        total = inc.sum()
        if total <= 0:
            self.probs = torch.full((self.num_bins,), 1.0 / self.num_bins, dtype=torch.float64)
        else:
            self.probs = inc / total

    def adapted_time(self) -> torch.Tensor:
        """F(u_i) at every edge: the cumulative sampling probability (0 at u_0, 1 at u_N)."""
        return torch.cat([torch.zeros(1, dtype=torch.float64), torch.cumsum(self.probs, 0)])

    def state_dict(self) -> dict:
        return {
            "edges": self.edges.clone(),
            "ema_loss": self.ema_loss.clone(),
            "probs": self.probs.clone(),
            "iteration": self.iteration,
            "num_bins": self.num_bins,
            "refresh_every": self.refresh_every,
            "ema_decay": self.ema_decay,
        }

    def load_state_dict(self, state: dict):
        if state["num_bins"] != self.num_bins:
            raise ValueError("num_bins mismatch")
        self.edges = state["edges"].clone()
        self.ema_loss = state["ema_loss"].clone()
        self.probs = state["probs"].clone()
        self.iteration = int(state["iteration"])
        self.refresh_every = int(state["refresh_every"])
        self.ema_decay = float(state["ema_decay"])
