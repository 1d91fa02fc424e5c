"""Two-stage text autoencoder: frozen token encoder -> trainable latent coder stack.

Encoding: frozen causal LM hidden states (normalized with dataset statistics) are
reshaped into diffusion latents by a trainable latent encoder. Decoding: a latent
decoder rebuilds hidden states, a token decoder turns them into vocabulary logits.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import HiddenStats, normalize_hidden
from .models import CausalLM, Resampler, SelfAttentionCoder, TokenDecoder


def interpolate_latents(z_a: torch.Tensor, z_b: torch.Tensor, alpha: float) -> torch.Tensor:
    """(1-alpha) * z_a + alpha * z_b for alpha in [0,1]."""
    if z_a.shape != z_b.shape:
        raise ValueError("latent shapes must match")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    return (1.0 - alpha) * z_a + alpha * z_b


class LatentAutoencoder(nn.Module):
    """Bundles the frozen token encoder, its stats, and the trainable coder stack."""

    def __init__(self, token_encoder: CausalLM, stats: HiddenStats, n: int, d_z: int,
                 latent_layers: int = 2, latent_heads: int = 4,
                 latent_arch: str = "resampler", dec_layers: int = 2, dec_heads: int = 4):
        super().__init__()
        self.n = n
        self.m = n  # number of latent vectors equals the sequence length
        self.d_h = token_encoder.dim
        self.d_z = d_z
        self.layer = stats.layer
        self.stats = stats
        self.token_encoder = token_encoder
        self.freeze_token_encoder()

        if latent_arch == "resampler":
            self.latent_encoder = Resampler(self.d_h, d_z, self.m, width=d_z,
                                            layers=latent_layers, heads=latent_heads)
            self.latent_decoder = Resampler(d_z, self.d_h, self.n, width=self.d_h,
                                            layers=latent_layers, heads=latent_heads)
        elif latent_arch == "self_attention":
            self.latent_encoder = SelfAttentionCoder(self.d_h, d_z, width=d_z,
                                                     layers=latent_layers, heads=latent_heads)
            self.latent_decoder = SelfAttentionCoder(d_z, self.d_h, width=self.d_h,
                                                     layers=latent_layers, heads=latent_heads)
        else:
            raise ValueError(f"unknown latent_arch {latent_arch!r}")
        self.token_decoder = TokenDecoder(self.d_h, token_encoder.vocab_size,
                                          width=self.d_h, layers=dec_layers,
                                          heads=dec_heads, max_len=n)

    def freeze_token_encoder(self):
        self.token_encoder.eval()
        for p in self.token_encoder.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.token_encoder.eval()  # frozen module never enters train mode
        return self

    def trainable_modules(self) -> dict:
        return {"latent_encoder": self.latent_encoder,
                "latent_decoder": self.latent_decoder,
                "token_decoder": self.token_decoder}

    def encode_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Frozen hidden states at the configured layer, normalized with dataset stats."""
        with torch.no_grad():
            h = self.token_encoder.hidden_states(ids, self.layer)
        return normalize_hidden(h, self.stats)

    def encode_latent(self, h: torch.Tensor) -> torch.Tensor:
        return self.latent_encoder(h)

    def corrupt_latent(self, z0: torch.Tensor, sigma_dec: float,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        """z0 + sigma_dec * eps; the noise is a constant for autodiff purposes."""
        if sigma_dec < 0:
            raise ValueError(f"sigma_dec must be >= 0, got {sigma_dec}")
        if sigma_dec == 0:
            return z0
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
        return z0 + sigma_dec * eps

    def decode_hidden(self, z: torch.Tensor) -> torch.Tensor:
        return self.latent_decoder(z)

    def decode_tokens(self, h_hat: torch.Tensor) -> torch.Tensor:
        return self.token_decoder(h_hat)

    def loss_h(self, h: torch.Tensor, z0: torch.Tensor, sigma_dec: float,
               generator: torch.Generator | None = None) -> torch.Tensor:
        """Hidden-state reconstruction MSE through the corrupted latent (mean reduction).

        This is the only reconstruction signal that reaches the latent encoder.
        """
        h_hat = self.decode_hidden(self.corrupt_latent(z0, sigma_dec, generator))
        if h_hat.shape != h.shape:
            raise ValueError("reconstruction shape mismatch")
        return ((h - h_hat) ** 2).mean()

    def loss_w(self, ids: torch.Tensor, h_hat: torch.Tensor,
               stop_gradient: bool = True) -> torch.Tensor:
        """Mean per-token cross-entropy of the token decoder against the source ids.

        With stop_gradient (default) the gradient is cut at h_hat, so only the
        token decoder learns from this loss; disabling it is the CE-ablation mode
        where token-level supervision also shapes the latent space.
        """
        if h_hat.shape[:2] != ids.shape:
            raise ValueError("h_hat/ids shape mismatch")
        inp = h_hat.detach() if stop_gradient else h_hat
        logits = self.decode_tokens(inp)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids.reshape(-1))

    def reconstruction_losses(self, ids: torch.Tensor, h: torch.Tensor, z0: torch.Tensor,
                              sigma_dec: float, generator: torch.Generator | None = None,
                              stop_gradient: bool = True):
        """loss_h and loss_w sharing one corruption draw and one latent-decoder pass."""
        h_hat = self.decode_hidden(self.corrupt_latent(z0, sigma_dec, generator))
        l_h = ((h - h_hat) ** 2).mean()
        l_w = self.loss_w(ids, h_hat, stop_gradient=stop_gradient)
        return l_h, l_w, h_hat

    @torch.no_grad()
    def reconstruct_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Round-trip argmax decode from clean latents (accuracy diagnostics)."""
        h = self.encode_tokens(ids)
        z0 = self.encode_latent(h)
        logits = self.decode_tokens(self.decode_hidden(z0))
        return logits.argmax(dim=-1)

    @torch.no_grad()
    def reconstruction_accuracy(self, ids: torch.Tensor) -> float:
        pred = self.reconstruct_tokens(ids)
        return float((pred == ids).double().mean())
