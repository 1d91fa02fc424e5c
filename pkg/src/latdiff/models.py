"""Neural building blocks: causal token encoder, resampler coders, token decoders, denoiser."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class TimestepEmbedding(nn.Module):
    """Sinusoidal embedding of a continuous timestep t in [0,1], followed by an MLP.

    t is scaled by 1/resolution before the standard transformer sinusoid, so two
    timesteps closer than `resolution` map to nearly identical embeddings.
    """

    def __init__(self, dim: int, resolution: float = 1e-4, max_period: float = 1e4):
        super().__init__()
        self.dim = dim
        self.scale = 1.0 / resolution
        self.max_period = max_period
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() == 0:
            t = t[None]
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(self.max_period)
            * torch.arange(half, dtype=t.dtype, device=t.device)
            / half
        )
        args = t[:, None].to(freqs.dtype) * self.scale * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return self.mlp(emb)


class Attention(nn.Module):
    """Multi-head attention; self-attention by default, cross-attention when kv given."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, causal: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.causal = causal
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, kv=None):
        kv = x if kv is None else kv
        b, nq, d = x.shape
        nk = kv.shape[1]
        hd = d // self.heads
        q = self.q(x).view(b, nq, self.heads, hd).transpose(1, 2)
        k = self.k(kv).view(b, nk, self.heads, hd).transpose(1, 2)
        v = self.v(kv).view(b, nk, self.heads, hd).transpose(1, 2)
        o = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        return self.out(o.transpose(1, 2).reshape(b, nq, d))


def _mlp(dim: int, mult: int = 4):
    return nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))


class Block(nn.Module):
    """Pre-norm transformer block (self-attention + MLP)."""

    def __init__(self, dim: int, heads: int, causal: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, causal=causal)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CausalLM(nn.Module):
    """Small causal transformer LM.

    Doubles as the frozen token encoder (per-layer hidden-state extraction) and,
    trained on a disjoint split, as the generative-perplexity oracle.
    """

    def __init__(self, vocab_size: int, dim: int = 128, layers: int = 4, heads: int = 4,
                 max_len: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.num_layers = layers
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.zeros(1, max_len, dim))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, causal=True) for _ in range(layers))
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)

    def _stream(self, ids):
        if ids.shape[1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        return self.tok_emb(ids) + self.pos_emb[:, : ids.shape[1]]

    def forward(self, ids):
        x = self._stream(ids)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))

    def hidden_states(self, ids, layer: int = -1):
        """Residual-stream output of the indexed block; layer=-1 is the top block."""
        if not -self.num_layers <= layer <= -1:
            raise ValueError(f"layer must be in [-{self.num_layers}, -1], got {layer}")
        target = self.num_layers + layer
        x = self._stream(ids)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i == target:
                return x
        raise AssertionError("unreachable")

    def nll(self, ids):
        """Per-token negative log-likelihood for positions 2..n, shape [B, n-1]."""
        logits = self(ids)[:, :-1]
        return F.cross_entropy(
            logits.reshape(-1, self.vocab_size), ids[:, 1:].reshape(-1), reduction="none"
        ).view(ids.shape[0], -1)

    def loss(self, ids):
        return self.nll(ids).mean()


class Resampler(nn.Module):
    """Cross-attention resampler: trainable queries aggregate a fixed input sequence.

    The input stream is projected once and reused as keys/values by every layer;
    only the query stream is updated. Used both as the latent encoder
    (hidden states -> latents) and, mirrored, as the latent decoder.
    """

    def __init__(self, in_dim: int, out_dim: int, num_queries: int, width: int,
                 layers: int = 2, heads: int = 4):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(1, num_queries, width) * 0.02)
        self.in_proj = nn.Linear(in_dim, width)
        self.kv_norm = nn.LayerNorm(width)
        self.layers = nn.ModuleList()
        for _ in range(layers):
            self.layers.append(nn.ModuleList([
                nn.LayerNorm(width),
                Attention(width, heads, kv_dim=width),
                nn.LayerNorm(width),
                _mlp(width),
            ]))
        self.norm_out = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, out_dim)

    def forward(self, x):
        kv = self.kv_norm(self.in_proj(x))
        q = self.queries.expand(x.shape[0], -1, -1)
        for norm1, attn, norm2, mlp in self.layers:
            q = q + attn(norm1(q), kv=kv)
            q = q + mlp(norm2(q))
        return self.out_proj(self.norm_out(q))


class SelfAttentionCoder(nn.Module):
    """Plain bidirectional self-attention alternative to the resampler (ablation)."""

    def __init__(self, in_dim: int, out_dim: int, width: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, width)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.norm_out = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, out_dim)

    def forward(self, x):
        x = self.in_proj(x)
        for blk in self.blocks:
            x = blk(x)
        return self.out_proj(self.norm_out(x))


class TokenDecoder(nn.Module):
    """Bidirectional transformer mapping per-position features to vocabulary logits."""

    def __init__(self, in_dim: int, vocab_size: int, width: int = 128, layers: int = 2,
                 heads: int = 4, max_len: int = 32):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, width)
        self.pos_emb = nn.Parameter(torch.zeros(1, max_len, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab_size)

    def forward(self, h):
        x = self.in_proj(h) + self.pos_emb[:, : h.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))


class DiTBlock(nn.Module):
    """Transformer block with adaLN-zero conditioning on the timestep embedding."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = _mlp(dim)
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c))[:, None].chunk(6, dim=-1)
        x = x + g1 * self.attn(self.norm1(x) * (1 + sc1) + sh1)
        return x + g2 * self.mlp(self.norm2(x) * (1 + sc2) + sh2)


class Denoiser(nn.Module):
    """x0-prediction diffusion transformer over latent sequences.

    Self-conditioning enters by feature-dimension concatenation of the previous
    clean-latent estimate (zeros when absent), matching its usual analog-bits form.
    """

    def __init__(self, d_z: int, num_latents: int, width: int = 64, layers: int = 4,
                 heads: int = 4, t_resolution: float = 1e-4):
        super().__init__()
        self.d_z = d_z
        self.in_proj = nn.Linear(2 * d_z, width)
        self.pos_emb = nn.Parameter(torch.zeros(1, num_latents, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.t_emb = TimestepEmbedding(width, resolution=t_resolution)
        self.blocks = nn.ModuleList(DiTBlock(width, heads) for _ in range(layers))
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False)
        self.out_proj = nn.Linear(width, d_z)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, z_t, t, self_cond=None):
        """Estimate the clean latent from z_t at time t (per-example, shape [B])."""
        if self_cond is None:
            self_cond = torch.zeros_like(z_t)
        if self_cond.shape != z_t.shape:
            raise ValueError(f"self_cond shape {tuple(self_cond.shape)} != z_t {tuple(z_t.shape)}")
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        x = self.in_proj(torch.cat([z_t, self_cond], dim=-1)) + self.pos_emb[:, : z_t.shape[1]]
        c = self.t_emb(t)
        for blk in self.blocks:
            x = blk(x, c)
        return self.out_proj(self.norm_out(x))


def parameter_fingerprint(module: nn.Module) -> str:
    """Order-stable hash of all parameter and buffer bytes (frozen-weights checks)."""
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
