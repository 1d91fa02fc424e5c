"""Evaluation metrics: generative perplexity, unigram entropy, n-gram diversity,
latent-interpolation smoothness probe, and quality-diversity sweep tables."""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .autoencoder import interpolate_latents
from .models import CausalLM
from .sampler import SamplerConfig, generate


class OracleLM:
    """Autoregressive scorer: mean per-token NLL of tokens 2..n given their prefixes."""

    def __init__(self, model: CausalLM, batch_size: int = 128):
        self.model = model
        self.batch_size = batch_size
        self.model.eval()

    @torch.no_grad()
    def total_nll(self, sequences) -> tuple[float, int]:
        seqs = torch.as_tensor(np.asarray(sequences), dtype=torch.long)
        total, count = 0.0, 0
        for start in range(0, len(seqs), self.batch_size):
            nll = self.model.nll(seqs[start : start + self.batch_size])
            total += float(nll.double().sum())
            count += nll.numel()
        return total, count


class UniformOracle:
    """Assigns probability 1/|V| to every token; PPL of any text is exactly |V|."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def total_nll(self, sequences) -> tuple[float, int]:
        seqs = np.asarray(sequences)
        count = seqs.shape[0] * (seqs.shape[1] - 1)
        return count * math.log(self.vocab_size), count


def gen_ppl(sequences, oracle) -> float:
    """exp of the mean per-token NLL under the oracle, over all tokens of all texts."""
    seqs = np.asarray(sequences)
    if seqs.size == 0:
        raise ValueError("gen_ppl needs a non-empty set of sequences")
    total, count = oracle.total_nll(seqs)
    return math.exp(total / count)


def unigram_entropy(seq) -> float:
    """Shannon entropy (nats) of the within-sequence empirical token distribution."""
    seq = np.asarray(seq).ravel()
    if seq.size == 0:
        raise ValueError("unigram_entropy needs a non-empty sequence")
    _, counts = np.unique(seq, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mean_unigram_entropy(sequences) -> float:
    return float(np.mean([unigram_entropy(s) for s in sequences]))


def ngram_diversity(sequences) -> float:
    """Product over n in {2,3,4} of unique/total n-gram ratios, pooled corpus-wide."""
    seqs = [list(map(int, s)) for s in sequences]
    for i, s in enumerate(seqs):
        if len(s) < 5:
            raise ValueError(f"sequence {i} has length {len(s)} < 5; 4-grams undefined")
    result = 1.0
    for n in (2, 3, 4):
        grams = Counter()
        for s in seqs:
            for j in range(len(s) - n + 1):
                grams[tuple(s[j : j + n])] += 1
        total = sum(grams.values())
        result *= len(grams) / total
    return result


def smoothness_probe(text_pairs, autoencoder, alphas, oracle) -> list[dict]:
    """Gen. PPL of decoded interpolations between latent pairs of real texts.

    For each alpha the two texts are encoded, their latents linearly mixed, and
    the mixture decoded with no decoder-input noise (greedy argmax emission so the
    probe is deterministic). Returns one record per alpha with the pooled Gen. PPL.
    """
    pairs = [(torch.as_tensor(np.asarray(a), dtype=torch.long),
              torch.as_tensor(np.asarray(b), dtype=torch.long)) for a, b in text_pairs]
    if not pairs:
        raise ValueError("smoothness_probe needs at least one text pair")
    autoencoder.eval()
    curve = []
    with torch.no_grad():
        lats = [(autoencoder.encode_latent(autoencoder.encode_tokens(a[None])),
                 autoencoder.encode_latent(autoencoder.encode_tokens(b[None])))
                for a, b in pairs]
        for alpha in alphas:
            decoded = []
            for z_a, z_b in lats:
                z = interpolate_latents(z_a, z_b, float(alpha))
                logits = autoencoder.decode_tokens(autoencoder.decode_hidden(z))
                decoded.append(logits.argmax(dim=-1)[0].numpy())
            curve.append({"alpha": float(alpha), "gen_ppl": gen_ppl(decoded, oracle)})
    return curve


def mauve(generated, reference) -> dict:
    """Distribution-proximity metric; unavailable here (needs an external embedding model)."""
    return {"status": "unavailable",
            "reason": "requires an external embedding model; out of scope"}


@dataclass
class MetricReport:
    gen_ppl: float
    entropy: float
    diversity: float
    num_samples: int
    num_steps: int
    seed: int

    def __post_init__(self):
        if self.gen_ppl < 1.0:
            raise ValueError("gen_ppl must be >= 1")
        if self.entropy < 0.0:
            raise ValueError("entropy must be >= 0")
        if not 0.0 <= self.diversity <= 1.0:
            raise ValueError("diversity must be in [0,1]")

    def to_dict(self) -> dict:
        return {"gen_ppl": self.gen_ppl, "entropy": self.entropy,
                "diversity": self.diversity, "num_samples": self.num_samples,
                "num_steps": self.num_steps, "seed": self.seed}


def evaluate_generations(sequences, oracle, num_steps: int, seed: int) -> MetricReport:
    return MetricReport(
        gen_ppl=gen_ppl(sequences, oracle),
        entropy=mean_unigram_entropy(sequences),
        diversity=ngram_diversity(sequences),
        num_samples=len(sequences),
        num_steps=num_steps,
        seed=seed,
    )


def sweep_report(autoencoder, denoiser, schedule, oracle, step_counts, seeds,
                 texts_per_seed: int = 200, latent_token_decoder=None) -> dict:
    """Metric table over NFE budgets: per (num_steps, seed) record plus mean/std rows."""
    step_counts = sorted(set(int(s) for s in step_counts))
    records = []
    for num_steps in step_counts:
        for seed in seeds:
            cfg = SamplerConfig(num_steps=num_steps, seed=int(seed), batch=texts_per_seed)
            tokens, _, info = generate(cfg, autoencoder, denoiser, schedule,
                                       latent_token_decoder=latent_token_decoder)
            report = evaluate_generations(tokens.numpy(), oracle, num_steps, int(seed))
            records.append({**report.to_dict(), "nfe_per_sequence": info["nfe_per_sequence"]})
    summary = []
    for num_steps in step_counts:
        rows = [r for r in records if r["num_steps"] == num_steps]
        entry = {"num_steps": num_steps, "num_seeds": len(rows),
                 "texts_per_seed": texts_per_seed}
        for key in ("gen_ppl", "entropy", "diversity"):
            vals = np.array([r[key] for r in rows])
            entry[f"{key}_mean"] = float(vals.mean())
            entry[f"{key}_std"] = float(vals.std())
        summary.append(entry)
    return {"records": records, "summary": summary,
            "protocol": {"seeds": [int(s) for s in seeds], "texts_per_seed": texts_per_seed,
                         "entropy_log_base": "e"}}


def unigram_perplexity(train_sequences, eval_sequences, vocab_size: int) -> float:
    """Laplace-smoothed unigram model fit on train counts, scored on eval tokens."""
    train = np.asarray(train_sequences).ravel()
    counts = np.bincount(train, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    ev = np.asarray(eval_sequences).ravel()
    return float(np.exp(-logp[ev].mean()))
