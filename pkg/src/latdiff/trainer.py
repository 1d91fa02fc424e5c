"""Training orchestration: encoder pretraining, joint training, decoder post-training,
checkpointing, and run logging."""

import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from .adaptive import AdaptiveSampler
from .autoencoder import LatentAutoencoder
from .config import PretrainConfig, TrainConfig, asdict, config_hash
from .corpus import HiddenStats, compute_hidden_stats
from .diffusion import (WarmupSchedule, forward_noise, gate_gradient, get_schedule,
                        loss_diff, per_example_loss_diff, self_cond_train_pass)
from .models import CausalLM, Denoiser, TokenDecoder, parameter_fingerprint

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latdiff-checkpoint-v1"
MAX_CONSECUTIVE_SKIPS = 10


class TrainingDiverged(RuntimeError):
    """Raised when the abort rules fire (nonfinite losses, runaway pretraining)."""


class RunLog:
    """Append-only JSONL run log; every record carries a monotone step index."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a")
        else:
            self._fh = None

    def write(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def load_packed(path) -> np.ndarray:
    arr = np.load(path)
    if arr.ndim != 2:
        raise ValueError(f"packed dataset must be 2-D, got shape {arr.shape}")
    return arr


def batch_indices(num_chunks: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic batch for a global step: fixed-seed shuffle per epoch."""
    if num_chunks < batch_size:
        raise ValueError(f"dataset has {num_chunks} chunks < batch_size {batch_size}")
    steps_per_epoch = num_chunks // batch_size
    epoch, pos = divmod(step, steps_per_epoch)
    rng = np.random.default_rng(1_000_003 * seed + epoch)
    perm = rng.permutation(num_chunks)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def _lr_at(step: int, base_lr: float, warmup_steps: int, floor: float = 1e-8) -> float:
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return floor + (base_lr - floor) * (step / warmup_steps)


def _make_adamw(params, cfg) -> torch.optim.AdamW:
    kwargs = dict(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                  weight_decay=cfg.weight_decay)
    try:
        return torch.optim.AdamW(params, fused=True, **kwargs)
    except (RuntimeError, ValueError, TypeError):
        return torch.optim.AdamW(params, **kwargs)


def resume_hash(cfg: TrainConfig) -> str:
    """Config identity for resumption: operational fields (run length, logging
    cadence, device) may change across a continuation; everything else may not."""
    neutral = dataclasses.replace(cfg, total_steps=1, log_every=1, eval_every=0,
                                  checkpoint_every=0, device="cpu")
    return config_hash(neutral)


def pretrain_token_encoder(cfg: PretrainConfig, data_train: np.ndarray,
                           data_val: np.ndarray, log: RunLog | None = None) -> dict:
    """Next-token pretraining; the resulting model is frozen by every downstream stage.

    Aborts if the loss stays above its initial value for 1000 consecutive steps.
    Returns {"model", "val_ppl", "summary"}.
    """
    torch.manual_seed(cfg.seed)
    model = CausalLM(cfg.vocab_size, cfg.d_h, cfg.enc_layers, cfg.enc_heads, max_len=cfg.n)
    opt = _make_adamw(model.parameters(), cfg)
    initial_loss = None
    above_initial = 0
    for step in range(cfg.total_steps):
        idx = batch_indices(len(data_train), cfg.batch_size, step, cfg.seed)
        ids = torch.as_tensor(data_train[idx], dtype=torch.long)
        loss = model.loss(ids)
        opt.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, cfg.lr, cfg.lr_warmup_steps)
        opt.step()
        val = float(loss.detach())
        if initial_loss is None:
            initial_loss = val
        above_initial = above_initial + 1 if val > initial_loss else 0
        if above_initial >= 1000:
            raise TrainingDiverged(
                f"pretraining loss above its initial value for {above_initial} consecutive steps"
            )
        if log and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            log.write({"kind": "pretrain_step", "step": step, "loss": val,
                       "grad_norm": float(grad_norm)})
    val_ppl = validation_perplexity(model, data_val, cfg.batch_size)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    summary = {"val_ppl": val_ppl, "steps": cfg.total_steps,
               "fingerprint": parameter_fingerprint(model)}
    if log:
        log.write({"kind": "pretrain_done", **{k: v for k, v in summary.items()}})
    return {"model": model, "val_ppl": val_ppl, "summary": summary}


@torch.no_grad()
def validation_perplexity(model: CausalLM, data: np.ndarray, batch_size: int = 64) -> float:
    total_nll, count = 0.0, 0
    model.eval()
    for start in range(0, len(data), batch_size):
        ids = torch.as_tensor(data[start : start + batch_size], dtype=torch.long)
        nll = model.nll(ids)
        total_nll += float(nll.sum())
        count += nll.numel()
    return math.exp(total_nll / count)


def build_models(cfg: TrainConfig, token_encoder: CausalLM, stats: HiddenStats):
    ae = LatentAutoencoder(token_encoder, stats, n=cfg.n, d_z=cfg.d_z,
                           latent_layers=cfg.latent_layers, latent_heads=cfg.latent_heads,
                           latent_arch=cfg.latent_arch, dec_layers=cfg.dec_layers)
    denoiser = Denoiser(cfg.d_z, num_latents=cfg.n, width=cfg.denoiser_width,
                        layers=cfg.denoiser_layers, heads=cfg.denoiser_heads)
    return ae, denoiser


class JointTrainer:
    """Owns all mutable training state for the joint objective (Eq. of the total loss)."""

    def __init__(self, cfg: TrainConfig, token_encoder: CausalLM, stats: HiddenStats,
                 data_train: np.ndarray, data_val: np.ndarray | None = None):
        if token_encoder.vocab_size != cfg.vocab_size:
            raise ValueError("token encoder vocab_size does not match config")
        if stats.layer != cfg.encoder_layer:
            raise ValueError(f"stats layer {stats.layer} != config encoder_layer "
                             f"{cfg.encoder_layer}")
        self.cfg = cfg
        self.data_train = data_train
        self.data_val = data_val
        torch.manual_seed(cfg.seed)
        self.ae, self.denoiser = build_models(cfg, token_encoder, stats)
        self.schedule = get_schedule(cfg.schedule)
        self.warmup = WarmupSchedule(cfg.s_wu, cfg.warmup_k, cfg.warmup_c, cfg.gamma_min)
        self.adaptive = AdaptiveSampler(cfg.num_bins, cfg.sampler_refresh, cfg.ema_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed + 1)
        params = [p for m in self.ae.trainable_modules().values() for p in m.parameters()]
        params += list(self.denoiser.parameters())
        self._params = params
        self.optimizer = _make_adamw(params, cfg)
        self.step = 0
        self.consecutive_skips = 0
        self.encoder_fingerprint = parameter_fingerprint(self.ae.token_encoder)

    def sample_timesteps(self, batch_size: int) -> torch.Tensor:
        if self.cfg.timestep_mode == "adaptive":
            return self.adaptive.sample(batch_size, self.generator)
        return 1.0 - torch.rand(batch_size, generator=self.generator, dtype=torch.float64)

    def train_step(self, ids: torch.Tensor) -> dict:
        cfg = self.cfg
        s = self.step
        self.ae.train()
        self.denoiser.train()

        h = self.ae.encode_tokens(ids)
        z0 = self.ae.encode_latent(h)

        # reconstruction branch: one corruption draw shared by both losses
        l_h, l_w, _ = self.ae.reconstruction_losses(
            ids, h, z0, cfg.sigma_dec, self.generator, stop_gradient=cfg.stop_gradient)

        # diffusion branch
        gamma = self.warmup.gamma(s)
        z0_d = gate_gradient(z0, gamma)
        u = self.sample_timesteps(ids.shape[0])
        eps = torch.randn(z0_d.shape, generator=self.generator, dtype=z0_d.dtype)
        z_t = forward_noise(z0_d, u.to(z0_d.dtype), eps, self.schedule)
        z_hat, used_sc = self_cond_train_pass(
            self.denoiser, z_t, u.to(z0_d.dtype), cfg.self_cond_prob, self.generator)
        per_ex = per_example_loss_diff(z0_d, z_hat)
        l_diff = per_ex.mean()

        if cfg.loss_mode == "CE":
            total = l_diff + l_w
        else:  # MSE or CE+MSE both keep the hidden-state loss in the sum
            total = l_diff + l_h + l_w

        record = {"kind": "step", "step": s, "l_diff": float(l_diff.detach()),
                  "l_h": float(l_h.detach()), "l_w": float(l_w.detach()),
                  "total": float(total.detach()), "gamma": gamma,
                  "u": [round(float(x), 4) for x in u], "used_self_cond": used_sc,
                  "lr": _lr_at(s, cfg.lr, cfg.lr_warmup_steps)}

        if not torch.isfinite(total):
            self.consecutive_skips += 1
            record.update({"skipped": True, "consecutive_skips": self.consecutive_skips})
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise TrainingDiverged(
                    f"nonfinite total loss for {self.consecutive_skips} consecutive steps")
        else:
            self.consecutive_skips = 0
            self.optimizer.zero_grad()
            total.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(self._params, cfg.grad_clip_norm)
            for group in self.optimizer.param_groups:
                group["lr"] = record["lr"]
            self.optimizer.step()
            record["grad_norm"] = float(grad_norm)
            record["skipped"] = False

        self.adaptive.update(u, per_ex.detach())
        self.step += 1
        return record

    @torch.no_grad()
    def evaluate(self, batch_size: int = 64) -> dict:
        """Validation losses and clean-latent reconstruction accuracy."""
        if self.data_val is None or len(self.data_val) == 0:
            return {}
        self.ae.eval()
        self.denoiser.eval()
        take = min(len(self.data_val), 4 * batch_size)
        accs, lhs, lws = [], [], []
        gen = torch.Generator().manual_seed(12345)
        for start in range(0, take, batch_size):
            ids = torch.as_tensor(self.data_val[start : start + batch_size], dtype=torch.long)
            accs.append(self.ae.reconstruction_accuracy(ids))
            h = self.ae.encode_tokens(ids)
            z0 = self.ae.encode_latent(h)
            l_h, l_w, _ = self.ae.reconstruction_losses(
                ids, h, z0, self.cfg.sigma_dec, gen, stop_gradient=True)
            lhs.append(float(l_h))
            lws.append(float(l_w))
        return {"recon_accuracy": float(np.mean(accs)), "val_l_h": float(np.mean(lhs)),
                "val_l_w": float(np.mean(lws))}

    @torch.no_grad()
    def binwise_diffusion_loss(self, num_batches: int = 8, batch_size: int = 64,
                               seed: int = 999) -> torch.Tensor:
        """Fresh per-edge diffusion-loss measurements (sampler-linearization checks)."""
        data = self.data_val if self.data_val is not None and len(self.data_val) else self.data_train
        self.ae.eval()
        self.denoiser.eval()
        gen = torch.Generator().manual_seed(seed)
        edges = self.adaptive.edges.clone()
        sums = torch.zeros(len(edges), dtype=torch.float64)
        rng = np.random.default_rng(seed)
        for b in range(num_batches):
            idx = rng.integers(0, len(data), size=batch_size)
            ids = torch.as_tensor(np.asarray(data)[idx], dtype=torch.long)
            h = self.ae.encode_tokens(ids)
            z0 = self.ae.encode_latent(h)
            for i, edge in enumerate(edges):
                t = float(min(max(float(edge), 1e-4), 1.0))
                eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
                z_t = forward_noise(z0, torch.full((ids.shape[0],), t, dtype=z0.dtype),
                                    eps, self.schedule)
                z_hat = self.denoiser(z_t, torch.full((ids.shape[0],), t, dtype=z0.dtype))
                sums[i] += float(loss_diff(z0, z_hat))
        return sums / num_batches

    def run(self, log: RunLog | None = None, checkpoint_path=None) -> dict:
        cfg = self.cfg
        start = time.time()
        last_eval = {}
        while self.step < cfg.total_steps:
            idx = batch_indices(len(self.data_train), cfg.batch_size, self.step, cfg.seed)
            ids = torch.as_tensor(self.data_train[idx], dtype=torch.long)
            record = self.train_step(ids)
            if log and (record["step"] % cfg.log_every == 0
                        or record["step"] == cfg.total_steps - 1 or record["skipped"]):
                log.write(record)
            done = self.step
            if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.total_steps):
                last_eval = self.evaluate()
                if log and last_eval:
                    log.write({"kind": "eval", "step": done, **last_eval})
            if cfg.sampler_refresh and done % cfg.sampler_refresh == 0 and log:
                log.write({"kind": "sampler", "step": done,
                           "ema_loss": [round(float(x), 6) for x in self.adaptive.ema_loss],
                           "probs": [round(float(p), 8) for p in self.adaptive.probs]})
            if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        if checkpoint_path:
            self.save(checkpoint_path)
        assert parameter_fingerprint(self.ae.token_encoder) == self.encoder_fingerprint, \
            "frozen token encoder changed during joint training"
        return {"steps": self.step, "duration_s": time.time() - start, **last_eval}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "kind": "joint",
            "config": asdict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "step": self.step,
            "models": {
                "token_encoder": self.ae.token_encoder.state_dict(),
                "latent_encoder": self.ae.latent_encoder.state_dict(),
                "latent_decoder": self.ae.latent_decoder.state_dict(),
                "token_decoder": self.ae.token_decoder.state_dict(),
                "denoiser": self.denoiser.state_dict(),
            },
            "optimizer": self.optimizer.state_dict(),
            "adaptive": self.adaptive.state_dict(),
            "rng_state": self.generator.get_state(),
            "stats": self.ae.stats.to_dict(),
            "token_encoder_fingerprint": self.encoder_fingerprint,
            "consecutive_skips": self.consecutive_skips,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path, data_train: np.ndarray, data_val: np.ndarray | None = None,
             expect_config: TrainConfig | None = None) -> "JointTrainer":
        payload = load_checkpoint(path)
        cfg = TrainConfig(**payload["config"])
        if expect_config is not None:
            if resume_hash(expect_config) != resume_hash(cfg):
                raise ValueError("config fingerprint mismatch: refusing to resume")
            if expect_config.total_steps < payload["step"]:
                raise ValueError(
                    f"archived step {payload['step']} already past requested total_steps "
                    f"{expect_config.total_steps}")
            cfg = dataclasses.replace(
                cfg, total_steps=expect_config.total_steps,
                log_every=expect_config.log_every, eval_every=expect_config.eval_every,
                checkpoint_every=expect_config.checkpoint_every)
        token_encoder = CausalLM(cfg.vocab_size, cfg.d_h, cfg.enc_layers, cfg.enc_heads,
                                 max_len=cfg.n)
        token_encoder.load_state_dict(payload["models"]["token_encoder"])
        stats = HiddenStats.from_dict(payload["stats"])
        trainer = cls(cfg, token_encoder, stats, data_train, data_val)
        trainer.ae.latent_encoder.load_state_dict(payload["models"]["latent_encoder"])
        trainer.ae.latent_decoder.load_state_dict(payload["models"]["latent_decoder"])
        trainer.ae.token_decoder.load_state_dict(payload["models"]["token_decoder"])
        trainer.denoiser.load_state_dict(payload["models"]["denoiser"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.adaptive.load_state_dict(payload["adaptive"])
        trainer.generator.set_state(payload["rng_state"])
        trainer.step = payload["step"]
        trainer.consecutive_skips = payload.get("consecutive_skips", 0)
        trainer.encoder_fingerprint = payload["token_encoder_fingerprint"]
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a latdiff checkpoint: {path}")
    return payload


def restore_inference_models(payload: dict):
    """Rebuild (config, autoencoder, denoiser) from a joint checkpoint for sampling/eval."""
    cfg = TrainConfig(**payload["config"])
    token_encoder = CausalLM(cfg.vocab_size, cfg.d_h, cfg.enc_layers, cfg.enc_heads,
                             max_len=cfg.n)
    token_encoder.load_state_dict(payload["models"]["token_encoder"])
    stats = HiddenStats.from_dict(payload["stats"])
    ae, denoiser = build_models(cfg, token_encoder, stats)
    ae.latent_encoder.load_state_dict(payload["models"]["latent_encoder"])
    ae.latent_decoder.load_state_dict(payload["models"]["latent_decoder"])
    ae.token_decoder.load_state_dict(payload["models"]["token_decoder"])
    denoiser.load_state_dict(payload["models"]["denoiser"])
    ae.eval()
    denoiser.eval()
    return cfg, ae, denoiser


def posttrain_token_decoder(joint_ckpt_path, data_train: np.ndarray,
                            data_val: np.ndarray | None, steps: int = 3000,
                            sigma_dec: float = 3.0, dec_layers: int = 2,
                            dec_width: int = 128, batch_size: int = 64, lr: float = 3e-4,
                            seed: int = 0, log: RunLog | None = None, out_path=None) -> dict:
    """Train a fresh latent-to-token decoder on noisy latents with cross-entropy only.

    Every upstream module (token encoder, latent encoder/decoder, denoiser) stays
    frozen; their fingerprints are asserted unchanged after the run.
    """
    payload = load_checkpoint(joint_ckpt_path)
    cfg, ae, denoiser = restore_inference_models(payload)
    if sigma_dec < 0:
        raise ValueError("sigma_dec must be >= 0")
    upstream = {"token_encoder": ae.token_encoder, "latent_encoder": ae.latent_encoder,
                "latent_decoder": ae.latent_decoder, "denoiser": denoiser}
    before = {k: parameter_fingerprint(m) for k, m in upstream.items()}
    for m in upstream.values():
        for p in m.parameters():
            p.requires_grad_(False)

    torch.manual_seed(seed)
    decoder = TokenDecoder(cfg.d_z, cfg.vocab_size, width=dec_width, layers=dec_layers,
                           max_len=cfg.n)
    opt = torch.optim.AdamW(decoder.parameters(), lr=lr, betas=(0.9, 0.98), eps=1e-8,
                            weight_decay=0.01)
    gen = torch.Generator().manual_seed(seed + 7)
    ce = torch.nn.CrossEntropyLoss()
    for step in range(steps):
        idx = batch_indices(len(data_train), batch_size, step, seed)
        ids = torch.as_tensor(data_train[idx], dtype=torch.long)
        with torch.no_grad():
            z0 = ae.encode_latent(ae.encode_tokens(ids))
            z_tilde = ae.corrupt_latent(z0, sigma_dec, gen)
        logits = decoder(z_tilde)
        loss = ce(logits.reshape(-1, cfg.vocab_size), ids.reshape(-1))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(decoder.parameters(), 1.0)
        opt.step()
        if log and step % 100 == 0:
            log.write({"kind": "posttrain_step", "step": step, "loss": float(loss.detach())})

    after = {k: parameter_fingerprint(m) for k, m in upstream.items()}
    changed = [k for k in upstream if before[k] != after[k]]
    assert not changed, f"upstream parameters changed during post-training: {changed}"

    result = {"decoder": decoder, "upstream_fingerprints": after, "dec_layers": dec_layers}
    if data_val is not None and len(data_val):
        result["accuracy_post"] = _latent_decode_accuracy(ae, decoder, data_val, batch_size)
        result["accuracy_joint"] = _joint_decode_accuracy(ae, data_val, batch_size)
    if out_path:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "kind": "posttrain",
            "base_config": payload["config"],
            "base_config_hash": payload["config_hash"],
            "decoder": decoder.state_dict(),
            "dec_layers": dec_layers,
            "dec_width": dec_width,
            "sigma_dec": sigma_dec,
            "steps": steps,
            "upstream_fingerprints": after,
            "accuracy": {k: result[k] for k in ("accuracy_post", "accuracy_joint")
                         if k in result},
        }, out_path)
    return result


@torch.no_grad()
def _latent_decode_accuracy(ae, decoder, data, batch_size=64) -> float:
    correct, count = 0, 0
    for start in range(0, min(len(data), 8 * batch_size), batch_size):
        ids = torch.as_tensor(data[start : start + batch_size], dtype=torch.long)
        z0 = ae.encode_latent(ae.encode_tokens(ids))
        pred = decoder(z0).argmax(dim=-1)
        correct += int((pred == ids).sum())
        count += ids.numel()
    return correct / count


@torch.no_grad()
def _joint_decode_accuracy(ae, data, batch_size=64) -> float:
    correct, count = 0, 0
    for start in range(0, min(len(data), 8 * batch_size), batch_size):
        ids = torch.as_tensor(data[start : start + batch_size], dtype=torch.long)
        pred = ae.reconstruct_tokens(ids)
        correct += int((pred == ids).sum())
        count += ids.numel()
    return correct / count


def compute_stats_artifact(encoder: CausalLM, data: np.ndarray,
                           layers=None, max_sequences: int = 10_000) -> dict:
    """Hidden-state statistics for every supported layer, keyed by negative index."""
    layers = layers if layers is not None else range(-1, -encoder.num_layers - 1, -1)
    fp = parameter_fingerprint(encoder)
    return {layer: compute_hidden_stats(data, encoder, layer, max_sequences=max_sequences,
                                        encoder_fingerprint=fp)
            for layer in layers}
