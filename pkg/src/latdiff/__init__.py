"""latdiff: joint latent-diffusion text generation at desk scale.

A frozen causal token encoder feeds a trainable latent encoder whose output is
modeled by a continuous x0-prediction diffusion denoiser; a latent decoder and
token decoder map generated latents back to text. Training jointly optimizes the
diffusion, hidden-state reconstruction, and token cross-entropy losses with a
diffusion-to-encoder warmup gate, adaptive timestep sampling, and decoder-input
noise.
"""

__version__ = "0.1.0"

from .adaptive import AdaptiveSampler
from .autoencoder import LatentAutoencoder, interpolate_latents
from .config import PretrainConfig, TrainConfig
from .corpus import (ByteTokenizer, HiddenStats, WordTokenizer, compute_hidden_stats,
                     denormalize_hidden, normalize_hidden, pack_chunks, tokenize_corpus)
from .diffusion import (NoiseSchedule, WarmupSchedule, forward_noise, gate_gradient,
                        get_schedule, loss_diff, nelbo_estimate, self_cond_train_pass)
from .metrics import (MetricReport, OracleLM, UniformOracle, gen_ppl, mauve,
                      mean_unigram_entropy, ngram_diversity, smoothness_probe,
                      sweep_report, unigram_entropy)
from .models import CausalLM, Denoiser, Resampler, TokenDecoder
from .sampler import SamplerConfig, em_step, generate, score_from_x0
from .trainer import (JointTrainer, RunLog, TrainingDiverged, load_checkpoint,
                      posttrain_token_decoder, pretrain_token_encoder)
