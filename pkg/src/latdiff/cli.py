"""Command-line entry points: prepare, pretrain-encoder, train, posttrain-decoder,
sample, eval, probe (plus make-corpus for the bundled synthetic desk corpus).

Exit codes: 0 success, 1 usage/config error, 2 runtime abort.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import corpus as corpus_mod
from . import demo_corpus
from .config import ConfigError, PretrainConfig, TrainConfig, asdict, config_hash, load_config
from .metrics import (OracleLM, evaluate_generations, smoothness_probe, sweep_report,
                      unigram_perplexity)
from .models import CausalLM, TokenDecoder, parameter_fingerprint
from .sampler import SamplerConfig, generate
from .trainer import (CHECKPOINT_FORMAT, JointTrainer, RunLog, TrainingDiverged,
                      compute_stats_artifact, load_checkpoint, load_packed,
                      posttrain_token_decoder, pretrain_token_encoder,
                      restore_inference_models)

ENV_ROOT = "LATDIFF_ARTIFACTS"


class UsageError(Exception):
    """Maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _root() -> Path:
    return Path(os.environ.get(ENV_ROOT, "artifacts"))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, inputs: list, outputs: list,
                    started: float, extra: dict | None = None):
    manifest = {
        "command": command,
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in args.items()
                 if k != "func"},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.time() - started, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _cleanup(paths):
    for p in paths:
        Path(p).unlink(missing_ok=True)


def _load_encoder_checkpoint(path) -> tuple[CausalLM, dict]:
    payload = load_checkpoint(path)
    if payload.get("kind") != "encoder":
        raise UsageError(f"{path} is not an encoder checkpoint")
    cfg = PretrainConfig(**payload["config"])
    model = CausalLM(cfg.vocab_size, cfg.d_h, cfg.enc_layers, cfg.enc_heads, max_len=cfg.n)
    model.load_state_dict(payload["models"]["token_encoder"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, payload


def cmd_make_corpus(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = demo_corpus.generate_corpus(args.tokens, seed=args.seed)
    out.write_text(text)
    _write_manifest(out.parent, "make-corpus", vars(args), [], [out], started,
                    {"seed": args.seed})
    print(f"wrote {out} ({args.tokens}+ tokens, seed {args.seed})")
    return 0


def cmd_prepare(args) -> int:
    started = time.time()
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise UsageError(f"corpus file not readable: {corpus_path}")
    data_dir = Path(args.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    created = []
    try:
        text = corpus_path.read_text()
        tokenizer = corpus_mod.WordTokenizer.fit(text, max_vocab=args.max_vocab)
        stream = corpus_mod.tokenize_corpus(text, tokenizer)
        chunks = corpus_mod.pack_chunks(stream, args.n).astype(np.uint16)

        fracs = [float(x) for x in args.splits.split(",")]
        if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-9:
            raise UsageError(f"--splits must be three fractions summing to 1, got {args.splits}")
        n_train = int(len(chunks) * fracs[0])
        n_val = int(len(chunks) * fracs[1])
        splits = {"train": chunks[:n_train], "val": chunks[n_train : n_train + n_val],
                  "oracle": chunks[n_train + n_val :]}
        for name, arr in splits.items():
            path = data_dir / f"{name}.npy"
            np.save(path, arr)
            created.append(path)
        vocab_path = data_dir / "vocab.json"
        tokenizer.save(vocab_path)
        created.append(vocab_path)
        meta = {
            "n": args.n,
            "vocab_size": tokenizer.vocab_size,
            "num_chunks": {k: int(len(v)) for k, v in splits.items()},
            "dropped_tokens": int(len(stream) - chunks.size),
            "splits": fracs,
            "corpus_sha256": _sha256(corpus_path),
        }
        meta_path = data_dir / "dataset.json"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        created.append(meta_path)

        outputs = list(created)
        if args.encoder:
            encoder, _ = _load_encoder_checkpoint(args.encoder)
            if encoder.vocab_size != tokenizer.vocab_size:
                raise UsageError("encoder vocab_size does not match the prepared dataset")
            stats = compute_stats_artifact(encoder, splits["train"],
                                           max_sequences=args.stats_cap)
            stats_path = Path(args.stats_out or data_dir / "stats.json")
            corpus_mod.save_stats(stats_path, stats)
            outputs.append(stats_path)
        _write_manifest(data_dir, "prepare", vars(args), [corpus_path], outputs, started, meta)
        print(f"prepared {meta['num_chunks']} chunks (|V|={tokenizer.vocab_size}, "
              f"n={args.n}) in {data_dir}")
        return 0
    except Exception:
        _cleanup(created)
        raise


def cmd_pretrain_encoder(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    meta = json.loads((data_dir / "dataset.json").read_text())
    train = load_packed(data_dir / f"{args.split}.npy")
    val = load_packed(data_dir / "val.npy")
    cfg = PretrainConfig(seed=args.seed, n=meta["n"], vocab_size=meta["vocab_size"],
                         total_steps=args.steps, batch_size=args.batch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = RunLog(out.with_suffix(".log.jsonl"))
    try:
        result = pretrain_token_encoder(cfg, train, val, log=log)
    finally:
        log.close()
    model = result["model"]
    uni = unigram_perplexity(train, val, cfg.vocab_size)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "encoder",
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "models": {"token_encoder": model.state_dict()},
        "val_ppl": result["val_ppl"],
        "unigram_ppl": uni,
        "fingerprint": result["summary"]["fingerprint"],
    }
    torch.save(payload, out)
    outputs = [out]
    emit_stats = args.emit_stats if args.emit_stats is not None else args.split == "train"
    if emit_stats:
        stats = compute_stats_artifact(model, load_packed(data_dir / "train.npy"),
                                       max_sequences=args.stats_cap)
        stats_path = Path(args.stats_out or data_dir / "stats.json")
        corpus_mod.save_stats(stats_path, stats)
        outputs.append(stats_path)
    _write_manifest(out.parent, "pretrain-encoder", vars(args),
                    [data_dir / f"{args.split}.npy"], outputs, started,
                    {"val_ppl": result["val_ppl"], "unigram_ppl": uni, "seed": args.seed})
    print(f"pretrained encoder on split={args.split}: val PPL {result['val_ppl']:.2f} "
          f"(unigram baseline {uni:.2f}) -> {out}")
    return 0


_TRAIN_OVERRIDES = ["seed", "total_steps", "batch_size", "loss_mode", "timestep_mode",
                    "s_wu", "sigma_dec", "self_cond_prob", "encoder_layer", "lr",
                    "latent_arch", "eval_every", "log_every"]


def _resolve_train_config(args, meta) -> TrainConfig:
    overrides = {name: getattr(args, name) for name in _TRAIN_OVERRIDES}
    if args.no_stop_gradient:
        overrides["stop_gradient"] = False
    overrides["n"] = meta["n"]
    overrides["vocab_size"] = meta["vocab_size"]
    if args.config:
        return load_config(args.config, TrainConfig, overrides)
    try:
        return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    except TypeError as e:
        raise ConfigError(str(e)) from e


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    meta = json.loads((data_dir / "dataset.json").read_text())
    cfg = _resolve_train_config(args, meta)
    train = load_packed(data_dir / "train.npy")
    val = load_packed(data_dir / "val.npy")
    run_dir = Path(args.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoint.pt"

    if args.resume:
        if not ckpt_path.exists():
            raise UsageError(f"--resume given but no checkpoint at {ckpt_path}")
        trainer = JointTrainer.load(ckpt_path, train, val, expect_config=cfg)
    else:
        encoder, enc_payload = _load_encoder_checkpoint(args.encoder)
        if encoder.vocab_size != cfg.vocab_size:
            raise UsageError("encoder vocab_size does not match dataset")
        stats_by_layer = corpus_mod.load_stats(args.stats or data_dir / "stats.json")
        if cfg.encoder_layer not in stats_by_layer:
            raise UsageError(f"stats artifact has no layer {cfg.encoder_layer}")
        stats = stats_by_layer[cfg.encoder_layer]
        if stats.encoder_fingerprint and stats.encoder_fingerprint != enc_payload["fingerprint"]:
            raise UsageError("stats artifact was computed with a different encoder")
        trainer = JointTrainer(cfg, encoder, stats, train, val)

    (run_dir / "config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))
    log = RunLog(run_dir / "runlog.jsonl")
    try:
        summary = trainer.run(log=log, checkpoint_path=ckpt_path)
    finally:
        log.close()
    _write_manifest(run_dir, "train", vars(args), [data_dir / "train.npy"],
                    [ckpt_path, run_dir / "runlog.jsonl"], started,
                    {"config_hash": config_hash(cfg), "seed": cfg.seed, "summary": summary})
    print(f"trained {summary['steps']} steps -> {ckpt_path} "
          f"(recon acc {summary.get('recon_accuracy', float('nan')):.4f})")
    return 0


def cmd_posttrain_decoder(args) -> int:
    started = time.time()
    data_dir = Path(args.data_dir)
    train = load_packed(data_dir / "train.npy")
    val = load_packed(data_dir / "val.npy")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = RunLog(out.with_suffix(".log.jsonl"))
    try:
        result = posttrain_token_decoder(args.checkpoint, train, val, steps=args.steps,
                                         sigma_dec=args.sigma_dec, dec_layers=args.layers,
                                         batch_size=args.batch_size, seed=args.seed,
                                         log=log, out_path=out)
    finally:
        log.close()
    _write_manifest(out.parent, "posttrain-decoder", vars(args), [Path(args.checkpoint)],
                    [out], started,
                    {"accuracy_post": result.get("accuracy_post"),
                     "accuracy_joint": result.get("accuracy_joint"), "seed": args.seed})
    print(f"post-trained {args.layers}-layer decoder -> {out} "
          f"(clean-latent acc {result.get('accuracy_post', float('nan')):.4f} vs joint "
          f"{result.get('accuracy_joint', float('nan')):.4f})")
    return 0


def _load_posttrain_decoder(path, cfg) -> TokenDecoder:
    payload = load_checkpoint(path)
    if payload.get("kind") != "posttrain":
        raise UsageError(f"{path} is not a post-trained decoder checkpoint")
    decoder = TokenDecoder(cfg.d_z, cfg.vocab_size, width=payload["dec_width"],
                           layers=payload["dec_layers"], max_len=cfg.n)
    decoder.load_state_dict(payload["decoder"])
    decoder.eval()
    return decoder


def cmd_sample(args) -> int:
    started = time.time()
    if args.num_steps < 1:
        raise UsageError(f"--num-steps must be >= 1, got {args.num_steps}")
    payload = load_checkpoint(args.checkpoint)
    cfg, ae, denoiser = restore_inference_models(payload)
    tokenizer = corpus_mod.WordTokenizer.load(args.vocab) if args.vocab else None
    if tokenizer and tokenizer.vocab_size != cfg.vocab_size:
        raise UsageError(f"vocab size mismatch: tokenizer {tokenizer.vocab_size} vs "
                         f"checkpoint {cfg.vocab_size}")
    decoder = _load_posttrain_decoder(args.decoder, cfg) if args.decoder else None
    from .diffusion import get_schedule

    schedule = get_schedule(cfg.schedule)
    sampler_cfg = SamplerConfig(num_steps=args.num_steps, seed=args.seed, batch=args.count,
                                self_cond=not args.no_self_cond, greedy=args.greedy)
    tokens, _, info = generate(sampler_cfg, ae, denoiser, schedule,
                               latent_token_decoder=decoder)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_fp = payload["config_hash"]
    with out.open("w") as fh:
        for i in range(tokens.shape[0]):
            ids = [int(x) for x in tokens[i]]
            record = {"token_ids": ids, "seed": args.seed, "num_steps": args.num_steps,
                      "nfe_per_sequence": info["nfe_per_sequence"],
                      "checkpoint_fingerprint": ckpt_fp}
            if tokenizer:
                record["text"] = tokenizer.decode(ids)
            fh.write(json.dumps(record) + "\n")
    _write_manifest(out.parent, "sample", vars(args), [Path(args.checkpoint)], [out],
                    started, {"seed": args.seed, "nfe_per_sequence": info["nfe_per_sequence"]})
    print(f"wrote {tokens.shape[0]} generations ({args.num_steps} steps) -> {out}")
    return 0


def _write_reports(out_dir: Path, records: list, summary: list, protocol: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    rec_path = out_dir / "records.jsonl"
    with rec_path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    sum_path = out_dir / "summary.csv"
    if summary:
        cols = list(summary[0])
        lines = [",".join(cols)]
        for row in summary:
            lines.append(",".join(str(row[c]) for c in cols))
        sum_path.write_text("\n".join(lines) + "\n")
    (out_dir / "protocol.json").write_text(json.dumps(protocol, indent=2, sort_keys=True))
    return [rec_path, sum_path]


def cmd_eval(args) -> int:
    started = time.time()
    encoder, _ = _load_encoder_checkpoint(args.oracle)
    oracle = OracleLM(encoder)
    out_dir = Path(args.out_dir)
    if args.generations:
        lines = [json.loads(line) for line in Path(args.generations).read_text().splitlines()
                 if line.strip()]
        if not lines:
            raise UsageError(f"no generation records in {args.generations}")
        groups: dict[tuple, list] = {}
        for rec in lines:
            groups.setdefault((rec["num_steps"], rec["seed"]), []).append(rec["token_ids"])
        records = []
        for (num_steps, seed), seqs in sorted(groups.items()):
            report = evaluate_generations(np.array(seqs), oracle, num_steps, seed)
            records.append(report.to_dict())
        outputs = _write_reports(out_dir, records, [], {"mode": "generations"})
        inputs = [Path(args.generations)]
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --generations or --checkpoint for sweep mode")
        payload = load_checkpoint(args.checkpoint)
        cfg, ae, denoiser = restore_inference_models(payload)
        from .diffusion import get_schedule

        steps = [int(s) for s in args.steps.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
        result = sweep_report(ae, denoiser, get_schedule(cfg.schedule), oracle, steps,
                              seeds, texts_per_seed=args.count)
        outputs = _write_reports(out_dir, result["records"], result["summary"],
                                 result["protocol"])
        inputs = [Path(args.checkpoint)]
    _write_manifest(out_dir, "eval", vars(args), inputs, outputs, started)
    print(f"wrote metric reports -> {out_dir}")
    return 0


def cmd_probe(args) -> int:
    started = time.time()
    payload = load_checkpoint(args.checkpoint)
    cfg, ae, _ = restore_inference_models(payload)
    encoder, _ = _load_encoder_checkpoint(args.oracle)
    oracle = OracleLM(encoder)
    data = load_packed(Path(args.data_dir) / "val.npy")
    rng = np.random.default_rng(args.seed)
    if 2 * args.pairs > len(data):
        raise UsageError(f"need {2 * args.pairs} sequences for {args.pairs} pairs, "
                         f"val split has {len(data)}")
    idx = rng.choice(len(data), size=2 * args.pairs, replace=False)
    pairs = [(data[idx[2 * i]], data[idx[2 * i + 1]]) for i in range(args.pairs)]
    alphas = [float(a) for a in args.alphas.split(",")]
    curve = smoothness_probe(pairs, ae, alphas, oracle)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "curve.csv"
    curve_path.write_text("alpha,gen_ppl\n" +
                          "\n".join(f"{r['alpha']},{r['gen_ppl']}" for r in curve) + "\n")
    (out_dir / "curve.json").write_text(json.dumps(curve, indent=2))
    _write_manifest(out_dir, "probe", vars(args), [Path(args.checkpoint)],
                    [curve_path], started, {"seed": args.seed})
    print(f"wrote {len(curve)}-point smoothness curve -> {curve_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="latdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    root = _root()

    p = sub.add_parser("make-corpus", help="write the synthetic desk-scale corpus")
    p.add_argument("--out", default=root / "corpus.txt")
    p.add_argument("--tokens", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("prepare", help="tokenize, pack, split, and (optionally) compute stats")
    p.add_argument("--corpus", required=True)
    p.add_argument("--data-dir", default=root / "data")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--max-vocab", type=int, default=512)
    p.add_argument("--splits", default="0.8,0.05,0.15", help="train,val,oracle fractions")
    p.add_argument("--encoder", default=None, help="encoder checkpoint for stats")
    p.add_argument("--stats-out", default=None)
    p.add_argument("--stats-cap", type=int, default=10_000)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain-encoder", help="next-token pretraining (encoder or oracle)")
    p.add_argument("--data-dir", default=root / "data")
    p.add_argument("--split", default="train", choices=["train", "oracle"])
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-stats", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--stats-out", default=None)
    p.add_argument("--stats-cap", type=int, default=10_000)
    p.set_defaults(func=cmd_pretrain_encoder)

    p = sub.add_parser("train", help="joint training of latent coder stack and denoiser")
    p.add_argument("--data-dir", default=root / "data")
    p.add_argument("--encoder", default=None, help="frozen encoder checkpoint")
    p.add_argument("--stats", default=None, help="hidden-stats artifact (default data-dir)")
    p.add_argument("--config", default=None, help="YAML config; flags override")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--loss-mode", default=None, choices=["MSE", "CE", "CE+MSE"])
    p.add_argument("--no-stop-gradient", action="store_true")
    p.add_argument("--timestep-mode", default=None, choices=["uniform", "adaptive"])
    p.add_argument("--s-wu", type=int, default=None)
    p.add_argument("--sigma-dec", type=float, default=None)
    p.add_argument("--self-cond-prob", type=float, default=None)
    p.add_argument("--encoder-layer", type=int, default=None)
    p.add_argument("--latent-arch", default=None, choices=["resampler", "self_attention"])
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("posttrain-decoder", help="CE-only decoder training on noisy latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=root / "data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--sigma-dec", type=float, default=3.0)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_posttrain_decoder)

    p = sub.add_parser("sample", help="generate token sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None, help="vocab.json for detokenized text")
    p.add_argument("--out", required=True)
    p.add_argument("--num-steps", type=int, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoder", default=None, help="post-trained decoder checkpoint")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--no-self-cond", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metric reports for generations or an NFE sweep")
    p.add_argument("--oracle", required=True, help="oracle encoder checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--generations", default=None, help="JSONL from `sample`")
    p.add_argument("--checkpoint", default=None, help="sweep mode: joint checkpoint")
    p.add_argument("--steps", default="8,32,128", help="sweep mode: NFE list")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--count", type=int, default=200, help="texts per seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="latent-interpolation smoothness curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--data-dir", default=root / "data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, NotImplementedError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
