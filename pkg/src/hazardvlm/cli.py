"""Operator surface: synth / train / eval / predict / probe subcommands.

Configuration is a flat key = value file (# comments) merged with command
line flags; flags win. Exit codes: 0 success, 1 usage or config error,
2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    SynthConfig,
    Vocabulary,
    build_vocab,
    detokenize,
    load_dataset,
    save_dataset,
    split,
    synth_generate,
    tokenize,
)
from .localization import grid_to_pixel, hard_argmax
from .model import HazardModel, ModelConfig
from .optim import DivergenceError, convergence_probe, fitted_loglog_slope, probe_table
from .tensor import Tensor
from .training import (
    HAZARD_PROMPT,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    apply_checkpoint,
    evaluate,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Every tunable, with defaults; serialized as flat key = value text."""

    # model
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    latent_dim: int = 16
    lora_rank: int = 4
    max_caption_len: int = 16
    projector: str = "linear"
    ffn_mult: int = 4
    # localization / loss
    soft_argmax_tau: float = 0.5
    lambda_coord: float = 1.0
    lambda_text: float = 1.0
    # optimizer and schedule
    base_lr: float = 1e-4
    warmup_start_lr: float = 3e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_max_norm: float = 1.0
    # training
    epochs: int = 3
    batch_size: int = 1
    grad_accum_steps: int = 8
    val_fraction: float = 0.2
    mode: str = "pretrain"
    seed: int = 0
    # sampling
    top_p: float = 0.9
    temperature: float = 0.95
    # synthetic generation
    synth_n: int = 250
    blob_sigma: float = 1.0
    blob_peak: float = 0.85
    noise_high: float = 0.3
    # evaluation
    max_samples: int = 0  # 0 means no cap

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            channels=self.channels,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            vocab_size=vocab_size,
            latent_dim=self.latent_dim,
            lora_rank=self.lora_rank,
            max_caption_len=self.max_caption_len,
            projector=self.projector,
            ffn_mult=self.ffn_mult,
        )

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            grad_accum_steps=self.grad_accum_steps,
            base_lr=self.base_lr,
            warmup_start_lr=self.warmup_start_lr,
            warmup_frac=self.warmup_frac,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            clip_max_norm=self.clip_max_norm,
            lambda_coord=self.lambda_coord,
            lambda_text=self.lambda_text,
            soft_argmax_tau=self.soft_argmax_tau,
            seed=self.seed,
            mode=self.mode,
            **overrides,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size,
            channels=self.channels,
            patch_size=self.patch_size,
            blob_sigma=self.blob_sigma,
            blob_peak=self.blob_peak,
            noise_high=self.noise_high,
        )

    def as_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_COERCE = {"int": int, "float": float, "str": str}

REPORTED_HPARAMS = {
    "lora_rank": 8,
    "base_lr": 1e-4,
    "warmup_start_lr": 3e-5,
    "epochs": 3,
    "batch_size": 1,
    "grad_accum_steps": 8,
    "clip_max_norm": 1.0,
    "top_p": 0.9,
    "temperature": 0.95,
    "max_samples": 250,
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key, raw in file_values.items():
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _COERCE[_FIELD_TYPES[key]](raw))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    if getattr(args, "reported_hparams", False):
        for key, value in REPORTED_HPARAMS.items():
            setattr(cfg, key, value)
    # flags win over the file
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_samples(path: str, strict: bool = True):
    samples, errors = load_dataset(path)
    if errors:
        for err in errors:
            print(str(err), file=sys.stderr)
        if strict:
            raise DataError(f"{len(errors)} invalid record(s) in {path}")
    return samples


def _vocab_path(checkpoint: str | Path) -> Path:
    return Path(str(checkpoint) + ".vocab")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = build_run_config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    samples = synth_generate(cfg.synth_n, cfg.synth_config(), seed=cfg.seed)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    samples = _load_samples(args.dataset)
    if not samples:
        raise DataError(f"no samples in {args.dataset}")
    d_train, d_val = split(samples, cfg.val_fraction, seed=cfg.seed)

    if cfg.mode == "lora":
        if not args.init_from:
            raise UsageError("--init-from <base checkpoint> is required for lora mode")
        # token ids must line up with the base embeddings, so the base
        # run's vocabulary is reused; unseen tokens map to <unk>
        base_vocab = _vocab_path(args.init_from)
        if not base_vocab.exists():
            raise DataError(f"vocabulary file {base_vocab} for the base checkpoint not found")
        vocab = Vocabulary.load(base_vocab)
        model = HazardModel(cfg.model_config(len(vocab)), seed=cfg.seed)
        apply_checkpoint(model, load_checkpoint(args.init_from))
        model.enable_lora(seed=cfg.seed)
    else:
        vocab = build_vocab([s.caption for s in samples] + [HAZARD_PROMPT])
        model = HazardModel(cfg.model_config(len(vocab)), seed=cfg.seed)

    overlong = [
        i for i, s in enumerate(samples) if len(tokenize(s.caption, vocab)) - 1 > cfg.max_caption_len
    ]
    if overlong:
        raise DataError(
            f"{len(overlong)} caption(s) exceed max_caption_len={cfg.max_caption_len} "
            f"(first at sample {overlong[0]})"
        )

    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    train_cfg = cfg.train_config(checkpoint_path=args.out, log_path=log_path)

    print(cfg.as_text())
    result = train(model, d_train, d_val, vocab, train_cfg)
    vocab.save(_vocab_path(args.out))

    final = result.val_reports[-1]
    print(f"steps: {len(result.logs)}  final loss: {result.logs[-1].loss_smooth:.4f}")
    print(f"val bleu4={final.bleu4:.4f} rouge1={final.rouge1:.4f} mse={final.mse_pixels:.2f}")
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return EXIT_OK


def _restore_model(cfg: RunConfig, checkpoint: str, vocab_file: str | None):
    vocab_path = Path(vocab_file) if vocab_file else _vocab_path(checkpoint)
    if not vocab_path.exists():
        raise DataError(f"vocabulary file {vocab_path} not found")
    vocab = Vocabulary.load(vocab_path)
    ckpt = load_checkpoint(checkpoint)
    model = HazardModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    if any(name.startswith("lora.") for name in ckpt.tensors):
        model.enable_lora(seed=cfg.seed)
    apply_checkpoint(model, ckpt)
    return model, vocab


def cmd_eval(args) -> int:
    cfg = build_run_config(args)
    model, vocab = _restore_model(cfg, args.checkpoint, args.vocab)
    samples = _load_samples(args.dataset)
    if not samples:
        raise DataError(f"no samples in {args.dataset}")
    report = evaluate(model, samples, vocab, max_samples=cfg.max_samples or None)
    print(report.as_text(), end="")
    if args.out:
        Path(args.out).with_suffix(".txt").write_text(report.as_text(), encoding="utf-8")
        Path(args.out).with_suffix(".json").write_text(report.as_json(), encoding="utf-8")
        print(f"report: {Path(args.out).with_suffix('.txt')} / .json")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = build_run_config(args)
    model, vocab = _restore_model(cfg, args.checkpoint, args.vocab)
    try:
        image = np.load(args.image)
    except Exception as exc:
        raise DataError(f"cannot load image {args.image}: {exc}") from exc
    if image.ndim == 2:
        image = image[None]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise DataError(f"image shape {image.shape} does not match configured {expected}")
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite values")
    feats, amap = model.encode_image(Tensor(image.astype(np.float32)))
    point = grid_to_pixel(hard_argmax(amap), cfg.patch_size, cfg.image_size)

    prompt_ids = tokenize(HAZARD_PROMPT, vocab)
    text_feats = model.encode_text(prompt_ids)
    fused = model.fuse(model.project(feats, "image"), model.project(text_feats, "text"))
    top_p = 0.0 if args.greedy else cfg.top_p
    ids = model.generate(
        fused,
        max_len=cfg.max_caption_len,
        top_p=top_p,
        temperature=cfg.temperature,
        seed=cfg.seed,
    )
    output = f"hazard=({point.x:g}, {point.y:g})\n{detokenize(ids, vocab)}\n"
    print(output, end="")
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    return EXIT_OK


def cmd_probe(args) -> int:
    t_list = [int(v) for v in args.t_list.split(",")]
    rows = convergence_probe(
        args.objective, dims=args.dims, t_list=t_list, seeds=range(args.seeds), lr0=args.lr0
    )
    print(probe_table(rows))
    if args.out:
        lines = [f"{t},{v!r}" for t, v in rows]
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    slope = fitted_loglog_slope(rows)
    if not -3.0 < slope < 0.0:
        print(f"warning: unexpected trend slope {slope:.3f}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the run seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="hazardvlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--n", dest="synth_n", type=int, help="number of samples")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a JSONL dataset")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="CSV log path (default: checkpoint with .csv)")
    p.add_argument("--mode", choices=["pretrain", "lora"], help="training mode")
    p.add_argument("--init-from", help="base checkpoint to adapt (lora mode)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--grad-accum-steps", dest="grad_accum_steps", type=int)
    p.add_argument("--reported-hparams", action="store_true", help="force the reported fine-tuning hyperparameters")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--vocab", help="vocabulary file (default: <checkpoint>.vocab)")
    p.add_argument("--out", help="report path stem (.txt and .json written)")
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--reported-hparams", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="predict hazard point and caption for one image")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".npy image file")
    p.add_argument("--vocab", help="vocabulary file (default: <checkpoint>.vocab)")
    p.add_argument("--greedy", action="store_true", help="deterministic decoding (top_p = 0)")
    p.add_argument("--out", help="also write the prediction to this file")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("probe", help="empirical optimizer convergence trend")
    _add_config_flags(p)
    p.add_argument("--objective", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--dims", type=int, default=10)
    p.add_argument("--t-list", default="100,316,1000,3162,10000")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds to average")
    p.add_argument("--lr0", type=float, default=0.3)
    p.add_argument("--out", help="CSV output path for (T, value) records")
    p.set_defaults(fn=cmd_probe)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, DivergenceError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
