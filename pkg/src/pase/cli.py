"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import tomli

from pase.errors import DataError, DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

# flag dest -> (config section, key)
FLAG_KEYS = {
    "seed": ("train", "seed"),
    "steps": ("train", "steps"),
    "encoder": ("train", "encoder_variant"),
    "frontend": ("frontend", "variant"),
    "out": ("io", "out"),
    "ckpt": ("io", "ckpt"),
    "audio": ("io", "audio"),
    "corpus": ("io", "corpus"),
    "clips": ("data", "clips"),
}
IO_KEYS = {"out", "ckpt", "audio", "corpus"}
DATA_KEYS = {"clips", "holdout"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pase", description="Phoneme-aware speech encoder: data, training, evaluation, export.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_, *flags):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", type=Path, help="TOML config file; flags override its values")
        for f in flags:
            FLAG_ADDERS[f](sp)
        return sp

    cmd("synth-data", "Generate the synthetic phoneme/viseme corpus.", "clips", "seed", "out")
    cmd("train", "Train an encoder; writes checkpoints and metrics.jsonl to --out.",
        "corpus", "clips", "seed", "steps", "frontend", "encoder", "out")
    cmd("eval", "Retrieval accuracy and same/cross-viseme similarity on a corpus.", "ckpt", "corpus", "seed")
    cmd("extract", "Export 25 fps per-frame features for a WAV file.", "ckpt", "audio", "out")
    cmd("project", "PCA scatter plot (SVG) of segment audio embeddings.", "ckpt", "corpus", "out")
    cmd("inspect-checkpoint", "Print a checkpoint's step, config and tensors.", "ckpt")
    return p


FLAG_ADDERS = {
    "clips": lambda sp: sp.add_argument("--clips", type=int, help="number of synthetic clips (default 200)"),
    "seed": lambda sp: sp.add_argument("--seed", type=int, help="random seed (default 0)"),
    "steps": lambda sp: sp.add_argument("--steps", type=int, help="training steps"),
    "out": lambda sp: sp.add_argument("--out", type=Path, help="output path"),
    "ckpt": lambda sp: sp.add_argument("--ckpt", type=Path, help="checkpoint file"),
    "audio": lambda sp: sp.add_argument("--audio", type=Path, help="16-bit mono WAV file"),
    "corpus": lambda sp: sp.add_argument("--corpus", type=Path,
                                         help="corpus directory (train: synthesized in memory when omitted)"),
    "frontend": lambda sp: sp.add_argument("--frontend", choices=("stft", "mel"), help="spectrogram variant"),
    "encoder": lambda sp: sp.add_argument("--encoder", choices=("gru", "cnn"), help="audio encoder variant"),
}


def load_config(args) -> dict:
    """Config file sections merged with flag overrides: ``{"train": {...}, "frontend": {...}, ...}``."""
    cfg = {"train": {}, "frontend": {}, "model": {}, "io": {}, "data": {}}
    if getattr(args, "config", None) is not None:
        try:
            with open(args.config, "rb") as f:
                raw = tomli.load(f)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except tomli.TOMLDecodeError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
        for section, values in raw.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"{args.config}: unknown config section [{section}]")
            cfg[section].update(values)
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    for key in cfg["io"]:
        if key not in IO_KEYS:
            raise UsageError(f"unknown [io] key {key!r}")
    for key in cfg["data"]:
        if key not in DATA_KEYS:
            raise UsageError(f"unknown [data] key {key!r}")
    return cfg


def train_config(cfg: dict):
    from pase.frontend import FrontendConfig
    from pase.model import ModelConfig
    from pase.trainer import TrainConfig

    def build(cls, values, section):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown [{section}] keys: {sorted(unknown)}")
        return cls(**values)

    try:
        frontend = build(FrontendConfig, cfg["frontend"], "frontend")
        model = build(ModelConfig, cfg["model"], "model")
        tc = dict(cfg["train"])
        if {"frontend", "model"} & set(tc):
            raise UsageError("[train] may not contain frontend/model; use their own sections")
        return build(TrainConfig, {**tc, "frontend": frontend, "model": model}, "train")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(f"invalid configuration: {exc}") from exc


def _need(cfg, key):
    value = cfg["io"].get(key)
    if value is None:
        raise UsageError(f"--{key} is required")
    return Path(value)


def _out(line=""):
    sys.stdout.write(line + "\n")


def _corpus_for(cfg, seed):
    from pase.corpus import generate_synthetic_corpus, load_corpus

    if cfg["io"].get("corpus") is not None:
        return load_corpus(cfg["io"]["corpus"])
    return generate_synthetic_corpus(int(cfg["data"].get("clips", 200)), rng_seed=seed)


def cmd_synth_data(cfg):
    from pase.corpus import generate_synthetic_corpus, save_corpus

    out = _need(cfg, "out")
    clips = int(cfg["data"].get("clips", 200))
    seed = int(cfg["train"].get("seed", 0))
    if clips < 1:
        raise UsageError("--clips must be positive")
    corpus = generate_synthetic_corpus(clips, rng_seed=seed)
    save_corpus(corpus, out)
    _out(f"clips={len(corpus.clips)} phonemes={len(corpus.inventory)} out={out}")


def cmd_train(cfg):
    from pase.trainer import train

    tc = train_config(cfg)
    out = _need(cfg, "out")
    corpus = _corpus_for(cfg, tc.seed)
    holdout = float(cfg["data"].get("holdout", 0.0))
    if holdout:
        corpus, _ = corpus.split(holdout)
    first = {}

    def log(rec):
        if not first:
            first.update(rec)

    result = train(tc, corpus, out, log=log)
    if result.metrics:
        last = result.metrics[-1]
        _out(f"initial_loss={first['total']:.6f} final_loss={last['total']:.6f} steps={result.step}")
    _out(f"checkpoint={result.checkpoint_path}")


def _load_model(cfg):
    from pase.trainer import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(_need(cfg, "ckpt"))
    model = model_from_checkpoint(ckpt)
    model.eval()
    return ckpt, model


def cmd_eval(cfg):
    from pase.corpus import SegmentDataset, load_corpus
    from pase.evaluation import ambiguity_report, retrieval_accuracy

    corpus_dir = _need(cfg, "corpus")
    _, model = _load_model(cfg)
    corpus = load_corpus(corpus_dir)
    ds = SegmentDataset(corpus, model.frontend)
    seed = int(cfg["train"].get("seed", 0))
    acc = retrieval_accuracy(model, ds, 4, seed)
    report = ambiguity_report(model, ds)
    sys.stderr.write(report.to_text() + "\n")
    _out(f"retrieval_accuracy={acc:.6f}")
    for line in report.to_records():
        _out(line)


def cmd_extract(cfg):
    from pase.evaluation import export_features, extract_features
    from pase.frontend import read_wav

    audio_path, out = _need(cfg, "audio"), _need(cfg, "out")
    _, model = _load_model(cfg)
    audio, sr = read_wav(audio_path)
    if sr != model.frontend.sample_rate_hz:
        raise DataError(f"{audio_path}: {sr} Hz audio, model expects {model.frontend.sample_rate_hz} Hz")
    track = extract_features(audio, model, source_audio=str(audio_path))
    export_features(track, out)
    _out(f"frames={len(track)} dim={track.dim} fps={track.fps} out={out}")


def cmd_project(cfg):
    from pase.corpus import SegmentDataset, load_corpus
    from pase.evaluation import audio_embeddings, project_embeddings

    corpus_dir, out = _need(cfg, "corpus"), _need(cfg, "out")
    _, model = _load_model(cfg)
    ds = SegmentDataset(load_corpus(corpus_dir), model.frontend)
    emb = audio_embeddings(model, ds).double().numpy()
    labels = [ds.inventory.labels[i] for i in ds.phoneme_ids]
    proj = project_embeddings(emb, labels, out)
    _out(f"points={len(proj.points)} variance_pc1={proj.variances[0]:.6g} variance_pc2={proj.variances[1]:.6g} out={out}")


def cmd_inspect(cfg):
    from pase.trainer import load_checkpoint

    ckpt = load_checkpoint(_need(cfg, "ckpt"))
    _out(f"step={ckpt.step}")
    _out(f"n_phonemes={ckpt.n_phonemes}")
    _out("config=" + json.dumps(ckpt.config.to_dict(), sort_keys=True))
    n_params = 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        if name.startswith("model/"):
            n_params += t.numel()
        _out(f"tensor={name} shape={'x'.join(map(str, t.shape)) or 'scalar'} dtype={str(t.dtype).replace('torch.', '')}")
    _out(f"model_parameters={n_params}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract": cmd_extract,
    "project": cmd_project,
    "inspect-checkpoint": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        COMMANDS[args.command](cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except DivergenceError as exc:
        where = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        sys.stderr.write(f"pase: {exc}{where}\n")
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        sys.stderr.write(f"pase: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
