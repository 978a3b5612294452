"""Desk-scale experiment protocols: multi-seed training outcome and the front-end/encoder ablation grid."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pase.corpus import SegmentDataset, desk_inventory, generate_synthetic_corpus
from pase.evaluation import evaluate
from pase.frontend import FrontendConfig
from pase.model import ModelConfig
from pase.trainer import TrainConfig, train

# 64-dim embeddings keep a desk run to a few minutes on one CPU core; the
# visual stack widths scale down with it (see visual_encoder.scaled_stack)
DESK_MODEL = ModelConfig(embed_dim=64)
DESK_CLIPS = 200
DESK_HOLDOUT = 0.2
DESK_MAX_STEPS = 2000
DESK_STOP_LOSS = 0.2


def desk_config(seed: int = 0, steps: int = DESK_MAX_STEPS, variant: str = "stft", encoder: str = "gru",
                stop_loss: float = DESK_STOP_LOSS) -> TrainConfig:
    return TrainConfig(steps=steps, seed=seed, frontend=FrontendConfig(variant=variant), encoder_variant=encoder,
                       model=DESK_MODEL, stop_loss=stop_loss)


def desk_corpus(n_clips: int = DESK_CLIPS, seed: int = 0, holdout: float = DESK_HOLDOUT):
    """Synthetic corpus over the 8-phoneme, 4-class desk inventory, split into (train, held-out)."""
    return generate_synthetic_corpus(n_clips, desk_inventory(), rng_seed=seed).split(holdout)


@dataclass
class RunOutcome:
    seed: int
    steps: int
    seconds: float
    final_loss: float
    retrieval_accuracy: float
    same_viseme_similarity: float
    cross_viseme_similarity: float
    similarity_gap: float

    def to_dict(self):
        return dict(self.__dict__)


def run_seed(config: TrainConfig, train_corpus, heldout_corpus, out_dir=None, eval_seed: int = 0) -> RunOutcome:
    t0 = time.perf_counter()
    result = train(config, train_corpus, out_dir)
    metrics = evaluate(result.model, SegmentDataset(heldout_corpus, config.frontend), 4, eval_seed)
    final = result.metrics[-1]["total"] if result.metrics else float("nan")
    return RunOutcome(config.seed, result.step, time.perf_counter() - t0, final, **metrics)


def desk_outcome(seeds=(0, 1, 2, 3, 4), n_clips: int = DESK_CLIPS, corpus_seed: int = 0, log=None, **cfg_kwargs):
    """Train one model per seed on a shared corpus; returns the per-seed outcomes and their medians."""
    train_corpus, heldout = desk_corpus(n_clips, corpus_seed)
    outcomes = []
    for seed in seeds:
        out = run_seed(desk_config(seed, **cfg_kwargs), train_corpus, heldout)
        outcomes.append(out)
        if log is not None:
            log(out)
    med = {k: float(np.median([getattr(o, k) for o in outcomes]))
           for k in ("retrieval_accuracy", "similarity_gap", "steps", "seconds")}
    return outcomes, med


def run_ablation(steps: int = 100, n_clips: int = 40, seed: int = 0, out_dir=None, log=None) -> list[dict]:
    """Train and evaluate every {stft, mel} x {gru, cnn} cell; one metrics record per cell.

    With ``out_dir`` each cell writes its checkpoint and metric stream to
    ``out_dir/<variant>_<encoder>/`` and a summary goes to ``ablation.jsonl``.
    """
    train_corpus, heldout = desk_corpus(n_clips, seed)
    rows = []
    for variant, encoder in itertools.product(("stft", "mel"), ("gru", "cnn")):
        cfg = desk_config(seed, steps, variant, encoder, stop_loss=0.0)
        cell_dir = Path(out_dir) / f"{variant}_{encoder}" if out_dir is not None else None
        out = run_seed(cfg, train_corpus, heldout, cell_dir)
        row = {"frontend": variant, "encoder": encoder, **out.to_dict()}
        rows.append(row)
        if log is not None:
            log(row)
    if out_dir is not None:
        with open(Path(out_dir) / "ablation.jsonl", "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


__all__ = ["DESK_MODEL", "RunOutcome", "desk_config", "desk_corpus", "desk_outcome", "run_ablation", "run_seed"]
