import json
import math
from dataclasses import replace

import pytest
import torch

import pase.trainer as trainer_mod
from pase.corpus import Corpus, generate_synthetic_corpus
from pase.errors import DataError, DivergenceError
from pase.frontend import FrontendConfig
from pase.model import ModelConfig
from pase.trainer import (TrainConfig, finite_difference_check, gradient_errors, load_checkpoint,
                          model_from_checkpoint, save_checkpoint, snapshot, step_seed, train)

TINY = ModelConfig(embed_dim=8, gru_layers=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(8, rng_seed=0)


def tiny_cfg(**kw):
    base = dict(steps=3, batch_size=4, negatives=2, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# configuration

def test_config_dict_round_trip():
    cfg = tiny_cfg(seed=4, frontend=FrontendConfig(variant="mel"), encoder_variant="cnn")
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.model.encoder == "cnn"


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({**tiny_cfg().to_dict(), "momentum": 0.9})


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"batch_size": 0}, {"steps": -1}, {"mask_ratio": 1.0},
                                {"negative_pool": "global"}, {"stop_window": 0}, {"tau": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny_cfg(**kw)


def test_step_seeds_distinct_and_stable():
    seeds = {step_seed(0, s, k) for s in range(50) for k in range(3)}
    assert len(seeds) == 150
    assert step_seed(3, 7, 1) == step_seed(3, 7, 1)


# determinism and resume

def test_identical_runs_are_bit_identical(corpus, tmp_path):
    cfg = tiny_cfg(checkpoint_every=2)
    train(cfg, corpus, tmp_path / "a")
    train(cfg, corpus, tmp_path / "b")
    for name in ("final.ckpt", "step000002.ckpt", "metrics.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_the_run(corpus):
    a = train(tiny_cfg(steps=1, seed=0), corpus)
    b = train(tiny_cfg(steps=1, seed=1), corpus)
    assert not state_equal(a.model, b.model)


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    cfg = tiny_cfg(steps=4, checkpoint_every=2)
    full = train(cfg, corpus, tmp_path / "full")
    resumed = train(cfg, corpus, tmp_path / "resumed", resume=tmp_path / "full" / "step000002.ckpt")
    assert resumed.step == 4
    assert [m["step"] for m in resumed.metrics] == [3, 4]
    assert resumed.metrics == full.metrics[2:]
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "resumed" / "final.ckpt").read_bytes()


def test_resume_rejects_other_inventory(corpus, tmp_path):
    from pase.corpus import PhonemeInventory

    train(tiny_cfg(steps=1), corpus, tmp_path)
    small = Corpus(PhonemeInventory.from_labels(["P", "T"]),
                   [replace(c, intervals=[iv for iv in c.intervals if iv.phoneme in ("P", "T")]) for c in corpus.clips])
    with pytest.raises(DataError):
        train(tiny_cfg(steps=2), small, resume=tmp_path / "final.ckpt")


def test_metrics_stream(corpus, tmp_path):
    res = train(tiny_cfg(), corpus, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines == res.metrics and [l["step"] for l in lines] == [1, 2, 3]
    for rec in lines:
        assert set(rec) == {"step", "total", "con", "rec"}
        assert rec["total"] == pytest.approx(rec["con"] + rec["rec"], rel=1e-6)


def test_zero_steps_leaves_initial_model(corpus, tmp_path):
    res = train(tiny_cfg(steps=0), corpus, tmp_path)
    assert res.step == 0 and res.metrics == []
    from pase.model import build_model

    assert state_equal(res.model, build_model(TINY, FrontendConfig(), len(corpus.inventory), seed=0))
    assert (tmp_path / "final.ckpt").exists()


def test_early_stop(corpus):
    res = train(tiny_cfg(steps=10, stop_loss=100.0, stop_window=2), corpus)
    assert res.step == 2 and len(res.metrics) == 2


def test_training_changes_every_trainable_group(corpus):
    res = train(tiny_cfg(steps=2), corpus)
    from pase.model import build_model

    init = dict(build_model(TINY, FrontendConfig(), len(corpus.inventory), seed=0).named_parameters())
    unchanged = [n for n, p in res.model.named_parameters() if torch.equal(p, init[n])]
    # fill vectors only move when some step is actually masked
    assert all("fill" in n for n in unchanged), unchanged


# checkpoints

def test_checkpoint_round_trip(corpus, tmp_path):
    res = train(tiny_cfg(steps=2), corpus)
    path = save_checkpoint(res.checkpoint, tmp_path / "c.ckpt")
    back = load_checkpoint(path)
    assert back.step == 2 and back.config == res.checkpoint.config and back.n_phonemes == 8
    assert back.inventory.labels == corpus.inventory.labels
    assert back.tensors.keys() == res.checkpoint.tensors.keys()
    for k, v in res.checkpoint.tensors.items():
        assert back.tensors[k].dtype == v.dtype and torch.equal(back.tensors[k], v)
    assert any(k.startswith("optim/") for k in back.tensors)
    save_checkpoint(back, tmp_path / "d.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()
    assert state_equal(model_from_checkpoint(back), res.model)


def test_checkpoint_float64(corpus, tmp_path):
    res = train(tiny_cfg(steps=0), corpus)
    model64 = res.model.double()
    ck = snapshot(model64, None, 0, res.checkpoint.config)
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "x.ckpt"))
    assert all(t.dtype == torch.float64 for t in back.tensors.values() if t.is_floating_point())


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXXXXXX" + b[8:], "not a checkpoint"),
    (lambda b: b[:11], "truncated checkpoint header"),
    (lambda b: b[:8] + b"\x09\x00" + b[10:], "unsupported checkpoint version 9"),
    (lambda b: b[:-5], "truncated checkpoint payload"),
    (lambda b: b + b"\x00", "trailing bytes"),
])
def test_checkpoint_corruption(corpus, tmp_path, mutate, msg):
    res = train(tiny_cfg(steps=0), corpus)
    raw = save_checkpoint(res.checkpoint, tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(mutate(raw))
    with pytest.raises(DataError, match=msg):
        load_checkpoint(tmp_path / "bad.ckpt")


# failure modes

def test_divergence_reports_last_checkpoint(corpus, tmp_path, monkeypatch):
    real = trainer_mod.compute_losses
    calls = {"n": 0}

    def flaky(model, bt, cfg):
        calls["n"] += 1
        out = real(model, bt, cfg)
        if calls["n"] == 3:
            out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(trainer_mod, "compute_losses", flaky)
    with pytest.raises(DivergenceError, match="divergence at step 3") as info:
        train(tiny_cfg(steps=5, checkpoint_every=1), corpus, tmp_path)
    assert info.value.last_checkpoint == tmp_path / "step000002.ckpt"
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_divergent_step_leaves_parameters_untouched(corpus, monkeypatch):
    res = train(tiny_cfg(steps=0), corpus)
    before = {k: v.clone() for k, v in res.model.state_dict().items()}
    ds = trainer_mod.validate_corpus(corpus)
    bt = trainer_mod.prepare_batch(ds, res.model, res.checkpoint.config, 1)
    monkeypatch.setattr(trainer_mod, "compute_losses",
                        lambda m, b, c: {"total": torch.tensor(math.inf), "con": torch.tensor(1.0),
                                         "rec": torch.tensor(math.inf)})
    with pytest.raises(DivergenceError):
        trainer_mod.train_step(res.model, res.optimizer, bt, res.checkpoint.config.contrastive)
    assert all(torch.equal(before[k], v) for k, v in res.model.state_dict().items())


def test_invalid_corpora(corpus):
    with pytest.raises(DataError, match="no clips"):
        train(tiny_cfg(), Corpus(corpus.inventory, []))
    one_class = [replace(c, intervals=[iv for iv in c.intervals if iv.phoneme in ("P", "B")]) for c in corpus.clips]
    with pytest.raises(DataError, match="two viseme classes"):
        train(tiny_cfg(), Corpus(corpus.inventory, one_class))
    no_segments = [replace(c, intervals=[]) for c in corpus.clips]
    with pytest.raises(DataError):
        train(tiny_cfg(), Corpus(corpus.inventory, no_segments))


# gradient checks

def test_gradient_errors_on_smooth_function():
    torch.manual_seed(0)
    w = torch.nn.Parameter(torch.randn(3, 4, dtype=torch.float64))
    b = torch.nn.Parameter(torch.randn(4, dtype=torch.float64))
    x = torch.randn(5, 3, dtype=torch.float64)
    errs = gradient_errors(lambda: torch.tanh(x @ w + b).pow(2).sum(), {"w": w, "b": b})
    assert set(errs) == {"w", "b"} and max(errs.values()) < 1e-7


def test_gradient_errors_detects_wrong_gradient():
    w = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)  # true gradient is 2x

    assert gradient_errors(lambda: Wrong.apply(w), {"w": w})["w"] > 0.4


def test_gradient_errors_skips_frozen_groups():
    w = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
    frozen = torch.nn.Parameter(torch.ones(3, dtype=torch.float64), requires_grad=False)
    empty = torch.nn.Parameter(torch.ones(0, dtype=torch.float64))
    errs = gradient_errors(lambda: (w * frozen).sum() + empty.sum(), {"w": w, "frozen": frozen, "empty": empty})
    assert set(errs) == {"w"}


@pytest.mark.parametrize("eps", [0.0, -1e-5, float("nan"), float("inf")])
def test_invalid_epsilon(eps):
    w = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    with pytest.raises(ValueError, match="invalid epsilon"):
        gradient_errors(lambda: w.sum(), {"w": w}, epsilon=eps)


def test_finite_difference_check_needs_float64(corpus):
    res = train(tiny_cfg(steps=0), corpus)
    ds = trainer_mod.validate_corpus(corpus)
    bt = trainer_mod.probe_batch(ds, res.model)
    with pytest.raises(ValueError, match="float64"):
        finite_difference_check(res.model, bt)
    with pytest.raises(ValueError, match="invalid epsilon"):
        finite_difference_check(res.model.double(), bt, epsilon=0.0)
