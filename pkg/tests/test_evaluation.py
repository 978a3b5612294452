import hashlib
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pase.corpus import SegmentDataset, generate_synthetic_corpus
from pase.errors import DataError, FeatureFileError
from pase.evaluation import (FeatureTrack, ambiguity_report, context_windows, decode_features, draw_distractors,
                             encode_features, evaluate, export_features, extract_features, import_features, pca_2d,
                             project_embeddings, retrieval_accuracy, retrieval_scores)
from pase.frontend import FrontendConfig
from pase.model import ModelConfig, build_model


@pytest.fixture(scope="module")
def dataset():
    return SegmentDataset(generate_synthetic_corpus(16, rng_seed=3))


@pytest.fixture(scope="module")
def tiny_model():
    model = build_model(ModelConfig(embed_dim=8, gru_layers=2), FrontendConfig(), 8, seed=0)
    model.eval()
    return model


class LookupModel:
    """Embeds every input as a fixed vector looked up from its bytes.

    ``audio_vec`` / ``visual_vec`` map a segment index to a vector; fusion is
    the plain mean of the valid visual rows.
    """

    dtype = torch.float32

    def __init__(self, dataset, audio_vec, visual_vec, scale=1.0):
        self.frontend = dataset.frontend
        self.scale = scale
        self.audio = {self._key(s): audio_vec(i) for i, s in enumerate(dataset.spectrograms)}
        self.visual = {}
        for i in range(len(dataset)):
            for w in dataset.windows(i):
                self.visual[self._key(w)] = visual_vec(i)

    @staticmethod
    def _key(arr):
        return hashlib.sha1(np.ascontiguousarray(arr, dtype=np.float32).tobytes()).hexdigest()

    def embed_audio(self, spec, lengths):
        pooled = torch.stack([torch.as_tensor(self.audio[self._key(s[:n].numpy())]) for s, n in zip(spec, lengths)])
        return pooled[:, None], self.scale * pooled, torch.ones_like(lengths)

    def embed_visual(self, windows):
        return torch.stack([torch.as_tensor(self.visual[self._key(w.numpy())]) for w in windows])

    def fuse(self, a_p, ids, vis, valid):
        w = valid.to(vis.dtype)[..., None]
        return (vis * w).sum(1) / w.sum(1)


def onehot(n, i):
    v = np.zeros(n, dtype=np.float32)
    v[i] = 1.0
    return v


def viseme_oracle(ds, scale=1.0):
    return LookupModel(ds, lambda i: onehot(4, ds.viseme_ids[i]), lambda i: onehot(4, ds.viseme_ids[i]), scale)


def random_model(ds, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((len(ds), 16)).astype(np.float32)
    v = rng.standard_normal((len(ds), 16)).astype(np.float32)
    return LookupModel(ds, lambda i: a[i], lambda i: v[i], scale)


# feature files

@given(frames=st.integers(0, 40).flatmap(
    lambda n: arrays(np.float32, (n, 6), elements=st.floats(-1e6, 1e6, width=32))))
@settings(max_examples=100, deadline=None)
def test_feature_round_trip(frames):
    track = FeatureTrack(frames)
    back = decode_features(encode_features(track))
    assert back.fps == 25 and back.dim == 6
    assert back.frames.tobytes() == track.frames.tobytes()


def test_feature_file_on_disk(tmp_path):
    track = FeatureTrack(np.arange(12, dtype=np.float32).reshape(4, 3))
    path = export_features(track, tmp_path / "f.bin")
    assert path.stat().st_size == 14 + 48
    back = import_features(path)
    assert np.array_equal(back.frames, track.frames) and back.source_audio == str(path)


def _header(version=1, dim=3, fps=25, count=2, magic=b"PASE"):
    return struct.pack("<4sHHHI", magic, version, dim, fps, count)


@pytest.mark.parametrize("raw,code", [
    (b"RIFF" + bytes(20), "bad_magic"),
    (b"PA", "truncated_header"),
    (_header()[:10], "truncated_header"),
    (_header(version=2) + bytes(24), "bad_version"),
    (_header(dim=0, count=0), "inconsistent_header"),
    (_header(fps=30) + bytes(24), "inconsistent_header"),
    (_header() + bytes(28), "inconsistent_header"),  # more payload than declared
    (_header(dim=4, count=2) + bytes(24), "inconsistent_header"),  # two rows of width 3
    (_header() + bytes(21), "truncated_payload"),
    (_header(), "truncated_payload"),
])
def test_feature_file_errors(raw, code):
    with pytest.raises(FeatureFileError) as info:
        decode_features(raw)
    assert info.value.code == code
    assert isinstance(info.value, DataError)


def test_feature_track_validation():
    with pytest.raises(DataError):
        FeatureTrack(np.zeros(5))
    with pytest.raises(DataError):
        FeatureTrack(np.array([[np.nan]]))


# context windows and extraction

def test_context_windows_centred():
    audio = np.arange(1, 1601, dtype=np.float64)
    w = context_windows(audio, 16000)
    assert w.shape == (3, 3200)
    # frame 0 is centred on sample 0: half a window of padding precedes it
    assert np.all(w[0, :1600] == 0) and w[0, 1600] == 1.0
    assert w[1, 1600] == audio[640] and w[2, 1600] == audio[1280]


def test_context_windows_short_audio():
    with pytest.raises(DataError):
        context_windows(np.zeros(639), 16000)
    with pytest.raises(DataError):
        context_windows(np.zeros(1000), 16001)


@pytest.mark.parametrize("seconds,rows", [(1.0, 25), (0.04, 1), (0.5, 13), (2.0, 50)])
def test_extract_frame_count(tiny_model, seconds, rows):
    audio = np.random.default_rng(0).standard_normal(int(seconds * 16000)) * 0.1
    track = extract_features(audio, tiny_model)
    assert track.frames.shape == (rows, 8) and track.fps == 25


def test_extract_shift_by_one_frame(tiny_model):
    audio = np.random.default_rng(1).standard_normal(8000) * 0.1
    base = extract_features(audio, tiny_model).frames
    shifted = extract_features(np.concatenate([np.zeros(640), audio]), tiny_model).frames
    assert len(shifted) == len(base) + 1
    np.testing.assert_allclose(shifted[1:], base, atol=1e-5)


def test_extract_silence_with_zero_model():
    model = build_model(ModelConfig(embed_dim=8, gru_layers=2), FrontendConfig(), 8)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    track = extract_features(np.zeros(16000), model)
    assert track.frames.shape == (25, 8) and np.all(track.frames == 0)


# retrieval

def test_distractors_from_other_classes():
    vis = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    d = draw_distractors(vis, 4, seed=0)
    assert d.shape == (8, 4)
    for i, row in enumerate(d):
        assert len(set(row)) == 4 and np.all(vis[row] != vis[i])
    assert np.array_equal(d, draw_distractors(vis, 4, seed=0))
    with pytest.raises(DataError, match="insufficient distractors"):
        draw_distractors(vis, 7)


def test_oracle_retrieval_is_perfect(dataset):
    assert retrieval_accuracy(viseme_oracle(dataset), dataset, 4) == 1.0


def test_random_model_is_at_chance(dataset):
    accs = [retrieval_accuracy(random_model(dataset, s), dataset, 4, seed=s) for s in range(3)]
    assert abs(np.mean(accs) - 1 / 5) < 0.06


def test_k_zero_is_trivially_one(dataset):
    assert retrieval_accuracy(random_model(dataset), dataset, 0) == 1.0
    with pytest.raises(ValueError):
        retrieval_accuracy(random_model(dataset), dataset, -1)


def test_retrieval_scale_invariant(dataset):
    s1 = retrieval_scores(random_model(dataset, 5), dataset, 4, 0)
    s2 = retrieval_scores(random_model(dataset, 5, scale=7.5), dataset, 4, 0)
    assert torch.allclose(s1, s2, atol=1e-6)


def test_retrieval_ties_count_as_failures(dataset):
    const = LookupModel(dataset, lambda i: np.ones(4, np.float32), lambda i: np.ones(4, np.float32))
    assert retrieval_accuracy(const, dataset, 4) == 0.0


# ambiguity

def test_ambiguity_oracle_gap(dataset):
    rep = ambiguity_report(viseme_oracle(dataset), dataset)
    assert rep.same_viseme_mean == pytest.approx(1.0) and rep.cross_viseme_mean == pytest.approx(0.0)
    assert rep.gap == pytest.approx(1.0)
    assert len(rep.same_viseme) == 4 and len(rep.cross_viseme) == 24
    assert rep.to_records()[-1] == "gap=1.000000"
    assert "same-viseme mean" in rep.to_text()


def test_ambiguity_self_pair_excludes_diagonal(dataset):
    rep = ambiguity_report(random_model(dataset, 2), dataset, pairs=[("T", "T"), ("T", "D")])
    assert abs(rep.pairs[("T", "T")]) < 0.5  # random vectors; diagonal alone would give 1
    assert rep.same_viseme == [("T", "D")] and rep._group(("T", "T")) == "self"


def test_ambiguity_errors(dataset):
    model = viseme_oracle(dataset)
    with pytest.raises(DataError, match="not in the inventory: XX"):
        ambiguity_report(model, dataset, pairs=[("T", "XX")])
    import copy
    partial = copy.copy(dataset)
    t = dataset.inventory.index("T")
    partial.phoneme_ids = np.where(dataset.phoneme_ids == t, dataset.inventory.index("D"), dataset.phoneme_ids)
    with pytest.raises(DataError, match="absent from the corpus: T"):
        ambiguity_report(model, partial, pairs=[("T", "D")])


def test_evaluate_keys(dataset):
    out = evaluate(viseme_oracle(dataset), dataset)
    assert out["retrieval_accuracy"] == 1.0 and out["similarity_gap"] == pytest.approx(1.0)


# projection

def test_pca_line_oracle():
    rng = np.random.default_rng(0)
    t = rng.standard_normal(50)
    u = np.array([0.6, 0.0, -0.8])
    x = t[:, None] * u + np.array([1.0, 2.0, 3.0])
    proj = pca_2d(x)
    assert proj.variances[0] == pytest.approx(np.var(t, ddof=1))
    assert proj.variances[1] == pytest.approx(0.0, abs=1e-12)
    # sign convention: largest loading positive, so component is -u
    np.testing.assert_allclose(proj.components[0], -u, atol=1e-12)
    np.testing.assert_allclose(proj.points[:, 0], -(t - t.mean()), atol=1e-12)


def test_pca_rotation_invariant_variances():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 5)) * [3, 2, 1, 0.5, 0.1]
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    np.testing.assert_allclose(pca_2d(x).variances, pca_2d(x @ q).variances, rtol=1e-10)


def test_pca_identical_points_at_origin():
    proj = pca_2d(np.ones((5, 4)))
    assert np.all(proj.points == 0) and np.all(proj.variances == 0)


def test_pca_errors():
    with pytest.raises(DataError):
        pca_2d(np.zeros((2, 3)))
    with pytest.raises(DataError):
        project_embeddings(np.zeros((4, 3)), ["a"])


def test_svg_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    x, labels = rng.standard_normal((30, 6)), ["P", "B", "T"] * 10
    project_embeddings(x, labels, tmp_path / "a.svg")
    project_embeddings(x, labels, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.lstrip().startswith(b"<?xml") and b"<svg" in a
