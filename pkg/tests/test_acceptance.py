"""Acceptance criteria, one test per criterion, each with its runtime budget.

The terminal summary prints a PASS/FAIL line per criterion (see conftest).
"""

import math
import time
from decimal import Decimal

import numpy as np
import pytest
import torch

import toy_experiment
from gradcheck import audit
from oracles import brute_nearest, expected_timestamps, gru_scalar_loop, gru_weights, prosody, random_map
from pvc.alignment import parse_tsv, serialize_tsv, to_frames
from pvc.evaluation import cosine, enroll, far, prosody_consistency
from pvc.features import F0Track, FrameMatrix, read_feature_cache, write_feature_cache
from pvc.model import ModelConfig, build_model
from pvc.prosody_filters import adpf, init_adpf, rdpf, rdpf_select
from pvc.quantizer import ProductCodebook, quantize, train_codebook
from pvc.training import TrainingConfig, checkpoint_bytes, learning_rate, load_checkpoint, save_checkpoint, train
from test_training import dataset, overfit_ratio


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


@pytest.mark.criterion(1, "RDPF timestamp conformance")
def test_criterion_1_rdpf_timestamps():
    rng = np.random.default_rng(1)
    with Budget(1.0):
        for _ in range(200):
            T = int(rng.integers(1, 513))
            tau = int(rng.integers(1, T + 1))
            res = rdpf(prosody(T, int(rng.integers(1 << 30))), tau)
            assert res.selected_frames.tolist() == expected_timestamps(T, tau)
            out = res.matrix.data
            for g, s in enumerate(res.selected_frames):
                assert np.all(out[res.group_of_frame == g] == out[s])
            assert rdpf_select(T, tau)[0].tolist() == expected_timestamps(T, tau)


@pytest.mark.criterion(2, "ADPF structure vs scalar-loop oracle")
def test_criterion_2_adpf_structure():
    rng = np.random.default_rng(2)
    with Budget(5.0):
        for i in range(200):
            T = int(rng.integers(1, 257))
            fmap = random_map(rng, T, max_phones=20)
            params = init_adpf(seed=i).double()
            p = prosody(T, seed=i)
            out = adpf(p, fmap, params).matrix.data
            h = gru_scalar_loop(p.data, *gru_weights(params))
            ends = fmap.segment_ends()
            starts = np.concatenate([[0], ends[:-1] + 1])
            for lo, e in zip(starts, ends):
                assert np.all(out[lo:e + 1] == out[e])
                assert np.max(np.abs(out[e] - h[e])) <= 1e-6
            # prefix causality: rewriting frames after a segment end leaves earlier output alone
            e = int(ends[int(rng.integers(len(ends)))])
            q = p.data.copy()
            q[e + 1:] = rng.normal(size=q[e + 1:].shape)
            out2 = adpf(FrameMatrix(q, p.hop_seconds, "prosody"), fmap, params).matrix.data
            assert np.array_equal(out[:e + 1], out2[:e + 1])


COMPONENT_PREFIXES = {
    "speaker embedding table": "speaker_table",
    "prosody embedding tables": "prosody_encoder.table",
    "prosody conv stack": "prosody_encoder.convs",
    "content conv stack": "content_encoder.convs",
    "content bidirectional recurrence": "content_encoder.birnn",
    "prosody bidirectional recurrence": "prosody_encoder.birnn",
    "decoder unidirectional recurrence": "decoder.rnn",
    "prenet": "decoder.prenet",
    "prosody projection": "prosody_encoder.out_proj",
    "output projection": "decoder.proj",
    "ADPF recurrence": "adpf",
}


@pytest.mark.criterion(3, "gradient correctness (finite differences)")
def test_criterion_3_gradients():
    with Budget(60.0):
        forced = audit(seed=0, teacher_forced=True)
        free = audit(seed=1, teacher_forced=False)
    params = {n for n, _ in build_model(ModelConfig.test(), 0).named_parameters()}
    assert set(forced) == set(free) == params
    for component, prefix in COMPONENT_PREFIXES.items():
        covered = [n for n in params if n.startswith(prefix)]
        assert covered, component
        for name in covered:
            assert forced[name] < 1e-4 and free[name] < 1e-4, (component, name, forced[name], free[name])


@pytest.mark.criterion(4, "quantizer soundness")
def test_criterion_4_quantizer():
    rng = np.random.default_rng(4)
    with Budget(10.0):
        for _ in range(50):
            n, half = int(rng.integers(40, 200)), int(rng.integers(1, 5))
            X = rng.normal(size=(n, 2 * half)) * rng.uniform(0.1, 3)
            seen: list[tuple[int, np.ndarray]] = []
            train_codebook(X, int(rng.integers(2, 17)), 15, int(rng.integers(1 << 30)),
                           on_iteration=lambda g, C: seen.append((g, C.copy())))
            for group in range(2):
                sub = X[:, group * half:(group + 1) * half]
                hist = [np.min(((sub[:, None, :] - C[None]) ** 2).sum(-1), axis=1).sum()
                        for g, C in seen if g == group]
                assert len(hist) >= 2
                assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
        for _ in range(10):
            V, half = int(rng.integers(2, 17)), int(rng.integers(1, 4))
            cb = ProductCodebook([rng.normal(size=(V, half)) for _ in range(2)])
            X = rng.normal(size=(60, 2 * half)).astype(np.float32)
            idx = quantize(X, cb).indices
            for g in range(2):
                assert np.array_equal(idx[:, g], brute_nearest(X[:, g * half:(g + 1) * half], cb.groups[g]))


@pytest.mark.criterion(5, "learning-rate schedule")
def test_criterion_5_learning_rate():
    for epoch in (0, 9, 10, 19, 20, 139):
        assert learning_rate(epoch) == 0.001 * 0.7 ** math.floor(epoch / 10)
    assert learning_rate(0, TrainingConfig()) == 0.001


@pytest.mark.criterion(6, "overfit one utterance")
def test_criterion_6_overfit():
    with Budget(120.0):
        ratio = overfit_ratio()
    assert ratio < 0.1, ratio


@pytest.mark.criterion(7, "toy prosody transfer: adpf beats none by >= 0.15")
def test_criterion_7_prosody_transfer():
    with Budget(30 * 60.0):
        result = toy_experiment.run()
    print(result.summary())
    assert result.gap >= 0.15, result.summary()


@pytest.mark.criterion(8, "conditioning isolation")
def test_criterion_8_isolation():
    cfg = ModelConfig.test()
    rng = np.random.default_rng(8)
    with Budget(10.0), torch.no_grad():
        for seed in range(10):
            model = build_model(cfg, seed)
            T = int(rng.integers(3, 30))
            content = torch.from_numpy(rng.normal(size=(T, cfg.content_dim))).float()
            mels = []
            for _ in range(3):
                idx = torch.from_numpy(rng.integers(0, cfg.codebook_size, size=(T, 2)))
                s = model.streams(content, 1, "none", idx)
                assert not s.prosody.any()
                mels.append(model.decode(s.content, s.prosody, s.speaker).numpy().tobytes())
            assert len(set(mels)) == 1
            idx = torch.from_numpy(rng.integers(0, cfg.codebook_size, size=(T, 2)))
            fmap = random_map(rng, T, 5)
            a = model.streams(content, 0, "adpf", idx, fmap)
            b = model.streams(content, 2, "adpf", idx, fmap)
            assert a.content.numpy().tobytes() == b.content.numpy().tobytes()
            assert a.prosody.numpy().tobytes() == b.prosody.numpy().tobytes()


class OneHot:
    def __init__(self, n):
        self.n = n

    def __call__(self, mel):
        v = np.zeros(self.n)
        v[int(mel.data[0, 0])] = 1.0
        return v


@pytest.mark.criterion(9, "evaluation harness")
def test_criterion_9_evaluation():
    rng = np.random.default_rng(9)
    ramp = np.linspace(100.0, 200.0, 80)
    with Budget(5.0):
        for _ in range(100):
            n, d = int(rng.integers(1, 30)), int(rng.integers(2, 10))
            embs = rng.normal(size=(n, d))
            mels = [FrameMatrix(np.full((1, 1), i), 0.01, "mel") for i in range(n)]
            target = enroll(mels[:1], lambda m: rng.normal(size=d))

            def embedder(m, embs=embs):
                return embs[int(m.data[0, 0])]

            fars = [far(mels, target, embedder, t).far for t in np.linspace(-1, 1, 41)]
            assert all(b <= a for a, b in zip(fars, fars[1:]))
            assert far(mels, target, embedder, -1.0).far == 1.0
            if max(cosine(e, target.vector) for e in embs) < 1.0:
                assert far(mels, target, embedder, 1.0).far == 0.0
        same = enroll([FrameMatrix(np.zeros((2, 2)), 0.01, "mel")] * 3, OneHot(2))
        assert far([FrameMatrix(np.zeros((2, 2)), 0.01, "mel")] * 4, same, OneHot(2), 1.0).far == 1.0
        src = ramp + 15 * np.sin(np.arange(80) / 4)
        conv = 3 * np.sqrt(ramp)
        base = prosody_consistency(F0Track(src, 0.01), F0Track(conv, 0.01))
        for a, b, c, d in rng.uniform([0.1, -50, 0.1, -50], [10, 300, 10, 300], size=(50, 4)):
            moved = prosody_consistency(F0Track(a * src + b + 100, 0.01), F0Track(c * conv + d + 100, 0.01))
            assert abs(moved - base) <= 1e-9


@pytest.mark.criterion(10, "persistence round trips")
def test_criterion_10_persistence(tmp_path):
    ck = train(dataset(3), TrainingConfig(epochs=2, prosody_mode="adpf"), ModelConfig.test())
    with Budget(5.0):
        save_checkpoint(tmp_path / "a.pvck", ck)
        save_checkpoint(tmp_path / "b.pvck", load_checkpoint(tmp_path / "a.pvck"))
        assert (tmp_path / "a.pvck").read_bytes() == (tmp_path / "b.pvck").read_bytes() == checkpoint_bytes(ck)

        rng = np.random.default_rng(10)
        records = [FrameMatrix(rng.normal(size=(37, 80)), 0.01, "mel"),
                   FrameMatrix(rng.normal(size=(37, 4)), 0.01, "prosody"),
                   F0Track(np.abs(rng.normal(150, 30, size=37)), 0.01).as_matrix()]
        write_feature_cache(tmp_path / "a.pvcf", records)
        write_feature_cache(tmp_path / "b.pvcf", read_feature_cache(tmp_path / "a.pvcf"))
        assert (tmp_path / "a.pvcf").read_bytes() == (tmp_path / "b.pvcf").read_bytes()

        text = "HH\t0.00\t0.05\nUW2\t0.05\t0.08\nAA2\t0.08\t0.14\nsil\t0.14\t0.3725\n"
        segs = parse_tsv(text)
        again = parse_tsv(serialize_tsv(segs))
        assert again == segs
        assert again[-1].end == Decimal("0.3725")
        assert serialize_tsv(again) == serialize_tsv(segs)
        frames = [to_frames(s, 37, 0.01)[1].phone_of_frame.tolist() for s in (segs, again)]
        assert frames[0] == frames[1]
