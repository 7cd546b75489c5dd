import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_distortion, brute_nearest
from pvc.errors import ContractViolation, FormatError, InsufficientDataError
from pvc.quantizer import (IndexSequence, ProductCodebook, distortion, load_codebook, quantize, save_codebook,
                           train_codebook)


def test_distortion_history_is_monotone():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(20, 80)), 6)) * rng.uniform(0.1, 3.0)
        cb = train_codebook(X, V=int(rng.integers(2, 9)), iterations=15, seed=seed)
        h = np.array(cb.distortion_history)
        assert len(h) >= 1
        assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


def test_per_group_callback_distortion_is_monotone():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 4))
    seen = {0: [], 1: []}

    def cb(group, C):
        seen[group].append(brute_distortion(X[:, 2 * group:2 * group + 2], C))

    train_codebook(X, V=5, iterations=10, seed=0, on_iteration=cb)
    for g in (0, 1):
        assert len(seen[g]) >= 2
        assert all(b <= a + 1e-9 for a, b in zip(seen[g], seen[g][1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 16), st.integers(1, 4))
def test_quantize_matches_brute_force(seed, V, half):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(size=(V, half)).astype(np.float32) for _ in range(2)]
    cb = ProductCodebook(groups)
    X = rng.normal(size=(25, 2 * half))
    idx = quantize(X, cb).indices
    np.testing.assert_array_equal(idx[:, 0], brute_nearest(X[:, :half], groups[0]))
    np.testing.assert_array_equal(idx[:, 1], brute_nearest(X[:, half:], groups[1]))


def test_ties_go_to_smallest_index():
    C = np.array([[1.0], [-1.0], [1.0]], dtype=np.float32)
    cb = ProductCodebook([C, C])
    idx = quantize(np.array([[0.0, 1.0]]), cb).indices
    assert idx.tolist() == [[0, 0]]


def test_quantize_a_centroid_returns_it():
    rng = np.random.default_rng(0)
    cb = ProductCodebook([rng.normal(size=(8, 3)), rng.normal(size=(8, 3))])
    X = np.hstack([cb.groups[0][[5]], cb.groups[1][[2]]])
    assert quantize(X, cb).indices.tolist() == [[5, 2]]
    assert distortion(X, cb) == 0.0


def test_training_is_deterministic_and_in_range():
    X = np.random.default_rng(0).normal(size=(100, 8))
    a = train_codebook(X, V=6, seed=3)
    b = train_codebook(X, V=6, seed=3)
    for ga, gb in zip(a.groups, b.groups):
        assert ga.tobytes() == gb.tobytes()
    idx = quantize(X, a)
    assert idx.indices.shape == (100, 2)
    assert idx.indices.min() >= 0 and idx.indices.max() < 6


def test_duplicate_points_do_not_break_initialisation():
    X = np.zeros((10, 2))
    X[0] = 1.0
    cb = train_codebook(X, V=4, seed=0)
    assert cb.distortion_history[-1] == 0.0


def test_training_errors():
    with pytest.raises(InsufficientDataError):
        train_codebook(np.zeros((5, 4)), V=10)
    with pytest.raises(ContractViolation):
        train_codebook(np.zeros((20, 3)), V=4)
    cb = ProductCodebook([np.zeros((2, 2)), np.zeros((2, 2))])
    with pytest.raises(ContractViolation):
        quantize(np.zeros((3, 6)), cb)
    with pytest.raises(ContractViolation):
        IndexSequence(np.array([[0, 2]]), 2)


def test_codebook_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cb = ProductCodebook([rng.normal(size=(4, 3)), rng.normal(size=(4, 3))])
    a, b = tmp_path / "a.pvcb", tmp_path / "b.pvcb"
    save_codebook(a, cb)
    back = load_codebook(a)
    save_codebook(b, back)
    assert a.read_bytes() == b.read_bytes()
    assert back.V == 4 and back.feature_dim == 6
    assert len(a.read_bytes()) == 16 + 4 * 24
    a.write_bytes(a.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_codebook(a)
