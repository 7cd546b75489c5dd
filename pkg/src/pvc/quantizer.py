"""Two-group product k-means quantizer producing per-frame index pairs.

Each frame vector is split contiguously in half and each half is coded
independently against its own ``V``-entry codebook.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ContractViolation, FormatError, InsufficientDataError
from .features import FrameMatrix

CODEBOOK_MAGIC = b"PVCB"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<4sIII")
N_GROUPS = 2


@dataclass
class ProductCodebook:
    groups: list[np.ndarray]
    distortion_history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if len(self.groups) != N_GROUPS:
            raise ContractViolation(f"product codebook needs exactly {N_GROUPS} groups")
        self.groups = [np.ascontiguousarray(g, dtype=np.float32) for g in self.groups]
        shapes = {g.shape for g in self.groups}
        if len(shapes) != 1 or self.groups[0].ndim != 2:
            raise ContractViolation("sub-codebooks must share a V x D/2 shape")
        if self.V < 2:
            raise ContractViolation("codebook size must be at least 2")
        if not all(np.all(np.isfinite(g)) for g in self.groups):
            raise ContractViolation("non-finite centroid")

    @property
    def V(self) -> int:
        return self.groups[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return 2 * self.groups[0].shape[1]

    def reconstruct(self, idx: "IndexSequence") -> np.ndarray:
        return np.hstack([self.groups[g][idx.indices[:, g]] for g in range(N_GROUPS)])


@dataclass
class IndexSequence:
    indices: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[1] != N_GROUPS or self.indices.shape[0] < 1:
            raise ContractViolation(f"indices must be T x {N_GROUPS} with T >= 1")
        if self.indices.min() < 0 or self.indices.max() >= self.codebook_size:
            raise ContractViolation("index out of codebook range")

    @property
    def T(self) -> int:
        return self.indices.shape[0]


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows, computed by explicit differences.

    The explicit form (rather than the norm expansion) keeps exact ties exact,
    which the smallest-index tie-break depends on.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((X.shape[0], C.shape[0]))
    step = max(1, 2_000_000 // max(1, C.size))
    for s in range(0, X.shape[0], step):
        diff = X[s:s + step, None, :] - C[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = sq_distances(X, C)
    # argmin returns the first occurrence: smallest index on ties
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(X.shape[0]), idx]


def _kmeanspp(X: np.ndarray, V: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = sq_distances(X, X[chosen]).ravel()
    for _ in range(1, V):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a centre: take an unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            pick = int(rng.choice(unused))
        chosen.append(pick)
        closest = np.minimum(closest, sq_distances(X, X[pick:pick + 1]).ravel())
    return X[chosen].copy()


def _lloyd(X: np.ndarray, C: np.ndarray, iterations: int,
           on_iteration: Callable[[np.ndarray], None] | None) -> np.ndarray:
    prev = None
    for _ in range(iterations):
        assign, _ = _nearest(X, C)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        counts = np.bincount(assign, minlength=C.shape[0])
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        C = C.copy()
        # empty clusters keep their previous centre
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        if on_iteration is not None:
            on_iteration(C)
    return C


def train_codebook(features: FrameMatrix | np.ndarray, V: int = 320, iterations: int = 20,
                   seed: int = 0,
                   on_iteration: Callable[[int, np.ndarray], None] | None = None) -> ProductCodebook:
    """Fit one k-means++/Lloyd codebook per half of the feature vector.

    Args:
        features: ``N x D`` frames (``D`` even), typically stacked log-mel.
        V: entries per sub-codebook.
        iterations: Lloyd iteration cap; stops early once assignments settle.
        seed: seeds k-means++ initialisation; same seed and data, same result.
        on_iteration: called as ``on_iteration(group, centroids)`` after every
            Lloyd update, and once with the initial centres.

    Returns:
        The codebook, with ``distortion_history`` holding the mean squared
        quantisation error summed over both groups after each full pass.
    """
    X = features.data if isinstance(features, FrameMatrix) else np.asarray(features)
    X = X.astype(np.float64)
    if X.ndim != 2 or X.shape[1] % 2:
        raise ContractViolation("feature dimension must be even")
    if X.shape[0] < V:
        raise InsufficientDataError(f"need at least {V} frames, got {X.shape[0]}")
    if V < 2:
        raise ContractViolation("codebook size must be at least 2")
    half = X.shape[1] // 2
    rng = np.random.default_rng(seed)
    groups = []
    per_group_hist = []
    for g in range(N_GROUPS):
        sub = X[:, g * half:(g + 1) * half]
        hist = []

        def record(C, g=g, sub=sub, hist=hist):
            hist.append(float(_nearest(sub, C)[1].sum()))
            if on_iteration is not None:
                on_iteration(g, C)

        C0 = _kmeanspp(sub, V, rng)
        record(C0)
        groups.append(_lloyd(sub, C0, iterations, record))
        per_group_hist.append(hist)
    n = max(len(h) for h in per_group_hist)
    padded = [h + [h[-1]] * (n - len(h)) for h in per_group_hist]
    history = [sum(v) / X.shape[0] for v in zip(*padded)]
    return ProductCodebook(groups, history)


def quantize(features: FrameMatrix | np.ndarray, cb: ProductCodebook) -> IndexSequence:
    X = features.data if isinstance(features, FrameMatrix) else np.asarray(features)
    if X.ndim != 2 or X.shape[1] != cb.feature_dim:
        raise ContractViolation(f"feature dim {X.shape[-1]} does not match codebook dim {cb.feature_dim}")
    half = cb.feature_dim // 2
    cols = [_nearest(X[:, g * half:(g + 1) * half], cb.groups[g])[0] for g in range(N_GROUPS)]
    return IndexSequence(np.stack(cols, axis=1), cb.V)


def distortion(features: FrameMatrix | np.ndarray, cb: ProductCodebook) -> float:
    X = features.data if isinstance(features, FrameMatrix) else np.asarray(features)
    rec = cb.reconstruct(quantize(X, cb))
    return float(np.sum((X.astype(np.float64) - rec) ** 2) / X.shape[0])


def save_codebook(path: str | Path, cb: ProductCodebook) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, cb.V, cb.feature_dim))
        for g in cb.groups:
            fh.write(g.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> ProductCodebook:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, V, D = _HEADER.unpack_from(raw)
    if magic != CODEBOOK_MAGIC or version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: not a version-{CODEBOOK_VERSION} codebook")
    half = D // 2
    expected = _HEADER.size + 4 * N_GROUPS * V * half
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    return ProductCodebook([flat[g * V * half:(g + 1) * V * half].reshape(V, half) for g in range(N_GROUPS)])
