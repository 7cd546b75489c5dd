"""Objective evaluation: FAR speaker similarity and F0-correlation prosody consistency."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, EmptyInputError
from .features import F0Track, FrameMatrix
from .nn_init import init_uniform

Embedder = Callable[[FrameMatrix], np.ndarray]


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ContractViolation("cannot normalise a zero or non-finite embedding")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0))


class StatsEmbedder:
    """Per-band mean and standard deviation of log-mel, centred and unit-normalised."""

    def __init__(self, center: np.ndarray | None = None):
        self.center = center

    @staticmethod
    def _stats(mel: FrameMatrix) -> np.ndarray:
        d = mel.data.astype(np.float64)
        return np.concatenate([d.mean(axis=0), d.std(axis=0)])

    def fit(self, mels: Iterable[FrameMatrix]) -> "StatsEmbedder":
        stats = [self._stats(m) for m in mels]
        if not stats:
            raise EmptyInputError("no utterances to fit the embedder centre")
        self.center = np.mean(stats, axis=0)
        return self

    def __call__(self, mel: FrameMatrix) -> np.ndarray:
        s = self._stats(mel)
        if self.center is not None:
            s = s - self.center
        return _unit(s)


class _FramePoolNet(nn.Module):
    def __init__(self, n_mels: int, hidden: int, dim: int, n_speakers: int):
        super().__init__()
        self.frame = nn.Linear(n_mels, hidden)
        self.embed = nn.Linear(2 * hidden, dim)
        self.classify = nn.Linear(dim, n_speakers)

    def embedding(self, mel: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.frame(mel))
        return self.embed(torch.cat([h.mean(dim=0), h.std(dim=0, unbiased=False)]))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.classify(F.relu(self.embedding(mel)))


class ClassifierEmbedder:
    """Penultimate layer of a small frame-pooling speaker classifier."""

    def __init__(self, net: _FramePoolNet, mean: np.ndarray, std: np.ndarray):
        self.net = net.eval()
        self.mean, self.std = mean, std

    @classmethod
    def train(cls, mels: Sequence[FrameMatrix], labels: Sequence[int], dim: int = 32, hidden: int = 64,
              epochs: int = 60, lr: float = 3e-3, seed: int = 0) -> "ClassifierEmbedder":
        if not mels:
            raise EmptyInputError("no utterances to train the embedder")
        stacked = np.vstack([m.data for m in mels]).astype(np.float64)
        mean, std = stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3)
        n_spk = int(max(labels)) + 1
        net = init_uniform(_FramePoolNet(mels[0].D, hidden, dim, n_spk), seed)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        xs = [torch.as_tensor((m.data - mean) / std, dtype=torch.float32) for m in mels]
        ys = torch.as_tensor(list(labels))
        rng = np.random.default_rng(seed)
        for _ in range(epochs):
            for i in rng.permutation(len(xs)):
                opt.zero_grad()
                F.cross_entropy(net(xs[i]).unsqueeze(0), ys[i:i + 1]).backward()
                opt.step()
        return cls(net, mean, std)

    @torch.no_grad()
    def __call__(self, mel: FrameMatrix) -> np.ndarray:
        x = torch.as_tensor((mel.data - self.mean) / self.std, dtype=torch.float32)
        return _unit(self.net.embedding(x).numpy())


@dataclass
class Enrollment:
    speaker: str
    vector: np.ndarray
    count: int


def enroll(mels: Sequence[FrameMatrix], embedder: Embedder, speaker: str = "") -> Enrollment:
    """Average of the utterance embeddings, re-normalised to unit length."""
    if not mels:
        raise EmptyInputError("enrollment needs at least one utterance")
    embs = np.stack([embedder(m) for m in mels])
    return Enrollment(speaker, _unit(embs.mean(axis=0)), len(mels))


@dataclass
class FarReport:
    system: str
    far: float
    threshold: float
    accepted: int
    total: int

    def __post_init__(self):
        if self.total <= 0:
            raise ContractViolation("FAR needs at least one trial")


def far_from_scores(scores: Sequence[float], threshold: float, system: str = "") -> FarReport:
    if len(scores) == 0:
        raise EmptyInputError("no converted utterances to score")
    if not -1.0 <= threshold <= 1.0:
        raise ContractViolation("threshold must be a cosine value in [-1, 1]")
    accepted = int(np.sum(np.asarray(scores) >= threshold))
    return FarReport(system, accepted / len(scores), float(threshold), accepted, len(scores))


def far(mels: Sequence[FrameMatrix], target: Enrollment, embedder: Embedder, threshold: float,
        system: str = "") -> FarReport:
    """Fraction of converted utterances the verifier accepts as the target speaker."""
    if not mels:
        raise EmptyInputError("no converted utterances to score")
    return far_from_scores([cosine(embedder(m), target.vector) for m in mels], threshold, system)


def eer_threshold(target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> float:
    """Threshold where false rejection of targets meets false acceptance of impostors."""
    tgt = np.asarray(target_scores, dtype=np.float64)
    non = np.asarray(nontarget_scores, dtype=np.float64)
    if tgt.size == 0 or non.size == 0:
        raise EmptyInputError("need both target and non-target scores")
    candidates = np.unique(np.concatenate([tgt, non]))
    frr = np.array([(tgt < c).mean() for c in candidates])
    fa = np.array([(non >= c).mean() for c in candidates])
    return float(candidates[np.argmin(np.abs(frr - fa))])


def _resample_track(f0: F0Track, length: int) -> tuple[np.ndarray, np.ndarray]:
    v = f0.values.astype(np.float64)
    if len(v) == length:
        return v, v > 0
    pos = np.linspace(0, len(v) - 1, length) if length > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(v) - 1)
    frac = pos - lo
    values = (1 - frac) * v[lo] + frac * v[hi]
    voiced = (v[lo] > 0) & ((v[hi] > 0) | (frac == 0))
    return values, voiced


def prosody_consistency(source: F0Track, converted: F0Track, min_frames: int = 8) -> float:
    """Pearson correlation of F0 over frames voiced in both tracks.

    The converted track is linearly time-interpolated onto the source frame
    grid first. Returns 0 when fewer than ``min_frames`` frames are co-voiced
    or either side is constant.
    """
    if len(source) == 0 or len(converted) == 0:
        raise EmptyInputError("empty F0 track")
    src = source.values.astype(np.float64)
    conv, conv_voiced = _resample_track(converted, len(src))
    mask = (src > 0) & conv_voiced
    if mask.sum() < min_frames:
        return 0.0
    a, b = src[mask] - src[mask].mean(), conv[mask] - conv[mask].mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def write_report(path: str | Path, rows: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("system\tmetric\tvalue\n")
        for system, metric, value in rows:
            fh.write(f"{system}\t{metric}\t{value!r}\n")
