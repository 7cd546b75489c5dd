"""Waveform I/O and acoustic features: log-mel, F0 and the content stand-in.

Frames are laid out so that frame ``f`` is centred on sample ``f * hop + hop / 2``;
an utterance of ``n`` samples therefore always yields ``ceil(n / hop)`` frames,
and a frame's centre time is ``(f + 0.5) * hop_seconds``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.io import wavfile
from scipy.ndimage import maximum_filter1d
from scipy.signal import resample_poly

from .errors import ContractViolation, EmptyInputError, FormatError

KIND_TAGS = {
    "mel": 0,
    "content": 1,
    "prosody": 2,
    "filtered_prosody": 3,
    "f0": 4,
    "projection": 5,
}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

PROSODY_DIM = 4
CACHE_MAGIC = b"PVCF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 24000
    n_mels: int = 80
    win_seconds: float = 0.050
    hop_seconds: float = 0.010
    n_fft: int = 2048
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5
    f0_min: float = 60.0
    f0_max: float = 500.0
    yin_threshold: float = 0.2
    # frames quieter than this RMS are unvoiced
    silence_rms: float = 1e-4

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_seconds * self.sample_rate))

    @property
    def win_length(self) -> int:
        return int(round(self.win_seconds * self.sample_rate))

    @property
    def mel_fmax(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ContractViolation("window longer than n_fft")
        if self.hop_length < 1:
            raise ContractViolation("hop must be at least one sample")


DEFAULT_FEATURES = FeatureConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 24000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractViolation("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FrameMatrix:
    """Time-major ``T x D`` feature matrix with its frame shift and kind."""

    data: np.ndarray
    hop_seconds: float
    kind: str

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.kind not in KIND_TAGS:
            raise ContractViolation(f"unknown feature kind {self.kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ContractViolation(f"{self.kind} matrix must be T x D with T >= 1, got {self.data.shape}")
        if self.kind in ("prosody", "filtered_prosody") and self.data.shape[1] != PROSODY_DIM:
            raise ContractViolation(f"{self.kind} vectors must be {PROSODY_DIM}-dim")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation(f"{self.kind} matrix contains non-finite values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass
class F0Track:
    values: np.ndarray
    hop_seconds: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ContractViolation("F0 values must be finite and non-negative")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.values > 0

    def as_matrix(self) -> FrameMatrix:
        return FrameMatrix(self.values[:, None], self.hop_seconds, "f0")

    @classmethod
    def from_matrix(cls, m: FrameMatrix) -> "F0Track":
        if m.kind != "f0" or m.D != 1:
            raise ContractViolation("not an F0 matrix")
        return cls(m.data[:, 0], m.hop_seconds)


# --------------------------------------------------------------------------- I/O


def load_waveform(path: str | Path, target_rate: int = 24000) -> Waveform:
    """Read a linear-PCM wave file as mono float audio at ``target_rate``.

    Integer PCM is scaled by its full-scale value; float files are passed through.
    Channels are averaged, and the result is peak-normalised only if it exceeds 1.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path}: zero-length audio")
    if np.issubdtype(data.dtype, np.integer):
        if data.dtype == np.uint8:
            x = (data.astype(np.float64) - 128.0) / 128.0
        else:
            x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        g = gcd(int(rate), int(target_rate))
        x = resample_poly(x, target_rate // g, rate // g)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x, target_rate)


def save_waveform(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), w.sample_rate, pcm)


# ------------------------------------------------------------------ STFT / mel


def num_frames(num_samples: int, hop_length: int) -> int:
    return -(-num_samples // hop_length)


def _analysis_window(cfg: FeatureConfig) -> np.ndarray:
    win = np.zeros(cfg.n_fft)
    left = (cfg.n_fft - cfg.win_length) // 2
    win[left:left + cfg.win_length] = np.hanning(cfg.win_length + 2)[1:-1]
    return win


def _left_pad(cfg: FeatureConfig) -> int:
    return cfg.n_fft // 2 - cfg.hop_length // 2


def frame_signal(x: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Cut ``x`` into ``ceil(len/hop)`` zero-padded frames of ``n_fft`` samples."""
    hop = cfg.hop_length
    T = num_frames(len(x), hop)
    left = _left_pad(cfg)
    padded = np.zeros(left + T * hop + cfg.n_fft)
    padded[left:left + len(x)] = x
    return sliding_window_view(padded, cfg.n_fft)[::hop][:T]


def stft(x: np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    return np.fft.rfft(frame_signal(x, cfg) * _analysis_window(cfg), axis=1)


def istft(spec: np.ndarray, num_samples: int, cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    hop = cfg.hop_length
    T = spec.shape[0]
    win = _analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    total = T * hop + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        out[t * hop:t * hop + cfg.n_fft] += frames[t]
        norm[t * hop:t * hop + cfg.n_fft] += win ** 2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-8)
    left = _left_pad(cfg)
    return out[left:left + num_samples]


def hz_to_mel(f):
    """Slaney-style mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(cfg: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Area-normalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_spectrogram(w: Waveform, cfg: FeatureConfig = DEFAULT_FEATURES) -> FrameMatrix:
    """Log-compressed mel magnitudes, ``ceil(len/hop) x n_mels``."""
    _check_length(w, cfg)
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return FrameMatrix(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop_seconds, "mel")


def _check_length(w: Waveform, cfg: FeatureConfig) -> None:
    if w.sample_rate != cfg.sample_rate:
        raise ContractViolation(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate}")
    if len(w) < cfg.win_length:
        raise EmptyInputError(f"waveform shorter than one {cfg.win_length}-sample frame")


# ------------------------------------------------------------------------ F0


def extract_f0(w: Waveform, cfg: FeatureConfig = DEFAULT_FEATURES) -> F0Track:
    """YIN-style F0 on the same frame grid as :func:`mel_spectrogram`.

    Uses the cumulative-mean-normalised difference function, takes the first dip
    below ``yin_threshold`` in the allowed lag range and refines it with a
    parabola. Frames with no such dip, or below ``silence_rms``, are 0.
    """
    _check_length(w, cfg)
    frames = frame_signal(w.samples, cfg)
    left = (cfg.n_fft - cfg.win_length) // 2
    frames = frames[:, left:left + cfg.win_length]
    sr = cfg.sample_rate
    tau_min = max(2, int(math.floor(sr / cfg.f0_max)))
    tau_max = int(math.ceil(sr / cfg.f0_min))
    W = cfg.win_length - tau_max
    if W < tau_max:
        raise ContractViolation("analysis window too short for f0_min")

    n = 1 << int(math.ceil(math.log2(cfg.win_length + W)))
    head = frames[:, :W]
    A = np.fft.rfft(head, n=n, axis=1)
    B = np.fft.rfft(frames, n=n, axis=1)
    r = np.fft.irfft(np.conj(A) * B, n=n, axis=1)[:, :tau_max + 1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e_head = sq[:, W][:, None]
    e_lag = sq[:, taus + W] - sq[:, taus]
    d = np.maximum(e_head + e_lag - 2 * r, 0.0)
    d[:, 0] = 0.0

    cum = np.cumsum(d[:, 1:], axis=1)
    cmnd = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, d[:, 1:] * taus[1:] / cum, 1.0)

    rms = np.sqrt(sq[:, -1] / cfg.win_length)
    f0 = np.zeros(frames.shape[0])
    for t in range(frames.shape[0]):
        if rms[t] < cfg.silence_rms:
            continue
        c = cmnd[t]
        below = np.nonzero(c[tau_min:tau_max] < cfg.yin_threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and c[tau + 1] < c[tau]:
            tau += 1
        a, b, e = c[tau - 1], c[tau], c[tau + 1]
        denom = a - 2 * b + e
        shift = 0.5 * (a - e) / denom if denom > 0 else 0.0
        f0[t] = sr / (tau + float(np.clip(shift, -1, 1)))
    return F0Track(f0, cfg.hop_seconds)


# ------------------------------------------------------------ content features


@dataclass
class ContentProjection:
    """Fitted decorrelating, whitening, rank-truncated linear projection.

    ``components`` rows are orthonormal principal directions of the fitting
    data; ``scale`` holds the per-component standard deviations.
    """

    mean: np.ndarray
    components: np.ndarray
    scale: np.ndarray
    n_ceps: int = 13
    context: int = 5
    envelope: int = 9

    @classmethod
    def fit(cls, X: np.ndarray, dim: int, n_ceps: int = 13, context: int = 5,
            envelope: int = 9) -> "ContentProjection":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise EmptyInputError("need at least two rows to fit a projection")
        if dim > min(X.shape):
            raise ContractViolation(f"rank {dim} exceeds data rank bound {min(X.shape)}")
        mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
        comps = vt[:dim]
        # sign convention: largest-magnitude loading positive
        pivots = np.argmax(np.abs(comps), axis=1)
        comps = comps * np.sign(comps[np.arange(dim), pivots])[:, None]
        scale = np.maximum(s[:dim] / math.sqrt(X.shape[0]), 1e-6)
        return cls(mean, comps, scale, n_ceps, context, envelope)

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T) / self.scale

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=np.float64) * self.scale) @ self.components + self.mean

    def to_matrices(self) -> list[FrameMatrix]:
        """Pack as two ``projection`` records: (mean; scale | n_ceps, context, envelope) and components."""
        if self.dim > self.mean.shape[0] - 3:
            raise ContractViolation("projection rank leaves no room for the parameter header")
        head = np.zeros((2, self.mean.shape[0]))
        head[0] = self.mean
        head[1, :self.dim] = self.scale
        head[1, -3:] = (self.n_ceps, self.context, self.envelope)
        return [FrameMatrix(head, 0.0, "projection"), FrameMatrix(self.components, 0.0, "projection")]

    @classmethod
    def from_matrices(cls, ms: Sequence[FrameMatrix]) -> "ContentProjection":
        head, comps = (m.data.astype(np.float64) for m in ms)
        dim = comps.shape[0]
        return cls(head[0], comps, head[1, :dim], *(int(v) for v in head[1, -3:]))


def lift_mel(mel: FrameMatrix, n_ceps: int = 13, context: int = 5, envelope: int = 9) -> np.ndarray:
    """Low-quefrency cepstra of the log-mel upper envelope, spliced over +-``context`` frames.

    The running maximum over ``envelope`` adjacent bands fills the valleys
    between resolved harmonics, whose depth otherwise tracks F0; truncating
    the cepstrum then drops what ripple is left.
    """
    n_ceps = min(n_ceps, mel.D)
    env = maximum_filter1d(mel.data.astype(np.float64), max(envelope, 1), axis=1, mode="nearest")
    ceps = dct(env, type=2, norm="ortho", axis=1)[:, :n_ceps]
    idx = np.arange(mel.T)
    cols = [ceps[np.clip(idx + o, 0, mel.T - 1)] for o in range(-context, context + 1)]
    return np.hstack(cols)


def fit_content_projection(mels: Iterable[FrameMatrix], dim: int = 128, n_ceps: int = 13, context: int = 5,
                           envelope: int = 9) -> ContentProjection:
    rows = [lift_mel(m, n_ceps, context, envelope) for m in mels]
    if not rows:
        raise EmptyInputError("no mel matrices to fit on")
    return ContentProjection.fit(np.vstack(rows), dim, n_ceps, context, envelope)


def content_features(mel: FrameMatrix, projection: ContentProjection) -> FrameMatrix:
    if mel.kind != "mel":
        raise ContractViolation(f"content features need a mel matrix, got {mel.kind}")
    z = projection.transform(lift_mel(mel, projection.n_ceps, projection.context, projection.envelope))
    return FrameMatrix(z, mel.hop_seconds, "content")


# ------------------------------------------------------------- feature cache


def _write_record(fh: BinaryIO, m: FrameMatrix) -> None:
    hop_us = int(round(m.hop_seconds * 1e6))
    fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, KIND_TAGS[m.kind], m.T, m.D, hop_us))
    fh.write(m.data.astype("<f4").tobytes(order="C"))


def write_feature_cache(path: str | Path, matrices: Sequence[FrameMatrix]) -> None:
    """Write one or more records back to back into a single file."""
    with open(path, "wb") as fh:
        for m in matrices:
            _write_record(fh, m)


def read_feature_cache(path: str | Path) -> list[FrameMatrix]:
    raw = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(raw):
        if len(raw) - pos < _CACHE_HEADER.size:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        magic, version, tag, T, D, hop_us = _CACHE_HEADER.unpack_from(raw, pos)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if tag not in _TAG_KINDS:
            raise FormatError(f"{path}: unknown kind tag {tag}")
        pos += _CACHE_HEADER.size
        nbytes = 4 * T * D
        if len(raw) - pos < nbytes:
            raise FormatError(f"{path}: truncated payload")
        data = np.frombuffer(raw, dtype="<f4", count=T * D, offset=pos).reshape(T, D)
        out.append(FrameMatrix(data.astype(np.float32), hop_us / 1e6, _TAG_KINDS[tag]))
        pos += nbytes
    if not out:
        raise EmptyInputError(f"{path}: no records")
    return out
