"""Griffin-Lim waveform reconstruction from log-mel frames."""

from __future__ import annotations

import numpy as np

from .features import DEFAULT_FEATURES, FeatureConfig, FrameMatrix, Waveform, istft, mel_filterbank, stft


def mel_to_linear(mel: FrameMatrix, cfg: FeatureConfig = DEFAULT_FEATURES, iterations: int = 60) -> np.ndarray:
    """Non-negative least-squares magnitude estimate via multiplicative updates."""
    fb = mel_filterbank(cfg)
    target = np.exp(mel.data.astype(np.float64))
    S = np.maximum(target @ np.linalg.pinv(fb).T, 1e-6)
    num = target @ fb
    for _ in range(iterations):
        S *= num / np.maximum((S @ fb.T) @ fb, 1e-12)
    return S


def griffin_lim(mel: FrameMatrix, cfg: FeatureConfig = DEFAULT_FEATURES, n_iter: int = 48,
                seed: int = 0, momentum: float = 0.99) -> Waveform:
    """Fast Griffin-Lim (with momentum) on the magnitude implied by ``mel``.

    Phase is initialised from a seeded generator, so output is deterministic.
    """
    mag = mel_to_linear(mel, cfg)
    n = mel.T * cfg.hop_length
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    prev = np.zeros_like(angles)
    x = istft(mag * angles, n, cfg)
    for _ in range(n_iter):
        rebuilt = stft(x, cfg)
        accel = rebuilt - (momentum / (1 + momentum)) * prev
        prev = rebuilt
        angles = accel / np.maximum(np.abs(accel), 1e-16)
        x = istft(mag * angles, n, cfg)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, cfg.sample_rate)
