"""Synthetic formant-speech corpus with pitch contours independent of phone content.

Each utterance is additive harmonic synthesis under a time-varying formant
envelope. Phone identity drives only the formants; the F0 contour is drawn
independently, so any pitch information reaching a converted utterance must
have come through the prosody path.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np

from .alignment import RawSegment, serialize_tsv
from .features import Waveform, save_waveform

# (F1, F2, F3) in Hz for a reference speaker
PHONES = {
    "AA": (750, 1150, 2500),
    "IY": (300, 2250, 3000),
    "UW": (330, 850, 2300),
    "EH": (520, 1850, 2550),
    "OW": (480, 900, 2400),
    "AE": (650, 1700, 2450),
}
BANDWIDTHS = (90.0, 110.0, 160.0)
BAND_LIMIT = 5000.0  # Hz


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0_base: float
    formant_scale: float
    tilt_db_per_khz: float = -6.0


DEFAULT_SPEAKERS = (
    SpeakerProfile("spk_low", 155.0, 1.0, -7.0),
    SpeakerProfile("spk_high", 215.0, 1.16, -4.0),
)


@dataclass
class SyntheticUtterance:
    uid: str
    speaker_id: int
    waveform: Waveform
    segments: list[RawSegment]
    f0: np.ndarray  # per-sample generating F0 in Hz


def _smooth_contour(rng: np.random.Generator, n: int, sr: int, semitones: float) -> np.ndarray:
    t = np.arange(n) / sr
    curve = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.5)
        curve += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    curve += rng.uniform(-1, 1) * (t / max(t[-1], 1e-9) - 0.5)
    curve -= curve.mean()
    curve *= semitones / max(np.max(np.abs(curve)), 1e-9)
    return 2.0 ** (curve / 12.0)


def _envelope(freqs: np.ndarray, formants: np.ndarray, tilt_db_per_khz: float) -> np.ndarray:
    """Formant resonance envelope sampled at ``freqs`` (harmonics x samples)."""
    env = np.zeros_like(freqs)
    for j, bw in enumerate(BANDWIDTHS):
        env += (1.0 / (1.0 + ((freqs - formants[j]) / bw) ** 2)) * (0.7 ** j)
    return (env + 0.01) * 10 ** (tilt_db_per_khz * freqs / 1000.0 / 20.0)


def synth_utterance(rng: np.random.Generator, speaker: SpeakerProfile, uid: str, speaker_id: int,
                    sr: int = 24000, duration: tuple[float, float] = (0.9, 1.3),
                    semitones: float = 4.0) -> SyntheticUtterance:
    total = rng.uniform(*duration)
    labels, bounds = [], [0.0]
    names = list(PHONES)
    while bounds[-1] < total:
        choices = [p for p in names if not labels or p != labels[-1]]
        labels.append(choices[rng.integers(len(choices))])
        bounds.append(bounds[-1] + rng.uniform(0.06, 0.18))
    n = int(round(bounds[-1] * sr))
    bounds[-1] = n / sr

    formant_track = np.zeros((3, n))
    edges = [int(round(b * sr)) for b in bounds]
    for label, a, b in zip(labels, edges[:-1], edges[1:]):
        formant_track[:, a:b] = np.array(PHONES[label])[:, None] * speaker.formant_scale
    ramp = int(0.02 * sr)
    kernel = np.ones(ramp) / ramp
    for j in range(3):
        padded = np.pad(formant_track[j], (ramp, ramp), mode="edge")
        formant_track[j] = np.convolve(padded, kernel, mode="same")[ramp:-ramp]

    f0 = speaker.f0_base * _smooth_contour(rng, n, sr, semitones)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(BAND_LIMIT // f0.min())
    k = np.arange(1, n_harm + 1)[:, None]
    freqs = k * f0[None, :]
    amps = _envelope(freqs, formant_track[:, None, :], speaker.tilt_db_per_khz)
    # harmonic density in a band goes as 1/f0; this keeps band power, hence the
    # smoothed log-mel, independent of pitch
    amps *= np.sqrt(f0 / speaker.f0_base)[None, :]
    # fixed band edge: a pitch-dependent top harmonic would leak F0 into the envelope
    amps[freqs >= min(BAND_LIMIT, sr / 2 - 500)] = 0.0
    x = np.sum(amps * np.sin(k * phase[None, :]), axis=0)

    fade = int(0.01 * sr)
    gain = np.ones(n)
    gain[:fade] = np.linspace(0, 1, fade)
    gain[-fade:] = np.linspace(1, 0, fade)
    x = x * gain
    x = 0.5 * x / np.max(np.abs(x)) + 1e-4 * rng.standard_normal(n)

    q = Decimal("0.0001")
    segs = [RawSegment(l, Decimal(str(a)).quantize(q), Decimal(str(b)).quantize(q))
            for l, a, b in zip(labels, bounds[:-1], bounds[1:])]
    return SyntheticUtterance(uid, speaker_id, Waveform(x, sr), segs, f0)


def make_corpus(n_per_speaker: int = 40, seed: int = 0,
                speakers: tuple[SpeakerProfile, ...] = DEFAULT_SPEAKERS,
                sr: int = 24000, **kwargs) -> list[SyntheticUtterance]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_speaker):
        for s, spk in enumerate(speakers):
            out.append(synth_utterance(rng, spk, f"{spk.name}_{i:03d}", s, sr, **kwargs))
    return out


def write_corpus(out_dir: str | Path, corpus: list[SyntheticUtterance]) -> None:
    """``<out>/wav/<uid>.wav`` plus ``<out>/align/<uid>.tsv`` for every utterance."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(parents=True, exist_ok=True)
    for u in corpus:
        save_waveform(out / "wav" / f"{u.uid}.wav", u.waveform)
        (out / "align" / f"{u.uid}.tsv").write_text(serialize_tsv(u.segments), encoding="utf-8")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Write the synthetic two-speaker corpus.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--per-speaker", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    write_corpus(args.out, make_corpus(args.per_speaker, args.seed))
