"""End-to-end analysis and conversion: waveform in, converted mel and waveform out."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .alignment import FramePhoneMap, RawSegment, to_frames
from .errors import ContractViolation, MissingInputError
from .features import (DEFAULT_FEATURES, ContentProjection, F0Track, FeatureConfig, FrameMatrix, Waveform,
                       content_features, extract_f0, fit_content_projection, mel_spectrogram)
from .model import Streams
from .quantizer import IndexSequence, ProductCodebook, quantize, train_codebook
from .training import Checkpoint, Utterance
from .vocoder import griffin_lim


@dataclass
class FrontEnd:
    """Frozen analysis stages: mel/F0 extraction, content projection, quantizer."""

    projection: ContentProjection
    codebook: ProductCodebook
    features: FeatureConfig = DEFAULT_FEATURES

    def analyse(self, w: Waveform) -> tuple[FrameMatrix, F0Track, FrameMatrix, IndexSequence]:
        mel = mel_spectrogram(w, self.features)
        return mel, extract_f0(w, self.features), content_features(mel, self.projection), quantize(mel, self.codebook)


def build_frontend(waves: Sequence[Waveform], content_dim: int = 128, codebook_size: int = 320,
                   iterations: int = 20, seed: int = 0,
                   features: FeatureConfig = DEFAULT_FEATURES) -> FrontEnd:
    mels = [mel_spectrogram(w, features) for w in waves]
    projection = fit_content_projection(mels, content_dim)
    stacked = FrameMatrix(np.vstack([m.data for m in mels]), features.hop_seconds, "mel")
    codebook = train_codebook(stacked, codebook_size, iterations, seed)
    return FrontEnd(projection, codebook, features)


def prepare_utterance(uid: str, w: Waveform, speaker_id: int, frontend: FrontEnd,
                      segments: Sequence[RawSegment] | None = None) -> Utterance:
    mel, _, content, idx = frontend.analyse(w)
    fmap = to_frames(segments, mel.T, mel.hop_seconds)[1] if segments else None
    return Utterance(uid, content, mel, speaker_id, idx, fmap)


@dataclass
class Conversion:
    mel: FrameMatrix
    waveform: Waveform | None
    streams: Streams


@torch.no_grad()
def convert_features(checkpoint: Checkpoint, content: FrameMatrix, target_speaker: int,
                     indices: IndexSequence | None = None, fmap: FramePhoneMap | None = None,
                     mode: str | None = None) -> tuple[FrameMatrix, Streams]:
    """Free-running decode of one utterance for ``target_speaker``."""
    ck_mode = checkpoint.mode
    mode = ck_mode if mode is None else mode
    if mode != ck_mode:
        raise ContractViolation(f"checkpoint was trained with mode {ck_mode!r}, not {mode!r}")
    if mode == "adpf" and fmap is None:
        raise MissingInputError("mode adpf needs a phone alignment for the source utterance")
    model = checkpoint.model
    model.eval()
    dtype = model.speaker_table.weight.dtype
    idx = torch.from_numpy(indices.indices) if indices is not None else None
    streams = model.streams(torch.as_tensor(content.data, dtype=dtype), target_speaker, mode, idx, fmap,
                            tau=checkpoint.train_cfg.tau, rdpf_mode="deterministic")
    out = model.decode(streams.content, streams.prosody, streams.speaker)
    mel = model.denormalize_mel(out).numpy()
    return FrameMatrix(mel, content.hop_seconds, "mel"), streams


def convert(source: Waveform, target_speaker: int, checkpoint: Checkpoint, frontend: FrontEnd,
            segments: Sequence[RawSegment] | FramePhoneMap | None = None, mode: str | None = None,
            vocode: bool = True, gl_iters: int = 48) -> Conversion:
    """Analyse ``source``, convert it to ``target_speaker`` and vocode with Griffin-Lim."""
    mel, _, content, idx = frontend.analyse(source)
    mode = checkpoint.mode if mode is None else mode
    fmap = None
    if isinstance(segments, FramePhoneMap):
        fmap = segments
    elif segments:
        fmap = to_frames(segments, mel.T, mel.hop_seconds)[1]
    if mode == "adpf" and fmap is None:
        raise MissingInputError("mode adpf needs a phone alignment for the source utterance")
    out, streams = convert_features(checkpoint, content, target_speaker, idx, fmap, mode)
    wav = griffin_lim(out, frontend.features, n_iter=gl_iters) if vocode else None
    return Conversion(out, wav, streams)
