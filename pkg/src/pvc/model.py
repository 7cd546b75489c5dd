"""Conversion model: content encoder, speaker table, prosody path and AR mel decoder.

Every module accepts either one utterance (``T x D``) or a right-padded batch
(``B x T x D`` plus lengths). Padding is masked so that a batched utterance
gets the same result it would get alone. Decoder inputs and targets live in
the normalised mel domain, see :meth:`ConversionModel.normalize_mel`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alignment import FramePhoneMap
from .errors import ContractViolation, MissingInputError
from .features import PROSODY_DIM
from .nn_init import init_uniform
from .prosody_encoder import ProsodyEncoder, ProsodyEncoderConfig, length_mask, run_packed
from .prosody_filters import AdpfParams, rdpf_select

ProsodyMode = Literal["none", "base", "rdpf", "adpf"]
MODES = ("none", "base", "rdpf", "adpf")
COMPONENTS = ("content_encoder", "speaker_table", "decoder", "prosody_encoder", "adpf")


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    content_dim: int = 128
    n_speakers: int = 2
    speaker_dim: int = 64
    enc_channels: int = 512
    enc_kernel: int = 5
    enc_layers: int = 3
    enc_rnn: int = 256
    codebook_size: int = 320
    prosody_embed: int = 128
    prosody_conv: tuple[int, ...] = (32, 32, 64, 64, 64, 64)
    prosody_rnn: int = 32
    adpf_hidden: int = PROSODY_DIM
    prenet: tuple[int, ...] = (256, 256)
    prenet_dropout: float = 0.5
    dec_rnn: int = 512

    @classmethod
    def test(cls, **overrides) -> "ModelConfig":
        """Shrunken configuration for gradient checks and fast tests."""
        base = dict(n_mels=8, content_dim=16, n_speakers=3, speaker_dim=4, enc_channels=8, enc_kernel=5,
                    enc_layers=3, enc_rnn=4, codebook_size=8, prosody_embed=4, prosody_conv=(8,) * 6,
                    prosody_rnn=4, prenet=(8, 8), dec_rnn=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Small configuration for the synthetic-corpus experiments."""
        base = dict(content_dim=32, speaker_dim=8, enc_channels=64, enc_rnn=32, codebook_size=64,
                    prosody_embed=16, prosody_conv=(32, 32, 64, 64, 64, 64), prosody_rnn=16, prenet=(16, 4),
                    dec_rnn=128)
        base.update(overrides)
        return cls(**base)

    @property
    def content_out(self) -> int:
        return 2 * self.enc_rnn

    @property
    def cond_dim(self) -> int:
        return self.content_out + PROSODY_DIM + self.speaker_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prosody_conv"] = list(self.prosody_conv)
        d["prenet"] = list(self.prenet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["prosody_conv"] = tuple(d["prosody_conv"])
        d["prenet"] = tuple(d["prenet"])
        return cls(**d)


def _batched(x: torch.Tensor, lengths: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor, bool]:
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
    return x, lengths, single


def pad_sequences(seqs: Sequence[torch.Tensor], value: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.long)
    out = seqs[0].new_full((len(seqs), int(lengths.max())) + tuple(seqs[0].shape[1:]), value)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
    return out, lengths


class ContentEncoder(nn.Module):
    """Tacotron2-encoder shape: conv stack followed by a bidirectional LSTM."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = [cfg.content_dim] + [cfg.enc_channels] * cfg.enc_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, cfg.enc_kernel, padding=cfg.enc_kernel // 2) for a, b in zip(dims[:-1], dims[1:])
        )
        self.birnn = nn.LSTM(cfg.enc_channels, cfg.enc_rnn, batch_first=True, bidirectional=True)

    def forward(self, c: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        c, lengths, single = _batched(c, lengths)
        mask = length_mask(lengths, c.shape[1])[:, None, :].to(c.dtype)
        x = c.transpose(1, 2) * mask
        for conv in self.convs:
            x = F.relu(conv(x)) * mask
        h = run_packed(self.birnn, x.transpose(1, 2), lengths)
        return h[0] if single else h


class Decoder(nn.Module):
    """Prenet on the previous mel frame, GRU core, linear projection to mel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = [cfg.n_mels] + list(cfg.prenet)
        self.prenet = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.rnn = nn.GRU(dims[-1] + cfg.cond_dim, cfg.dec_rnn, batch_first=True)
        self.proj = nn.Linear(cfg.dec_rnn + cfg.cond_dim, cfg.n_mels)
        self.n_mels = cfg.n_mels
        self.dropout = cfg.prenet_dropout

    def _prenet(self, x: torch.Tensor, masks: list[torch.Tensor] | None) -> torch.Tensor:
        for i, layer in enumerate(self.prenet):
            x = F.relu(layer(x))
            if masks is not None:
                x = x * masks[i]
        return x

    def dropout_masks(self, T: int, generator: torch.Generator, dtype=torch.float32) -> list[torch.Tensor]:
        """Inverted-dropout masks for one utterance, ``T x width`` per prenet layer."""
        keep = 1.0 - self.dropout
        return [(torch.rand(T, layer.out_features, generator=generator) < keep).to(dtype) / keep
                for layer in self.prenet]

    def forward(self, cond: torch.Tensor, teacher: torch.Tensor | None = None,
                masks: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Teacher-forced when ``teacher`` is given, otherwise free-running.

        ``cond`` is ``(B x) T x C``; masks, if any, match the prenet layer
        outputs with the same leading axes.
        """
        single = cond.dim() == 2
        if single:
            cond = cond.unsqueeze(0)
            teacher = None if teacher is None else teacher.unsqueeze(0)
            masks = None if masks is None else [m.unsqueeze(0) for m in masks]
        B, T, _ = cond.shape
        if teacher is not None:
            if teacher.shape != (B, T, self.n_mels):
                raise ContractViolation(f"teacher mel must be {(B, T, self.n_mels)}, got {tuple(teacher.shape)}")
            prev = torch.cat([teacher.new_zeros(B, 1, self.n_mels), teacher[:, :-1]], dim=1)
            x = torch.cat([self._prenet(prev, masks), cond], dim=2)
            h, _ = self.rnn(x)
            out = self.proj(torch.cat([h, cond], dim=2))
        else:
            frame = cond.new_zeros(B, 1, self.n_mels)
            state = None
            steps = []
            for t in range(T):
                step_masks = None if masks is None else [m[:, t:t + 1] for m in masks]
                x = torch.cat([self._prenet(frame, step_masks), cond[:, t:t + 1]], dim=2)
                h, state = self.rnn(x, state)
                frame = self.proj(torch.cat([h, cond[:, t:t + 1]], dim=2))
                steps.append(frame)
            out = torch.cat(steps, dim=1)
        return out[0] if single else out


class Streams(NamedTuple):
    """The three conditioning streams; ``(B x) T x .`` except speaker ``(B x) E``."""

    content: torch.Tensor
    prosody: torch.Tensor
    speaker: torch.Tensor

    def concat(self) -> torch.Tensor:
        T = self.content.shape[-2]
        spk = self.speaker.unsqueeze(-2).expand(*self.speaker.shape[:-1], T, self.speaker.shape[-1])
        return torch.cat([self.content, self.prosody, spk], dim=-1)


class ConversionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)
        self.prosody_encoder = ProsodyEncoder(ProsodyEncoderConfig(
            cfg.codebook_size, cfg.prosody_embed, cfg.prosody_conv, 3, cfg.prosody_rnn, PROSODY_DIM))
        self.adpf = AdpfParams(PROSODY_DIM, cfg.adpf_hidden)
        self.decoder = Decoder(cfg)
        self.register_buffer("mel_mean", torch.zeros(cfg.n_mels))
        self.register_buffer("mel_std", torch.ones(cfg.n_mels))

    @property
    def dtype(self) -> torch.dtype:
        return self.speaker_table.weight.dtype

    # -- components --------------------------------------------------------

    def encode_content(self, c: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if c.shape[-1] != self.cfg.content_dim or c.shape[-2] < 1:
            raise ContractViolation(f"content must be T x {self.cfg.content_dim}, got {tuple(c.shape)}")
        return self.content_encoder(c, lengths)

    def speaker_embed(self, speaker_id: int | torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(speaker_id, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.n_speakers):
            raise ContractViolation(f"speaker id outside [0, {self.cfg.n_speakers})")
        return self.speaker_table(ids)

    def prosody_stream(self, lengths: torch.Tensor, mode: ProsodyMode, indices: torch.Tensor | None,
                       fmaps: Sequence[FramePhoneMap] | None, tau: int = 32,
                       rdpf_mode: str = "deterministic", rdpf_seeds: Sequence[int] | None = None) -> torch.Tensor:
        """Batched prosody conditioning, ``B x T x 4`` (zeros past each length)."""
        B, T = len(lengths), int(lengths.max())
        if mode not in MODES:
            raise ContractViolation(f"unknown prosody mode {mode!r}")
        if mode == "none":
            return torch.zeros(B, T, PROSODY_DIM, dtype=self.dtype)
        if indices is None:
            raise MissingInputError(f"mode {mode} needs discrete indices")
        if indices.shape[:2] != (B, T):
            raise ContractViolation(f"indices are {tuple(indices.shape[:2])}, content is {(B, T)}")
        p = self.prosody_encoder(indices, lengths)
        if mode == "base":
            return p
        if mode == "rdpf":
            gather = np.zeros((B, T), dtype=np.int64)
            for b in range(B):
                n = int(lengths[b])
                seed = 0 if rdpf_seeds is None else rdpf_seeds[b]
                selected, groups = rdpf_select(n, tau, rdpf_mode, seed)
                gather[b, :n] = selected[groups]
            idx = torch.from_numpy(gather)[..., None].expand(-1, -1, PROSODY_DIM)
            return torch.gather(p, 1, idx) * length_mask(lengths, T)[..., None].to(p.dtype)
        if fmaps is None or any(m is None for m in fmaps):
            raise MissingInputError("mode adpf needs a phone alignment")
        return self.adpf(p, list(fmaps))

    def streams_batch(self, content: torch.Tensor, lengths: torch.Tensor, speakers: torch.Tensor,
                      mode: ProsodyMode, indices: torch.Tensor | None = None,
                      fmaps: Sequence[FramePhoneMap] | None = None, **filter_kw) -> Streams:
        c = self.encode_content(content, lengths)
        p = self.prosody_stream(lengths, mode, indices, fmaps, **filter_kw)
        return Streams(c, p, self.speaker_embed(speakers))

    def streams(self, content: torch.Tensor, speaker_id: int, mode: ProsodyMode,
                indices: torch.Tensor | None = None, fmap: FramePhoneMap | None = None,
                tau: int = 32, rdpf_mode: str = "deterministic", rdpf_seed: int = 0) -> Streams:
        """Single-utterance streams, each without the batch axis."""
        T = content.shape[0]
        s = self.streams_batch(content.unsqueeze(0), torch.tensor([T]), torch.tensor([speaker_id]), mode,
                               None if indices is None else indices.unsqueeze(0),
                               None if fmap is None else [fmap], tau=tau, rdpf_mode=rdpf_mode,
                               rdpf_seeds=[rdpf_seed])
        return Streams(s.content[0], s.prosody[0], s.speaker[0])

    def decode(self, content: torch.Tensor, prosody: torch.Tensor | None, spk: torch.Tensor,
               teacher_mel: torch.Tensor | None = None, masks=None) -> torch.Tensor:
        if prosody is None:
            prosody = content.new_zeros(*content.shape[:-1], PROSODY_DIM)
        if prosody.shape != content.shape[:-1] + (PROSODY_DIM,):
            raise ContractViolation(f"prosody must be {content.shape[:-1] + (PROSODY_DIM,)}, got {tuple(prosody.shape)}")
        return self.decoder(Streams(content, prosody, spk).concat(), teacher_mel, masks)

    # -- normalisation -----------------------------------------------------

    def set_mel_stats(self, mels: list[np.ndarray]) -> None:
        stacked = np.vstack(mels).astype(np.float64)
        self.mel_mean.copy_(torch.from_numpy(stacked.mean(axis=0)))
        self.mel_std.copy_(torch.from_numpy(np.maximum(stacked.std(axis=0), 1e-3)))

    def normalize_mel(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.mel_mean) / self.mel_std

    def denormalize_mel(self, mel: torch.Tensor) -> torch.Tensor:
        return mel * self.mel_std + self.mel_mean


def build_model(cfg: ModelConfig, seed: int = 0) -> ConversionModel:
    return init_uniform(ConversionModel(cfg), seed)
