"""Prosody encoder: discrete index pairs to frame-level 4-dim prosody vectors.

Pipeline per utterance: two embedding lookups concatenated, max-pool over time
(kernel 2, stride 2), six same-padded 3x3 convolutions over the (time, feature)
plane, a bidirectional GRU, a linear map to 4 dims, then x2 nearest-neighbour
upsampling trimmed back to the input length.

Batched calls pad on the right; padding is masked at every stage so each
utterance is encoded exactly as it would be on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import ContractViolation, EmptyInputError
from .features import PROSODY_DIM, FrameMatrix
from .nn_init import init_uniform
from .quantizer import IndexSequence


@dataclass(frozen=True)
class ProsodyEncoderConfig:
    codebook_size: int = 320
    embed_dim: int = 128
    conv_channels: tuple[int, ...] = (32, 32, 64, 64, 64, 64)
    kernel: int = 3
    rnn_hidden: int = 32
    out_dim: int = PROSODY_DIM


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T)[None, :] < lengths[:, None]


def run_packed(rnn: nn.RNNBase, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Run ``rnn`` over right-padded ``B x T x D`` input, zeros past each length."""
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = rnn(packed)
    return pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])[0]


class ProsodyEncoder(nn.Module):
    def __init__(self, cfg: ProsodyEncoderConfig = ProsodyEncoderConfig()):
        super().__init__()
        if len(cfg.conv_channels) != 6:
            raise ContractViolation("prosody encoder uses exactly six conv layers")
        if cfg.out_dim != PROSODY_DIM:
            raise ContractViolation(f"prosody output must be {PROSODY_DIM}-dim")
        self.cfg = cfg
        self.table_a = nn.Embedding(cfg.codebook_size, cfg.embed_dim)
        self.table_b = nn.Embedding(cfg.codebook_size, cfg.embed_dim)
        chans = (1,) + tuple(cfg.conv_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, cfg.kernel, stride=1, padding=cfg.kernel // 2)
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        feat = chans[-1] * 2 * cfg.embed_dim
        self.birnn = nn.GRU(feat, cfg.rnn_hidden, batch_first=True, bidirectional=True)
        self.out_proj = nn.Linear(2 * cfg.rnn_hidden, cfg.out_dim)

    def embed(self, idx: torch.Tensor) -> torch.Tensor:
        """``(B x) T x 2`` indices to ``(B x) T x 2E`` concatenated embeddings."""
        V = self.cfg.codebook_size
        if idx.shape[-1] != 2:
            raise ContractViolation("indices must have two groups per frame")
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= V):
            raise ContractViolation(f"index outside [0, {V})")
        return torch.cat([self.table_a(idx[..., 0]), self.table_b(idx[..., 1])], dim=-1)

    def encode(self, emb: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        single = emb.dim() == 2
        if single:
            emb = emb.unsqueeze(0)
        B, T, _ = emb.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        if int(lengths.min()) < 2:
            raise EmptyInputError("prosody encoder needs at least 2 frames")
        mask = length_mask(lengths, T)
        x = emb.masked_fill(~mask[..., None], float("-inf"))
        x = F.max_pool1d(x.transpose(1, 2), kernel_size=2, stride=2, ceil_mode=True).transpose(1, 2)
        plens = (lengths + 1) // 2
        pmask = length_mask(plens, x.shape[1])
        x = x.masked_fill(~pmask[..., None], 0.0).unsqueeze(1)  # B x 1 x T' x 2E
        cmask = pmask[:, None, :, None].to(x.dtype)
        for conv in self.convs:
            x = F.relu(conv(x)) * cmask
        _, C, Tp, E2 = x.shape
        x = x.permute(0, 2, 1, 3).reshape(B, Tp, C * E2)
        h = run_packed(self.birnn, x, plens)
        y = self.out_proj(h).repeat_interleave(2, dim=1)[:, :T]
        y = y * mask[..., None].to(y.dtype)
        return y[0] if single else y

    def forward(self, idx: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.encode(self.embed(idx), lengths)


def init_prosody_encoder(V: int = 320, seed: int = 0,
                         cfg: ProsodyEncoderConfig | None = None) -> ProsodyEncoder:
    if V < 2:
        raise ContractViolation("codebook size must be at least 2")
    cfg = cfg or ProsodyEncoderConfig()
    if cfg.codebook_size != V:
        cfg = ProsodyEncoderConfig(V, cfg.embed_dim, cfg.conv_channels, cfg.kernel, cfg.rnn_hidden, cfg.out_dim)
    return init_uniform(ProsodyEncoder(cfg), seed)


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def embed_indices(idx: IndexSequence, params: ProsodyEncoder) -> np.ndarray:
    return params.embed(torch.from_numpy(idx.indices)).numpy()


@torch.no_grad()
def encode_prosody(embedded: np.ndarray, params: ProsodyEncoder, hop_seconds: float = 0.01) -> FrameMatrix:
    x = torch.as_tensor(np.asarray(embedded), dtype=_param_dtype(params))
    return FrameMatrix(params.encode(x).numpy(), hop_seconds, "prosody")
