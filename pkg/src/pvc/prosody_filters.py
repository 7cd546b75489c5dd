"""Downsample-then-upsample prosody filters.

RDPF keeps one prosody vector per group of frames and repeats it across the
group. Groups are fixed blocks of ``tau`` frames (the canonical reading; the
deterministic pick is the block's last frame, i.e. timestamps ``tau-1, 2*tau-1,
...``) or, with ``grouping="phone"``, the phone segments of an alignment.

ADPF runs a causal GRU over the prosody vectors and keeps, for every phone,
the hidden state at the phone's final frame, repeated across that phone.

Both filters preserve the sequence length exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from .alignment import FramePhoneMap
from .errors import ContractViolation
from .features import PROSODY_DIM, FrameMatrix
from .nn_init import init_uniform

Mode = Literal["deterministic", "random"]


@dataclass
class FilteredProsody:
    matrix: FrameMatrix
    provenance: str  # "rdpf" | "adpf" | "none"
    selected_frames: np.ndarray
    group_of_frame: np.ndarray

    def __post_init__(self):
        if self.provenance not in ("rdpf", "adpf", "none"):
            raise ContractViolation(f"unknown provenance {self.provenance!r}")
        if self.matrix.kind != "filtered_prosody":
            raise ContractViolation("filtered prosody must have kind filtered_prosody")
        if self.group_of_frame.shape[0] != self.matrix.T:
            raise ContractViolation("group map does not cover every frame")

    @property
    def T(self) -> int:
        return self.matrix.T


# ---------------------------------------------------------------- RDPF


def block_groups(T: int, tau: int) -> np.ndarray:
    """Group ordinal of every frame for contiguous blocks of ``tau``."""
    if tau < 1:
        raise ContractViolation(f"tau must be >= 1, got {tau}")
    if T < 1:
        raise ContractViolation("need at least one frame")
    return np.arange(T) // tau


def _group_bounds(groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ends = np.append(np.nonzero(np.diff(groups))[0], len(groups) - 1)
    starts = np.concatenate([[0], ends[:-1] + 1])
    return starts, ends


def rdpf_select(T: int, tau: int = 32, mode: Mode = "deterministic", seed: int = 0,
                fmap: FramePhoneMap | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Frames kept by RDPF and the group each frame belongs to.

    With ``fmap`` the groups are phone segments, otherwise ``tau``-blocks.
    Deterministic mode keeps each group's last frame; random mode draws one
    frame uniformly inside each group from a generator seeded with ``seed``.
    """
    if tau < 1:
        raise ContractViolation(f"tau must be >= 1, got {tau}")
    if fmap is not None:
        if len(fmap) != T:
            raise ContractViolation(f"frame map covers {len(fmap)} frames, expected {T}")
        groups = fmap.phone_of_frame
    else:
        groups = block_groups(T, tau)
    starts, ends = _group_bounds(groups)
    if mode == "deterministic":
        selected = ends.copy()
    elif mode == "random":
        rng = np.random.default_rng(seed)
        selected = starts + np.floor(rng.random(len(starts)) * (ends - starts + 1)).astype(np.int64)
    else:
        raise ContractViolation(f"unknown RDPF mode {mode!r}")
    return selected.astype(np.int64), groups.astype(np.int64)


def repeat_selected(x: torch.Tensor, selected: np.ndarray, groups: np.ndarray) -> torch.Tensor:
    """``out[t] = x[selected[groups[t]]]`` -- gather then upsample by repetition."""
    return x[torch.from_numpy(selected[groups])]


def rdpf(p: FrameMatrix, tau: int = 32, mode: Mode = "deterministic", seed: int = 0,
         fmap: FramePhoneMap | None = None) -> FilteredProsody:
    if p.kind != "prosody":
        raise ContractViolation(f"RDPF filters prosody vectors, got {p.kind}")
    selected, groups = rdpf_select(p.T, tau, mode, seed, fmap)
    out = p.data[selected[groups]]
    return FilteredProsody(FrameMatrix(out, p.hop_seconds, "filtered_prosody"), "rdpf", selected, groups)


# ---------------------------------------------------------------- ADPF


class AdpfParams(nn.Module):
    """Unidirectional GRU over prosody vectors; zero initial state."""

    def __init__(self, input_dim: int = PROSODY_DIM, hidden: int = PROSODY_DIM):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden, batch_first=True)

    @property
    def hidden(self) -> int:
        return self.gru.hidden_size

    def hidden_states(self, x: torch.Tensor) -> torch.Tensor:
        """``(B x) T x input_dim`` to ``(B x) T x hidden``; row t depends only on rows <= t."""
        if x.dim() == 2:
            return self.gru(x.unsqueeze(0))[0][0]
        return self.gru(x)[0]

    def forward(self, x: torch.Tensor, fmap: FramePhoneMap | list[FramePhoneMap]) -> torch.Tensor:
        """Phone-final hidden state repeated over each phone.

        ``x`` is ``T x D`` with one map, or right-padded ``B x T x D`` with a
        list of maps (padding frames come back as zeros).
        """
        if x.dim() == 2:
            if x.shape[0] != len(fmap):
                raise ContractViolation(f"frame map covers {len(fmap)} frames, prosody has {x.shape[0]}")
            h = self.hidden_states(x)
            return repeat_selected(h, fmap.segment_ends(), fmap.phone_of_frame)
        B, T, _ = x.shape
        if len(fmap) != B:
            raise ContractViolation("need one frame map per batch row")
        gather = np.zeros((B, T), dtype=np.int64)
        valid = np.zeros((B, T), dtype=bool)
        for b, m in enumerate(fmap):
            if len(m) > T:
                raise ContractViolation(f"frame map covers {len(m)} frames, batch has {T}")
            gather[b, :len(m)] = m.segment_ends()[m.phone_of_frame]
            valid[b, :len(m)] = True
        h = self.hidden_states(x)
        idx = torch.from_numpy(gather)[..., None].expand(-1, -1, h.shape[-1])
        return torch.gather(h, 1, idx) * torch.from_numpy(valid)[..., None].to(h.dtype)


def init_adpf(seed: int = 0, hidden: int = PROSODY_DIM) -> AdpfParams:
    return init_uniform(AdpfParams(PROSODY_DIM, hidden), seed)


def adpf(p: FrameMatrix, fmap: FramePhoneMap, params: AdpfParams) -> FilteredProsody:
    if p.kind != "prosody":
        raise ContractViolation(f"ADPF filters prosody vectors, got {p.kind}")
    if p.T != len(fmap):
        raise ContractViolation(f"frame map covers {len(fmap)} frames, prosody has {p.T}")
    dtype = next(params.parameters()).dtype
    with torch.no_grad():
        out = params(torch.as_tensor(p.data, dtype=dtype), fmap).numpy()
    return FilteredProsody(FrameMatrix(out, p.hop_seconds, "filtered_prosody"), "adpf",
                           fmap.segment_ends(), fmap.phone_of_frame.copy())


def adpf_grad(p: FrameMatrix | np.ndarray, fmap: FramePhoneMap, params: AdpfParams,
              upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * adpf(p))`` w.r.t. the GRU parameters and ``p``.

    Returns:
        ``(param_grads, input_grad)`` with ``param_grads`` keyed by parameter name.
    """
    data = p.data if isinstance(p, FrameMatrix) else np.asarray(p)
    dtype = next(params.parameters()).dtype
    x = torch.tensor(data, dtype=dtype, requires_grad=True)
    g = torch.as_tensor(np.asarray(upstream), dtype=dtype)
    if g.shape != (data.shape[0], params.hidden):
        raise ContractViolation(f"upstream gradient must be {(data.shape[0], params.hidden)}, got {tuple(g.shape)}")
    names, tensors = zip(*params.named_parameters())
    out = params(x, fmap)
    grads = torch.autograd.grad(out, (x,) + tensors, grad_outputs=g, allow_unused=True)
    input_grad = grads[0].numpy()
    param_grads = {
        n: (gr.numpy() if gr is not None else np.zeros(t.shape))
        for n, t, gr in zip(names, tensors, grads[1:])
    }
    return param_grads, input_grad
