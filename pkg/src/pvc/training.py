"""Training loop, learning-rate schedule and the checkpoint container."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np
import torch

from .alignment import FramePhoneMap
from .errors import ContractViolation, EmptyInputError, FormatError, MissingInputError, TrainingDivergedError
from .features import FrameMatrix
from .model import MODES, ConversionModel, ModelConfig, build_model, pad_sequences
from .prosody_encoder import length_mask
from .quantizer import IndexSequence

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PVCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    lr0: float = 0.001
    decay_rate: float = 0.7
    decay_every: int = 10
    epochs: int = 140
    batch_size: int = 32
    seed: int = 0
    prosody_mode: str = "adpf"
    tau: int = 32
    loss: str = "l1"

    def __post_init__(self):
        if self.prosody_mode not in MODES:
            raise ContractViolation(f"prosody_mode must be one of {MODES}")
        if self.loss != "l1":
            raise ContractViolation("only the l1 (mean absolute error) loss is supported")
        for name in ("lr0", "decay_rate", "decay_every", "epochs", "batch_size", "tau"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")


def learning_rate(epoch: int, cfg: TrainingConfig = TrainingConfig()) -> float:
    """Step decay: ``lr0 * decay_rate ** floor(epoch / decay_every)``."""
    return cfg.lr0 * cfg.decay_rate ** (epoch // cfg.decay_every)


def fingerprint(model_cfg: ModelConfig, train_cfg: TrainingConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "training": asdict(train_cfg)},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Utterance:
    uid: str
    content: FrameMatrix
    mel: FrameMatrix
    speaker_id: int
    indices: IndexSequence | None = None
    fmap: FramePhoneMap | None = None

    def __post_init__(self):
        if self.content.T != self.mel.T:
            raise ContractViolation(f"{self.uid}: content has {self.content.T} frames, mel {self.mel.T}")
        if self.indices is not None and self.indices.T != self.mel.T:
            raise ContractViolation(f"{self.uid}: indices have {self.indices.T} frames, mel {self.mel.T}")
        if self.fmap is not None and len(self.fmap) != self.mel.T:
            raise ContractViolation(f"{self.uid}: alignment covers {len(self.fmap)} frames, mel {self.mel.T}")


@dataclass
class Checkpoint:
    model: ConversionModel
    train_cfg: TrainingConfig
    epoch: int = 0
    optimizer_state: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.model_cfg, self.train_cfg)

    @property
    def mode(self) -> str:
        return self.train_cfg.prosody_mode


def _mix(*parts) -> int:
    """Stable 63-bit seed from ints and strings (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little") >> 1


def batch_losses(model: ConversionModel, utts: Sequence[Utterance], cfg: TrainingConfig, epoch: int,
                 dropout: bool = True) -> torch.Tensor:
    """Teacher-forced mean absolute error on normalised mel, one value per utterance.

    Dropout masks and random RDPF picks are seeded per ``(seed, epoch, uid)``,
    so an utterance's loss does not depend on the rest of the batch.
    """
    dtype = model.dtype
    mode = cfg.prosody_mode
    content, lengths = pad_sequences([torch.as_tensor(u.content.data, dtype=dtype) for u in utts])
    idx = None
    if mode != "none":
        if any(u.indices is None for u in utts):
            raise MissingInputError(f"mode {mode} needs discrete indices for every utterance")
        idx = pad_sequences([torch.from_numpy(u.indices.indices) for u in utts])[0]
    fmaps = [u.fmap for u in utts] if mode == "adpf" else None
    speakers = torch.tensor([u.speaker_id for u in utts])
    seeds = [_mix(cfg.seed, epoch, u.uid, "rdpf") % (2 ** 32) for u in utts]
    streams = model.streams_batch(content, lengths, speakers, mode, idx, fmaps, tau=cfg.tau,
                                  rdpf_mode="random", rdpf_seeds=seeds)
    target = pad_sequences([model.normalize_mel(torch.as_tensor(u.mel.data, dtype=dtype)) for u in utts])[0]
    masks = None
    if dropout and model.cfg.prenet_dropout > 0:
        gens = [torch.Generator().manual_seed(_mix(cfg.seed, epoch, u.uid, "prenet")) for u in utts]
        per_utt = [model.decoder.dropout_masks(u.mel.T, g, dtype) for u, g in zip(utts, gens)]
        masks = [pad_sequences([m[layer] for m in per_utt])[0] for layer in range(len(per_utt[0]))]
    pred = model.decode(streams.content, streams.prosody, streams.speaker, teacher_mel=target, masks=masks)
    valid = length_mask(lengths, target.shape[1])[..., None].to(dtype)
    return ((pred - target).abs() * valid).sum(dim=(1, 2)) / (lengths.to(dtype) * target.shape[2])


def utterance_loss(model: ConversionModel, utt: Utterance, cfg: TrainingConfig, epoch: int,
                   dropout: bool = True) -> torch.Tensor:
    return batch_losses(model, [utt], cfg, epoch, dropout)[0]


def _make_optimizer(model: ConversionModel, cfg: TrainingConfig,
                    state: dict[str, dict[str, torch.Tensor]]) -> torch.optim.Adam:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    for name, p in model.named_parameters():
        if name in state:
            opt.state[p] = {k: v.clone() for k, v in state[name].items()}
    return opt


def _optimizer_state(model: ConversionModel, opt: torch.optim.Adam) -> dict[str, dict[str, torch.Tensor]]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[name] = {k: st[k].detach().clone() for k in ("step", "exp_avg", "exp_avg_sq")}
    return out


def train(dataset: Sequence[Utterance], cfg: TrainingConfig, model_cfg: ModelConfig | None = None,
          checkpoint: Checkpoint | None = None, log_file: TextIO | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> Checkpoint:
    """Adam with step-decayed learning rate over ``cfg.epochs`` epochs.

    Each epoch visits the utterances in an order shuffled by ``(seed, epoch)``.
    Within a batch, utterances are processed in uid order with per-utterance
    dropout seeds, so a batch's gradient does not depend on how it was
    assembled. Resuming from ``checkpoint`` continues at its epoch counter.
    """
    if not dataset:
        raise EmptyInputError("empty training set")
    # canonical order: the caller's list order must not leak into the shuffle
    dataset = sorted(dataset, key=lambda u: u.uid)
    uids = [u.uid for u in dataset]
    if len(set(uids)) != len(uids):
        raise ContractViolation("utterance uids must be unique")
    if checkpoint is None:
        if model_cfg is None:
            raise ContractViolation("need a model config or a checkpoint")
        model = build_model(model_cfg, cfg.seed)
        model.set_mel_stats([u.mel.data for u in dataset])
        checkpoint = Checkpoint(model, cfg)
    model = checkpoint.model
    opt = _make_optimizer(model, cfg, checkpoint.optimizer_state)
    model.train()

    for epoch in range(checkpoint.epoch, cfg.epochs):
        lr = learning_rate(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(_mix(cfg.seed, epoch, "shuffle") % (2 ** 63)).permutation(len(dataset))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = sorted((dataset[i] for i in order[start:start + cfg.batch_size]), key=lambda u: u.uid)
            opt.zero_grad(set_to_none=True)
            losses = batch_losses(model, batch, cfg, epoch)
            values = losses.detach().tolist()
            for utt, value in zip(batch, values):
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b} (utterance {utt.uid})")
            total += sum(values)
            losses.mean().backward()
            opt.step()
        epoch_loss = total / len(dataset)
        checkpoint.losses.append(epoch_loss)
        checkpoint.epoch = epoch + 1
        if log_file is not None:
            log_file.write(f"{epoch}\t{lr!r}\t{epoch_loss:.6f}\n")
            log_file.flush()
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, lr, epoch_loss)
    checkpoint.optimizer_state = _optimizer_state(model, opt)
    model.eval()
    return checkpoint


@torch.no_grad()
def evaluate_loss(model: ConversionModel, dataset: Sequence[Utterance], cfg: TrainingConfig) -> float:
    """Mean teacher-forced loss without dropout."""
    return float(batch_losses(model, list(dataset), cfg, 0, dropout=False).mean())


# ------------------------------------------------------------ checkpoint I/O


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _write_block(fh, name: str, t: torch.Tensor) -> None:
    _write_str(fh, name)
    fh.write(struct.pack("<I", t.dim()))
    fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
    fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_str(fh, ck.fingerprint)
    fh.write(struct.pack("<I", ck.epoch))
    _write_str(fh, json.dumps({"model": ck.model_cfg.to_dict(), "training": asdict(ck.train_cfg)},
                              sort_keys=True, separators=(",", ":")))
    tensors = list(ck.model.state_dict().items())
    fh.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        _write_block(fh, name, t)
    opt_blocks = [(f"{name}/{k}", v) for name, st in ck.optimizer_state.items() for k, v in st.items()]
    fh.write(struct.pack("<I", len(opt_blocks)))
    for name, t in opt_blocks:
        _write_block(fh, name, t)
    fh.write(struct.pack("<I", len(ck.losses)))
    fh.write(np.asarray(ck.losses, dtype="<f8").tobytes())
    return fh.getvalue()


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def block(self) -> tuple[str, torch.Tensor]:
        name = self.string()
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return name, torch.from_numpy(data.copy())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path))


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    fp = r.string()
    epoch = r.u32()
    cfg = json.loads(r.string())
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainingConfig(**cfg["training"])
    if fingerprint(model_cfg, train_cfg) != fp:
        raise FormatError(f"{source}: config fingerprint mismatch")
    model = ConversionModel(model_cfg)
    state = dict(r.block() for _ in range(r.u32()))
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise FormatError(f"{source}: parameter set mismatch: {sorted(missing)}")
    model.load_state_dict(state)
    opt_state: dict[str, dict[str, torch.Tensor]] = {}
    for _ in range(r.u32()):
        name, t = r.block()
        pname, key = name.rsplit("/", 1)
        opt_state.setdefault(pname, {})[key] = t
    n_losses = r.u32()
    losses = np.frombuffer(r.take(8 * n_losses), dtype="<f8").tolist()
    if r.pos != len(raw):
        raise FormatError(f"{source}: trailing bytes")
    model.eval()
    return Checkpoint(model, train_cfg, epoch, opt_state, losses)
