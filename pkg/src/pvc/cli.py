"""``pvc`` command line: extract, train-codebook, train, convert, evaluate, inspect-filter.

Every subcommand accepts ``--config`` (YAML), ``--seed``, ``--mode`` and
``--out``. Flags override config values. Each run writes ``run.json`` next to
its outputs, recording the config fingerprint, seed, library versions and a
sha256 of every output file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import scipy
import torch
import yaml

from . import __version__
from .alignment import FramePhoneMap, parse_alignment, to_frames
from .errors import (ContractViolation, EmptyInputError, InsufficientDataError, MissingInputError, PVCError,
                     ValidationError)
from .evaluation import (ClassifierEmbedder, StatsEmbedder, cosine, eer_threshold, enroll, far_from_scores,
                         prosody_consistency, write_report)
from .features import (F0Track, FeatureConfig, FrameMatrix, ContentProjection, content_features, extract_f0,
                       fit_content_projection, load_waveform, mel_spectrogram, read_feature_cache,
                       save_waveform, write_feature_cache)
from .model import MODES, ModelConfig
from .pipeline import FrontEnd, convert
from .prosody_filters import FilteredProsody, adpf, init_adpf, rdpf
from .quantizer import load_codebook, quantize, save_codebook, train_codebook
from .training import TrainingConfig, Utterance, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pvc")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST = "manifest.tsv"
PROJECTION = "projection.pvcf"
CODEBOOK = "codebook.pvcb"
CHECKPOINT = "checkpoint.pvck"
SPEAKERS = "speakers.txt"
CONVERSIONS = "conversions.tsv"
ALIGNMENT_SUFFIXES = (".tsv", ".TextGrid", ".textgrid")


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ContentConfig:
    dim: int = 128
    n_ceps: int = 13
    context: int = 5
    envelope: int = 9


@dataclass(frozen=True)
class QuantizerConfig:
    codebook_size: int = 320
    iterations: int = 20


@dataclass(frozen=True)
class EvaluationConfig:
    embedder: str = "stats"
    enroll_count: int = 10
    threshold: float | None = None
    min_frames: int = 8


@dataclass(frozen=True)
class VocoderConfig:
    gl_iters: int = 48


# model keys that are fixed by other sections or by the data
DERIVED_MODEL_KEYS = {"n_mels": "features.n_mels", "content_dim": "content.dim",
                      "codebook_size": "quantizer.codebook_size", "n_speakers": "the training data"}
MODEL_PRESETS = {"default": ModelConfig, "toy": ModelConfig.toy, "test": ModelConfig.test}
PATH_KEYS = ("data_dir", "alignments_dir", "features_dir", "codebook", "checkpoint")


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    content: ContentConfig = field(default_factory=ContentConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: dict[str, Any] = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    paths: dict[str, Path] = field(default_factory=dict)
    seed: int = 0

    def model_config(self, n_speakers: int) -> ModelConfig:
        overrides = dict(self.model)
        preset = MODEL_PRESETS[overrides.pop("preset", "default")]
        for key in ("prosody_conv", "prenet"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return preset(**overrides, n_mels=self.features.n_mels, content_dim=self.content.dim,
                      codebook_size=self.quantizer.codebook_size, n_speakers=n_speakers)

    def semantic_dict(self) -> dict:
        """Everything except paths: the part that determines results."""
        return {
            "features": dataclasses.asdict(self.features),
            "content": dataclasses.asdict(self.content),
            "quantizer": dataclasses.asdict(self.quantizer),
            "model": self.model,
            "training": dataclasses.asdict(self.training),
            "evaluation": dataclasses.asdict(self.evaluation),
            "vocoder": dataclasses.asdict(self.vocoder),
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _section(cls, raw: Any, name: str, exclude: Sequence[str] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {name} section: {exc}") from None


def _model_section(raw: Any) -> dict[str, Any]:
    raw = dict(raw or {})
    allowed = {f.name for f in dataclasses.fields(ModelConfig)} | {"preset"}
    derived = sorted(set(raw) & set(DERIVED_MODEL_KEYS))
    if derived:
        where = ", ".join(f"{k} (set by {DERIVED_MODEL_KEYS[k]})" for k in derived)
        raise ValidationError(f"model keys are derived elsewhere: {where}")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) in model: {', '.join(unknown)}")
    if raw.get("preset", "default") not in MODEL_PRESETS:
        raise ValidationError(f"model.preset must be one of {sorted(MODEL_PRESETS)}")
    return raw


def parse_config(raw: Any, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a decoded config mapping; relative paths resolve against ``base_dir``."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping")
    sections = {"features", "content", "quantizer", "model", "training", "evaluation", "vocoder", "paths", "seed"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValidationError("seed must be an integer")
    training_raw = dict(raw.get("training") or {})
    if "seed" in training_raw:
        raise ValidationError("unknown key(s) in training: seed (use the top-level seed)")
    training = _section(TrainingConfig, {**training_raw, "seed": seed}, "training")
    paths_raw = raw.get("paths") or {}
    bad = sorted(set(paths_raw) - set(PATH_KEYS))
    if bad:
        raise ValidationError(f"unknown key(s) in paths: {', '.join(bad)}")
    paths = {k: (base_dir / str(v)).resolve() for k, v in paths_raw.items() if v is not None}
    evaluation = _section(EvaluationConfig, raw.get("evaluation"), "evaluation")
    if evaluation.embedder not in EMBEDDERS:
        raise ValidationError(f"evaluation.embedder must be one of {sorted(EMBEDDERS)}")
    return RunConfig(
        features=_section(FeatureConfig, raw.get("features"), "features"),
        content=_section(ContentConfig, raw.get("content"), "content"),
        quantizer=_section(QuantizerConfig, raw.get("quantizer"), "quantizer"),
        model=_model_section(raw.get("model")),
        training=training,
        evaluation=evaluation,
        vocoder=_section(VocoderConfig, raw.get("vocoder"), "vocoder"),
        paths=paths,
        seed=seed,
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(raw, path.parent)


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.training = dataclasses.replace(cfg.training, seed=args.seed)
    if args.mode is not None:
        cfg.training = dataclasses.replace(cfg.training, prosody_mode=args.mode)
    return cfg


# ---------------------------------------------------------------- run files


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_metadata(out_dir: Path, command: str, cfg: RunConfig, outputs: Sequence[Path],
                       extra: dict | None = None) -> Path:
    meta = {
        "command": command,
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "config": cfg.semantic_dict(),
        "versions": {"pvc": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "torch": torch.__version__, "pyyaml": yaml.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p): _sha256(p)
                    for p in outputs},
    }
    if extra:
        meta.update(extra)
    path = out_dir / "run.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise MissingInputError(f"missing {what}: no path given")
    if not path.exists():
        raise MissingInputError(f"missing {what}: {path} does not exist")
    return path


def _path(flag: str | None, cfg: RunConfig, key: str) -> Path | None:
    if flag is not None:
        return Path(flag).resolve()
    return cfg.paths.get(key)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestRow:
    uid: str
    speaker: str
    frames: int
    wav: str
    alignment: str  # empty when there is none

    @property
    def cache(self) -> str:
        return f"{self.uid}.pvcf"


def write_manifest(path: Path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["uid", "speaker", "frames", "wav", "alignment"])
        for r in rows:
            w.writerow([r.uid, r.speaker, r.frames, r.wav, r.alignment])


def read_manifest(features_dir: Path) -> list[ManifestRow]:
    path = _require(features_dir / MANIFEST, "feature manifest (run `pvc extract` first)")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        raise EmptyInputError(f"{path}: manifest lists no utterances")
    return [ManifestRow(r["uid"], r["speaker"], int(r["frames"]), r["wav"], r["alignment"]) for r in rows]


def speaker_of(wav: Path, input_dir: Path) -> str:
    """First sub-directory under the input dir, else the file stem up to its last underscore."""
    rel = wav.relative_to(input_dir)
    if len(rel.parts) > 1:
        return rel.parts[0]
    stem = wav.stem
    return stem.rsplit("_", 1)[0] if "_" in stem else stem


def find_alignment(align_dir: Path | None, uid: str) -> Path | None:
    if align_dir is None:
        return None
    for suffix in ALIGNMENT_SUFFIXES:
        p = align_dir / f"{uid}{suffix}"
        if p.is_file():
            return p
    return None


def _load_cache(features_dir: Path, row: ManifestRow) -> dict[str, FrameMatrix]:
    path = _require(features_dir / row.cache, f"feature cache for {row.uid}")
    return {m.kind: m for m in read_feature_cache(path)}


def _load_projection(features_dir: Path) -> ContentProjection:
    path = _require(features_dir / PROJECTION, "content projection (run `pvc extract` first)")
    return ContentProjection.from_matrices(read_feature_cache(path))


# ---------------------------------------------------------------- commands


def cmd_extract(args: argparse.Namespace, cfg: RunConfig) -> int:
    input_dir = _path(args.input, cfg, "data_dir")
    out = _path(args.out, cfg, "features_dir")
    if input_dir is None or not input_dir.is_dir():
        raise MissingInputError(f"no input files: input directory {input_dir} does not exist")
    if out is None:
        raise MissingInputError("missing output directory: pass --out or set paths.features_dir")
    align_dir = _path(args.alignments, cfg, "alignments_dir")
    wavs = sorted(input_dir.rglob("*.wav"))
    if not wavs:
        log.error("no input files: %s contains no .wav files", input_dir)
        return 1
    out.mkdir(parents=True, exist_ok=True)

    loaded: list[tuple[str, str, Path, FrameMatrix, F0Track, Path | None]] = []
    failures: list[tuple[str, str]] = []
    seen: set[str] = set()
    for wav in wavs:
        uid = wav.stem
        try:
            if uid in seen:
                raise ValidationError(f"duplicate utterance id {uid!r}")
            seen.add(uid)
            w = load_waveform(wav, cfg.features.sample_rate)
            mel = mel_spectrogram(w, cfg.features)
            f0 = extract_f0(w, cfg.features)
            align = find_alignment(align_dir, uid)
            if align is not None:
                to_frames(parse_alignment(align), mel.T, mel.hop_seconds)
            loaded.append((uid, speaker_of(wav, input_dir), wav, mel, f0, align))
            log.debug("%s: %d frames", uid, mel.T)
        except (PVCError, OSError, ValueError) as exc:
            failures.append((str(wav), str(exc)))
            log.error("%s: %s", wav, exc)
    if not loaded:
        log.error("extraction failed for all %d input files", len(wavs))
        return 1

    c = cfg.content
    projection = fit_content_projection([m for *_, m, _, _ in loaded], c.dim, c.n_ceps, c.context, c.envelope)
    write_feature_cache(out / PROJECTION, projection.to_matrices())
    # reload so extraction and later conversion use the identical stored projection
    projection = _load_projection(out)
    outputs = [out / PROJECTION]
    rows = []
    for uid, speaker, wav, mel, f0, align in loaded:
        path = out / f"{uid}.pvcf"
        write_feature_cache(path, [mel, f0.as_matrix(), content_features(mel, projection)])
        kinds = [m.kind for m in read_feature_cache(path)]
        if kinds != ["mel", "f0", "content"]:
            raise ValidationError(f"{path}: validation read back {kinds}")
        outputs.append(path)
        rows.append(ManifestRow(uid, speaker, mel.T, str(wav), "" if align is None else str(align)))
    write_manifest(out / MANIFEST, rows)
    outputs.append(out / MANIFEST)
    write_run_metadata(out, "extract", cfg, outputs, {"failures": [f for f, _ in failures]})
    log.info("extracted %d utterance(s) into %s", len(rows), out)
    if failures:
        log.error("%d of %d file(s) failed: %s", len(failures), len(wavs), ", ".join(f for f, _ in failures))
        return 1
    return 0


def cmd_train_codebook(args: argparse.Namespace, cfg: RunConfig) -> int:
    features_dir = _require(_path(args.features, cfg, "features_dir"), "features directory")
    rows = read_manifest(features_dir)
    mels = [_load_cache(features_dir, r)["mel"] for r in rows]
    stacked = FrameMatrix(np.vstack([m.data for m in mels]), mels[0].hop_seconds, "mel")
    q = cfg.quantizer
    cb = train_codebook(stacked, q.codebook_size, q.iterations, cfg.seed)
    out = Path(args.out).resolve() if args.out else features_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / CODEBOOK
    save_codebook(path, cb)
    load_codebook(path)
    history = [float(d) for d in cb.distortion_history]
    write_run_metadata(out, "train-codebook", cfg, [path], {"distortion_history": history})
    log.info("codebook V=%d, final distortion %.5f -> %s", cb.V, history[-1], path)
    return 0


def _utterances(features_dir: Path, rows: Sequence[ManifestRow], speakers: list[str], cb, mode: str
                ) -> list[Utterance]:
    utts = []
    for r in rows:
        cache = _load_cache(features_dir, r)
        mel, content = cache["mel"], cache["content"]
        fmap = None
        if r.alignment:
            fmap = to_frames(parse_alignment(_require(Path(r.alignment), f"alignment for {r.uid}")),
                             mel.T, mel.hop_seconds)[1]
        elif mode == "adpf":
            raise MissingInputError(f"mode adpf needs an alignment for every utterance; {r.uid} has none")
        utts.append(Utterance(r.uid, content, mel, speakers.index(r.speaker), quantize(mel, cb), fmap))
    return utts


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    features_dir = _require(_path(args.features, cfg, "features_dir"), "features directory")
    cb_path = _path(args.codebook, cfg, "codebook") or features_dir / CODEBOOK
    cb = load_codebook(_require(cb_path, "codebook (run `pvc train-codebook` first)"))
    if cb.V != cfg.quantizer.codebook_size:
        raise ContractViolation(f"codebook has V={cb.V}, config says {cfg.quantizer.codebook_size}")
    out = _path(args.out, cfg, "checkpoint")
    if out is None:
        raise MissingInputError("missing output directory: pass --out")
    rows = read_manifest(features_dir)
    speakers = sorted({r.speaker for r in rows})
    mode = cfg.training.prosody_mode
    utts = _utterances(features_dir, rows, speakers, cb, mode)
    model_cfg = cfg.model_config(len(speakers))
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.log"
    with open(log_path, "w", encoding="utf-8") as fh:
        ck = train(utts, cfg.training, model_cfg, log_file=fh)
    ck_path = out / CHECKPOINT
    save_checkpoint(ck_path, ck)
    if load_checkpoint(ck_path).fingerprint != ck.fingerprint:
        raise ValidationError(f"{ck_path}: checkpoint failed read-back validation")
    (out / SPEAKERS).write_text("".join(s + "\n" for s in speakers), encoding="utf-8")
    write_run_metadata(out, "train", cfg, [ck_path, log_path, out / SPEAKERS],
                       {"checkpoint_fingerprint": ck.fingerprint, "mode": mode})
    log.info("trained %d epoch(s), final loss %.5f -> %s", ck.epoch, ck.losses[-1] if ck.losses else float("nan"),
             ck_path)
    return 0


def _checkpoint_dir(args, cfg) -> Path:
    p = _path(args.checkpoint, cfg, "checkpoint")
    if p is None:
        raise MissingInputError("missing checkpoint: pass --checkpoint")
    return p.parent if p.suffix == ".pvck" else p


def cmd_convert(args: argparse.Namespace, cfg: RunConfig) -> int:
    ck_dir = _checkpoint_dir(args, cfg)
    ck = load_checkpoint(_require(ck_dir / CHECKPOINT, "checkpoint"))
    speakers = _require(ck_dir / SPEAKERS, "speaker list").read_text(encoding="utf-8").split()
    features_dir = _require(_path(args.features, cfg, "features_dir"), "features directory")
    cb_path = _path(args.codebook, cfg, "codebook") or features_dir / CODEBOOK
    frontend = FrontEnd(_load_projection(features_dir), load_codebook(_require(cb_path, "codebook")), cfg.features)
    if args.target not in speakers:
        raise ContractViolation(f"unknown target speaker {args.target!r}; known: {', '.join(speakers)}")
    target = speakers.index(args.target)
    mode = args.mode or ck.mode
    if mode != ck.mode:
        raise ContractViolation(f"checkpoint was trained with mode {ck.mode!r}, not {mode!r}")
    wavs: list[Path] = []
    for item in args.input:
        p = Path(item)
        wavs.extend(sorted(p.rglob("*.wav")) if p.is_dir() else [p])
    if not wavs:
        log.error("no input files to convert")
        return 1
    align_dir = _path(args.alignments, cfg, "alignments_dir")
    out = Path(args.out).resolve() if args.out else None
    if out is None:
        raise MissingInputError("missing output directory: pass --out")
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    for wav in wavs:
        uid = wav.stem
        align = Path(args.alignment) if args.alignment and len(wavs) == 1 else find_alignment(align_dir, uid)
        segments = None
        if align is not None:
            segments = parse_alignment(_require(align, f"alignment for {uid}"))
        elif mode == "adpf":
            raise MissingInputError(f"mode adpf needs a phone alignment for {uid}: pass --alignment or --alignments")
        source = load_waveform(_require(wav, "input wav"), cfg.features.sample_rate)
        result = convert(source, target, ck, frontend, segments, mode, gl_iters=cfg.vocoder.gl_iters)
        name = f"{uid}_to_{args.target}"
        save_waveform(out / f"{name}.wav", result.waveform)
        write_feature_cache(out / f"{name}.pvcf", [result.mel])
        outputs += [out / f"{name}.wav", out / f"{name}.pvcf"]
        rows.append([uid, str(wav.resolve()), args.target, mode, f"{name}.wav"])
    with open(out / CONVERSIONS, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["uid", "source_wav", "target", "system", "converted_wav"])
        w.writerows(rows)
    outputs.append(out / CONVERSIONS)
    write_run_metadata(out, "convert", cfg, outputs, {"checkpoint_fingerprint": ck.fingerprint})
    log.info("converted %d file(s) to %s -> %s", len(rows), args.target, out)
    return 0


def _stats_embedder(mels, labels, cfg):
    return StatsEmbedder().fit(mels)


def _classifier_embedder(mels, labels, cfg):
    return ClassifierEmbedder.train(mels, labels, seed=cfg.seed)


EMBEDDERS: dict[str, Callable] = {"stats": _stats_embedder, "classifier": _classifier_embedder}


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    features_dir = _require(_path(args.features, cfg, "features_dir"), "features directory")
    rows = read_manifest(features_dir)
    speakers = sorted({r.speaker for r in rows})
    mels = {r.uid: _load_cache(features_dir, r)["mel"] for r in rows}
    ev = cfg.evaluation
    embedder = EMBEDDERS[ev.embedder]([mels[r.uid] for r in rows], [speakers.index(r.speaker) for r in rows], cfg)
    by_speaker = {s: [r for r in rows if r.speaker == s] for s in speakers}

    enrollments, target_scores, nontarget_scores = {}, [], []
    for s, own in by_speaker.items():
        enrol_rows = own[:ev.enroll_count]
        enrollments[s] = enroll([mels[r.uid] for r in enrol_rows], embedder, s)
        for r in own[ev.enroll_count:]:
            target_scores.append(cosine(embedder(mels[r.uid]), enrollments[s].vector))
        for r in rows:
            if r.speaker != s:
                nontarget_scores.append(cosine(embedder(mels[r.uid]), enrollments[s].vector))
    if ev.threshold is not None:
        threshold = float(ev.threshold)
    else:
        if not target_scores:
            raise InsufficientDataError(f"every speaker needs more than {ev.enroll_count} utterances to "
                                         f"calibrate a threshold; set evaluation.threshold instead")
        threshold = eer_threshold(target_scores, nontarget_scores)

    converted_dirs = [Path(d) for d in args.converted]
    if not converted_dirs:
        raise MissingInputError("no converted outputs given: pass --converted DIR")
    scores: dict[str, list[float]] = {}
    consistency: dict[str, list[float]] = {}
    for d in converted_dirs:
        table = _require(d / CONVERSIONS, f"conversion list in {d}")
        with open(table, encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh, delimiter="\t"):
                if rec["target"] not in enrollments:
                    raise ContractViolation(f"{table}: target {rec['target']!r} has no enrollment")
                w = load_waveform(_require(d / rec["converted_wav"], "converted wav"), cfg.features.sample_rate)
                src = load_waveform(_require(Path(rec["source_wav"]), "source wav"), cfg.features.sample_rate)
                mel = mel_spectrogram(w, cfg.features)
                system = rec["system"]
                scores.setdefault(system, []).append(cosine(embedder(mel), enrollments[rec["target"]].vector))
                consistency.setdefault(system, []).append(prosody_consistency(
                    extract_f0(src, cfg.features), extract_f0(w, cfg.features), ev.min_frames))
    if not scores:
        raise EmptyInputError("conversion lists are empty")
    report_rows = []
    for system in sorted(scores):
        rep = far_from_scores(scores[system], threshold, system)
        report_rows += [(system, "far", rep.far), (system, "threshold", rep.threshold),
                        (system, "accepted", float(rep.accepted)), (system, "total", float(rep.total)),
                        (system, "prosody_consistency", float(np.mean(consistency[system])))]
    out = Path(args.out).resolve() if args.out else None
    if out is None:
        raise MissingInputError("missing output directory: pass --out")
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.tsv", report_rows)
    write_run_metadata(out, "evaluate", cfg, [out / "report.tsv"])
    for system, metric, value in report_rows:
        print(f"{system}\t{metric}\t{value:.6g}")
    return 0


def describe_filter(res: FilteredProsody) -> tuple[list[str], bool]:
    """Per-group lines plus the piecewise-constancy verdict for one filter result."""
    groups, out = res.group_of_frame, res.matrix.data
    lines = [f"frames: {res.T}", f"groups: {len(res.selected_frames)}"]
    ok = True
    for g, sel in enumerate(res.selected_frames):
        members = np.nonzero(groups == g)[0]
        constant = bool(np.all(out[members] == out[sel]))
        ok &= constant
        lines.append(f"group {g}: frames {members[0]}-{members[-1]} selected {sel}"
                     + ("" if constant else "  NOT CONSTANT"))
    lines.append("selected: " + " ".join(str(int(s)) for s in res.selected_frames))
    if len(res.selected_frames) == res.T:
        lines.append("identity filter: every group is a single frame")
    lines.append(f"piecewise constancy: {'PASS' if ok else 'FAIL'}")
    return lines, ok


def inspect_filter_report(p: FrameMatrix, filt: str, tau: int, rdpf_mode: str = "deterministic", seed: int = 0,
                          fmap: FramePhoneMap | None = None, adpf_params=None) -> tuple[str, bool]:
    """Human-readable audit of one filter application; second value is the constancy verdict."""
    if filt == "rdpf":
        res = rdpf(p, tau, rdpf_mode, seed, fmap)
        header = f"filter: rdpf ({'phone groups' if fmap is not None else f'tau={tau}'}, {rdpf_mode})"
    elif filt == "adpf":
        if fmap is None:
            raise MissingInputError("adpf inspection needs an alignment: pass --alignment")
        res = adpf(p, fmap, adpf_params if adpf_params is not None else init_adpf(seed))
        header = "filter: adpf (phone-final hidden state)"
    else:
        raise ContractViolation(f"unknown filter {filt!r}")
    lines, ok = describe_filter(res)
    return "\n".join([header, *lines]) + "\n", ok


def cmd_inspect_filter(args: argparse.Namespace, cfg: RunConfig) -> int:
    filt = args.filter or (cfg.training.prosody_mode if cfg.training.prosody_mode in ("rdpf", "adpf") else "rdpf")
    if args.prosody:
        records = read_feature_cache(_require(Path(args.prosody), "prosody cache"))
        found = [m for m in records if m.kind == "prosody"]
        if not found:
            raise ContractViolation(f"{args.prosody}: no prosody record")
        p = found[0]
    elif args.frames:
        rng = np.random.default_rng(cfg.seed)
        p = FrameMatrix(rng.normal(size=(args.frames, 4)), cfg.features.hop_seconds, "prosody")
    else:
        raise MissingInputError("no input files: pass --prosody CACHE or --frames T")
    fmap = None
    if args.alignment:
        segments = parse_alignment(_require(Path(args.alignment), "alignment"))
        fmap = to_frames(segments, p.T, p.hop_seconds)[1]
    params = None
    if filt == "adpf" and args.checkpoint:
        params = load_checkpoint(_require(Path(args.checkpoint), "checkpoint")).model.adpf
    tau = args.tau if args.tau is not None else cfg.training.tau
    group_fmap = fmap if (filt == "adpf" or args.phone_groups) else None
    report, ok = inspect_filter_report(p, filt, tau, args.rdpf_mode, cfg.seed, group_fmap, params)
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out).resolve()
        out.mkdir(parents=True, exist_ok=True)
        (out / "inspect.txt").write_text(report, encoding="utf-8")
        write_run_metadata(out, "inspect-filter", cfg, [out / "inspect.txt"])
    return 0 if ok else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--mode", choices=MODES, help="prosody conditioning mode")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="pvc", description="Prosody-aware voice conversion toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="compute mel, F0 and content feature caches")
    p.add_argument("--input", help="directory of .wav files (searched recursively)")
    p.add_argument("--alignments", help="directory of <uid>.tsv / <uid>.TextGrid phone alignments")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-codebook", parents=[common], help="fit the product k-means quantizer")
    p.add_argument("--features", help="directory written by extract")
    p.set_defaults(func=cmd_train_codebook)

    p = sub.add_parser("train", parents=[common], help="train the conversion model")
    p.add_argument("--features", help="directory written by extract")
    p.add_argument("--codebook", help="codebook file (default: <features>/codebook.pvcb)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert utterances to a target speaker")
    p.add_argument("--checkpoint", help="training output directory or its checkpoint.pvck")
    p.add_argument("--features", help="directory written by extract (content projection)")
    p.add_argument("--codebook", help="codebook file (default: <features>/codebook.pvcb)")
    p.add_argument("--input", nargs="+", required=True, help="source .wav files or directories")
    p.add_argument("--target", required=True, help="target speaker label")
    p.add_argument("--alignment", help="phone alignment for a single input file")
    p.add_argument("--alignments", help="directory of <uid>.tsv / <uid>.TextGrid alignments")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common], help="FAR and prosody consistency of conversions")
    p.add_argument("--features", help="reference features (enrollment and threshold calibration)")
    p.add_argument("--converted", nargs="+", default=[], help="directories written by convert")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-filter", parents=[common], help="audit RDPF/ADPF selection on one utterance")
    p.add_argument("--prosody", help="feature cache holding a prosody record")
    p.add_argument("--frames", type=int, help="use T random prosody vectors instead of a cache")
    p.add_argument("--filter", choices=("rdpf", "adpf"))
    p.add_argument("--tau", type=int)
    p.add_argument("--rdpf-mode", choices=("deterministic", "random"), default="deterministic")
    p.add_argument("--alignment", help="phone alignment (needed for adpf)")
    p.add_argument("--phone-groups", action="store_true", help="group RDPF by phones instead of tau blocks")
    p.add_argument("--checkpoint", help="take ADPF parameters from this checkpoint")
    p.set_defaults(func=cmd_inspect_filter)
    return parser


def _configure_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.INFO)
    name = os.environ.get("PVC_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ValidationError(f"PVC_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    log.setLevel(LOG_LEVELS[name])


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        cfg = _apply_flags(load_config(args.config), args)
        torch.manual_seed(cfg.seed)
        return args.func(args, cfg)
    except (PVCError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
