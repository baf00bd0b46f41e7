"""End-to-end orchestration: pretrain, compute, adapt, infer, evaluate.

Every stage failure is re-raised as :class:`StageError` tagged with the
stage name. A single seed drives all stages through fixed offsets.
"""
from __future__ import annotations

import csv
import dataclasses
import shutil
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapt import (AdaptationState, DlarConfig, LclConfig, computation_stage, dlar_epochs,
                    format_log_record, log_header, lcl_epochs, prepare_target)
from .data import SynthConfig, WindowDataset, generate_synthetic, load_features, load_windows
from .errors import ParameterError, ParseError, StageError
from .features import FEATURE_KINDS, apply_normalizer, extract, fit_normalizer
from .metrics import EvalReport, emit_reports, evaluate
from .model import EmotionNet, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, pretrain_epochs
from .tta import InferenceRecord, PcTta, TtaConfig

ABLATIONS = ("full", "modelA", "modelB", "modelC")
STAGES = ("load", "pretrain", "compute", "dlar", "lcl", "infer", "evaluate")

# stage seed = seed + offset
SEED_OFFSETS = {"synth": 0, "init": 1, "pretrain": 2, "dlar": 3, "lcl": 4, "tta": 5}


@dataclass
class PipelineConfig:
    out_dir: str = "run"
    source: str = ""          # SFEEG windows or feature CSV; empty = synthetic
    target: str = ""
    feature_kind: str = "psd"
    ablation: str = "full"
    seed: int = 0
    # pretraining
    alpha: float = 0.5
    epochs_pretrain: int = 100
    patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    # adaptation
    epochs_dlar: int = 30
    epochs_lcl: int = 30
    knn_k: int = 5
    bn_recalibration: bool = True
    # inference
    tau: float = 0.9
    noise_sigmas: tuple = (0.01, 0.02)
    resample_factors: tuple = (0.9, 1.1)
    # synthetic data
    synth_subjects: int = 5
    synth_trials_per_subject: int = 40
    synth_seconds_per_trial: int = 51
    synth_gain_spread: float = SynthConfig.gain_spread
    synth_alpha_offset_hz: float = SynthConfig.alpha_offset_hz
    synth_noise_ratio: float = SynthConfig.noise_ratio

    def __post_init__(self):
        self.noise_sigmas = tuple(float(v) for v in self.noise_sigmas)
        self.resample_factors = tuple(float(v) for v in self.resample_factors)
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ParameterError(f"feature kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}")

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    @property
    def runs_dlar(self) -> bool:
        return self.ablation in ("full", "modelB") and self.epochs_dlar > 0

    @property
    def runs_lcl(self) -> bool:
        return self.ablation in ("full", "modelC") and self.epochs_lcl > 0

    @property
    def adapts(self) -> bool:
        return self.ablation != "modelA"

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(self.alpha, self.epochs_pretrain, self.batch_size, self.learning_rate,
                              self.weight_decay, self.patience, self.min_delta, self.stage_seed("pretrain"))

    def dlar_config(self) -> DlarConfig:
        return DlarConfig(self.epochs_dlar, self.batch_size, self.learning_rate, self.weight_decay,
                          self.stage_seed("dlar"))

    def lcl_config(self) -> LclConfig:
        return LclConfig(self.epochs_lcl, self.knn_k, self.batch_size, self.learning_rate,
                         self.weight_decay, self.stage_seed("lcl"))

    def tta_config(self) -> TtaConfig:
        return TtaConfig(self.tau, self.noise_sigmas, self.resample_factors, self.stage_seed("tta"))

    def synth_config(self) -> SynthConfig:
        return SynthConfig(subjects=self.synth_subjects, trials_per_subject=self.synth_trials_per_subject,
                           seconds_per_trial=self.synth_seconds_per_trial, gain_spread=self.synth_gain_spread,
                           alpha_offset_hz=self.synth_alpha_offset_hz, noise_ratio=self.synth_noise_ratio,
                           seed=self.stage_seed("synth"))

    # -- key = value files --

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    base = base or PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {line!r}", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ParseError(f"unknown key {key!r}", lineno)
        try:
            changes[key] = _coerce(key, raw, getattr(base, key))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return base.replace(**changes)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(), base)


# -- data loading -------------------------------------------------------------

@dataclass
class DomainData:
    """Raw features plus whatever else is known about a domain's samples."""
    features: np.ndarray
    subject_ids: np.ndarray
    labels: np.ndarray | None
    windows: WindowDataset | None = None

    @property
    def rate(self) -> float:
        return self.windows.rate if self.windows is not None else 0.0


def _from_windows(ds: WindowDataset, kind: str) -> DomainData:
    labels = ds.labels if ds.has_labels else None
    return DomainData(extract(ds.data, ds.rate, kind), ds.subject_ids, labels, ds)


def load_domain(path, kind: str, domain: str) -> DomainData:
    """Read an ``SFEEG,v1`` window file or a feature CSV (sniffed from the first line)."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("SFEEG"):
        return _from_windows(load_windows(path, domain), kind)
    fs = load_features(path)
    return DomainData(fs.values, fs.subject_ids, fs.labels if fs.has_labels else None)


def load_domains(config: PipelineConfig) -> tuple[DomainData, DomainData]:
    if bool(config.source) != bool(config.target):
        raise ParameterError("give both source and target paths, or neither for synthetic data")
    if config.source:
        return (load_domain(config.source, config.feature_kind, "source"),
                load_domain(config.target, config.feature_kind, "target"))
    src, tgt = generate_synthetic(config.synth_config())
    return _from_windows(src, config.feature_kind), _from_windows(tgt, config.feature_kind)


# -- stages -----------------------------------------------------------------

@dataclass
class PipelineResult:
    report: EvalReport | None
    records: list
    artifacts: dict
    counters: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


class _Stages:
    """Runs named stages, counting invocations and tagging failures."""

    def __init__(self):
        self.counters = {s: 0 for s in STAGES}

    def run(self, name, fn, *args, **kwargs):
        self.counters[name] += 1
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
            raise StageError(name, exc) from exc


def pretrain_source(source: DomainData, config: PipelineConfig, log=None) -> tuple[EmotionNet, list]:
    if source.labels is None:
        raise ParameterError("source data must be labeled")
    x = apply_normalizer(source.features, fit_normalizer(source.features))
    net = EmotionNet(input_dim=x.shape[1], seed=config.stage_seed("init"))
    history = pretrain_epochs(net, x, source.labels, config.pretrain_config(), log=log)
    return net, history


def run_inference(net: EmotionNet, state: AdaptationState, target: DomainData,
                  config: PipelineConfig) -> tuple[list[InferenceRecord], PcTta]:
    x = apply_normalizer(target.features, state.normalizer)
    tta = PcTta(net, state, config.tta_config(), target.rate or 1.0, config.feature_kind)
    out = net.forward(x)
    records = []
    for i in range(len(x)):
        window = target.windows[i] if target.windows is not None else None
        records.append(tta.record(out.probs1[i], out.probs2[i], window, i, feature_only=window is None))
    return records, tta


def write_inference_csv(records: list[InferenceRecord], target: DomainData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "subject_id", "u", "d", "tta_invoked", "initial", "final", "true_label"])
        for i, r in enumerate(records):
            truth = "" if target.labels is None else int(target.labels[i])
            w.writerow([i, target.subject_ids[i], repr(r.uncertainty), repr(r.discrepancy),
                        int(r.tta_invoked), r.initial, r.final, truth])


def _evaluate_and_emit(records, target: DomainData, out: Path):
    report = evaluate([r.final for r in records], target.labels, target.subject_ids,
                      [r.tta_invoked for r in records])
    return report, emit_reports(report, out)


def _adapt_from_checkpoint(ckpt, target: DomainData, config: PipelineConfig, stages: _Stages, log_lines):
    """The source-free part: only the checkpoint path and unlabeled target features go in."""
    net = load_checkpoint(ckpt)
    feats = target.features
    if config.adapts:
        state, x = stages.run("compute", prepare_target, net, feats, config.bn_recalibration)
    else:
        state, x = stages.run("compute", computation_stage, net, feats)
    history = []

    def log(rec):
        history.append(rec)
        log_lines.append(format_log_record(rec))

    if config.runs_dlar:
        stages.run("dlar", dlar_epochs, net, x, state, config.dlar_config(), log=log)
    if config.runs_lcl:
        stages.run("lcl", lcl_epochs, net, x, config.lcl_config(), log=log)
    return net, state, history


def run_pipeline(config: PipelineConfig, domains: tuple[DomainData, DomainData] | None = None,
                 pretrained: str | Path | None = None) -> PipelineResult:
    """Run every stage for one ablation mode and write artifacts to ``config.out_dir``.

    ``domains`` skips loading; ``pretrained`` reuses an existing pretrained
    checkpoint (it is copied into the output directory).
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective").write_text(config.to_text())
    stages = _Stages()
    artifacts = {}

    if domains is None:
        domains = stages.run("load", load_domains, config)
    source, target = domains

    ckpt = out / "pretrained.ckpt"
    if pretrained is not None:
        if Path(pretrained).resolve() != ckpt.resolve():
            shutil.copyfile(pretrained, ckpt)
    else:
        pre_log = []
        net, _ = stages.run("pretrain", pretrain_source, source, config, log=pre_log.append)
        save_checkpoint(net, ckpt)
        (out / "pretrain.log").write_text("".join(line + "\n" for line in pre_log))
    artifacts["pretrained"] = ckpt

    log_lines = []
    net, state, history = _adapt_from_checkpoint(ckpt, target, config, stages, log_lines)
    adapted = out / "adapted.ckpt"
    if config.adapts:
        save_checkpoint(net, adapted)
    else:
        shutil.copyfile(ckpt, adapted)
    state.save(out / "adaptation_state.json")
    (out / "adaptation.log").write_text("".join(line + "\n" for line in [log_header(), *log_lines]))
    artifacts.update(adapted=adapted, state=out / "adaptation_state.json", log=out / "adaptation.log")

    records, _ = stages.run("infer", run_inference, net, state, target, config)
    write_inference_csv(records, target, out / "inference.csv")
    artifacts["inference"] = out / "inference.csv"

    report = None
    if target.labels is not None:
        report, paths = stages.run("evaluate", _evaluate_and_emit, records, target, out)
        artifacts.update(paths)
    return PipelineResult(report, records, artifacts, stages.counters, history)


def run_ablations(config: PipelineConfig, modes=ABLATIONS) -> dict[str, PipelineResult]:
    """Run several ablation modes on the same data and pretrained checkpoint.

    Pretraining does not depend on the ablation mode, so it runs once and
    each mode writes to ``out_dir/<mode>``.
    """
    domains = load_domains(config)
    results = {}
    shared = None
    for mode in modes:
        cfg = config.replace(ablation=mode, out_dir=str(Path(config.out_dir) / mode))
        results[mode] = run_pipeline(cfg, domains, pretrained=shared)
        shared = shared or results[mode].artifacts["pretrained"]
    return results
