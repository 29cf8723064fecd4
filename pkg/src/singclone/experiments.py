"""Objective re-enactments of the five adaptation comparisons.

Each experiment trains its models on a synthetic corpus, evaluates them on
held-out utterances of the target voices and reports, per seed and
condition, held-out L1 (teacher-forced and free-running) and speaker
similarity computed by a nearest-centroid oracle over ground-truth voices.

T1  pseudo base, pseudo target:   adapt vs full-data scratch vs small-data scratch
T2  pseudo base, natural target:  same three conditions
T3  12 voices, two 8/4 rotations: 4 full + 8 cloned voices vs one 12-voice model
T4  pseudo base:                  adapting on natural vs pseudo target data
T5  pseudo vs natural base:       both adapted to natural target data
"""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import to_bytes
from .corpus import SyntheticVoices, compute_stats, holdout_rotations, normalize
from .errors import ConfigError
from .evalkit import FREE_RUNNING, TEACHER_FORCED, SimilarityOracle, classify_speaker, generate_for, heldout_l1
from .speakerspace import parse_mode
from .synthnet import ModelConfig, build_model
from .trainer import Checkpoint, Example, TrainConfig, adapt, multispeaker_partition, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("T1", "T2", "T3", "T4", "T5")
METRICS = (
    "l1_teacher_forced",
    "l1_free_running",
    "target_vote_fraction",
    "max_competitor_vote_fraction",
    "target_distance",
)
HIGHER_IS_BETTER = {"target_vote_fraction"}
REPORT_SCHEMA = "experiment,seed,condition,metric,value"

# utterance index ranges inside each (speaker, style) stream
EVAL_OFFSET = 1000
ORACLE_OFFSET = 2000


@dataclass(frozen=True)
class ExperimentSettings:
    corpus_seed: int = 0
    n_train_speakers: int = 8
    utts_per_speaker: int = 40
    adapt_utts: int = 4
    full_utts: int = 40
    eval_utts: int = 8
    oracle_utts: int = 20
    multispeaker_iters: int = 2000
    scratch_iters: int = 600
    adapt_iters: int = 200
    multispeaker_lr: float = 3e-4
    scratch_lr: float = 5e-4
    adapt_lr: float = 3e-4
    polyak_decay: float | None = 0.999
    batch_frames: int = 96
    batch_chunks: int = 8
    adapt_mode: str = "joint"
    multispeaker_channels: tuple[int, int] = (48, 32)
    single_speaker_channels: tuple[int, int] = (32, 16)
    n_choir_speakers: int = 12

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multispeaker_channels"] = list(self.multispeaker_channels)
        d["single_speaker_channels"] = list(self.single_speaker_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentSettings":
        d = dict(d)
        for k in ("multispeaker_channels", "single_speaker_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ExperimentReport:
    experiment: str
    seeds: list[int]
    conditions: list[str]
    metrics: list[str]
    rows: list[tuple[int, str, str, float]]
    settings: dict
    config_digest: str
    provenance: list[dict] = field(default_factory=list)
    winners: dict[str, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def values(self, condition: str, metric: str) -> list[float]:
        return [v for s, c, m, v in self.rows if c == condition and m == metric]

    def median(self, condition: str, metric: str) -> float:
        return float(np.median(self.values(condition, metric)))


# ---------------------------------------------------------------------------
# building blocks


def _digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()


def _multi_config(st: ExperimentSettings) -> ModelConfig:
    r, s = st.multispeaker_channels
    return ModelConfig(residual_channels=r, skip_channels=s)


def _single_config(st: ExperimentSettings) -> ModelConfig:
    r, s = st.single_speaker_channels
    return ModelConfig(residual_channels=r, skip_channels=s)


@functools.lru_cache(maxsize=None)
def _voices(corpus_seed: int, n_speakers: int) -> SyntheticVoices:
    return SyntheticVoices.create(corpus_seed, n_speakers)


class _Data:
    """Normalized utterance access for one experiment seed."""

    def __init__(self, st: ExperimentSettings, n_speakers: int, stats_speakers: Sequence[int], stats_style: str):
        self.st = st
        self.voices = _voices(st.corpus_seed, n_speakers)
        raw = [u for s in stats_speakers for u in self.voices.utterances(s, stats_style, 0, st.utts_per_speaker)]
        # one normalization shared by every condition so L1 values are comparable
        self.stats = compute_stats([u.acoustics for u in raw])

    def get(self, speaker, style, start, count):
        return normalize(self.voices.utterances(speaker, style, start, count), self.stats)

    def train_set(self, speakers, style):
        return {s: self.get(s, style, 0, self.st.utts_per_speaker) for s in speakers}

    def eval_set(self, speaker, style):
        return self.get(speaker, style, EVAL_OFFSET, self.st.eval_utts)

    def oracle(self, speakers, style) -> SimilarityOracle:
        return SimilarityOracle.fit(
            {s: [u.acoustics for u in self.get(s, style, ORACLE_OFFSET, self.st.oracle_utts)] for s in speakers}
        )


@functools.lru_cache(maxsize=32)
def _multispeaker(st: ExperimentSettings, n_corpus: int, speakers: tuple[int, ...], style: str, seed: int,
                  stats_key: tuple) -> tuple[Checkpoint, dict]:
    data = _Data(st, n_corpus, *stats_key)
    utts = data.train_set(speakers, style)
    rows = {s: i for i, s in enumerate(speakers)}
    dataset = [Example(u.controls, u.acoustics, rows[s]) for s in speakers for u in utts[s]]
    params = build_model(_multi_config(st), len(speakers), seed)
    cfg = TrainConfig.multispeaker(iterations=st.multispeaker_iters, learning_rate=st.multispeaker_lr,
                                   batch_frames=st.batch_frames, batch_chunks=st.batch_chunks, seed=seed)
    log.info("training %s multispeaker model on %d voices (seed %d)", style, len(speakers), seed)
    ckpt = train(dataset, params, multispeaker_partition(params), cfg,
                 metadata={"speakers": list(speakers), "style": style})
    return ckpt, rows


def _scratch(st: ExperimentSettings, utts, seed: int) -> Checkpoint:
    params = build_model(_single_config(st), 1, seed)
    cfg = TrainConfig.scratch(iterations=st.scratch_iters, learning_rate=st.scratch_lr,
                              batch_frames=st.batch_frames, batch_chunks=st.batch_chunks, seed=seed)
    dataset = [Example(u.controls, u.acoustics, 0) for u in utts]
    return train(dataset, params, multispeaker_partition(params), cfg)


def _adapt(st: ExperimentSettings, base: Checkpoint, utts, seed: int) -> Checkpoint:
    mode = parse_mode(st.adapt_mode, embedding_iters=5 * st.adapt_iters, joint_iters=st.adapt_iters)
    cfg = TrainConfig.adaptation(iterations=st.adapt_iters, learning_rate=st.adapt_lr,
                                 polyak_decay=st.polyak_decay, batch_frames=st.batch_frames,
                                 batch_chunks=st.batch_chunks, seed=seed)
    return adapt(base, utts, mode, cfg)


def _evaluate(model, row: int, eval_utts, oracle: SimilarityOracle, true_speaker: int) -> dict[str, float]:
    generated = generate_for(model, eval_utts, row)
    cls = classify_speaker(oracle, generated)
    competitors = [v for s, v in cls.votes.items() if s != true_speaker]
    fr = float(np.mean([np.abs(g - u.acoustics).mean() for g, u in zip(generated, eval_utts)]))
    return {
        "l1_teacher_forced": heldout_l1(model, eval_utts, row, TEACHER_FORCED),
        "l1_free_running": fr,
        "target_vote_fraction": cls.votes.get(true_speaker, 0.0),
        "max_competitor_vote_fraction": max(competitors) if competitors else 0.0,
        "target_distance": float(cls.distances[:, oracle.index(true_speaker)].mean()),
    }


def _pool(metric_dicts: Sequence[dict[str, float]]) -> dict[str, float]:
    return {m: float(np.mean([d[m] for d in metric_dicts])) for m in METRICS}


# ---------------------------------------------------------------------------
# the five experiments; each returns ({condition: metrics}, provenance)


def _t1_t2(st: ExperimentSettings, seed: int, target_style: str):
    n = st.n_train_speakers + 1
    target = st.n_train_speakers
    train_spk = tuple(range(st.n_train_speakers))
    stats_key = (train_spk, "pseudo")
    data = _Data(st, n, *stats_key)
    base, _ = _multispeaker(st, n, train_spk, "pseudo", seed, stats_key)
    adapt_data = data.get(target, target_style, 0, st.adapt_utts)
    full_data = data.get(target, target_style, 0, st.full_utts)
    eval_utts = data.eval_set(target, target_style)
    oracle = data.oracle(range(n), target_style)

    adapted = _adapt(st, base, adapt_data, seed)
    full = _scratch(st, full_data, seed)
    init = _scratch(st, adapt_data, seed)
    out = {
        "adapt": _evaluate(adapted, adapted.metadata["target_row"], eval_utts, oracle, target),
        "full": _evaluate(full, 0, eval_utts, oracle, target),
        "init": _evaluate(init, 0, eval_utts, oracle, target),
    }
    split = f"speaker{target}/{target_style}/eval[{EVAL_OFFSET}:{EVAL_OFFSET + st.eval_utts}]"
    prov = [
        {"seed": seed, "condition": "adapt", "checkpoints": [_digest(base), _digest(adapted)], "split": split},
        {"seed": seed, "condition": "full", "checkpoints": [_digest(full)], "split": split},
        {"seed": seed, "condition": "init", "checkpoints": [_digest(init)], "split": split},
    ]
    return out, prov


def _t3(st: ExperimentSettings, seed: int):
    n = st.n_choir_speakers
    everyone = tuple(range(n))
    stats_key = (everyone, "pseudo")
    data = _Data(st, n, *stats_key)
    oracle = data.oracle(everyone, "pseudo")
    rotations = holdout_rotations(n, 4, 2)
    cloned, full_voices, prov_ckpts = {}, {}, []
    for r, (train_spk, held) in enumerate(rotations):
        base, rows = _multispeaker(st, n, tuple(train_spk), "pseudo", seed, stats_key)
        prov_ckpts.append(_digest(base))
        for h in held:
            a = _adapt(st, base, data.get(h, "pseudo", 0, st.adapt_utts), seed * 1000 + h)
            prov_ckpts.append(_digest(a))
            cloned[h] = _evaluate(a, a.metadata["target_row"], data.eval_set(h, "pseudo"), oracle, h)
        if r == 0:
            shared = set(train_spk).intersection(*(set(t) for t, _ in rotations))
            for s in sorted(shared):
                full_voices[s] = _evaluate(base, rows[s], data.eval_set(s, "pseudo"), oracle, s)
    assert sorted(set(cloned) | set(full_voices)) == list(everyone)
    big, rows = _multispeaker(st, n, everyone, "pseudo", seed, stats_key)
    reference = {s: _evaluate(big, rows[s], data.eval_set(s, "pseudo"), oracle, s) for s in everyone}
    out = {
        "cloned_ensemble": _pool([*cloned.values(), *full_voices.values()]),
        "full_ensemble": _pool(list(reference.values())),
    }
    split = f"all{n}/pseudo/eval[{EVAL_OFFSET}:{EVAL_OFFSET + st.eval_utts}]"
    prov = [
        {"seed": seed, "condition": "cloned_ensemble", "checkpoints": prov_ckpts, "split": split,
         "rotations": [{"train": t, "heldout": h} for t, h in rotations]},
        {"seed": seed, "condition": "full_ensemble", "checkpoints": [_digest(big)], "split": split},
    ]
    return out, prov


def _t4(st: ExperimentSettings, seed: int):
    n = st.n_train_speakers + 1
    target = st.n_train_speakers
    train_spk = tuple(range(st.n_train_speakers))
    stats_key = (train_spk, "pseudo")
    data = _Data(st, n, *stats_key)
    base, _ = _multispeaker(st, n, train_spk, "pseudo", seed, stats_key)
    eval_utts = data.eval_set(target, "natural")
    oracle = data.oracle(range(n), "natural")
    out, prov = {}, []
    split = f"speaker{target}/natural/eval[{EVAL_OFFSET}:{EVAL_OFFSET + st.eval_utts}]"
    for cond, style in (("natural_target", "natural"), ("pseudo_target", "pseudo")):
        a = _adapt(st, base, data.get(target, style, 0, st.adapt_utts), seed)
        out[cond] = _evaluate(a, a.metadata["target_row"], eval_utts, oracle, target)
        prov.append({"seed": seed, "condition": cond, "checkpoints": [_digest(base), _digest(a)], "split": split})
    return out, prov


def _t5(st: ExperimentSettings, seed: int):
    n = st.n_train_speakers + 1
    target = st.n_train_speakers
    train_spk = tuple(range(st.n_train_speakers))
    stats_key = (train_spk, "pseudo")
    data = _Data(st, n, *stats_key)
    eval_utts = data.eval_set(target, "natural")
    adapt_data = data.get(target, "natural", 0, st.adapt_utts)
    oracle = data.oracle(range(n), "natural")
    out, prov = {}, []
    split = f"speaker{target}/natural/eval[{EVAL_OFFSET}:{EVAL_OFFSET + st.eval_utts}]"
    for cond, style in (("pseudo_base", "pseudo"), ("natural_base", "natural")):
        base, _ = _multispeaker(st, n, train_spk, style, seed, stats_key)
        a = _adapt(st, base, adapt_data, seed)
        out[cond] = _evaluate(a, a.metadata["target_row"], eval_utts, oracle, target)
        prov.append({"seed": seed, "condition": cond, "checkpoints": [_digest(base), _digest(a)], "split": split})
    return out, prov


_RUNNERS = {
    "T1": lambda st, seed: _t1_t2(st, seed, "pseudo"),
    "T2": lambda st, seed: _t1_t2(st, seed, "natural"),
    "T3": _t3,
    "T4": _t4,
    "T5": _t5,
}
CONDITIONS = {
    "T1": ("adapt", "full", "init"),
    "T2": ("adapt", "full", "init"),
    "T3": ("cloned_ensemble", "full_ensemble"),
    "T4": ("natural_target", "pseudo_target"),
    "T5": ("pseudo_base", "natural_base"),
}


def _run_seed(exp_id: str, settings: ExperimentSettings, seed: int):
    return seed, _RUNNERS[exp_id](settings, seed)


def _workers() -> int:
    env = os.environ.get("SVC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(exp_id: str, settings: ExperimentSettings | None = None,
                   seeds: Sequence[int] = (0, 1, 2, 3, 4), workers: int | None = None) -> ExperimentReport:
    """Run one experiment for every seed and assemble its report."""
    exp_id = exp_id.upper()
    if exp_id not in _RUNNERS:
        raise ConfigError(f"unknown experiment {exp_id!r}; choose from {EXPERIMENTS}")
    settings = settings or ExperimentSettings()
    if exp_id == "T3" and settings.n_choir_speakers < 12:
        raise ConfigError("T3 needs at least 12 speakers for two 8/4 rotations")
    if settings.n_train_speakers < 1:
        raise ConfigError("need at least one training speaker")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    workers = min(workers or _workers(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, [exp_id] * len(seeds), [settings] * len(seeds), seeds))
    else:
        results = [_run_seed(exp_id, settings, s) for s in seeds]

    conditions = list(CONDITIONS[exp_id])
    rows, provenance = [], []
    for seed, (metrics, prov) in sorted(results, key=lambda r: r[0]):
        for cond in sorted(conditions):
            for m in METRICS:
                rows.append((seed, cond, m, float(metrics[cond][m])))
        provenance.extend(sorted(prov, key=lambda p: p["condition"]))
    report = ExperimentReport(exp_id, sorted(seeds), conditions, list(METRICS), rows,
                              settings.to_dict(), settings.digest(), provenance)
    for m in METRICS:
        med = {c: report.median(c, m) for c in conditions}
        pick = max if m in HIGHER_IS_BETTER else min
        report.winners[m] = pick(sorted(med), key=lambda c: med[c])
    if exp_id in ("T1", "T2"):
        # exposure-bias direction, recorded rather than asserted
        report.notes["teacher_forced_below_free_running"] = {
            c: all(tf <= fr for tf, fr in zip(report.values(c, "l1_teacher_forced"),
                                              report.values(c, "l1_free_running")))
            for c in conditions
        }
    return report


# ---------------------------------------------------------------------------
# report files


def emit_report(report: ExperimentReport, path, fmt: str = "csv") -> Path:
    """Write the report as CSV (one row per seed x condition x metric) or JSON."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {path.parent}: {exc}") from exc
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# schema: {REPORT_SCHEMA}\n")
        buf.write(f"# config_digest: {report.config_digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_SCHEMA.split(","))
        for seed, cond, metric, value in report.rows:
            w.writerow([report.experiment, seed, cond, metric, repr(float(value))])
        text = buf.getvalue()
    elif fmt in ("json", "structured-text"):
        doc = {"schema": REPORT_SCHEMA, **asdict(report)}
        doc["rows"] = [list(r) for r in report.rows]
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path


def read_report_rows(path) -> list[tuple[str, int, str, str, float]]:
    """Parse the rows of a report written by :func:`emit_report` (either format)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return [(doc["experiment"], int(s), c, m, float(v)) for s, c, m, v in doc["rows"]]
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if ",".join(header) != REPORT_SCHEMA:
        raise ValueError(f"unexpected report header {header}")
    return [(e, int(s), c, m, float(v)) for e, s, c, m, v in reader]
