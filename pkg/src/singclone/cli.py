"""Command-line entry point.

Every subcommand resolves its settings as built-in defaults, then an
optional JSON config file (``--config``), then command-line flags, and
writes the resolved result next to its outputs.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, SingCloneError
from .evalkit import FREE_RUNNING, TEACHER_FORCED, heldout_l1
from .experiments import EXPERIMENTS, ExperimentSettings, emit_report, run_experiment
from .gradcheck import TOLERANCE, run_suite
from .speakerspace import parse_mode
from .synthnet import ModelConfig, build_model, condition, generate
from .trainer import Example, TrainConfig, adapt, multispeaker_partition, train

log = logging.getLogger("singclone")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# (default, help) per key; flags are derived from these tables
COMMANDS: dict[str, tuple[str, dict[str, tuple[object, str]]]] = {
    "gen-data": ("Render a synthetic corpus to disk.", {
        "out": ("corpus", "output corpus directory"),
        "seed": (0, "corpus seed"),
        "n_speakers": (9, "number of synthetic voices"),
        "utts_per_speaker": (40, "utterances rendered per voice"),
        "style": ("pseudo", "pseudo or natural"),
        "n_heldout": (1, "trailing voices reserved as adaptation targets"),
        "eval_per_speaker": (8, "trailing utterances per voice reserved for evaluation"),
    }),
    "train": ("Train a multispeaker or single-speaker model.", {
        "corpus": ("corpus", "corpus directory"),
        "out": ("model.svcm", "output checkpoint"),
        "kind": ("multispeaker", "multispeaker (train-split voices) or single (one voice)"),
        "speaker": (0, "voice id for kind=single"),
        "n_utts": (0, "training utterances per voice (0 = whole training split)"),
        "seed": (0, "initialization and batching seed"),
        "iterations": (0, "updates (0 = 2000 multispeaker / 600 single)"),
        "learning_rate": (0.0, "step size (0 = 3e-4 multispeaker / 5e-4 single)"),
        "batch_frames": (96, "frames per training chunk"),
        "batch_chunks": (8, "chunks per batch"),
        "residual_channels": (0, "residual channels (0 = 48 multispeaker / 32 single)"),
        "skip_channels": (0, "skip channels (0 = 32 multispeaker / 16 single)"),
        "embedding_dim": (16, "speaker embedding size"),
        "precision": ("double", "single or double"),
    }),
    "adapt": ("Adapt a multispeaker checkpoint to a new voice.", {
        "base": ("model.svcm", "multispeaker checkpoint"),
        "corpus": ("corpus", "corpus directory holding the target voice"),
        "out": ("adapted.svcm", "output checkpoint"),
        "speaker": (-1, "target voice id (-1 = first held-out voice)"),
        "n_utts": (4, "adaptation utterances"),
        "mode": ("joint", "embedding-only, joint or sequential"),
        "iterations": (200, "updates (joint phase for sequential)"),
        "embedding_iters": (1000, "embedding phase updates for sequential"),
        "learning_rate": (3e-4, "step size"),
        "polyak_decay": (0.999, "parameter averaging decay (0 disables)"),
        "batch_frames": (96, "frames per training chunk"),
        "batch_chunks": (8, "chunks per batch"),
        "seed": (0, "seed for the new embedding row and batching"),
    }),
    "synth": ("Generate acoustics for the controls of an utterance file.", {
        "checkpoint": ("adapted.svcm", "model checkpoint"),
        "input": ("input.svcu", "utterance file supplying control frames"),
        "out": ("output.svcu", "output utterance file"),
        "speaker": (-1, "voice id (-1 = adapted target, else first voice)"),
    }),
    "eval": ("Score a checkpoint on a corpus split.", {
        "checkpoint": ("model.svcm", "model checkpoint"),
        "corpus": ("corpus", "corpus directory"),
        "speaker": (0, "voice id to evaluate"),
        "split": ("eval", "eval or train utterances"),
        "mode": ("free_running", "free_running or teacher_forced"),
        "out": ("", "optional JSON output file"),
    }),
    "experiment": ("Run one of the experiments T1..T5.", {
        "id": ("T1", "experiment id (T1..T5)"),
        "seeds": (5, "number of seeds (0..n-1)"),
        "out": ("report.csv", "report path"),
        "format": ("csv", "csv or json"),
        **{k: (v, f"experiment setting {k}") for k, v in ExperimentSettings().to_dict().items()},
    }),
    "grad-check": ("Finite-difference check of every primitive and the network.", {
        "seeds": (3, "number of random instances"),
        "step": (1e-5, "central-difference step"),
        "coords": (64, "sampled network coordinates per seed"),
    }),
}


def _coerce(key: str, default, raw):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes")
    if isinstance(default, list):
        if isinstance(raw, str):
            raw = json.loads(raw) if raw.startswith("[") else [int(x) for x in raw.split(",")]
        return list(raw)
    if default is None:
        if raw in (None, "", "none", "None"):
            return None
        return float(raw)
    try:
        return type(default)(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="singclone", description="Voice cloning for a neural singing synthesizer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (doc, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=doc, description=doc)
        p.add_argument("--config", help="JSON file of key/value settings")
        for key, (default, help_) in keys.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=f"{help_} (default: {default!r})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    keys = COMMANDS[command][1]
    resolved = {k: d for k, (d, _) in keys.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        unknown = sorted(set(data) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        for k, v in data.items():
            resolved[k] = _coerce(k, keys[k][0], v)
    for k in keys:
        raw = getattr(args, k)
        if raw is not None:
            resolved[k] = _coerce(k, keys[k][0], raw)
    return resolved


def _write_resolved(cfg: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(out: str) -> Path:
    return Path(out + ".config.json")


def _corpus_split(root, speakers, split: str, n_utts: int = 0):
    manifest, utts = corpus_mod.load_corpus(root, speakers)
    train_part, eval_part = corpus_mod.split_utterances(manifest, utts)
    chosen = eval_part if split == "eval" else train_part
    if n_utts:
        chosen = {s: u[:n_utts] for s, u in chosen.items()}
    return manifest, chosen


def _stats_of(ckpt) -> corpus_mod.NormalizationStats:
    if "normalization" not in ckpt.metadata:
        raise ConfigError("checkpoint carries no normalization statistics")
    return corpus_mod.NormalizationStats.from_dict(ckpt.metadata["normalization"])


def cmd_gen_data(cfg: dict) -> int:
    req = corpus_mod.CorpusRequest(cfg["n_speakers"], cfg["utts_per_speaker"], cfg["style"],
                                   cfg["n_heldout"], cfg["eval_per_speaker"])
    manifest = corpus_mod.generate_corpus(req, cfg["seed"], cfg["out"])
    _write_resolved(cfg, Path(cfg["out"]) / "resolved_config.json")
    print(f"wrote {manifest.n_speakers * manifest.utts_per_speaker} utterances to {cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    multi = cfg["kind"] == "multispeaker"
    if cfg["kind"] not in ("multispeaker", "single"):
        raise ConfigError("kind must be multispeaker or single")
    manifest = corpus_mod.load_manifest(cfg["corpus"])
    speakers = manifest.splits["train_speakers"] if multi else [cfg["speaker"]]
    _, utts = _corpus_split(cfg["corpus"], speakers, "train", cfg["n_utts"])
    stats = corpus_mod.compute_stats([u.acoustics for s in speakers for u in utts[s]])
    rows = {s: i for i, s in enumerate(speakers)}
    dataset = [Example(u.controls, n.acoustics, rows[s])
               for s in speakers for u, n in zip(utts[s], corpus_mod.normalize(utts[s], stats))]
    preset_model = ModelConfig.multispeaker if multi else ModelConfig.single_speaker
    model_kw = {"embedding_dim": cfg["embedding_dim"], "precision": cfg["precision"],
                "control_dim": manifest.control_dim, "acoustic_dim": manifest.acoustic_dim}
    for k in ("residual_channels", "skip_channels"):
        if cfg[k]:
            model_kw[k] = cfg[k]
    params = build_model(preset_model(**model_kw), len(speakers), cfg["seed"])
    preset = TrainConfig.multispeaker if multi else TrainConfig.scratch
    train_kw = {"seed": cfg["seed"], "batch_frames": cfg["batch_frames"], "batch_chunks": cfg["batch_chunks"],
                "precision": cfg["precision"]}
    if cfg["iterations"]:
        train_kw["iterations"] = cfg["iterations"]
    if cfg["learning_rate"]:
        train_kw["learning_rate"] = cfg["learning_rate"]
    ckpt = train(dataset, params, multispeaker_partition(params), preset(**train_kw),
                 metadata={"speakers": list(speakers), "normalization": stats.to_dict(), "kind": cfg["kind"]})
    save_checkpoint(ckpt, cfg["out"])
    _write_resolved(cfg, _sidecar(cfg["out"]))
    print(f"trained {ckpt.iteration} iterations, final loss {ckpt.loss_log[-1]:.5f} -> {cfg['out']}")
    return 0


def cmd_adapt(cfg: dict) -> int:
    base = load_checkpoint(cfg["base"])
    stats = _stats_of(base)
    manifest = corpus_mod.load_manifest(cfg["corpus"])
    target = cfg["speaker"]
    if target < 0:
        held = manifest.splits.get("heldout_speakers") or []
        if not held:
            raise ConfigError("corpus has no held-out voices; pass --speaker")
        target = held[0]
    _, utts = _corpus_split(cfg["corpus"], [target], "train", cfg["n_utts"])
    mode = parse_mode(cfg["mode"], cfg["embedding_iters"], cfg["iterations"])
    tc = TrainConfig.adaptation(iterations=cfg["iterations"], learning_rate=cfg["learning_rate"],
                                polyak_decay=cfg["polyak_decay"] or None, batch_frames=cfg["batch_frames"],
                                batch_chunks=cfg["batch_chunks"], seed=cfg["seed"])
    meta = {**base.metadata, "speakers": list(base.metadata.get("speakers", [])) + [target]}
    ckpt = adapt(base, corpus_mod.normalize(utts[target], stats), mode, tc, metadata=meta)
    save_checkpoint(ckpt, cfg["out"])
    _write_resolved(cfg, _sidecar(cfg["out"]))
    print(f"adapted voice {target} into row {ckpt.metadata['target_row']} ({mode.name}) -> {cfg['out']}")
    return 0


def cmd_synth(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    params = ckpt.eval_params()
    src = corpus_mod.read_utterance(cfg["input"])
    row = cfg["speaker"]
    if row < 0:
        row = ckpt.metadata.get("target_row", 0)
    cond = condition(src.controls, params.speaker_vector(row), params.config.embedding_dim)
    out = generate(params, cond)
    if "normalization" in ckpt.metadata:
        out = corpus_mod.denormalize(out, _stats_of(ckpt))
    corpus_mod.write_utterance(corpus_mod.Utterance(src.controls, out, row, src.style), cfg["out"])
    _write_resolved(cfg, _sidecar(cfg["out"]))
    print(f"synthesized {out.shape[0]} frames for row {row} -> {cfg['out']}")
    return 0


def cmd_eval(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    speakers = ckpt.metadata.get("speakers", [])
    if cfg["speaker"] not in speakers:
        raise ConfigError(f"voice {cfg['speaker']} has no row in this checkpoint (rows: {speakers})")
    row = len(speakers) - 1 - speakers[::-1].index(cfg["speaker"])
    if cfg["mode"] not in (FREE_RUNNING, TEACHER_FORCED):
        raise ConfigError("mode must be free_running or teacher_forced")
    _, utts = _corpus_split(cfg["corpus"], [cfg["speaker"]], cfg["split"])
    data = corpus_mod.normalize(utts[cfg["speaker"]], _stats_of(ckpt))
    if not data:
        raise ConfigError(f"split {cfg['split']!r} is empty for voice {cfg['speaker']}")
    result = {"speaker": cfg["speaker"], "row": row, "mode": cfg["mode"], "split": cfg["split"],
              "l1": heldout_l1(ckpt, data, row, cfg["mode"])}
    print(json.dumps(result))
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        _write_resolved(cfg, _sidecar(cfg["out"]))
    return 0


def cmd_experiment(cfg: dict) -> int:
    if cfg["id"].upper() not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg['id']!r}")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    settings = ExperimentSettings.from_dict({k: cfg[k] for k in ExperimentSettings().to_dict()})
    report = run_experiment(cfg["id"], settings, seeds=range(cfg["seeds"]))
    emit_report(report, cfg["out"], cfg["format"])
    _write_resolved(cfg, _sidecar(cfg["out"]))
    for m, c in report.winners.items():
        print(f"{report.experiment} {m}: best median = {c}")
    print(f"report -> {cfg['out']}")
    return 0


def cmd_grad_check(cfg: dict) -> int:
    results = run_suite(seeds=range(cfg["seeds"]), step=cfg["step"], n_coords=cfg["coords"])
    for name, err in results.items():
        print(f"{name:22s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    return 0 if worst < TOLERANCE else 2


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"singclone: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"singclone: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"singclone: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"singclone: config error: {exc}", file=sys.stderr)
        return 1
    except (SingCloneError, OSError) as exc:
        print(f"singclone: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
