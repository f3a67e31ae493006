"""Command line interface: ``ifom {datagen,pretrain,finetune,evaluate,metrics,inspect}``.

Configuration comes from a JSON file (``--config``), then environment
overrides (IFOM_SEED, IFOM_OUT, IFOM_PROTOCOL), then flags.  The resolved
configuration is written to ``<out>/resolved_config.json`` before any work
starts; wall-clock details go to ``<out>/run_info.json`` only, so every other
output is byte-identical across reruns.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, metrics
from .datagen import (
    PROTOCOLS,
    DatasetManifest,
    SyntheticSpec,
    load_samples,
    make_protocol_split,
    synthesize,
    write_dataset,
)
from .errors import IfomError, IncompatibleCheckpointError, InvalidInputError, InvalidSpecError
from .models import (
    BackboneConfig,
    build_extractor,
    init_detector_from_extractor,
    load_detector,
    read_archive,
    save_detector,
    score_in_batches,
)
from .training import FinetuneConfig, PretrainConfig, finetune, load_extractor, pretrain_state_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("datagen", "pretrain", "finetune", "evaluate", "metrics", "inspect")

# allowed top-level config keys, with defaults
DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "out": "ifom_out",
    "protocol": None,
    "holdout": None,
    "manifest": None,
    "checkpoint": None,
    "scores": None,
    "backbone": None,
    "datagen": None,
    "pretrain": None,
    "finetune": None,
    "fdr_cap": 0.01,
    "ace_threshold": 0.5,
}
DATAGEN_KEYS = {"specs", "test_fraction", "write_images"}


class ConfigError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ifom", description="Self-supervised PAD pretraining and evaluation.")
    p.add_argument("--version", action="version", version=f"ifom {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "datagen": "generate a synthetic dataset and manifest",
        "pretrain": "label-free pretraining of the feature extractor",
        "finetune": "train a spoof detector from a pretrained (or fresh) extractor",
        "evaluate": "score a manifest with a detector and report metrics",
        "metrics": "recompute the metric report from a score file",
        "inspect": "summarize a checkpoint",
    }
    for name in COMMANDS:
        c = sub.add_parser(name, help=helps[name])
        c.add_argument("--config", type=Path, help="JSON config file")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", type=Path, help="output directory")
        c.add_argument("--protocol", choices=PROTOCOLS)
        if name == "finetune":
            c.add_argument("--from-scratch", action="store_true",
                           help="start from a freshly initialized extractor instead of the pretrain checkpoint")
        if name in ("metrics", "inspect"):
            c.add_argument("path", nargs="?", type=Path,
                           help="score file" if name == "metrics" else "checkpoint file")
    return p


# --- configuration ---------------------------------------------------------------

def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> dict:
    """Merge defaults < config file < environment < flags and validate keys."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    env_map = {"IFOM_SEED": ("seed", int), "IFOM_OUT": ("out", str), "IFOM_PROTOCOL": ("protocol", str)}
    for var, (key, conv) in env_map.items():
        if environ.get(var):
            try:
                cfg[key] = conv(environ[var])
            except ValueError:
                raise ConfigError(f"{var}={environ[var]!r} is not a valid {key}")
    for key in ("seed", "out", "protocol"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "path", None) is not None:
        cfg["scores" if args.command == "metrics" else "checkpoint"] = args.path
    cfg["from_scratch"] = bool(getattr(args, "from_scratch", False))
    cfg["command"] = args.command
    for key in ("out", "manifest", "checkpoint", "scores"):
        if cfg[key] is not None:
            cfg[key] = str(cfg[key])
    if cfg["protocol"] is not None and cfg["protocol"] not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {cfg['protocol']!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    _typed_sections(cfg)
    return cfg


def _typed_sections(cfg: dict) -> None:
    """Validate sub-sections eagerly and fill in their defaults."""
    seed = cfg["seed"]
    try:
        if cfg["backbone"] is not None:
            b = cfg["backbone"]
            BackboneConfig(b.get("arch_id", "tiny"), tuple(b.get("input_shape", (1, 32, 32))),
                           int(b.get("embedding_dim", 32)), float(b.get("width_multiplier", 1.0)))
            extra = set(b) - {"arch_id", "input_shape", "embedding_dim", "width_multiplier"}
            if extra:
                raise ConfigError(f"unknown backbone keys: {sorted(extra)}")
        if cfg["command"] == "pretrain" or cfg["pretrain"] is not None:
            cfg["pretrain"] = PretrainConfig.from_dict(dict(cfg["pretrain"] or {}, seed=seed)).to_dict()
        if cfg["command"] == "finetune" or cfg["finetune"] is not None:
            cfg["finetune"] = FinetuneConfig.from_dict(dict(cfg["finetune"] or {}, seed=seed)).to_dict()
        if cfg["command"] == "datagen":
            dg = dict(cfg["datagen"] or {})
            extra = set(dg) - DATAGEN_KEYS
            if extra:
                raise ConfigError(f"unknown datagen keys: {sorted(extra)}")
            specs = dg.get("specs") or [{"generator_regime": "woodglue-analog"},
                                         {"generator_regime": "gelatine-analog"}]
            resolved = []
            for s in specs:
                d = dict(s, seed=seed)
                if "image_size" in d:
                    d["image_size"] = tuple(d["image_size"])
                spec = SyntheticSpec(**d)
                resolved.append(dict(vars(spec), image_size=list(spec.image_size)))
            cfg["datagen"] = {"specs": resolved, "test_fraction": float(dg.get("test_fraction", 0.5)),
                              "write_images": bool(dg.get("write_images", True))}
    except (InvalidInputError, InvalidSpecError, TypeError, KeyError) as e:
        raise ConfigError(str(e))


def _echo_config(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _write_run_info(out: Path, cfg: dict, started: float, extra: Optional[dict] = None) -> None:
    info = {
        "command": cfg["command"],
        "version": __version__,
        "python": platform.python_version(),
        "started_unix": started,
        "elapsed_seconds": time.time() - started,
    }
    info.update(extra or {})
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"the {cfg['command']} command needs '{key}' (config file or argument)")
    return cfg[key]


# --- data helpers -------------------------------------------------------------------

def _load_manifest(cfg: dict):
    path = Path(_require(cfg, "manifest"))
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    return DatasetManifest.load(path), path.parent


def _select(cfg: dict, manifest: DatasetManifest, side: str) -> DatasetManifest:
    if cfg["protocol"] is None:
        return manifest
    if cfg["holdout"] is None:
        raise ConfigError("a protocol split needs 'holdout' in the config")
    split = make_protocol_split(manifest, cfg["protocol"], cfg["holdout"])
    return getattr(split, side)


def _backbone_for(cfg: dict, samples) -> BackboneConfig:
    b = cfg["backbone"] or {}
    shape = tuple(b.get("input_shape", samples[0].shape))
    return BackboneConfig(b.get("arch_id", "tiny"), shape, int(b.get("embedding_dim", 32)),
                          float(b.get("width_multiplier", 1.0)))


# --- commands ---------------------------------------------------------------------

def cmd_datagen(cfg: dict, out: Path) -> dict:
    dg = cfg["datagen"]
    specs = [SyntheticSpec(**dict(s, image_size=tuple(s["image_size"]))) for s in dg["specs"]]
    samples, manifest = synthesize(specs, dg["test_fraction"])
    if dg["write_images"]:
        manifest = write_dataset(out, samples, manifest)
    manifest.save(out / "manifest.json")
    counts = Counter((r.meta.get("regime", "?"), r.label) for r in manifest.records)
    for (regime, label), n in sorted(counts.items()):
        print(f"{regime:24s} {label:10s} {n}")
    print(f"{len(manifest)} records -> {out / 'manifest.json'}")
    return {"records": len(manifest)}


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    manifest, root = _load_manifest(cfg)
    samples = load_samples(_select(cfg, manifest, "train"), root)
    if not samples:
        raise InvalidInputError("no samples to pretrain on")
    pcfg = PretrainConfig.from_dict(cfg["pretrain"])
    state = pretrain_state_run(samples, pcfg, _backbone_for(cfg, samples), out_dir=out / "checkpoints")
    state.history.write(out / "history.ndjson")
    l_r = state.history.values("L_r")
    if len(l_r):
        print(f"pretrained {state.step} steps; L_r {l_r[0]:.4f} -> {l_r[-1]:.4f}")
    else:
        print("pretrained 0 steps")
    return {"steps": state.step, "wall_clock": state.history.wall_clock}


def cmd_finetune(cfg: dict, out: Path) -> dict:
    manifest, root = _load_manifest(cfg)
    samples = load_samples(_select(cfg, manifest, "train"), root)
    if not samples:
        raise InvalidInputError("no labeled samples to fine-tune on")
    fcfg = FinetuneConfig.from_dict(cfg["finetune"])
    if cfg["from_scratch"]:
        extractor = build_extractor(_backbone_for(cfg, samples), fcfg.seed)
    else:
        extractor, meta = load_extractor(_require(cfg, "checkpoint"))
        if tuple(samples[0].shape) != extractor.config.input_shape:
            raise IncompatibleCheckpointError(
                f"checkpoint expects {extractor.config.input_shape} images, data has {samples[0].shape}")
    det, history = finetune(extractor, samples, fcfg)
    save_detector(out / "detector.npz", det, fcfg.seed, {"from_scratch": cfg["from_scratch"]})
    history.write(out / "history.ndjson")
    print(f"fine-tuned {len(history)} steps -> {out / 'detector.npz'}")
    return {"steps": len(history), "wall_clock": history.wall_clock}


def _report(cfg: dict, scores: metrics.ScoreSet) -> dict:
    return metrics.report(scores, cfg["fdr_cap"], cfg["ace_threshold"])


def _print_report(rep: dict) -> None:
    for k in sorted(rep):
        print(f"{k:14s} {rep[k]}")


def cmd_evaluate(cfg: dict, out: Path) -> dict:
    det, _ = load_detector(_require(cfg, "checkpoint"))
    manifest, root = _load_manifest(cfg)
    selected = _select(cfg, manifest, "test")
    samples = load_samples(selected, root)
    if samples and tuple(samples[0].shape) != det.config.input_shape:
        raise IncompatibleCheckpointError(f"detector expects {det.config.input_shape} images, data has {samples[0].shape}")
    values = score_in_batches(det, samples)
    rows = [(r.id, r.label, float(v)) for r, v in zip(selected.records, values)]
    metrics.write_score_file(out / "scores.csv", rows)
    # metrics are computed from the file just written, so `ifom metrics` reproduces them exactly
    s = metrics.scoreset_from_file(out / "scores.csv")
    rep = _report(cfg, s)
    metrics.write_report(out / "report.json", rep)
    metrics.write_roc(out / "roc.csv", metrics.roc(s))
    _try_plot(out / "roc.png", metrics.roc(s))
    _print_report(rep)
    return {}


def _try_plot(path: Path, curve: metrics.RocCurve) -> None:
    """Render the ROC if matplotlib happens to be installed; the CSV is the real output."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.step(curve.fpr, curve.tpr, where="post")
    ax.set_xlabel("false detection rate")
    ax.set_ylabel("true detection rate")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_metrics(cfg: dict, out: Path) -> dict:
    path = Path(_require(cfg, "scores"))
    if not path.exists():
        raise FileNotFoundError(f"score file {path} not found")
    rep = _report(cfg, metrics.scoreset_from_file(path))
    metrics.write_report(out / "report.json", rep)
    _print_report(rep)
    return {}


def cmd_inspect(cfg: dict, out: Path) -> dict:
    path = Path(_require(cfg, "checkpoint"))
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    arrays, meta = read_archive(path)
    per_module = Counter()
    for name, arr in arrays.items():
        if not name.startswith("optim/"):
            per_module[name.split("/", 1)[0]] += int(np.asarray(arr).size)
    summary = {k: v for k, v in meta.items() if k not in ("history", "param_groups")}
    summary["values_per_module"] = dict(sorted(per_module.items()))
    if "history" in meta:
        summary["history_steps"] = len(meta["history"])
    text = json.dumps(summary, indent=2, sort_keys=True)
    (out / "inspect.json").write_text(text + "\n")
    print(text)
    return {}


HANDLERS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "metrics": cmd_metrics,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"ifom: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        out = _echo_config(cfg)
        extra = HANDLERS[cfg["command"]](cfg, out)
        _write_run_info(out, cfg, started, extra)
    except ConfigError as e:
        print(f"ifom: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IfomError, OSError, ValueError, KeyError) as e:
        print(f"ifom {cfg['command']}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
