"""Command-line interface: ``molguide <command> [options]``.

Commands: make-dataset, train, sample, train-regressor, evaluate.

Option values resolve as command-line flag, then ``--config`` file
(``key = value`` lines), then built-in default. Every run writes into a fresh
numbered directory under ``--out`` and records the resolved options there as
``config.txt``.

Exit codes: 0 ok, 1 other error, 2 usage, 3 training or sampling diverged,
4 corrupt checkpoint, 5 unparseable prompt, 6 configuration mismatch.
"""
from __future__ import annotations

import argparse
import csv
import filecmp
import json
import logging
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import condition, data, diffuse, metrics, net
from .errors import (
    ConfigMismatchError,
    CorruptCheckpointError,
    MolguideError,
    SamplingDivergedError,
    TrainingDivergedError,
    UnparseablePromptError,
)
from .geom import formula, read_xyz, write_xyz
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger("molguide")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED, EXIT_CORRUPT, EXIT_PROMPT, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5, 6
SIDECAR_SCHEMA = 1
CORPUS_ENV = "MOLGUIDE_CORPUS"


class UsageError(Exception):
    pass


# option name -> (type, default, help); defaults of None mean "required" or "not set"
OPTIONS = {
    "make-dataset": {
        "toy": (str, None, f"synthetic corpus kind: {', '.join(data.TOY_KINDS)}"),
        "source": (str, None, "directory of .xyz files plus properties.csv"),
        "n": (int, 200, "molecules in a synthetic corpus"),
        "seed": (int, None, "random seed (required)"),
        "out": (str, None, "bundle directory to write (required)"),
    },
    "train": {
        "corpus": (str, None, f"corpus bundle (default ${CORPUS_ENV})"),
        "split": (str, "train", "subset to train on: train, D_a, D_b or all"),
        "seed": (int, None, "random seed (required)"),
        "epochs": (int, 200, "epochs to run (added to the resumed epoch count)"),
        "batch_size": (int, 16, "molecules per optimizer step"),
        "draws": (int, 8, "noise draws per molecule per epoch"),
        "ema": (float, 0.999, "decay of the parameter moving average; 0 disables it"),
        "lr": (float, 2e-3, "Adam learning rate"),
        "layers": (int, 3, "EGNN layers"),
        "hidden": (int, 32, "hidden width"),
        "schedule": (str, "polynomial", "noise schedule kind"),
        "steps": (int, 1000, "diffusion steps T"),
        "resume": (str, None, "checkpoint to continue from"),
        "out": (str, "runs", "parent directory for run directories"),
    },
    "sample": {
        "checkpoint": (str, None, "trained predictor checkpoint (required)"),
        "weights": (str, "ema", "ema or raw; ema falls back to raw when the checkpoint has none"),
        "seed": (int, None, "random seed (required)"),
        "n": (int, 10, "number of molecules"),
        "batch_size": (int, 64, "molecules per reverse-chain batch"),
        "workers": (int, 1, "worker processes; output does not depend on it"),
        "prompt": (str, None, "text condition"),
        "lambda": (float, 0.3, "mixing weight for t > t_stop"),
        "t_stop": (int, None, "last guided step is t_stop + 1 (default T/10)"),
        "corpus": (str, None, f"reference corpus bundle (default ${CORPUS_ENV})"),
        "split": (str, "train", "subset the reference is retrieved from"),
        "out": (str, "runs", "parent directory for run directories"),
    },
    "train-regressor": {
        "corpus": (str, None, f"corpus bundle (default ${CORPUS_ENV})"),
        "property": (str, None, f"property key: {', '.join(metrics.PROPERTY_KEYS)}"),
        "split": (str, "D_a", "subset to fit on"),
        "seed": (int, None, "random seed (required)"),
        "epochs": (int, 50, "training epochs"),
        "batch_size": (int, 32, "molecules per step"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "layers": (int, 3, "EGNN layers"),
        "hidden": (int, 32, "hidden width"),
        "out": (str, "runs", "parent directory for run directories"),
    },
    "evaluate": {
        "samples": (str, None, "sample run directory or .xyz file (required)"),
        "corpus": (str, None, f"corpus bundle (default ${CORPUS_ENV})"),
        "split": (str, "train", "subset novelty is measured against"),
        "regressor": (str, None, "comma-separated regressor checkpoints"),
        "method": (str, "generated", "row label in the table"),
        "seed": (int, None, "random seed (required)"),
        "out": (str, "runs", "parent directory for run directories"),
    },
}
REQUIRED = {
    "make-dataset": ("seed", "out"),
    "train": ("seed", "corpus"),
    "sample": ("seed", "checkpoint"),
    "train-regressor": ("seed", "corpus", "property"),
    "evaluate": ("seed", "samples", "corpus"),
}


# --- configuration -----------------------------------------------------------------

def read_config_file(path) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(command: str, flags: Dict[str, object], config_path: Optional[str]) -> Dict[str, object]:
    """Merge flag values over config-file values over defaults, converting types."""
    table = {k.replace("-", "_"): v for k, v in OPTIONS[command].items()}
    file_vals = read_config_file(config_path) if config_path else {}
    unknown = set(file_vals) - set(table)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    out = {}
    for key, (typ, default, _) in table.items():
        if flags.get(key) is not None:
            out[key] = flags[key]
        elif key in file_vals:
            try:
                out[key] = typ(file_vals[key])
            except ValueError:
                raise UsageError(f"config key {key}: cannot read {file_vals[key]!r} as {typ.__name__}") from None
        else:
            out[key] = default
    if "corpus" in out and out["corpus"] is None:
        out["corpus"] = os.environ.get(CORPUS_ENV)
    missing = [k for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return out


def dump_config(cfg: Dict[str, object], path: Path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.items() if v is not None]
    path.write_text("\n".join(lines) + "\n")


def new_run_dir(root, prefix: str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    i = 1
    while True:
        d = root / f"{prefix}-{i:04d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            i += 1


def load_corpus(path) -> data.AnnotatedCorpus:
    return data.load_bundle(path)


# --- commands ------------------------------------------------------------------------

def cmd_make_dataset(cfg) -> int:
    if (cfg["toy"] is None) == (cfg["source"] is None):
        raise UsageError("make-dataset: give exactly one of --toy or --source")
    if cfg["toy"] is not None:
        corpus = data.make_toy_dataset(cfg["toy"], cfg["n"], cfg["seed"])
        source = f"toy:{cfg['toy']}"
    else:
        corpus = data.load_qm9_like(cfg["source"])
        source = "files"
        if corpus.warnings:
            log.warning("excluded %d molecule(s) with unsupported elements", corpus.warnings)
    corpus = data.describe_corpus(data.split(corpus, cfg["seed"]), cfg["seed"])
    out = Path(cfg["out"])
    with tempfile.TemporaryDirectory(dir=out.parent if out.parent.exists() else None) as tmp:
        staged = data.save_bundle(corpus, Path(tmp) / "bundle", source=source)
        dump_config(cfg, staged / "config.txt")
        if out.exists() and any(out.iterdir()):
            if not _same_tree(staged, out):
                raise MolguideError(f"{out} already holds different content; refusing to overwrite")
            log.info("%s already up to date", out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            shutil.copytree(staged, out, dirs_exist_ok=True)
    print(f"wrote {len(corpus)} molecules to {out}")
    return EXIT_OK


def _same_tree(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


# options that must match when a run is resumed
TRAINING_KEYS = ("seed", "batch_size", "draws", "lr", "split", "ema")


def _predictor_header(cfg, net_cfg, sched, hist, epoch, losses, step):
    return {
        "predictor": net_cfg.to_dict(),
        "schedule": sched.to_dict(),
        "atom_counts": {str(k): v for k, v in hist.items()},
        "epoch": epoch,
        "adam_step": step,
        "losses": losses,
        "training": {k: cfg[k] for k in TRAINING_KEYS},
    }


def load_predictor(path, weights: str = "raw"):
    """(predictor, schedule, atom-count histogram, checkpoint); ``weights`` picks "raw" or "ema" parameters."""
    if weights not in ("raw", "ema"):
        raise UsageError(f"--weights must be raw or ema, not {weights!r}")
    c = ckpt.load_checkpoint(path, kind="predictor")
    h = c.header
    net_cfg = net.NoisePredictorConfig(**h["predictor"])
    sched = NoiseSchedule.from_dict(h["schedule"])
    params = c.vectors["ema"] if weights == "ema" and "ema" in c.vectors else c.vectors["params"]
    pred = net.NoisePredictor(net_cfg, params=params)
    hist = {int(k): float(v) for k, v in h["atom_counts"].items()}
    return pred, sched, hist, c


def cmd_train(cfg) -> int:
    corpus = load_corpus(cfg["corpus"])
    geoms = corpus.select(cfg["split"])
    if not geoms:
        raise MolguideError(f"split {cfg['split']!r} is empty")
    hist = diffuse.SamplerConfig.histogram(geoms)
    net_cfg = net.NoisePredictorConfig(layers=cfg["layers"], hidden=cfg["hidden"], steps=cfg["steps"])
    sched = build_schedule(cfg["schedule"], cfg["steps"])
    state, start, losses, ema = None, 0, [], None
    if cfg["resume"]:
        pred, r_sched, r_hist, c = load_predictor(cfg["resume"])
        if pred.cfg != net_cfg or r_sched.to_dict() != sched.to_dict():
            raise ConfigMismatchError("network or schedule options differ from the resumed checkpoint")
        trained_with = c.header["training"]
        for k in TRAINING_KEYS:
            if trained_with.get(k, 0.0 if k == "ema" else None) != cfg[k]:
                raise ConfigMismatchError(f"--{k.replace('_', '-')} differs from the resumed checkpoint ({trained_with[k]})")
        state = net.AdamState(c.vectors["adam_m"], c.vectors["adam_v"], c.header["adam_step"])
        start, losses = c.header["epoch"], list(c.header["losses"])
        ema = c.vectors.get("ema")
    else:
        pred = net.NoisePredictor(net_cfg, rng=np.random.default_rng([cfg["seed"], 0xC0FFEE]))
    run = new_run_dir(cfg["out"], "train")
    dump_config(cfg, run / "config.txt")
    log.info("training %d molecules from epoch %d in %s", len(geoms), start, run)
    res = diffuse.train(
        pred, sched, geoms, net.AdamConfig(lr=cfg["lr"]), epochs=cfg["epochs"], seed=cfg["seed"],
        batch_size=cfg["batch_size"], state=state, start_epoch=start, draws_per_molecule=cfg["draws"],
        on_epoch=lambda e, l: log.debug("epoch %d loss %.5f", e, l), ema_decay=cfg["ema"], ema=ema,
    )
    losses += res.losses
    header = _predictor_header(cfg, net_cfg, sched, hist, res.epochs_done, losses, res.state.step)
    vectors = {"params": res.params, "adam_m": res.state.m, "adam_v": res.state.v}
    if res.ema is not None:
        vectors["ema"] = res.ema
    ckpt.save_checkpoint(run / "checkpoint.ckpt", ckpt.Checkpoint("predictor", header, vectors))
    with open(run / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, l in enumerate(losses):
            w.writerow([e, repr(l)])
    print(f"{run}  epochs={res.epochs_done}  final_loss={losses[-1]:.5f}")
    return EXIT_OK


def cmd_sample(cfg) -> int:
    pred, sched, hist, _ = load_predictor(cfg["checkpoint"], cfg["weights"])
    scfg = diffuse.SamplerConfig(sched, pred, hist, seed=cfg["seed"], batch_size=cfg["batch_size"])
    record = ref = resolved = None
    if cfg["prompt"] is not None:
        record = condition.parse_prompt(cfg["prompt"])
        if record.ignored:
            log.warning("ignored prompt text: %s", "; ".join(record.ignored))
        if cfg["corpus"] is None:
            raise UsageError("--prompt needs --corpus (or $MOLGUIDE_CORPUS)")
        corpus = load_corpus(cfg["corpus"])
        idx = corpus.indices(cfg["split"])
        t_stop = sched.T // 10 if cfg["t_stop"] is None else cfg["t_stop"]
        mix = condition.MixSchedule.constant(sched.T, cfg["lambda"], t_stop)
        gs, ref = condition.sample_conditional(scfg, record, mix, cfg["n"], corpus, idx, workers=cfg["workers"])
        resolved = condition.resolve_targets(record, corpus, idx)
    else:
        gs = diffuse.sample_unconditional(scfg, cfg["n"], workers=cfg["workers"])
    run = new_run_dir(cfg["out"], "sample")
    dump_config(cfg, run / "config.txt")
    write_xyz(gs, run / "samples.xyz", comments=[f"sample {i}" for i in range(len(gs))])
    with open(run / "samples.jsonl", "w") as fh:
        for i, g in enumerate(gs):
            rec = {"schema_version": SIDECAR_SCHEMA, "index": i, "seed": cfg["seed"], "atoms": g.atom_count,
                   "formula": formula(g), "condition": None}
            if record is not None:
                rec["condition"] = record.to_dict()
                rec["resolved_targets"] = resolved
                rec["reference"] = {"id": ref.provenance, "score": ref.score}
                rec["lambda"], rec["t_stop"] = cfg["lambda"], mix.t_stop
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"{run}  samples={len(gs)}")
    return EXIT_OK


def cmd_train_regressor(cfg) -> int:
    corpus = load_corpus(cfg["corpus"])
    idx = corpus.indices(cfg["split"])
    key = cfg["property"]
    if key not in metrics.PROPERTY_KEYS:
        raise ConfigMismatchError(f"unknown property {key!r}")
    rcfg = metrics.RegressorConfig(layers=cfg["layers"], hidden=cfg["hidden"])
    reg = metrics.train_property_regressor(
        [corpus.geometries[i] for i in idx], corpus.property_array(key, idx), key, rcfg,
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"])
    run = new_run_dir(cfg["out"], "regressor")
    dump_config(cfg, run / "config.txt")
    header = {"property": key, "regressor": rcfg.to_dict(), "target_mean": reg.target_mean,
              "target_std": reg.target_std, "val_mae": reg.val_mae, "split": cfg["split"]}
    ckpt.save_checkpoint(run / "regressor.ckpt", ckpt.Checkpoint("regressor", header, {"params": reg.params}))
    print(f"{run}  property={key}  val_mae={reg.val_mae:.4g}")
    return EXIT_OK


def load_regressor(path) -> metrics.PropertyRegressor:
    c = ckpt.load_checkpoint(path, kind="regressor")
    h = c.header
    return metrics.PropertyRegressor(h["property"], metrics.RegressorConfig(**h["regressor"]), c.vectors["params"],
                                     h["target_mean"], h["target_std"], h["val_mae"])


def report_schema() -> dict:
    return json.loads(resources.files("molguide.assets").joinpath("report_schema.json").read_text())


def cmd_evaluate(cfg) -> int:
    import jsonschema

    src = Path(cfg["samples"])
    xyz = src / "samples.xyz" if src.is_dir() else src
    sidecar = xyz.with_suffix(".jsonl")
    gs = read_xyz(xyz)
    records = [json.loads(l) for l in sidecar.read_text().splitlines() if l.strip()] if sidecar.exists() else []
    corpus = load_corpus(cfg["corpus"])
    train_keys = {metrics.canonical_key(corpus.geometries[i]) for i in corpus.indices(cfg["split"])}
    regressors, targets = {}, {}
    for path in filter(None, (cfg["regressor"] or "").split(",")):
        reg = load_regressor(path.strip())
        if len(records) != len(gs):
            raise ConfigMismatchError("regressor evaluation needs a sidecar record per sample")
        try:
            targets[reg.key] = [r["resolved_targets"][reg.key] for r in records]
        except (KeyError, TypeError):
            raise ConfigMismatchError(f"regressor predicts {reg.key} but the samples were not conditioned on it") from None
        regressors[reg.key] = reg
    report = metrics.evaluate(gs, train_keys, regressors, targets, method=cfg["method"])
    payload = json.loads(report.to_json())
    jsonschema.validate(payload, report_schema())
    run = new_run_dir(cfg["out"], "eval")
    dump_config(cfg, run / "config.txt")
    (run / "report.json").write_text(report.to_json() + "\n")
    (run / "report.txt").write_text(report.table())
    print(report.table(), end="")
    print(run)
    return EXIT_OK


HELP = {
    "make-dataset": "build a corpus bundle from files or a synthetic generator",
    "train": "train the noise predictor (resumable)",
    "sample": "draw molecules, optionally guided by a text prompt",
    "train-regressor": "fit a property regressor used for MAE evaluation",
    "evaluate": "score samples: property MAE, novelty, stability",
}

COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "train-regressor": cmd_train_regressor,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molguide", description="Text-guided equivariant diffusion for small molecules.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="key = value file; flags take precedence")
        for key, (typ, default, help_) in opts.items():
            extra = f" (default {default})" if default is not None else ""
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_ + extra)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"molguide {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"error: training diverged{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SamplingDivergedError as exc:
        print(f"error: sampling diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CorruptCheckpointError as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except UnparseablePromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROMPT
    except ConfigMismatchError as exc:
        print(f"error: configuration mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (MolguideError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
