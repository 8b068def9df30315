"""Command-line pipeline: train-teacher -> distill -> convert -> eval.

Every command reads the same TOML config and writes a run directory::

    manifest.json        command, resolved config, paths, version, timestamps
    config.toml          resolved config snapshot
    metrics.jsonl        one record per epoch (training commands)
    mask.log             per-step mask statistics (cdd_rggr only)
    *.ckpt               checkpoints in the capdistill container format
    conversion_report.txt / eval.txt

Only the manifest carries wall-clock data, so the other files are
byte-identical across reruns with the same seed.

Exit codes: 0 ok, 2 config error, 3 non-finite numbers, 4 incompatible inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from capdistill import __version__
from capdistill import checkpoint as C
from capdistill import config as CFG
from capdistill import data as D
from capdistill import network as N
from capdistill import reparam as R
from capdistill import training as T

log = logging.getLogger("capdistill")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4


class CompatibilityError(Exception):
    pass


# --- helpers ----------------------------------------------------------------
def _resolve(args):
    cfg = CFG.load(args.config)
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        try:
            train = replace(train, mode=args.mode)
        except ValueError as exc:
            raise CFG.ConfigError(f"--mode: {exc}") from None
    lam = cfg.lam
    if getattr(args, "lam", None) is not None:
        if args.lam < 0:
            raise CFG.ConfigError("--lambda must be non-negative")
        lam = args.lam
    return CFG.RunConfig(cfg.data, cfg.model, train, lam)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


class RunDir:
    def __init__(self, path, command, cfg, inputs):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.manifest = {
            "command": command,
            "config": cfg.to_dict(),
            "seed": cfg.train.seed,
            "version": __version__,
            "inputs": inputs,
            "outputs": [],
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        with open(self.file("config.toml"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_toml())
        self.add_output("config.toml")

    def file(self, name):
        return os.path.join(self.path, name)

    def add_output(self, name):
        if name not in self.manifest["outputs"]:
            self.manifest["outputs"].append(name)

    def finish(self, status):
        self.manifest["status"] = status
        self.manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(self.file("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _metrics_writer(dataset, fh):
    def on_epoch_end(trainer, epoch):
        rep = T.evaluate(trainer.model, dataset)
        extra = {"mAP": rep.mAP, "R1": rep.R1}
        if trainer.model.has_compactors:
            extra["compactor_norms"] = T.compactor_norms(trainer.model)
        return extra

    def write(record):
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
        fh.flush()

    return on_epoch_end, write


def _train(run, trainer, dataset, kind, ckpt_name):
    """Run ``trainer`` to completion, streaming epoch records; keeps the last good checkpoint on failure."""
    last_good = {"ckpt": trainer.to_checkpoint(kind)}
    with open(run.file("metrics.jsonl"), "w", encoding="utf-8") as fh:
        run.add_output("metrics.jsonl")
        evaluate, write = _metrics_writer(dataset, fh)

        def on_epoch_end(tr, epoch):
            extra = evaluate(tr, epoch)
            last_good["ckpt"] = tr.to_checkpoint(kind)
            return extra

        try:
            epoch_done = trainer.step // trainer.steps_per_epoch
            while trainer.step < trainer.total_steps:
                epoch_done += 1
                for rec in trainer.run(stop_step=epoch_done * trainer.steps_per_epoch, on_epoch_end=on_epoch_end):
                    write(rec)
        except FloatingPointError:
            C.save(run.file("last_good.ckpt"), last_good["ckpt"])
            run.add_output("last_good.ckpt")
            raise
    C.save(run.file(ckpt_name), trainer.to_checkpoint(kind))
    run.add_output(ckpt_name)


def _check_topology(state, expected_model):
    """Raise CompatibilityError naming the first layer whose shape differs."""
    want = expected_model.state_dict()
    for name in sorted(set(want) | set(state)):
        if name not in state:
            raise CompatibilityError(f"layer {name}: missing from checkpoint")
        if name not in want:
            raise CompatibilityError(f"layer {name}: not present in the configured topology")
        if tuple(state[name].shape) != tuple(want[name].shape):
            raise CompatibilityError(
                f"layer {name}: checkpoint shape {tuple(state[name].shape)} != configured {tuple(want[name].shape)}"
            )


def _model_state(ckpt):
    return {k: v for k, v in ckpt.tensors.items() if "/" not in k}


def load_model(ckpt, model_config):
    """Rebuild a teacher, student or slim model from a checkpoint, checked against ``model_config``."""
    kind = ckpt.meta.get("kind")
    state = _model_state(ckpt)
    if kind == "slim":
        try:
            return R.slim_from_state(model_config, state)
        except (KeyError, ValueError) as exc:
            raise CompatibilityError(f"slim checkpoint does not fit the configured topology: {exc}") from None
    with_c = any(k.endswith(".compactor.weight") for k in state)
    mcfg = N.ModelConfig.from_dict({**model_config.to_dict(), "with_compactors": with_c})
    model = N.build_model(mcfg, 0)
    _check_topology(state, model)
    model.load_state_dict(state)
    return model


def _load_ckpt(path):
    try:
        return C.load(path)
    except (OSError, C.CheckpointError) as exc:
        raise CompatibilityError(f"cannot load checkpoint {path}: {exc}") from None


# --- commands -----------------------------------------------------------------
def cmd_train_teacher(args):
    cfg = _resolve(args)
    cfg.train = replace(cfg.train, mode="teacher")
    run = RunDir(args.out, "train-teacher", cfg, {"config": args.config})
    dataset = D.generate(cfg.data)
    mcfg = N.ModelConfig.from_dict({**cfg.model.to_dict(), "with_compactors": False})
    trainer = T.Trainer(cfg.train, dataset, N.build_model(mcfg, cfg.train.seed))
    try:
        _train(run, trainer, dataset, "teacher", "teacher.ckpt")
    except FloatingPointError:
        run.finish("numeric_failure")
        raise
    _write_eval(run, trainer.model, dataset)
    run.finish("ok")
    return EXIT_OK


def cmd_distill(args):
    cfg = _resolve(args)
    if cfg.train.mode == "teacher":
        raise CFG.ConfigError("train.mode: distill needs one of cdd, cdd_rggr, cdd_no_dgc")
    teacher_ckpt = _load_ckpt(args.teacher)
    if teacher_ckpt.meta.get("kind") != "teacher":
        raise CompatibilityError(f"{args.teacher} is not a teacher checkpoint (kind={teacher_ckpt.meta.get('kind')})")
    teacher = load_model(teacher_ckpt, cfg.model)
    if teacher.has_compactors:
        raise CompatibilityError("teacher checkpoint must not contain compactors")
    run = RunDir(args.out, "distill", cfg, {"config": args.config, "teacher": args.teacher})
    dataset = D.generate(cfg.data)
    student = T.make_student(cfg.train, cfg.model, teacher)
    mask_fh = None
    if cfg.train.mode == "cdd_rggr":
        mask_fh = open(run.file("mask.log"), "w", encoding="utf-8")
        run.add_output("mask.log")
    try:
        trainer = T.Trainer(cfg.train, dataset, student, teacher, mask_fh)
        _train(run, trainer, dataset, "student", "student.ckpt")
    except FloatingPointError:
        run.finish("numeric_failure")
        raise
    finally:
        if mask_fh is not None:
            mask_fh.close()
    _write_eval(run, trainer.model, dataset)
    run.finish("ok")
    return EXIT_OK


def cmd_convert(args):
    cfg = _resolve(args)
    ckpt = _load_ckpt(args.checkpoint)
    if not any(k.endswith(".compactor.weight") for k in ckpt.tensors):
        raise CompatibilityError(f"{args.checkpoint} has no compactors; only compactor students can be converted")
    student = load_model(ckpt, cfg.model)
    run = RunDir(args.out, "convert", cfg, {"config": args.config, "checkpoint": args.checkpoint})
    try:
        slim, plan, report = R.convert_model(student, cfg.lam)
    except R.ConversionError as exc:
        run.finish("conversion_failed")
        raise CompatibilityError(str(exc)) from None
    meta = {"kind": "slim", "lambda": cfg.lam, "widths": plan.widths}
    C.save(run.file("slim.ckpt"), C.Checkpoint(slim.state_dict(), {"model": slim.config.to_dict()}, ckpt.step, meta))
    run.add_output("slim.ckpt")
    with open(run.file("conversion_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    run.add_output("conversion_report.txt")
    sys.stdout.write(report.to_text())
    run.finish("ok")
    return EXIT_OK


def _write_eval(run, model, dataset):
    rep = T.evaluate(model, dataset)
    text = rep.to_record()
    with open(run.file("eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    run.add_output("eval.txt")
    return text


def cmd_eval(args):
    cfg = _resolve(args)
    ckpt = _load_ckpt(args.checkpoint)
    model = load_model(ckpt, cfg.model)
    run = RunDir(args.out, "eval", cfg, {"config": args.config, "checkpoint": args.checkpoint})
    dataset = D.generate(cfg.data)
    shape = dataset.images.shape[1:]
    want = (cfg.model.in_channels, cfg.model.image_size, cfg.model.image_size)
    if shape != want:
        run.finish("incompatible")
        raise CompatibilityError(f"dataset images {shape} do not match model input {want}")
    sys.stdout.write(_write_eval(run, model, dataset))
    run.finish("ok")
    return EXIT_OK


def cmd_default_config(args):
    text = CFG.default_config().to_toml()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- entry point --------------------------------------------------------------
def build_parser():
    ap = argparse.ArgumentParser(prog="capdistill", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", required=out_required, help="run directory")
        p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("train-teacher", help="train the teacher network")
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distil a compactor student from a teacher")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--mode", choices=[m for m in T.MODES if m != "teacher"], help="override train.mode")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("convert", help="prune and merge a trained student into a slim model")
    common(p)
    p.add_argument("--checkpoint", required=True, help="student checkpoint")
    p.add_argument("--lambda", dest="lam", type=float, help="override convert.lambda")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="retrieval metrics and cost of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("default-config", help="print the default config")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_default_config)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CFG.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CompatibilityError as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
