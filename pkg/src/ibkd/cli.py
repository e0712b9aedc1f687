"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import contextlib
import hashlib
import json
import os
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import TASK_FILES, SyntheticSpec, gen_synthetic, load_task, save_task
from .encoder import StudentModel, load_checkpoint, save_checkpoint
from .evalsuite import write_rankings_tsv
from .exceptions import ConfigError, FormatError, IBKDError
from .pipeline import diagnose, evaluate_retrieval, evaluate_sts
from .trainer import DistillConfig, run_distill_stage, run_finetune_stage


class UsageError(Exception):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat()


def _load_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed {what} {path}: {exc.msg} at line {exc.lineno} column {exc.colno}") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_digests(data_dir):
    d = Path(data_dir)
    return {str(d / f): sha256_file(d / f) for f in sorted(TASK_FILES.values()) if (d / f).exists()}


class Manifest:
    """Run manifest, written before work starts and completed afterwards."""

    def __init__(self, path, command, args, config, seed, inputs, outputs):
        self.path = Path(path)
        self.record = {
            "tool": "ibkd",
            "version": __version__,
            "command": command,
            "args": args,
            "config": config,
            "seed": seed,
            "inputs": inputs,
            "outputs": {k: str(v) for k, v in outputs.items()},
            "started": _now(),
        }
        _write_json(self.path, self.record)

    def finish(self, **extra):
        outputs = self.record["outputs"]
        self.record["output_digests"] = {k: sha256_file(v) for k, v in outputs.items() if Path(v).is_file()}
        self.record.update(extra)
        self.record["finished"] = _now()
        _write_json(self.path, self.record)


def _sidecar(out, suffix):
    out = Path(out)
    return out.with_name(out.name + suffix)


def cmd_gen_synthetic(args, spec_dict=None):
    if spec_dict is None:
        spec_dict = _load_json(args.spec, "spec") if args.spec else {}
    spec = SyntheticSpec.from_dict(spec_dict)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    task = gen_synthetic(spec)
    paths = save_task(task, out)
    record = {
        "tool": "ibkd",
        "version": __version__,
        "command": "gen-synthetic",
        "args": {"spec": args.spec, "out": str(out)},
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "teacher_mrr_at_10": task.teacher_mrr,
        "inputs": {args.spec: sha256_file(args.spec)} if args.spec else {},
        "outputs": {name: str(p) for name, p in paths.items()},
        "output_digests": {name: sha256_file(p) for name, p in paths.items()},
        "created": _now(),
    }
    _write_json(out / "manifest.json", record)
    print(f"wrote {len(paths)} files to {out} (teacher MRR@10 = {task.teacher_mrr:.4f})")


def _config(args, config_dict):
    if config_dict is None:
        config_dict = _load_json(args.config, "config")
    return DistillConfig.from_dict(config_dict)


def _load_data(data):
    try:
        return load_task(data)
    except FormatError as exc:
        raise UsageError(str(exc)) from None


def cmd_distill(args, config_dict=None):
    cfg = _config(args, config_dict)
    task = _load_data(args.data)
    student = StudentModel.init(cfg.layer_dims(task.corpus.dim), seed=cfg.seed)
    history_path = _sidecar(args.out, ".history.csv")
    manifest = Manifest(
        _sidecar(args.out, ".manifest.json"), "distill",
        {"data": str(args.data), "out": str(args.out), "config": args.config},
        cfg.to_dict(), cfg.seed, _data_digests(args.data),
        {"checkpoint": args.out, "history": history_path},
    )
    model, history = run_distill_stage(cfg, task.teacher, student, task.corpus.vectors, ids=task.corpus.ids)
    save_checkpoint(model, args.out)
    history.to_csv(history_path)
    manifest.finish()
    print(f"distilled {len(history)} epochs -> {args.out}")


def cmd_finetune(args, config_dict=None):
    cfg = _config(args, config_dict)
    task = _load_data(args.data)
    try:
        student = load_checkpoint(args.ckpt)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.ckpt}: {exc.strerror}") from None
    if student.spec.d_in != task.corpus.dim:
        raise ConfigError(f"checkpoint expects {student.spec.d_in} input features, data has {task.corpus.dim}")
    supervised = task.supervised()
    inputs = _data_digests(args.data)
    inputs[str(args.ckpt)] = sha256_file(args.ckpt)
    history_path = _sidecar(args.out, ".history.csv")
    manifest = Manifest(
        _sidecar(args.out, ".manifest.json"), "finetune",
        {"data": str(args.data), "out": str(args.out), "config": args.config, "ckpt": str(args.ckpt)},
        cfg.to_dict(), cfg.seed, inputs, {"checkpoint": args.out, "history": history_path},
    )
    model, history = run_finetune_stage(cfg, student, supervised)
    save_checkpoint(model, args.out)
    history.to_csv(history_path)
    manifest.finish()
    print(f"fine-tuned {len(history)} epochs -> {args.out} (output dim {model.output_dim})")


def _model_arg(args):
    if args.teacher:
        return None
    try:
        return load_checkpoint(args.ckpt)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.ckpt}: {exc.strerror}") from None


def _check_dims(model, task):
    if model is not None and model.spec.d_in != task.corpus.dim:
        raise ConfigError(f"checkpoint expects {model.spec.d_in} input features, data has {task.corpus.dim}")


def cmd_evaluate(args, config_dict=None):
    model = _model_arg(args)
    task = _load_data(args.data)
    _check_dims(model, task)
    if args.task == "retrieval":
        report, results = evaluate_retrieval(model, task, k=args.k)
        if args.rankings:
            write_rankings_tsv(results, args.rankings)
    else:
        report = evaluate_sts(model, task)
    report.to_json(args.out)
    print(report.to_json())


def cmd_diagnose(args, config_dict=None):
    model = _model_arg(args)
    task = _load_data(args.data)
    _check_dims(model, task)
    diag = diagnose(model, task)
    diag.report.to_json(args.out)
    cov_path = args.cov or _sidecar(args.out, ".cov.csv")
    np.savetxt(cov_path, diag.covariance, delimiter=",", fmt="%.17g")
    for w in diag.report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(diag.report.to_json())


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def cmd_replay(args, config_dict=None):
    """Re-run the command recorded in a manifest, writing to ``--out``."""
    record = _load_json(args.manifest, "manifest")
    command = record.get("command")
    if command not in ("gen-synthetic", "distill", "finetune"):
        raise UsageError(f"manifest command {command!r} cannot be replayed")
    for path, digest in record.get("inputs", {}).items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise ConfigError(f"input {path} is missing or differs from the manifest digest")
    ns = argparse.Namespace(**{**record["args"], "out": args.out})
    if command == "gen-synthetic":
        cmd_gen_synthetic(ns, spec_dict=record["spec"])
    else:
        COMMANDS[command](ns, config_dict=record["config"])


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="ibkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ibkd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic teacher and task")
    p.add_argument("--spec", help="JSON synthetic spec (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("distill", help="run the distillation stage")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")

    p = sub.add_parser("finetune", help="run the fine-tuning stage")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")

    for name, help_text in (("evaluate", "score a model on the task"), ("diagnose", "embedding diagnostics")):
        p = sub.add_parser(name, help=help_text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--ckpt")
        src.add_argument("--teacher", action="store_true", help="score the teacher embeddings instead")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="output JSON report")
        if name == "evaluate":
            p.add_argument("--task", required=True, choices=("retrieval", "sts"))
            p.add_argument("--k", type=positive_int, default=10)
            p.add_argument("--rankings", help="optional TSV export of the rankings")
        else:
            p.add_argument("--cov", help="covariance CSV (default: <out>.cov.csv)")

    p = sub.add_parser("replay", help="re-run a recorded run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("IBKD_THREADS")
    if not value:
        yield
        return
    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f"IBKD_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(limit, 1)):
        yield


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = cmd_replay if args.command == "replay" else COMMANDS[args.command]
    try:
        with _thread_cap(), warnings.catch_warnings():
            warnings.simplefilter("always")
            handler(args)
    except (UsageError, ConfigError) as exc:
        print(f"ibkd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IBKDError, OSError) as exc:
        print(f"ibkd {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
