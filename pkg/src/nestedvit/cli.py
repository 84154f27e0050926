"""Command line interface.

Exit codes: 0 success, 2 config/schema error, 3 data error,
4 checkpoint missing/corrupt or inconsistent with the config,
5 malformed trace line.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import cost as cost_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_tau
from .data import load_dataset
from .errors import ConfigError, CorruptionError, InputError, NestedViTError
from .inference import HaltPolicy, forward_all_stages, infer_progressive, summarize_trace, sweep
from .model import NestedViT
from .recycling import make_transitions
from .trainer import Trainer, fit

ENV_PREFIX = "NESTEDVIT_"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_TRACE = 5

log = logging.getLogger("nestedvit")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _global_flags(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="run config JSON (env NESTEDVIT_CONFIG)")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed (env NESTEDVIT_SEED)")
    parser.add_argument("--out", default=d, help="output directory (env NESTEDVIT_OUT)")
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="machine-readable JSON on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestedvit", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a nested model")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--steps", type=int, help="override train.steps")

    p = sub.add_parser("eval", parents=[common], help="progressive inference at one threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=parse_tau, help="entropy threshold in nats ('inf' = stage 1 only)")
    p.add_argument("--force-full", action="store_true", help="run every stage for every sample")

    p = sub.add_parser("sweep", parents=[common], help="evaluate a grid of thresholds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--taus", help="comma-separated ascending thresholds")

    sub.add_parser("cost", parents=[common], help="analytic GMACs and parameter table")

    p = sub.add_parser("report", parents=[common], help="summarise a per-sample trace file")
    p.add_argument("trace", help="JSON-lines trace written by 'eval'")
    p.add_argument("--num-stages", type=int)
    return parser


# -- config ------------------------------------------------------------------------

def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def resolve_config(args, overrides=None) -> RunConfig:
    path = args.config or _env("CONFIG")
    if not path:
        raise CliError(EXIT_CONFIG, "no config given (--config or NESTEDVIT_CONFIG)")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, "config root must be an object")
    seed = args.seed if args.seed is not None else _env("SEED")
    if seed is not None:
        raw["seed"] = int(seed)
    out = args.out or _env("OUT")
    if out:
        raw["out"] = out
    for section, key, value in overrides or []:
        if value is not None:
            raw.setdefault(section, {})[key] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"config schema violation: {_format_validation(exc)}") from None


def _write_resolved(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return out


def _dataset(cfg):
    try:
        return load_dataset(cfg)
    except (InputError, ConfigError, OSError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None


def _build(cfg):
    model = NestedViT(cfg.model, seed=cfg.seed)
    transitions = make_transitions(cfg.model, cfg.fusion, seed=cfg.seed)
    return model, transitions


def _restore(cfg, checkpoint, model, transitions, trainer=None):
    try:
        from .checkpoint import read_checkpoint

        manifest, _ = read_checkpoint(checkpoint)
        saved = manifest.get("config") or {}
        mine = cfg.resolved()
        for section in ("model", "fusion"):
            if saved.get(section) != mine[section]:
                raise CliError(EXIT_CHECKPOINT, f"checkpoint {section} section differs from config")
        return load_checkpoint(checkpoint, model, transitions, trainer)
    except CorruptionError as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint error: {exc}") from None


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(type(obj))


def _tau_json(tau):
    return "inf" if isinstance(tau, float) and math.isinf(tau) else tau


# -- commands -----------------------------------------------------------------------

def _rewind_metrics(path: Path, step: int):
    """Drop log records past ``step`` so a resumed run does not duplicate them."""
    kept = []
    if step > 0 and path.exists():
        for line in path.read_text().splitlines():
            try:
                if json.loads(line)["step"] <= step:
                    kept.append(line + "\n")
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
    path.write_text("".join(kept))


def cmd_train(args):
    cfg = resolve_config(args, [("train", "steps", args.steps)])
    out = _write_resolved(cfg)
    data = _dataset(cfg)
    model, transitions = _build(cfg)
    total = cfg.train.steps or cfg.train.epochs * data.steps_per_epoch(cfg.train.batch_size)
    trainer = Trainer(model, transitions, cfg.train, seed=cfg.seed, total_steps=total)
    if args.resume:
        _restore(cfg, args.resume, model, transitions, trainer)
        log.info("resumed from %s at step %d", args.resume, trainer.step_count)
    _rewind_metrics(out / "metrics.jsonl", trainer.step_count)
    resolved = cfg.resolved()
    spe = data.steps_per_epoch(cfg.train.batch_size)

    def save(path):
        save_checkpoint(path, model, transitions, trainer, resolved, epoch=trainer.step_count // spe)

    fit(trainer, data, cfg.seed, total, metrics_path=out / "metrics.jsonl",
        checkpoint_dir=out / "checkpoints", checkpoint_every=cfg.train.checkpoint_every, save=save)
    final = out / "checkpoint"
    save(final)
    _emit(args, {"checkpoint": str(final), "steps": trainer.step_count, "alpha": trainer.alphas()},
          str(final))


def cmd_eval(args):
    cfg = resolve_config(args)
    out = _write_resolved(cfg)
    data = _dataset(cfg)
    model, transitions = _build(cfg)
    _restore(cfg, args.checkpoint, model, transitions)
    images, labels = data.val_images, data.val_labels
    n = cfg.model.num_stages
    bs = cfg.inference.batch_size
    if args.force_full:
        tau = 0.0
        ents, preds = forward_all_stages(images, model, transitions, bs)
        halted = np.full(len(labels), n - 1)
        final = preds[:, -1]
        entropies = ents.tolist()
        stage_preds = preds.tolist()
    else:
        tau = args.tau if args.tau is not None else cfg.inference.tau
        res = infer_progressive(images, model, transitions, HaltPolicy(tau), bs)
        halted, final = res.halted_stage, res.predictions
        entropies, stage_preds = res.entropies, res.stage_predictions
    path_costs = cost_model.halting_path_gmacs(cfg.model, [t.strategy for t in transitions])
    accuracy = float((final == labels).mean())
    mean_gmacs = cost_model.mean_path_gmacs(halted, path_costs)
    ratios = [float((halted >= k).mean()) for k in range(n)]
    with open(out / "trace.jsonl", "w") as fh:
        for i in range(len(labels)):
            fh.write(json.dumps({
                "id": i,
                "entropies": [float(e) for e in entropies[i]],
                "halted_stage": int(halted[i]),
                "pred": int(final[i]),
                "label": int(labels[i]),
                "stage_preds": [int(p) for p in stage_preds[i]],
            }) + "\n")
    payload = {
        "tau": _tau_json(tau),
        "force_full": bool(args.force_full),
        "accuracy": accuracy,
        "mean_gmacs": mean_gmacs,
        "stage_call_ratios": ratios,
        "num_samples": int(len(labels)),
        "trace": str(out / "trace.jsonl"),
    }
    text = (f"accuracy {accuracy:.4f}  mean GMACs {mean_gmacs:.6f}  "
            + "  ".join(f"stage{k + 1} {100 * r:.2f}%" for k, r in enumerate(ratios)))
    _emit(args, payload, text)


def cmd_sweep(args):
    cfg = resolve_config(args)
    out = _write_resolved(cfg)
    taus = cfg.inference.taus
    if args.taus:
        try:
            taus = [parse_tau(t) for t in args.taus.split(",")]
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"bad --taus: {exc}") from None
        if sorted(taus) != taus:
            raise CliError(EXIT_CONFIG, "--taus must be ascending")
    data = _dataset(cfg)
    model, transitions = _build(cfg)
    _restore(cfg, args.checkpoint, model, transitions)
    try:
        report = sweep(data.val_images, data.val_labels, model, transitions, taus, cfg.inference.batch_size)
    except InputError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    csv_text = report.to_csv()
    (out / "sweep.csv").write_text(csv_text)
    (out / "sweep.json").write_text(report.to_json() + "\n")
    _emit(args, report.to_dict(), csv_text.rstrip("\n"))


def cmd_cost(args):
    cfg = resolve_config(args)
    out = _write_resolved(cfg)
    report = cost_model.cost_report(cfg.model, cfg.fusion.strategy)
    (out / "cost.csv").write_text(report.to_csv())
    _emit(args, report.to_dict(), report.to_text() + "\n" + report.to_csv().rstrip("\n"))


REQUIRED_TRACE_FIELDS = {"id": int, "entropies": list, "halted_stage": int, "pred": int, "label": int}


def read_trace(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_TRACE, f"{path}:{lineno}: malformed trace line ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CliError(EXIT_TRACE, f"{path}:{lineno}: trace line is not an object")
            for key, kind in REQUIRED_TRACE_FIELDS.items():
                if not isinstance(rec.get(key), kind) or isinstance(rec.get(key), bool):
                    raise CliError(EXIT_TRACE, f"{path}:{lineno}: field {key!r} missing or not {kind.__name__}")
            if len(rec["entropies"]) != rec["halted_stage"] + 1:
                raise CliError(EXIT_TRACE, f"{path}:{lineno}: entropies do not match halted_stage")
            records.append(rec)
    return records


def cmd_report(args):
    try:
        records = read_trace(args.trace)
    except FileNotFoundError:
        raise CliError(EXIT_TRACE, f"trace not found: {args.trace}") from None
    if not records:
        raise CliError(EXIT_TRACE, f"{args.trace}: empty trace")
    summary = summarize_trace(records, args.num_stages)
    out = Path(args.out or _env("OUT") or Path(args.trace).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = ["stage,count,share,correct,incorrect,accuracy"]
    for s in summary["load_distribution"]["stages"]:
        acc = "" if s["accuracy"] is None else f"{s['accuracy']:.6f}"
        lines.append(f"{s['stage'] + 1},{s['count']},{s['share']:.6f},{s['correct']},{s['incorrect']},{acc}")
    (out / "load_distribution.csv").write_text("\n".join(lines) + "\n")
    text = "\n".join(lines)
    if "prediction_dynamics" in summary:
        for t in summary["prediction_dynamics"]["transitions"]:
            text += (f"\nround {t['from_stage'] + 1}->{t['to_stage'] + 1}: "
                     f"c->c {t['correct_correct']}  c->w {t['correct_wrong']}  "
                     f"w->c {t['wrong_correct']}  w->w {t['wrong_wrong']}")
    _emit(args, summary, text)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if not args.json and _env("JSON", "").lower() in ("1", "true", "yes"):
        args.json = True
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NestedViTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, InputError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
