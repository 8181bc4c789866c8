"""``ckpl`` command line: task generation, training runs, sweeps, gradient checks, evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from ..params import ParamsFormatError, load_params, restore_state
from ..training import evaluate
from . import experiment as ex
from .config import ConfigError, ExperimentConfig, load_config, parse_depth
from .gradcheck import CKG_TOL, TOTAL_TOL, check_ckg, check_total, toy_draw
from .task import TaskSpecError, save_task

log = logging.getLogger("ckpl")

DEFAULT_LAMBDA_SWEEP = (0.1, 0.2, 0.5, 1.0, 2.0)
DEFAULT_PROMPT_LENGTH_SWEEP = (1, 2, 4)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="CKPL-CONFIG-v1 file (defaults otherwise)")
    p.add_argument("--seed", type=_u64, help="seed for task, model, and training")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--shots", type=int, help="samples per class (per stage in e2h)")
    p.add_argument("--lambda", dest="lam", type=float, help="CKG loss weight")
    p.add_argument("--tau", type=float, help="matching temperature")
    p.add_argument("--prompt-length", type=int, help="tokens per learnable prompt")
    p.add_argument("--depth", help="injection blocks: all, none, or e.g. 1-2")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ckpl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-task", "generate the synthetic task and report the base learner's error"),
        ("train-fewshot", "train on N random shots per class"),
        ("train-e2h", "two-stage easy-to-hard training"),
        ("ablate", "run the configured lambda / prompt-length / depth sweeps"),
        ("eval", "evaluate a saved parameter snapshot on the test split"),
    ]:
        _common(sub.add_parser(name, help=help_))
    ev = sub.choices["eval"]
    ev.add_argument("--params", type=Path, help="parameter snapshot (default: <out>/params.txt)")
    gc = sub.add_parser("grad-check", help="finite-difference check of the CKG and total losses")
    gc.add_argument("--draws", type=int, default=17, help="random model draws")
    gc.add_argument("--instances", type=int, default=3, help="random batches per draw")
    gc.add_argument("--seed", type=_u64, default=0, help="first draw seed")
    gc.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args, mode: str | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    train = cfg.train
    if args.lam is not None:
        train = replace(train, lam=args.lam)
    if args.tau is not None:
        train = replace(train, tau=args.tau)
    if args.prompt_length is not None:
        train = replace(train, prompt_length=args.prompt_length)
    if args.depth is not None:
        train = replace(train, inject_depth=parse_depth(args.depth))
    cfg = replace(cfg, train=train)
    if args.shots is not None:
        cfg = replace(cfg, shots=args.shots)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    cfg.validate()
    return cfg


def cmd_gen_task(args) -> int:
    cfg = resolve_config(args)
    prep = ex.prepare(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_task(prep.task, out / "task.npz")
    summary = {
        "train": len(prep.train), "test": len(prep.test),
        "base_train_error": prep.base_train_error, "base_test_error": prep.base_test_error,
    }
    log.info("base learner error: train %.3f, test %.3f", prep.base_train_error, prep.base_test_error)
    print(json.dumps(summary))
    return 0


def _train(args, mode: str) -> int:
    cfg = resolve_config(args, mode)
    summary = ex.run(cfg)
    print(json.dumps(summary))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if not (cfg.sweep_lambda or cfg.sweep_prompt_length or cfg.sweep_inject_depth):
        cfg = replace(cfg, sweep_lambda=DEFAULT_LAMBDA_SWEEP, sweep_prompt_length=DEFAULT_PROMPT_LENGTH_SWEEP)
    print(json.dumps(ex.run(cfg, ablate=True)))
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else None
    if args.config is None and out is not None and (out / "config.txt").exists():
        args.config = out / "config.txt"
    cfg = resolve_config(args)
    path = args.params or Path(cfg.output_dir) / "params.txt"
    prep = ex.prepare(cfg)
    state = ex.new_state(cfg, prep)
    restore_state(state, load_params(path))
    metrics = evaluate(state, prep.test, prep.base_test_pred, cfg.train)
    print(json.dumps({"params": str(path), **metrics.row(), "base_error": prep.base_test_error}))
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    worst = {"ckg": 0.0, "total": 0.0}
    passed = True
    n = 0
    for s in range(args.seed, args.seed + args.draws):
        draw = toy_draw(s, instances=args.instances)
        for key, rep in (("ckg", check_ckg(draw)), ("total", check_total(draw))):
            worst[key] = max(worst[key], rep.max_rel_error)
            if not rep.passed:
                passed = False
                for o in rep.offenders[:5]:
                    log.error("draw %d %s: %s%s analytic %.6g numeric %.6g", s, key, o[0], o[1], o[2], o[3])
        n += draw.instances
    print(json.dumps({
        "instances": n, "max_rel_error_ckg": worst["ckg"], "tol_ckg": CKG_TOL,
        "max_rel_error_total": worst["total"], "tol_total": TOTAL_TOL,
        "passed": passed, "elapsed_s": time.perf_counter() - t0,
    }))
    print("PASS" if passed else "FAIL")
    return 0 if passed else 1


COMMANDS = {
    "gen-task": cmd_gen_task,
    "train-fewshot": lambda a: _train(a, "fewshot"),
    "train-e2h": lambda a: _train(a, "e2h"),
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TaskSpecError, ParamsFormatError, ValueError, LookupError) as exc:
        print(f"ckpl: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ckpl: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
