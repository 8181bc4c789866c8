"""Run few-shot, easy-to-hard, and ablation experiments and write their artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..curriculum import TwoStageResult, class_centroids, run_two_stage, score_samples, select_easy
from ..encoders import BaseLearner, KnowledgeEncoder, VisionEncoderConfig
from ..knowledge import TEMPLATES, CorrectiveTriplet, build_triplets, export_triplets, predict_base
from ..params import save_state
from ..training import EpochLog, FeatureBank, Metrics, TrainConfig, TrainState, evaluate, fit, init_state
from .config import ExperimentConfig, format_depth, parse_depth, save_config
from .task import Task, generate_task

log = logging.getLogger(__name__)

FEWSHOT_BUDGET_S = 300.0
BASE_ERROR_WINDOW = (0.20, 0.60)
METRIC_COLUMNS = ["run", "stage", "seed", "lambda", "tau", "prompt_length", "inject_depth", "shots",
                  "accuracy", "loss_cls", "loss_ckg", "correction_rate", "num_wrong_base", "base_error",
                  "num_test"]


@dataclass
class Prepared:
    task: Task
    base: BaseLearner
    encoder: KnowledgeEncoder
    train: FeatureBank
    test: FeatureBank
    base_train_pred: np.ndarray
    base_test_pred: np.ndarray

    @property
    def base_test_error(self) -> float:
        return float((self.base_test_pred != self.test.labels).mean())

    @property
    def base_train_error(self) -> float:
        return float((self.base_train_pred != self.train.labels).mean())


def build_base(cfg: ExperimentConfig) -> BaseLearner:
    return BaseLearner(VisionEncoderConfig(
        num_layers=cfg.model.num_layers, embed_dim=cfg.task.embed_dim, num_patches=cfg.task.num_patches,
        num_heads=cfg.model.num_heads, seed=cfg.model.seed,
    ))


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Generate the task, the frozen encoders, cached features, and base predictions."""
    cfg.validate()
    task = generate_task(cfg.task)
    base = build_base(cfg)
    encoder = KnowledgeEncoder(task.class_names, sorted(TEMPLATES), cfg.task.embed_dim, seed=cfg.model.seed)
    train = FeatureBank.build(base, task.train.patches, task.train.labels, task.train.ids)
    test = FeatureBank.build(base, task.test.patches, task.test.labels, task.test.ids)
    cents = class_centroids(train.cls_features, train.labels).matrix(cfg.task.num_classes)
    prep = Prepared(task, base, encoder, train, test,
                    predict_base(train.cls_features, cents), predict_base(test.cls_features, cents))
    lo, hi = BASE_ERROR_WINDOW
    if not lo <= prep.base_test_error <= hi:
        log.warning("base learner test error %.3f is outside the target window [%.2f, %.2f]",
                    prep.base_test_error, lo, hi)
    return prep


def new_state(cfg: ExperimentConfig, prep: Prepared, train_cfg: TrainConfig | None = None) -> TrainState:
    train_cfg = cfg.train if train_cfg is None else train_cfg
    return init_state(prep.base, prep.encoder, prep.task.class_names, TEMPLATES[cfg.template], train_cfg)


def sample_shots(cfg: ExperimentConfig, prep: Prepared) -> list[int]:
    """Per-class shot ids: seeded random draw, or the easiest ``shots`` per class."""
    tr = prep.train
    if cfg.sampling == "easy":
        cents = class_centroids(tr.cls_features, tr.labels)
        easy = select_easy(tr.ids, tr.labels, score_samples(tr.cls_features, tr.labels, cents), cfg.shots)
        return [i for c in sorted(easy) for i in easy[c]]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0x73686F74]))
    out = []
    for c in range(cfg.task.num_classes):
        pool = tr.ids[tr.labels == c]
        k = min(cfg.shots, len(pool))
        if k < cfg.shots:
            log.warning("class %d has %d training samples, fewer than %d shots", c, len(pool), cfg.shots)
        out.extend(int(i) for i in np.sort(rng.choice(pool, k, replace=False)))
    return out


@dataclass
class FewshotResult:
    state: TrainState
    metrics: Metrics
    logs: list[EpochLog]
    triplets: list[CorrectiveTriplet]


def run_fewshot(cfg: ExperimentConfig, prep: Prepared | None = None, on_epoch=None) -> FewshotResult:
    prep = prepare(cfg) if prep is None else prep
    state = new_state(cfg, prep)
    ids = sample_shots(cfg, prep)
    bank = prep.train.select_ids(ids)
    pos = {int(i): r for r, i in enumerate(prep.train.ids)}
    preds = prep.base_train_pred[[pos[i] for i in ids]]
    triplets = build_triplets(bank.labels, preds, bank.ids)
    logs = fit(state, bank, {t.sample_id: t for t in triplets}, cfg.train, cfg.train.lr_initial,
               prep.test, prep.base_test_pred, on_epoch)
    metrics = evaluate(state, prep.test, prep.base_test_pred, cfg.train)
    return FewshotResult(state, metrics, logs, triplets)


def run_e2h(cfg: ExperimentConfig, prep: Prepared | None = None, on_epoch=None) -> TwoStageResult:
    prep = prepare(cfg) if prep is None else prep
    state = new_state(cfg, prep)
    return run_two_stage(state, prep.train, prep.test, cfg.train, cfg.shots, exclude_easy=cfg.exclude_easy,
                         on_epoch=on_epoch)


def metrics_row(run: str, stage: str, cfg: ExperimentConfig, m: Metrics, prep: Prepared) -> dict:
    row = {
        "run": run, "stage": stage, "seed": cfg.train.seed, "lambda": cfg.train.lam, "tau": cfg.train.tau,
        "prompt_length": cfg.train.prompt_length, "inject_depth": format_depth(cfg.train.inject_depth),
        "shots": cfg.shots, "base_error": prep.base_test_error, "num_test": len(prep.test),
    }
    row.update(m.row())
    return row


def write_metrics_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def _epoch_record(logrec: EpochLog, **extra) -> str:
    rec = dict(extra)
    rec.update({"epoch": logrec.epoch, "lr": logrec.lr, "loss": logrec.loss, "loss_cls": logrec.loss_cls,
                "loss_ckg": logrec.loss_ckg, "accuracy": logrec.accuracy,
                "correction_rate": logrec.correction_rate})
    return json.dumps(rec)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    points = []
    for lam in cfg.sweep_lambda or ():
        points.append((f"lambda={lam!r}", replace(cfg, train=replace(cfg.train, lam=float(lam)))))
    for pl in cfg.sweep_prompt_length or ():
        points.append((f"prompt_length={pl}", replace(cfg, train=replace(cfg.train, prompt_length=int(pl)))))
    for spec in cfg.sweep_inject_depth or ():
        depth = parse_depth(spec)
        points.append((f"inject_depth={format_depth(depth)}",
                       replace(cfg, train=replace(cfg.train, inject_depth=depth))))
    return points


def _ablation_point(args) -> dict:
    name, cfg = args
    prep = prepare(cfg)
    res = run_fewshot(cfg, prep)
    return metrics_row(name, cfg.mode, cfg, res.metrics, prep)


def run_ablation(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """One metrics row per sweep point, in sweep order."""
    points = sweep_points(cfg)
    if not points:
        raise ValueError("ablation needs at least one sweep list")
    if workers is None:
        workers = int(os.environ.get("CKPL_THREADS", "1") or 1)
    workers = max(1, min(workers, len(points)))
    if workers == 1:
        return [_ablation_point(p) for p in points]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_ablation_point, points))


def run(cfg: ExperimentConfig, out_dir=None, ablate: bool = False) -> dict:
    """Execute ``cfg`` and write its artifacts into ``out_dir``; returns a summary."""
    cfg.validate()
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, output_dir=str(out))
    save_config(cfg, out / "config.txt")
    t0 = time.perf_counter()
    summary: dict = {"mode": cfg.mode, "output_dir": str(out)}

    if ablate:
        rows = run_ablation(cfg)
        write_metrics_csv(out / "metrics.csv", rows)
        summary["rows"] = len(rows)
        return summary

    prep = prepare(cfg)
    template = TEMPLATES[cfg.template]
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        if cfg.mode == "fewshot":
            res = run_fewshot(cfg, prep, on_epoch=lambda r: fh.write(_epoch_record(r) + "\n"))
            rows = [metrics_row("fewshot", "fewshot", cfg, res.metrics, prep)]
            save_state(out / "params.txt", res.state)
            export_triplets(out / "triplets.jsonl", res.triplets, template, prep.task.class_names)
            elapsed = time.perf_counter() - t0
            if elapsed > FEWSHOT_BUDGET_S:
                log.warning("few-shot run took %.1fs, over the %.0fs budget", elapsed, FEWSHOT_BUDGET_S)
            summary["metrics"] = res.metrics.row()
        else:
            res2 = run_e2h(cfg, prep, on_epoch=lambda stage, r: fh.write(_epoch_record(r, stage=stage) + "\n"))
            rows = [metrics_row("e2h", "easy", cfg, res2.metrics_e, prep),
                    metrics_row("e2h", "hard", cfg, res2.metrics_h, prep)]
            res2.split.write_csv(out / "split.csv")
            save_state(out / "params_easy.txt", res2.state_e)
            save_state(out / "params.txt", res2.state_h)
            summary["metrics_e"] = res2.metrics_e.row()
            summary["metrics_h"] = res2.metrics_h.row()
    write_metrics_csv(out / "metrics.csv", rows)
    summary["base_error"] = prep.base_test_error
    summary["elapsed_s"] = time.perf_counter() - t0
    return summary
