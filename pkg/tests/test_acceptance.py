"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed even under output capture.
"""

import hashlib
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from ckpl.curriculum import class_centroids, score_samples, select_easy, select_hard
from ckpl.harness import experiment as ex
from ckpl.harness.config import DEFAULT_TASK, HARD_TAIL_TASK, ExperimentConfig, desk_train_config
from ckpl.harness.gradcheck import CKG_TOL, TOTAL_TOL, check_ckg, check_total, toy_draw
from ckpl.knowledge import KnowledgePromptSet, predict_base
from ckpl.numerics import Tensor
from ckpl.selection import MatchDistribution, aggregate_prompt, ckg_loss, match_distribution
from ckpl.training import TrainConfig


@pytest.fixture
def report(capsys):
    def emit(n: int, title: str, ok: bool, detail: str, t0: float):
        with capsys.disabled():
            print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail} "
                  f"({time.perf_counter() - t0:.1f}s)")
        assert ok, detail
    return emit


def test_c01_gradient_fidelity(report):
    t0 = time.perf_counter()
    worst_ckg = worst_total = 0.0
    ok, instances = True, 0
    for seed in range(17):
        draw = toy_draw(seed, instances=3)
        rc, rt = check_ckg(draw), check_total(draw)
        worst_ckg, worst_total = max(worst_ckg, rc.max_rel_error), max(worst_total, rt.max_rel_error)
        ok &= rc.passed and rt.passed
        instances += draw.instances
    elapsed = time.perf_counter() - t0
    ok &= instances >= 50 and elapsed < 60
    report(1, "gradient fidelity", ok,
           f"{instances} instances, max rel err ckg {worst_ckg:.2e} (tol {CKG_TOL:g}), "
           f"total {worst_total:.2e} (tol {TOTAL_TOL:g})", t0)


def test_c02_closed_form_ckg(report):
    t0 = time.perf_counter()

    def val(p, a, b):
        return float(ckg_loss(MatchDistribution(Tensor(np.array(p)), 0.1), a, b).values)

    perfect = val([1.0, 0.0], 0, 0)
    half = val([0.5, 0.5], 0, 1)
    floor = val([0.3, 1.0], 0, 1)
    want_floor = -math.log(0.3) - math.log(1e-8)
    ok = (abs(perfect) <= 1e-6 and abs(half - 1.38629436) <= 1e-6
          and math.isfinite(floor) and abs(floor - want_floor) <= 1e-6)
    report(2, "closed-form CKG values", ok, f"{perfect:.8f}, {half:.8f}, {floor:.6f} (eps floor)", t0)


def test_c03_normalization(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(5000):
        s, d, p = int(rng.integers(1, 9)), int(rng.integers(2, 17)), int(rng.integers(1, 4))
        keys = rng.normal(size=(s, d))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        ps = KnowledgePromptSet(Tensor(keys), Tensor(rng.normal(size=(s, p, d))), {j: j for j in range(s)}, [])
        m = rng.normal(size=d) * rng.uniform(0.01, 100)
        tau = float(rng.choice([0.01, 0.05, 0.1, 0.2, 1.0, 5.0]))
        probs = match_distribution(m, ps, tau).probs.values
        w = aggregate_prompt(m, ps, tau).weights.values
        worst = max(worst, abs(probs.sum() - 1), abs(w.sum() - 1))
        if probs.min() < 0 or w.min() < 0:
            worst = math.inf
    report(3, "normalization", worst < 1e-9, f"10000 calls, max |sum - 1| = {worst:.1e}", t0)


def _frozen_digest(state, encoder) -> str:
    h = hashlib.sha256()
    frozen = {**{f"base.{k}": v for k, v in state.base.named_parameters().items()},
              **encoder.named_parameters(), "prompt_set.keys": state.prompt_set.keys}
    for name in sorted(frozen):
        h.update(name.encode())
        h.update(np.ascontiguousarray(frozen[name].values).tobytes())
    return h.hexdigest()


def test_c04_frozen_contract(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(task=replace(DEFAULT_TASK, samples_per_class=24), shots=8)
    prep = ex.prepare(cfg)
    state = ex.new_state(cfg, prep)
    before = _frozen_digest(state, prep.encoder)
    res = ex.run_fewshot(cfg, prep)
    after = _frozen_digest(res.state, prep.encoder)
    ok = before == after and len(res.logs) == 50
    report(4, "frozen contract", ok, f"sha256 {before[:16]}... over {len(res.logs)} epochs, unchanged={before == after}",
           t0)


def test_c05_correction_capability(report):
    t0 = time.perf_counter()
    rates, errors = [], []
    for seed in range(5):
        cfg = ExperimentConfig(shots=16).with_seed(seed)
        prep = ex.prepare(cfg)
        errors.append(prep.base_test_error)
        rates.append(ex.run_fewshot(cfg, prep).metrics.correction_rate)
    mean = float(np.mean(rates))
    ok = min(errors) >= 0.30 and mean >= 0.50 and time.perf_counter() - t0 < 600
    report(5, "correction capability", ok,
           f"mean correction_rate {mean:.3f} over 5 seeds (per seed {np.round(rates, 3).tolist()}), "
           f"base error {min(errors):.2f}..{max(errors):.2f}", t0)


def test_c06_easy_to_hard(report):
    t0 = time.perf_counter()
    gains = []
    for seed in range(10):
        cfg = ExperimentConfig(task=HARD_TAIL_TASK, mode="e2h", shots=8).with_seed(seed)
        res = ex.run_e2h(cfg)
        gains.append(res.metrics_h.accuracy - res.metrics_e.accuracy)
    gains = np.array(gains)
    nonneg = int((gains >= 0).sum())
    ok = gains.mean() > 0 and nonneg >= 7 and time.perf_counter() - t0 < 1200
    report(6, "easy-to-hard improvement", ok,
           f"mean gain {gains.mean():+.4f}, IOTA-h >= IOTA-e on {nonneg}/10 seeds "
           f"(gains {np.round(gains, 3).tolist()})", t0)


def test_c07_ablation_plumbing(report, tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(sweep_lambda=(0.1, 0.2, 0.5, 1.0, 2.0), sweep_prompt_length=(1, 2, 4),
                           output_dir=str(tmp_path))
    rows = ex.run_ablation(cfg)
    lam = [r for r in rows if r["run"].startswith("lambda=")]
    pl = [r for r in rows if r["run"].startswith("prompt_length=")]
    ok = ([r["lambda"] for r in lam] == [0.1, 0.2, 0.5, 1.0, 2.0]
          and [r["prompt_length"] for r in pl] == [1, 2, 4]
          and all(0 <= r["accuracy"] <= 1 for r in rows))
    report(7, "ablation plumbing", ok, f"{len(lam)} lambda rows, {len(pl)} prompt-length rows", t0)


def _oracle_nearest(f, cents):
    out = []
    for x in f:
        sims = []
        for c in cents:
            nx_, nc = math.sqrt(sum(v * v for v in x)), math.sqrt(sum(v * v for v in c))
            sims.append(0.0 if nx_ < 1e-12 or nc < 1e-12 else sum(a * b for a, b in zip(x, c)) / (nx_ * nc))
        out.append(max(range(len(cents)), key=lambda j: (sims[j], -j)))
    return out


def _oracle_select(ids, labels, scores, n, hardest):
    out = {}
    for c in sorted(set(labels)):
        pool = sorted(((scores[r], ids[r]) for r in range(len(ids)) if labels[r] == c),
                      key=lambda p: (-p[0] if hardest else p[0], p[1]))
        out[c] = [i for _, i in pool[:n]]
    return out


def test_c08_oracle_equivalence(report):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        cfg = ExperimentConfig(task=replace(DEFAULT_TASK, samples_per_class=50)).with_seed(seed)
        prep = ex.prepare(cfg)
        f, labels, ids = prep.train.cls_features, prep.train.labels, prep.train.ids
        cents = class_centroids(f, labels)
        cmat = cents.matrix(4)
        if predict_base(f, cmat).tolist() != _oracle_nearest(f.tolist(), cmat.tolist()):
            mismatches += 1
        scores = score_samples(f, labels, cents)
        oracle_scores = []
        for x, y in zip(f.tolist(), labels.tolist()):
            c = cmat[y].tolist()
            nx_, nc = math.sqrt(sum(v * v for v in x)), math.sqrt(sum(v * v for v in c))
            oracle_scores.append(1 - sum(a * b for a, b in zip(x, c)) / (nx_ * nc))
        if np.argsort(scores, kind="stable").tolist() != np.argsort(oracle_scores, kind="stable").tolist():
            mismatches += 1
        il, ll, sl = ids.tolist(), labels.tolist(), scores.tolist()
        for n in (1, 8, 25):
            if select_easy(ids, labels, scores, n) != _oracle_select(il, ll, sl, n, False):
                mismatches += 1
            if select_hard(ids, labels, scores, n) != _oracle_select(il, ll, sl, n, True):
                mismatches += 1
    report(8, "oracle equivalence", mismatches == 0, f"20 instances of 100 train samples, {mismatches} mismatches",
           t0)


def test_c09_determinism(report, tmp_path):
    t0 = time.perf_counter()
    same = []
    for mode in ("fewshot", "e2h"):
        cfg = ExperimentConfig(task=replace(DEFAULT_TASK, samples_per_class=40), mode=mode, shots=8).with_seed(7)
        ex.run(cfg, out_dir=tmp_path / f"{mode}_a")
        ex.run(cfg, out_dir=tmp_path / f"{mode}_b")
        same.append((tmp_path / f"{mode}_a/metrics.csv").read_bytes()
                    == (tmp_path / f"{mode}_b/metrics.csv").read_bytes())
    report(9, "determinism", all(same), f"byte-identical metrics.csv: fewshot={same[0]}, e2h={same[1]}", t0)


def test_c10_zero_lr_two_stage(report):
    t0 = time.perf_counter()
    train = desk_train_config(lr_initial=0.0, lr_final=0.0, lr_initial_hard_stage=0.0, epochs=5)
    cfg = ExperimentConfig(task=HARD_TAIL_TASK, train=train, mode="e2h", shots=8)
    res = ex.run_e2h(cfg)
    ok = res.metrics_e.same_as(res.metrics_h)
    report(10, "zero-lr two-stage", ok,
           f"metrics_e accuracy {res.metrics_e.accuracy}, metrics_h accuracy {res.metrics_h.accuracy}", t0)


def test_toy_config_matches_contract():
    # the gradient-check toy model: L=2, d_t=16, C=S=4, prompt length 2
    d = toy_draw(0)
    assert d.state.base.config.num_layers == 2 and d.state.base.config.embed_dim == 16
    assert d.state.prompt_set.size == 4 and d.state.prompt_set.prompt_length == 2
    assert isinstance(d.config, TrainConfig)
