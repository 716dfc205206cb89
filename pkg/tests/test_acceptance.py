"""Acceptance gate: every release-blocking check, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.

The analytic checks (gradients, chart oracle, module algebra, locality,
determinism) compute everything in-process. The benchmark checks load the
trained checkpoints committed under runs/acceptance/ and score them on
freshly regenerated, seed-determined test sets; each checkpoint's manifest
records the exact training config, and the verdict line names the command
that reproduces it.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import chart_reference as ref
from glt import tensor as T
from glt.cli import _Loaded, main
from glt.evaluation import evaluate
from glt.gradcheck import MODEL_THRESHOLD, OP_THRESHOLD, run_all
from glt.grounding import contextualize_objects
from glt.model import (ModelConfig, forward, init_params, module_intersection,
                       module_union)

pytestmark = pytest.mark.acceptance

RUNS = Path(__file__).resolve().parent.parent / "runs" / "acceptance"

TRAIN_CMDS = {
    "arith_easy": "glt train task=arithmetic split=easy out_dir=runs/acceptance/arith_easy",
    "arith_operation": "glt train task=arithmetic split=operation out_dir=runs/acceptance/arith_operation",
    "arith_length": "glt train task=arithmetic split=length out_dir=runs/acceptance/arith_length",
    "grounded_iid": "glt train task=grounded split=iid out_dir=runs/acceptance/grounded_iid",
    "grounded_comp": "glt train task=grounded split=compositional out_dir=runs/acceptance/grounded_comp",
}


def verdict(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(f"\n{line}")
    assert ok, line


def load_run(name):
    ckpt = RUNS / name
    if not (ckpt / "manifest.json").is_file():
        verdict(name, False,
                f"checkpoint missing at {ckpt}; train it with: {TRAIN_CMDS[name]}")
    return _Loaded(str(ckpt))


def score_run(name, phase="test", count=2000):
    loaded = load_run(name)
    examples = list(loaded.regenerate(phase, count))
    prepared = [loaded.prepare(ex) for ex in examples]
    report, _ = evaluate(loaded.params, loaded.cfg, prepared, loaded.batch_size,
                         sep_id=loaded.sep_id, answers=loaded.answers)
    return loaded, report


def test_gradient_suite():
    t0 = time.time()
    results = run_all(range(10))
    elapsed = time.time() - t0
    worst = max(results, key=lambda r: r.max_err / r.threshold)
    ok = all(r.ok for r in results) and elapsed < 60.0
    verdict("gradient suite", ok,
            f"{len(results)} cases x 10 seeds, op tol {OP_THRESHOLD:g}, "
            f"model tol {MODEL_THRESHOLD:g}; worst {worst.name} "
            f"err {worst.max_err:.2e}, {elapsed:.1f}s (need < 60s)")


def test_chart_matches_independent_recursion():
    t0 = time.time()
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng([901, case])
        n = int(rng.integers(2, 6))
        h = int(rng.choice([4, 6, 8]))
        grounded = case % 2 == 1
        cfg = ModelConfig(vocab_size=12, n_answers=7, h_dim=h, feat_dim=5,
                          max_len=5, grounded=grounded, dropout=0.0)
        params = init_params(cfg, rng, dtype=np.float64)
        params["w_ans"].data[:] = 0.3 * rng.standard_normal(params["w_ans"].data.shape)
        ids = rng.integers(0, cfg.vocab_size, size=n)
        v = None
        v_mat = None
        if grounded:
            feats = rng.standard_normal((1, 4, cfg.feat_dim))
            boxes = rng.random((1, 4, 4))
            v_mat = contextualize_objects(params, feats, boxes)
            v = v_mat.data[0]
        res = forward(params, cfg, ids[:, None], v_mat=v_mat)
        oracle = ref.ReferenceChart(params, ids, cfg.max_len, v=v)
        for (i, j), h_val in res.h_of.items():
            worst = max(worst, float(np.abs(h_val[0] - oracle.h(i, j)).max()))
        if grounded:
            for (i, j), d_val in res.d_of.items():
                worst = max(worst, float(np.abs(d_val[0] - oracle.d(i, j)).max()))
        worst = max(worst, float(
            np.abs(res.answer_probs()[0] - oracle.answer_probs()).max()))
    elapsed = time.time() - t0
    ok = worst < 1e-6 and elapsed < 60.0
    verdict("chart vs memoized recursion", ok,
            f"50 instances (n <= 5, h_dim <= 8), max |diff| {worst:.2e} "
            f"(need < 1e-6), {elapsed:.1f}s (need < 60s)")


def test_module_algebra_exhaustive():
    n_obj = 4
    failures = 0
    for a_bits in range(2 ** n_obj):
        for b_bits in range(2 ** n_obj):
            a = np.array([(a_bits >> i) & 1 for i in range(n_obj)], dtype=np.float64)
            b = np.array([(b_bits >> i) & 1 for i in range(n_obj)], dtype=np.float64)
            set_a = {i for i in range(n_obj) if a[i]}
            set_b = {i for i in range(n_obj) if b[i]}
            inter = module_intersection(a, b).data
            union = module_union(a, b).data
            if {i for i in range(n_obj) if inter[i] == 1.0} != set_a & set_b:
                failures += 1
            if {i for i in range(n_obj) if union[i] == 1.0} != set_a | set_b:
                failures += 1
    verdict("module algebra", failures == 0,
            f"exhaustive 0/1 pairs at 4 objects (256 pairs), "
            f"{failures} mismatches (need 0)")


def arith_criterion(run_name, threshold, label):
    loaded, report = score_run(run_name)
    acc = report.accuracy
    info = loaded.manifest["split_info"]
    verdict(label, acc >= threshold,
            f"test acc {acc:.4f} (need >= {threshold}) on "
            f"{report.n_examples} regenerated examples, n_test={info['n_test']}, "
            f"checkpoint step {loaded.manifest['step']}")


def test_arithmetic_easy_split():
    arith_criterion("arith_easy", 0.97, "arithmetic easy split")


def test_arithmetic_operation_split():
    arith_criterion("arith_operation", 0.90, "arithmetic operation split")


def test_arithmetic_length_split():
    arith_criterion("arith_length", 0.80, "arithmetic length split")


def test_grounded_iid_accuracy():
    _, report = score_run("grounded_iid")
    acc = report.accuracy
    verdict("grounded iid", acc >= 0.95,
            f"test acc {acc:.4f} (need >= 0.95) on {report.n_examples} examples")


def test_grounded_compositional_accuracy():
    _, report = score_run("grounded_comp")
    acc = report.accuracy
    verdict("grounded compositional", acc >= 0.80,
            f"held-out-template acc {acc:.4f} (need >= 0.80) on "
            f"{report.n_examples} examples")


def test_tree_quality_on_grounded_test():
    _, report = score_run("grounded_iid")
    recall = report.constituent_recall
    f1 = report.denotation_f1
    ok = recall is not None and f1 is not None and recall >= 0.80 and f1 >= 0.85
    verdict("induced tree quality", ok,
            f"constituent recall {recall:.4f} (need >= 0.80), "
            f"mean denotation F1 {f1:.4f} (need >= 0.85) over "
            f"{report.n_examples} test examples")


def test_out_of_span_locality():
    rng = np.random.default_rng(77)
    cfg = ModelConfig(vocab_size=10, n_answers=5, h_dim=8, feat_dim=4,
                      max_len=6, grounded=True, dropout=0.0)
    params = init_params(cfg, rng, dtype=np.float64)
    trials = 0
    dirty = 0
    while trials < 1000:
        n = int(rng.integers(3, 7))
        ids = rng.integers(0, cfg.vocab_size, size=n)
        feats = rng.standard_normal((1, 3, cfg.feat_dim))
        boxes = rng.random((1, 3, 4))
        v_mat = contextualize_objects(params, feats, boxes)
        base = forward(params, cfg, ids[:, None], v_mat=v_mat)
        t = int(rng.integers(n))
        mutated = ids.copy()
        mutated[t] = (mutated[t] + 1 + int(rng.integers(cfg.vocab_size - 1))) \
            % cfg.vocab_size
        alt = forward(params, cfg, mutated[:, None], v_mat=v_mat)
        for (i, j) in base.h_of:
            if i <= t < j:
                continue
            trials += 1
            if not np.array_equal(base.h_of[(i, j)], alt.h_of[(i, j)]):
                dirty += 1
            if not np.array_equal(base.d_of[(i, j)], alt.d_of[(i, j)]):
                dirty += 1
    verdict("out-of-span locality", dirty == 0,
            f"{trials} perturbation trials, {dirty} spans changed by an "
            f"outside token (need exact 0)")


def test_seeded_runs_are_byte_identical(tmp_path):
    issues = []

    def gen(path, task, split):
        code = main(["gen-data", "--task", task, "--split", split, "--seed",
                     "5", "--count", "60", "--out", str(path)])
        assert code == 0

    for task, split in (("arithmetic", "easy"), ("grounded", "iid")):
        a, b = tmp_path / f"{task}_a.jsonl", tmp_path / f"{task}_b.jsonl"
        gen(a, task, split)
        gen(b, task, split)
        if a.read_bytes() != b.read_bytes():
            issues.append(f"gen-data {task} differs")

    common = ["task=arithmetic", "split=easy", "n_train=2", "h_dim=8",
              "batch_size=8", "max_steps=20", "eval_every=10", "patience=2",
              "val_size=10", "test_size=10"]
    for d in ("t1", "t2"):
        assert main(["train", f"out_dir={tmp_path / d}"] + common) == 0
    for fname in ("metrics.csv", "params.bin"):
        f1 = (tmp_path / "t1" / fname).read_bytes()
        f2 = (tmp_path / "t2" / fname).read_bytes()
        if f1 != f2:
            issues.append(f"train {fname} differs")

    dumps = []
    for d in ("e1", "e2"):
        dump = tmp_path / f"{d}.jsonl"
        assert main(["eval", "--checkpoint", str(tmp_path / "t1"), "--phase",
                     "val", "--count", "10", "--dump", str(dump)]) == 0
        dumps.append(dump.read_bytes())
    if dumps[0] != dumps[1]:
        issues.append("eval dump differs")

    verdict("seeded determinism", not issues,
            "gen-data, train, eval each byte-identical across repeat runs"
            if not issues else "; ".join(issues))
