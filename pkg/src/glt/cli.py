"""Command-line driver: gen-data | train | eval | gradcheck | inspect.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure
(diverged training, incompatible checkpoint/data, failed gradient check).
Train configs are flat key=value files; later command-line key=value
pairs override file entries. GLT_THREADS caps the numba/BLAS thread
pools; the driver itself is single-threaded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import arithmetic, grounded_data, grounding
from .checkpoint import CheckpointError, load_checkpoint
from .data import (Example, UnknownTokenError, Vocab, example_from_json,
                   read_jsonl, write_jsonl)
from .evaluation import (dump_predictions, evaluate, extract_tree,
                         render_bracketing)
from .gradcheck import MODEL_MODES, OP_CASE_NAMES, render_table, run_all
from .model import ModelConfig
from .training import (Prepared, Task, TrainConfig, TrainingDiverged,
                       batch_forward, collate, prepare_example, train)


def _apply_thread_cap() -> None:
    raw = os.environ.get("GLT_THREADS")
    if not raw:
        return
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise SystemExit(f"GLT_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(cap))
    try:
        import numba
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(cap)
    except ImportError:
        pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fail(message: str, code: int) -> int:
    print(message, file=sys.stderr)
    return code


# -- config files ------------------------------------------------------------

_TCFG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    f = _TCFG_FIELDS[name]
    if f.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name} expects a boolean, got {raw!r}")
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


def read_config_file(path: str) -> Dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def build_train_config(pairs: Dict[str, str]) -> TrainConfig:
    unknown = sorted(set(pairs) - set(_TCFG_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    kwargs = {k: _coerce(k, v) for k, v in pairs.items()}
    missing = [k for k in ("task", "split", "out_dir") if k not in kwargs]
    if missing:
        raise ValueError(f"missing required config keys: {missing}")
    tcfg = TrainConfig(**kwargs)
    tcfg.validate()
    return tcfg


# -- gen-data ----------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    if args.task == "arithmetic":
        if args.split not in arithmetic.SPLIT_KINDS:
            return _fail(f"arithmetic split must be one of {arithmetic.SPLIT_KINDS}", 1)
        spec = arithmetic.make_split(args.split, args.seed, n_train=args.n_train,
                                     test_set_size=args.test_set_size)
        examples = arithmetic.gen_arithmetic(spec, args.seed, args.count, args.phase)
        n = write_jsonl(args.out, examples)
        print(f"wrote {n} examples to {args.out}")
        print(f"split {spec.kind}: n_train={spec.n_train} n_test={spec.n_test}")
        if spec.kind == "operation":
            print(f"operator positions {list(spec.op_positions)}: "
                  f"train ops {list(spec.train_ops)}, test ops "
                  f"{[spec.test_op_at(p) for p in spec.op_positions]}")
    else:
        if args.split not in grounded_data.SPLIT_KINDS:
            return _fail(f"grounded split must be one of {grounded_data.SPLIT_KINDS}", 1)
        split = grounded_data.make_grounded_split(args.split, args.seed)
        examples = grounded_data.gen_grounded(split, args.seed, args.count, args.phase)
        n = write_jsonl(args.out, examples)
        print(f"wrote {n} examples to {args.out}")
        print(f"split {split.kind}: {len(split.train_combos())} train templates")
        if split.kind == "compositional":
            print("held-out templates:")
            for combo in split.held_out:
                print(f"  {combo}")
    return 0


# -- train -------------------------------------------------------------------

def _cmd_train(args) -> int:
    pairs: Dict[str, str] = {}
    if args.config:
        if not os.path.isfile(args.config):
            return _fail(f"config file not found: {args.config}", 1)
        try:
            pairs.update(read_config_file(args.config))
        except ValueError as e:
            return _fail(str(e), 1)
    for item in args.overrides:
        if "=" not in item:
            return _fail(f"overrides must be key=value, got {item!r}", 1)
        key, val = item.split("=", 1)
        pairs[key.strip()] = val.strip()
    try:
        tcfg = build_train_config(pairs)
    except (ValueError, TypeError) as e:
        return _fail(str(e), 1)
    try:
        result = train(tcfg, log=print)
    except TrainingDiverged as e:
        return _fail(str(e), 2)
    print(f"done: {result.steps_run} steps, best val acc {result.best_val_acc:.4f} "
          f"at step {result.best_step}; checkpoint in {result.out_dir}")
    return 0


# -- shared checkpoint plumbing ----------------------------------------------

class _Loaded:
    def __init__(self, ckpt_dir: str):
        self.params, self.cfg, self.manifest = load_checkpoint(ckpt_dir)
        tc = self.manifest.get("task_config", {})
        self.task = tc.get("task", "grounded" if self.cfg.grounded else "arithmetic")
        self.vocab = Vocab(self.manifest["vocab"])
        self.answers = list(self.manifest["answers"])
        self.answer_id = {a: i for i, a in enumerate(self.answers)}
        self.data_seed = int(tc.get("data_seed", 0))
        self.strip = bool(tc.get("strip_stop_words", True)) and self.cfg.grounded
        self.batch_size = int(tc.get("batch_size", 100))
        self.sep_id = (self.vocab.id_of(grounding.SENTENCE_SEP)
                       if grounding.SENTENCE_SEP in self.vocab else None)

    def prepare(self, ex: Example) -> Prepared:
        return prepare_example(ex, self.vocab, self.answer_id, strip=self.strip,
                               data_seed=self.data_seed, feat_dim=self.cfg.feat_dim)

    def regenerate(self, phase: str, count: int):
        info = self.manifest["split_info"]
        if self.task == "arithmetic":
            spec = arithmetic.SplitSpec(
                kind=info["kind"], n_train=info["n_train"], n_test=info["n_test"],
                op_positions=tuple(info["op_positions"]) or None,
                train_ops=tuple(info["train_ops"]) or None,
                test_set_size=info["test_set_size"])
            return arithmetic.gen_arithmetic(spec, self.data_seed, count, phase)
        split = grounded_data.GroundedSplit(info["kind"], tuple(info["held_out"]))
        return grounded_data.gen_grounded(split, self.data_seed, count, phase)


# -- eval --------------------------------------------------------------------

def _cmd_eval(args) -> int:
    try:
        loaded = _Loaded(args.checkpoint)
    except (CheckpointError, FileNotFoundError, KeyError) as e:
        return _fail(f"cannot load checkpoint: {e}", 2)
    try:
        if args.dataset:
            examples = read_jsonl(args.dataset)
        else:
            examples = list(loaded.regenerate(args.phase, args.count))
        prepared = [loaded.prepare(ex) for ex in examples]
    except UnknownTokenError as e:
        return _fail(str(e), 2)
    except (ValueError, KeyError, FileNotFoundError) as e:
        return _fail(f"cannot prepare dataset: {e}", 2)
    report, rows = evaluate(loaded.params, loaded.cfg, prepared, loaded.batch_size,
                            sep_id=loaded.sep_id, answers=loaded.answers)
    if args.dump:
        dump_predictions(rows, args.dump)
    if args.format == "json":
        print(json.dumps(report.to_json(), indent=1))
    else:
        print(report.render_table())
    return 0


# -- gradcheck ---------------------------------------------------------------

def _cmd_gradcheck(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        return _fail("need at least one seed", 1)
    ops: Optional[List[str]] = None
    if args.ops != "all":
        ops = [o.strip() for o in args.ops.split(",") if o.strip()]
        known = set(OP_CASE_NAMES) | {f"model:{m}" for m in MODEL_MODES}
        bad = sorted(set(ops) - known)
        if bad:
            return _fail(f"unknown ops {bad}; choose from {sorted(known)}", 1)
    results = run_all(seeds, ops=ops)
    print(render_table(results))
    return 0 if all(r.ok for r in results) else 2


# -- inspect -----------------------------------------------------------------

def _render_tree_text(tree, tokens, chart, verbose: bool) -> List[str]:
    lines: List[str] = []

    def walk(node, depth):
        pad = "  " * depth
        i, j = node.span
        text = " ".join(tokens[i:j])
        if node.is_leaf:
            extra = f" objects={node.objects}" if node.objects is not None else ""
            lines.append(f"{pad}({i},{j}) {text!r}{extra}")
            return
        alpha = chart.alpha_of[(i, j)][:, 0]
        bits = [f"split@{node.split} p={alpha.max():.3f}"]
        if node.module is not None:
            bits.append(f"module={node.module}")
        if node.objects is not None:
            bits.append(f"objects={node.objects}")
        lines.append(f"{pad}({i},{j}) {text!r}  " + " ".join(bits))
        if verbose:
            probs = ", ".join(f"k={i + 1 + idx}: {p:.3f}" for idx, p in enumerate(alpha))
            lines.append(f"{pad}  alpha: [{probs}]")
        walk(node.left, depth + 1)
        walk(node.right, depth + 1)

    walk(tree, 0)
    return lines


def _tree_json(node, tokens) -> dict:
    i, j = node.span
    out = {"span": [i, j], "text": " ".join(tokens[i:j])}
    if node.objects is not None:
        out["objects"] = node.objects
    if not node.is_leaf:
        out["split"] = node.split
        if node.module is not None:
            out["module"] = node.module
        out["left"] = _tree_json(node.left, tokens)
        out["right"] = _tree_json(node.right, tokens)
    return out


def _cmd_inspect(args) -> int:
    try:
        loaded = _Loaded(args.checkpoint)
    except (CheckpointError, FileNotFoundError, KeyError) as e:
        return _fail(f"cannot load checkpoint: {e}", 2)
    if (args.example_json is None) == (args.dataset is None):
        return _fail("provide exactly one of --example-json or --dataset", 1)
    try:
        if args.example_json is not None:
            blob = json.loads(args.example_json)
            blob.setdefault("answer", loaded.answers[0])  # answer unused here
            ex = example_from_json(blob)
        else:
            examples = read_jsonl(args.dataset)
            if not 0 <= args.index < len(examples):
                return _fail(f"--index {args.index} out of range "
                             f"(file has {len(examples)} examples)", 1)
            ex = examples[args.index]
        prepared = loaded.prepare(ex)
    except UnknownTokenError as e:
        return _fail(str(e), 2)
    except (ValueError, KeyError) as e:
        return _fail(f"cannot parse example: {e}", 2)

    batch = collate([prepared], loaded.cfg.grounded)
    res = batch_forward(loaded.params, loaded.cfg, batch, sep_id=loaded.sep_id)
    tree = extract_tree(res, 0)
    tokens = list(prepared.example.tokens)
    probs = res.answer_probs()[0]
    pred = loaded.answers[int(np.argmax(probs))]
    if args.format == "json":
        payload = {"tokens": tokens, "predicted_answer": pred,
                   "answer_prob": float(probs.max()),
                   "bracketing": render_bracketing(tree, tokens),
                   "tree": _tree_json(tree, tokens)}
        print(json.dumps(payload, indent=1))
    else:
        print(f"tokens: {' '.join(tokens)}")
        print(f"predicted answer: {pred} (p={probs.max():.3f})")
        print(f"bracketing: {render_bracketing(tree, tokens)}")
        for line in _render_tree_text(tree, tokens, res, args.verbose):
            print(line)
    return 0


# -- wiring ------------------------------------------------------------------

def make_parser() -> _Parser:
    parser = _Parser(prog="glt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a JSONL dataset")
    g.add_argument("--task", required=True, choices=("arithmetic", "grounded"))
    g.add_argument("--split", required=True,
                   help="arithmetic: easy|operation|length; grounded: iid|compositional")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--phase", choices=("train", "val", "test"), default="train")
    g.add_argument("--n-train", type=int, default=arithmetic.N_TRAIN_DEFAULT,
                   help="arithmetic train expression length")
    g.add_argument("--test-set-size", type=int,
                   default=arithmetic.TEST_SET_SIZE_DEFAULT,
                   help="arithmetic held-out expression count (train/val "
                        "streams exclude these)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, applied after the file")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="JSONL file; omit to regenerate from the manifest")
    e.add_argument("--phase", choices=("train", "val", "test"), default="test")
    e.add_argument("--count", type=int, default=2000,
                   help="examples to regenerate when --dataset is omitted")
    e.add_argument("--dump", help="write per-example predictions JSONL here")
    e.add_argument("--format", choices=("table", "json"), default="table")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    c.add_argument("--ops", default="all",
                   help="'all' or comma-separated case names (model:MODE for end-to-end)")
    c.set_defaults(fn=_cmd_gradcheck)

    i = sub.add_parser("inspect", help="render the induced tree for one example")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--example-json", help="inline example JSON")
    i.add_argument("--dataset", help="JSONL file to pick an example from")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--format", choices=("text", "json"), default="text")
    i.add_argument("--verbose", action="store_true",
                   help="also print every split distribution")
    i.set_defaults(fn=_cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _apply_thread_cap()
    args = make_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
