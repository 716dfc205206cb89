"""Central-difference gradient checking for every op and the full model.

Each case builds float64 leaf tensors, computes a scalar loss through the
autodiff engine, and compares tape gradients against (f(x+h) - f(x-h)) / 2h
elementwise. Op cases sweep every input element; the end-to-end model
cases sweep the whole embedding matrix plus a seeded sample of elements
from every other parameter to stay fast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import grounding
from . import tensor as T
from .model import ModelConfig, forward, init_params
from .tensor import Tape, Tensor

FD_STEP = 1e-5
OP_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
# errors above the trigger get a second read at h/2; if the two stencils
# disagree beyond KINK_TOL the element sits on a relu/min/max kink where
# finite differences are meaningless, and it is skipped
RECHECK_TRIGGER = 1e-5
KINK_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_err: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.max_err < self.threshold


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def _numeric_grad_at(fn: Callable[[], Tensor], data: np.ndarray, flat_idx: int,
                     h: float) -> float:
    flat = data.reshape(-1)
    saved = flat[flat_idx]
    flat[flat_idx] = saved + h
    up = fn().item()
    flat[flat_idx] = saved - h
    down = fn().item()
    flat[flat_idx] = saved
    return (up - down) / (2.0 * h)


def check_case(fn: Callable[[], Tensor], leaves: Dict[str, Tensor], h: float = FD_STEP,
               sample: Optional[Dict[str, np.ndarray]] = None) -> float:
    """Max relative error between tape and numeric grads over the leaves.

    sample maps a leaf name to the flat indices to probe; leaves not in
    the map are probed at every element. Elements whose central differences
    at h and h/2 disagree sit next to a relu/min/max kink where no finite
    difference is trustworthy; those are skipped rather than compared.
    """
    with Tape() as tape:
        loss = fn()
        tape.backward(loss, params=leaves.values())
    analytic = {k: t.grad.copy() for k, t in leaves.items()}

    worst = 0.0
    for name, t in leaves.items():
        idxs = (sample or {}).get(name)
        if idxs is None:
            idxs = np.arange(t.size)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            num = _numeric_grad_at(fn, t.data, int(i), h)
            err = relative_error(a_flat[int(i)], np.float64(num))
            if err > RECHECK_TRIGGER:
                num_half = _numeric_grad_at(fn, t.data, int(i), h / 2)
                if relative_error(np.float64(num), np.float64(num_half)) > KINK_TOL:
                    continue
                err = relative_error(a_flat[int(i)], np.float64(num_half))
            worst = max(worst, err)
    return worst


def _leaf(rng, *shape, away_from_zero=False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = x + 0.2 * np.where(x >= 0, 1.0, -1.0)
    return Tensor(x, requires_grad=True)


# Contract specs exercised by the chart, with a fixed dimension alphabet.
_CONTRACT_DIMS = {"s": 2, "k": 3, "b": 2, "h": 4, "n": 3, "m": 4}
_CONTRACT_SPECS = [
    "skbh,h->skb", "skb,skbh->skbh", "skb,skbh->sbh", "skb,skbn->sbn",
    "sb,sbn->sbn", "sb,bn->sbn", "sbn,bnh->sbh", "sbn,h->sbnh",
    "sbnh,sbh->sbn", "sbm,msbn->sbn", "sbh,bnh->sbn", "bn,bnh->bh",
]


def _op_cases() -> Dict[str, Callable[[np.random.Generator], Tuple[Callable, Dict[str, Tensor]]]]:
    cases = {}

    def case(name):
        def deco(builder):
            cases[name] = builder
            return builder
        return deco

    @case("add")
    def _(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        return lambda: T.sum(T.mul(T.add(a, b), T.add(a, 1.5))), {"a": a, "b": b}

    @case("sub_mul")
    def _(rng):
        a, b = _leaf(rng, 2, 5), _leaf(rng, 2, 5)
        return lambda: T.sum(T.mul(T.sub(a, b), b)), {"a": a, "b": b}

    @case("sigmoid")
    def _(rng):
        x = _leaf(rng, 4, 3)
        return lambda: T.sum(T.sigmoid(x)), {"x": x}

    @case("relu")
    def _(rng):
        x = _leaf(rng, 4, 3, away_from_zero=True)
        w = _leaf(rng, 4, 3)
        return lambda: T.sum(T.mul(T.relu(x), w)), {"x": x, "w": w}

    @case("minimum_maximum")
    def _(rng):
        a = _leaf(rng, 3, 3)
        b = Tensor(a.data + rng.choice([-1.0, 1.0], size=(3, 3)) * (0.3 + rng.random((3, 3))),
                   requires_grad=True)
        w = _leaf(rng, 3, 3)
        return (lambda: T.sum(T.add(T.mul(T.minimum(a, b), w), T.maximum(a, b))),
                {"a": a, "b": b, "w": w})

    @case("matmul_2d")
    def _(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
        return lambda: T.sum(T.matmul(a, b)), {"a": a, "b": b}

    @case("matmul_batched")
    def _(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
        w = _leaf(rng, 2, 3, 3)
        return lambda: T.sum(T.mul(T.matmul(a, b), w)), {"a": a, "b": b, "w": w}

    @case("linear")
    def _(rng):
        x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
        return lambda: T.sum(T.linear(x, w, b)), {"x": x, "w": w, "b": b}

    for spec in _CONTRACT_SPECS:
        def builder(rng, spec=spec):
            lhs, rhs = spec.split("->")[0].split(",")
            a = _leaf(rng, *(_CONTRACT_DIMS[c] for c in lhs))
            b = _leaf(rng, *(_CONTRACT_DIMS[c] for c in rhs))
            return lambda: T.sum(T.contract(spec, a, b)), {"a": a, "b": b}
        cases[f"contract[{spec}]"] = builder

    @case("reshape_transpose")
    def _(rng):
        x = _leaf(rng, 2, 3, 4)
        w = _leaf(rng, 4, 3, 2)
        return (lambda: T.sum(T.mul(T.transpose(x, (2, 1, 0)), w))
                + T.sum(T.reshape(x, (6, 4))), {"x": x, "w": w})

    @case("concat_stack_expand")
    def _(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
        w = _leaf(rng, 2, 2, 2, 3)
        return (lambda: T.sum(T.concat([a, b], axis=0))
                + T.sum(T.mul(T.expand(T.stack([a, b], axis=0), 1, 2), w)),
                {"a": a, "b": b, "w": w})

    @case("take")
    def _(rng):
        x = _leaf(rng, 3, 4, 2)
        w = _leaf(rng, 3, 4)
        return lambda: T.sum(T.mul(T.take(x, 1, -1), w)), {"x": x, "w": w}

    @case("index_select_repeats")
    def _(rng):
        x = _leaf(rng, 4, 3)
        w = _leaf(rng, 5, 3)
        idx = np.array([0, 2, 2, 3, 1])
        return lambda: T.sum(T.mul(T.index_select(x, idx), w)), {"x": x, "w": w}

    @case("embedding_repeats")
    def _(rng):
        table = _leaf(rng, 5, 3)
        w = _leaf(rng, 2, 2, 3)
        ids = np.array([[0, 2], [2, 4]])
        return lambda: T.sum(T.mul(T.embedding(table, ids), w)), {"table": table, "w": w}

    @case("sum_mean_axes")
    def _(rng):
        x = _leaf(rng, 3, 4, 2)
        w = _leaf(rng, 3, 2)
        return (lambda: T.sum(T.mul(T.sum(x, axis=1), w)) + T.mul(T.mean(x), 3.0)
                + T.sum(T.mean(x, axis=(0, 2))), {"x": x, "w": w})

    @case("softmax")
    def _(rng):
        x = _leaf(rng, 3, 4)
        w = _leaf(rng, 3, 4)
        y = _leaf(rng, 2, 3, 4)
        wy = _leaf(rng, 2, 3, 4)
        return (lambda: T.sum(T.mul(T.softmax(x, axis=-1), w))
                + T.sum(T.mul(T.softmax(y, axis=1), wy)), {"x": x, "w": w, "y": y, "wy": wy})

    @case("layer_norm")
    def _(rng):
        x = _leaf(rng, 4, 6)
        gain = Tensor(1.0 + 0.1 * rng.standard_normal(6), requires_grad=True)
        bias = _leaf(rng, 6)
        w = _leaf(rng, 4, 6)
        return (lambda: T.sum(T.mul(T.layer_norm(x, gain, bias), w)),
                {"x": x, "gain": gain, "bias": bias, "w": w})

    @case("dropout")
    def _(rng):
        x = _leaf(rng, 5, 4)
        w = _leaf(rng, 5, 4)

        def fn():
            drop_rng = np.random.default_rng(1234)
            return T.sum(T.mul(T.dropout(x, 0.4, drop_rng, training=True), w))
        return fn, {"x": x, "w": w}

    @case("cross_entropy")
    def _(rng):
        logits = _leaf(rng, 3, 5)
        targets = np.array([1, 0, 4])
        return lambda: T.cross_entropy(logits, targets), {"logits": logits}

    return cases


OP_CASE_NAMES = tuple(_op_cases().keys())


def check_op(name: str, seed: int) -> CheckResult:
    builder = _op_cases()[name]
    fn, leaves = builder(np.random.default_rng([seed, hash(name) % (2 ** 31)]))
    return CheckResult(name, check_case(fn, leaves), OP_THRESHOLD)


def _model_case(mode: str, seed: int):
    rng = np.random.default_rng([seed, 77])
    grounded = mode != "text"
    cfg = ModelConfig(vocab_size=8, n_answers=5, h_dim=6, feat_dim=4, max_len=4,
                      grounded=grounded, dropout=0.0)
    params = init_params(cfg, rng, dtype=np.float64)
    # the trained init zeroes the answer head; give it mass so gradients
    # flow through every trunk parameter
    params["w_ans"].data[:] = 0.3 * rng.standard_normal(params["w_ans"].data.shape)
    n = 4
    ids = rng.integers(0, cfg.vocab_size, size=(n, 1))
    target = np.array([int(rng.integers(cfg.n_answers))])
    if grounded:
        v_pred = rng.standard_normal((1, 3, cfg.feat_dim))
        boxes = rng.random((1, 3, 4))
        sep_id = None
        if mode == "grounded-coref":
            ids = np.array([[1], [2], [0], [3], [4]])
            sep_id = 0

        def fn():
            v = grounding.contextualize_objects(params, v_pred, boxes)
            res = forward(params, cfg, ids, v_mat=v, sep_id=sep_id)
            return T.cross_entropy(res.answer_logits, target)
    else:
        def fn():
            res = forward(params, cfg, ids)
            return T.cross_entropy(res.answer_logits, target)
    return fn, params


def check_model(mode: str, seed: int, sample_per_param: int = 6) -> CheckResult:
    """End-to-end check: all of the embedding, sampled elements elsewhere."""
    fn, params = _model_case(mode, seed)
    rng = np.random.default_rng([seed, 99])
    sample = {}
    for name, t in params.items():
        if name == "embed":
            continue
        k = min(sample_per_param, t.size)
        sample[name] = rng.choice(t.size, size=k, replace=False)
    err = check_case(fn, params, sample=sample)
    return CheckResult(f"model[{mode}]", err, MODEL_THRESHOLD)


MODEL_MODES = ("text", "grounded", "grounded-coref")


def run_all(seeds: Iterable[int], ops: Optional[Iterable[str]] = None) -> List[CheckResult]:
    """One result per (case, worst seed); ops=None runs everything."""
    names = list(ops) if ops else list(OP_CASE_NAMES) + [f"model:{m}" for m in MODEL_MODES]
    results = []
    for name in names:
        worst = None
        for seed in seeds:
            if name.startswith("model:"):
                r = check_model(name.split(":", 1)[1], seed)
            else:
                r = check_op(name, seed)
            if worst is None or r.max_err > worst.max_err:
                worst = r
        results.append(worst)
    return results


def render_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case'.ljust(width)}  {'max rel err':>12}  {'threshold':>10}  status"]
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {r.max_err:>12.3e}  {r.threshold:>10.0e}  {status}")
    return "\n".join(lines)
