"""Optimization loop: task bundles, batching, Adam, early stopping, metrics.

A Task packages vocab, answer inventory, model config, and deterministic
data streams for one benchmark split. train() runs Adam with global-norm
clipping, evaluates on an in-distribution validation stream every
eval_every steps, keeps the best checkpoint, and records a CSV of
(step, loss, val_acc, ood_acc); the OOD column is reported only and never
used for model selection. Everything is deterministic given the config.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import arithmetic, grounded_data, grounding, kernels
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Example, example_to_json, preprocess
from .model import ModelConfig, forward, init_params
from .tensor import Tape, Tensor

TASKS = ("arithmetic", "grounded")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# rng salts: 1 init, 3 arithmetic batches (inside ArithmeticDataset),
# 4 dropout, 5 grounded batch sampling
_SALT_INIT = 1
_SALT_DROPOUT = 4
_SALT_BATCH = 5


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; diagnostics were dumped."""


@dataclass
class TrainConfig:
    task: str
    split: str
    out_dir: str
    n_train: int = arithmetic.N_TRAIN_DEFAULT
    h_dim: int = 64
    feat_dim: int = 32
    # lr 1e-3 oscillates without ever fitting; tight global-norm clipping
    # rescales gradients (typical norms 50-700) and freezes Adam's effective
    # step, so the clip default is a divergence guard only.
    lr: float = 3e-4
    batch_size: int = 100
    max_steps: int = 150_000
    eval_every: int = 500
    patience: int = 20
    seed: int = 0
    data_seed: int = 0
    dropout: float = 0.1
    strip_stop_words: bool = True
    grad_clip: float = 1000.0
    # draw each batch element's length independently instead of one shared
    # length per step; the per-length sub-batches are forwarded separately
    # and their losses combined, which keeps the gradient distribution
    # stationary across steps
    mixed_lengths: bool = False
    # if > 0, arithmetic batches cap operand count at 2 + step // curriculum_steps
    # (clamped to n_train), so the model masters short expressions before long
    # ones appear; 0 samples the full 2..n_train range from the first step
    curriculum_steps: int = 0
    train_size: int = 20_000
    val_size: int = 1_000
    test_size: int = 2_000

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "arithmetic" and self.split not in arithmetic.SPLIT_KINDS:
            raise ValueError(f"arithmetic split must be one of {arithmetic.SPLIT_KINDS}")
        if self.task == "grounded" and self.split not in grounded_data.SPLIT_KINDS:
            raise ValueError(f"grounded split must be one of {grounded_data.SPLIT_KINDS}")
        for name in ("n_train", "h_dim", "feat_dim", "lr", "batch_size", "max_steps",
                     "eval_every", "patience", "grad_clip", "train_size", "val_size",
                     "test_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.curriculum_steps < 0:
            raise ValueError("curriculum_steps must be >= 0")
        if self.curriculum_steps > 0 and self.task != "arithmetic":
            raise ValueError("curriculum_steps is only supported for the "
                             "arithmetic task")
        if self.patience > self.max_steps / self.eval_every:
            raise ValueError("patience exceeds max_steps / eval_every; it could never "
                             "trigger")


@dataclass
class Prepared:
    """One example encoded for the model."""
    ids: np.ndarray                      # (n,) int64
    target: int
    feats: Optional[np.ndarray] = None   # (n_obj, feat_dim) f32
    boxes: Optional[np.ndarray] = None   # (n_obj, 4) f32
    example: Optional[Example] = None


@dataclass
class Batch:
    ids: np.ndarray                      # (n, B) int64
    targets: np.ndarray                  # (B,) int64
    feats: Optional[np.ndarray] = None   # (B, N_max, feat) f32, zero padded
    boxes: Optional[np.ndarray] = None   # (B, N_max, 4) f32, zero padded
    mask: Optional[np.ndarray] = None    # (B, N_max) bool


def prepare_example(ex: Example, vocab, answer_id: Dict[str, int], strip: bool,
                    data_seed: int, feat_dim: int) -> Prepared:
    """Stop-word removal, token encoding, and scene featurization for one example."""
    ex = preprocess(ex, strip)
    ids = vocab.encode(ex.tokens)
    feats = boxes = None
    if ex.scene is not None:
        feats, boxes = grounding.scene_features(ex.scene, data_seed, feat_dim)
        feats = feats.astype(np.float32)
        boxes = boxes.astype(np.float32)
    return Prepared(ids=ids, target=answer_id[ex.answer], feats=feats,
                    boxes=boxes, example=ex)


class Task:
    """Vocab, answers, model config, and deterministic data streams."""

    def __init__(self, tcfg: TrainConfig):
        tcfg.validate()
        self.tcfg = tcfg
        if tcfg.task == "arithmetic":
            self._init_arithmetic()
        else:
            self._init_grounded()

    # -- arithmetic ---------------------------------------------------------

    def _init_arithmetic(self) -> None:
        tc = self.tcfg
        self.vocab = arithmetic.vocab()
        self.answers = arithmetic.ANSWERS
        self.answer_id = {a: i for i, a in enumerate(self.answers)}
        self.spec = arithmetic.make_split(tc.split, tc.data_seed, n_train=tc.n_train,
                                          test_set_size=tc.test_size)
        self.dataset = arithmetic.ArithmeticDataset(self.spec, tc.data_seed)
        max_len = 2 * self.spec.n_train - 1
        self.model_cfg = ModelConfig(vocab_size=len(self.vocab), n_answers=len(self.answers),
                                     h_dim=tc.h_dim, feat_dim=tc.feat_dim, max_len=max_len,
                                     grounded=False, dropout=tc.dropout)
        self.split_info = {
            "kind": self.spec.kind, "n_train": self.spec.n_train,
            "n_test": self.spec.n_test,
            "op_positions": list(self.spec.op_positions or ()),
            "train_ops": list(self.spec.train_ops or ()),
            "test_set_size": self.spec.test_set_size,
        }

    # -- grounded -----------------------------------------------------------

    def _init_grounded(self) -> None:
        tc = self.tcfg
        self.vocab = grounded_data.vocab()
        self.answers = grounded_data.ANSWERS
        self.answer_id = {a: i for i, a in enumerate(self.answers)}
        self.split = grounded_data.make_grounded_split(tc.split, tc.data_seed)
        self._train_pool = [self.prepare(ex) for ex in grounded_data.gen_grounded(
            self.split, tc.data_seed, tc.train_size, "train")]
        max_len = max(len(p.ids) for p in self._train_pool)
        self.model_cfg = ModelConfig(vocab_size=len(self.vocab), n_answers=len(self.answers),
                                     h_dim=tc.h_dim, feat_dim=tc.feat_dim, max_len=max_len,
                                     grounded=True, dropout=tc.dropout)
        self._buckets: Dict[int, List[int]] = {}
        for i, p in enumerate(self._train_pool):
            self._buckets.setdefault(len(p.ids), []).append(i)
        self._bucket_lengths = np.array(sorted(self._buckets))
        counts = np.array([len(self._buckets[n]) for n in self._bucket_lengths], dtype=np.float64)
        self._bucket_probs = counts / counts.sum()
        self.split_info = {"kind": self.split.kind,
                           "held_out": list(self.split.held_out)}

    # -- shared -------------------------------------------------------------

    @property
    def grounded(self) -> bool:
        return self.tcfg.task == "grounded"

    def prepare(self, ex: Example) -> Prepared:
        return prepare_example(ex, self.vocab, self.answer_id,
                               strip=self.tcfg.strip_stop_words and self.grounded,
                               data_seed=self.tcfg.data_seed,
                               feat_dim=self.tcfg.feat_dim)

    def train_batch(self, step: int) -> List[Prepared]:
        """Deterministic batch for one step.

        Lengths are shared across the batch unless mixed_lengths is set, in
        which case each element draws its own.
        """
        tc = self.tcfg
        if not self.grounded:
            max_n = None
            if tc.curriculum_steps > 0:
                max_n = min(2 + step // tc.curriculum_steps, tc.n_train)
            return [self.prepare(ex)
                    for ex in self.dataset.train_batch(step, tc.batch_size,
                                                       mixed=tc.mixed_lengths,
                                                       max_n=max_n)]
        rng = np.random.default_rng([tc.seed, _SALT_BATCH, step])
        if tc.mixed_lengths:
            idx = rng.choice(len(self._train_pool), size=tc.batch_size,
                             replace=True)
        else:
            n = int(rng.choice(self._bucket_lengths, p=self._bucket_probs))
            idx = rng.choice(self._buckets[n], size=tc.batch_size, replace=True)
        return [self._train_pool[int(i)] for i in idx]

    def val_set(self) -> List[Prepared]:
        if not hasattr(self, "_val_cache"):
            if self.grounded:
                stream = grounded_data.gen_grounded(self.split, self.tcfg.data_seed,
                                                    self.tcfg.val_size, "val")
            else:
                stream = self.dataset.val_examples(self.tcfg.val_size)
            self._val_cache = [self.prepare(ex) for ex in stream]
        return self._val_cache

    def test_set(self) -> List[Prepared]:
        if not hasattr(self, "_test_cache"):
            if self.grounded:
                stream = grounded_data.gen_grounded(self.split, self.tcfg.data_seed,
                                                    self.tcfg.test_size, "test")
            else:
                stream = self.dataset.test_examples()
            self._test_cache = [self.prepare(ex) for ex in stream]
        return self._test_cache

    def manifest_extra(self, step: int, best_val_acc: float) -> dict:
        return {"task_config": asdict(self.tcfg), "vocab": list(self.vocab.tokens),
                "answers": list(self.answers), "split_info": self.split_info,
                "step": step, "best_val_acc": best_val_acc}


def collate(batch: Sequence[Prepared], grounded: bool) -> Batch:
    ids = np.stack([p.ids for p in batch], axis=1)
    targets = np.array([p.target for p in batch], dtype=np.int64)
    if not grounded:
        return Batch(ids=ids, targets=targets)
    b = len(batch)
    n_max = max(p.feats.shape[0] for p in batch)
    feat_dim = batch[0].feats.shape[1]
    feats = np.zeros((b, n_max, feat_dim), dtype=np.float32)
    boxes = np.zeros((b, n_max, 4), dtype=np.float32)
    mask = np.zeros((b, n_max), dtype=bool)
    for i, p in enumerate(batch):
        k = p.feats.shape[0]
        feats[i, :k] = p.feats
        boxes[i, :k] = p.boxes
        mask[i, :k] = True
    return Batch(ids=ids, targets=targets, feats=feats, boxes=boxes, mask=mask)


def batch_forward(params: Dict[str, Tensor], cfg: ModelConfig, batch: Batch,
                  sep_id: Optional[int] = None, rng=None, training: bool = False):
    """Forward through contextualizer (grounded) and chart; returns ChartResult."""
    v_mat = None
    if cfg.grounded:
        v_mat = grounding.contextualize_objects(params, batch.feats, batch.boxes,
                                                batch.mask)
    return forward(params, cfg, batch.ids, v_mat=v_mat, rng=rng, training=training,
                   sep_id=sep_id)


def extend_layernorm_for_length(params: Dict[str, Tensor], length: int,
                                max_len: int) -> Dict[str, Tensor]:
    """Lengths beyond max_len reuse the longest trained length's layer norm.

    No new parameters are allocated; this verifies the lookup target exists
    so longer test inputs cannot hit a missing-parameter error mid-forward.
    """
    key = min(length, max_len)
    for prefix in ("ln_gain", "ln_bias"):
        if f"{prefix}_{key}" not in params:
            raise KeyError(f"missing layer-norm parameter {prefix}_{key}")
    return params


class Adam:
    """Adam with in-place kernel updates and global-norm clipping."""

    def __init__(self, params: Dict[str, Tensor], lr: float, clip: float):
        self.params = params
        self.lr = lr
        self.clip = clip
        self.t = 0
        self.state = {k: (np.zeros(t.size, dtype=np.float64),
                          np.zeros(t.size, dtype=np.float64))
                      for k, t in params.items()}

    def step(self) -> float:
        """Applies one update from the populated .grad fields; returns grad norm."""
        sq = 0.0
        for t in self.params.values():
            g = t.grad
            sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
        norm = float(np.sqrt(sq))
        scale = self.clip / norm if norm > self.clip else 1.0
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, t in self.params.items():
            m, v = self.state[name]
            g = (t.grad.reshape(-1) * scale).astype(np.float64)
            p = t.data.reshape(-1)
            kernels.adam_step(p, g, m, v, self.lr, ADAM_BETA1, ADAM_BETA2,
                              ADAM_EPS, bc1, bc2)
        return norm


def batched_accuracy(params: Dict[str, Tensor], cfg: ModelConfig,
                     prepared: Sequence[Prepared], batch_size: int,
                     sep_id: Optional[int] = None) -> float:
    """Answer accuracy in eval mode, batching same-length examples together."""
    if not prepared:
        return float("nan")
    buckets: Dict[int, List[Prepared]] = {}
    for p in prepared:
        buckets.setdefault(len(p.ids), []).append(p)
    correct = 0
    for n in sorted(buckets):
        items = buckets[n]
        for lo in range(0, len(items), batch_size):
            chunk = collate(items[lo:lo + batch_size], cfg.grounded)
            res = batch_forward(params, cfg, chunk, sep_id=sep_id)
            pred = np.argmax(res.answer_logits.data, axis=-1)
            correct += int(np.sum(pred == chunk.targets))
    return correct / len(prepared)


@dataclass
class TrainResult:
    out_dir: str
    steps_run: int
    best_val_acc: float
    best_step: int
    first_loss: float
    metrics: List[Tuple[int, float, float, float]] = field(default_factory=list)


def _dump_divergence(out_dir: str, step: int, loss_val: float, bad_params: List[str],
                     batch: Sequence[Prepared]) -> str:
    path = os.path.join(out_dir, "diverged.json")
    payload = {
        "step": step,
        "loss": None if np.isnan(loss_val) else float(loss_val),
        "non_finite_grads": bad_params,
        "batch": [example_to_json(p.example) if p.example is not None
                  else {"ids": p.ids.tolist(), "target": p.target} for p in batch],
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    return path


def train(tcfg: TrainConfig, log=None) -> TrainResult:
    """Runs the full loop; writes metrics.csv and the best checkpoint to out_dir."""
    task = Task(tcfg)
    cfg = task.model_cfg
    params = init_params(cfg, np.random.default_rng([tcfg.seed, _SALT_INIT]))
    opt = Adam(params, tcfg.lr, tcfg.grad_clip)
    dropout_rng = np.random.default_rng([tcfg.seed, _SALT_DROPOUT])
    sep_id = task.vocab.id_of(grounding.SENTENCE_SEP) \
        if grounding.SENTENCE_SEP in task.vocab.tokens else None

    os.makedirs(tcfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(tcfg.out_dir, "metrics.csv")
    metrics_fh = open(metrics_path, "w", encoding="utf-8")
    metrics_fh.write("step,loss,val_acc,ood_acc\n")

    best_val = -1.0
    best_step = 0
    stale = 0
    first_loss = float("nan")
    loss_sum = 0.0
    loss_count = 0
    rows: List[Tuple[int, float, float, float]] = []
    steps_run = 0

    try:
        for step in range(tcfg.max_steps):
            batch_items = task.train_batch(step)
            groups: Dict[int, List[Prepared]] = {}
            for item in batch_items:
                groups.setdefault(len(item.ids), []).append(item)
            with Tape() as tape:
                loss = None
                for n in sorted(groups):
                    chunk = collate(groups[n], cfg.grounded)
                    res = batch_forward(params, cfg, chunk, sep_id=sep_id,
                                        rng=dropout_rng, training=True)
                    part = T.cross_entropy(res.answer_logits, chunk.targets)
                    part = T.mul(part, len(groups[n]) / len(batch_items))
                    loss = part if loss is None else T.add(loss, part)
                loss_val = float(loss.data)
                tape.backward(loss, params=params.values())
            bad = [k for k, t in params.items() if not np.all(np.isfinite(t.grad))]
            if not np.isfinite(loss_val) or bad:
                path = _dump_divergence(tcfg.out_dir, step, loss_val, bad, batch_items)
                raise TrainingDiverged(
                    f"non-finite loss/gradients at step {step}; batch dumped to {path}")
            opt.step()
            steps_run = step + 1
            if step == 0:
                first_loss = loss_val
            loss_sum += loss_val
            loss_count += 1

            if steps_run % tcfg.eval_every == 0:
                val_acc = batched_accuracy(params, cfg, task.val_set(),
                                           tcfg.batch_size, sep_id)
                ood_acc = batched_accuracy(params, cfg, task.test_set(),
                                           tcfg.batch_size, sep_id)
                mean_loss = loss_sum / max(loss_count, 1)
                loss_sum, loss_count = 0.0, 0
                rows.append((steps_run, mean_loss, val_acc, ood_acc))
                metrics_fh.write(f"{steps_run},{mean_loss:.6f},{val_acc:.6f},"
                                 f"{ood_acc:.6f}\n")
                metrics_fh.flush()
                if log:
                    log(f"step {steps_run}: loss {mean_loss:.4f} "
                        f"val {val_acc:.4f} ood {ood_acc:.4f}")
                if val_acc >= best_val:
                    if val_acc > best_val:
                        stale = 0
                    else:
                        stale += 1
                    best_val = val_acc
                    best_step = steps_run
                    save_checkpoint(tcfg.out_dir, params, cfg,
                                    task.manifest_extra(steps_run, best_val))
                else:
                    stale += 1
                if stale >= tcfg.patience:
                    break
    finally:
        metrics_fh.close()

    return TrainResult(out_dir=tcfg.out_dir, steps_run=steps_run, best_val_acc=best_val,
                       best_step=best_step, first_loss=first_loss, metrics=rows)
