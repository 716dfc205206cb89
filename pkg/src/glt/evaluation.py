"""Metrics: answer accuracy, greedy tree extraction, constituent recall,
denotation F1, and the per-example prediction dump.

Trees are read off a finished chart by greedy descent: at every span take
the argmax split (ties toward the smallest k) and the argmax module.
Constituents are the internal-node spans (length >= 2, root included).
Denotation F1 is averaged over matched constituents across the whole
dataset; examples without matches are counted but do not contribute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .model import MODULES, ChartResult, ModelConfig
from .tensor import Tensor
from .training import Batch, Prepared, batch_forward, collate

DENOTATION_THRESHOLD = 0.5  # strict >


@dataclass
class TreeNode:
    span: Tuple[int, int]
    split: Optional[int] = None          # absolute split point; None for leaves
    module: Optional[str] = None         # argmax module name (grounded internal nodes)
    objects: Optional[List[int]] = None  # denotation > threshold (grounded)
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.span[1] - self.span[0] == 1


def extract_tree(chart: ChartResult, b: int = 0) -> TreeNode:
    """Greedy argmax descent over the chart of example b."""

    def descend(i: int, j: int) -> TreeNode:
        node = TreeNode(span=(i, j))
        if (i, j) in chart.d_of:
            d = chart.d_of[(i, j)][b]
            node.objects = [int(o) for o in np.nonzero(d > DENOTATION_THRESHOLD)[0]]
        if j - i == 1:
            return node
        alpha = chart.alpha_of[(i, j)][:, b]
        k = i + 1 + int(np.argmax(alpha))  # argmax takes the first (smallest) max
        node.split = k
        if (i, j) in chart.module_probs_of:
            node.module = MODULES[int(np.argmax(chart.module_probs_of[(i, j)][b]))]
        node.left = descend(i, k)
        node.right = descend(k, j)
        return node

    lo = chart.token_offset
    return descend(lo, lo + chart.n)


def tree_constituents(tree: TreeNode) -> Set[Tuple[int, int]]:
    """Internal-node spans (length >= 2), root included."""
    out: Set[Tuple[int, int]] = set()

    def walk(node: TreeNode) -> None:
        if node.is_leaf:
            return
        out.add(node.span)
        walk(node.left)
        walk(node.right)

    walk(tree)
    return out


def constituent_recall(predicted: Set[Tuple[int, int]],
                       gold: Sequence[Tuple[int, int]]) -> Optional[float]:
    """|gold intersect predicted| / |gold|; None when gold is empty (skipped)."""
    gold_set = {tuple(s) for s in gold}
    if not gold_set:
        return None
    return len(gold_set & predicted) / len(gold_set)


def f1_sets(pred: Set[int], gold: Set[int]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    tp = len(pred & gold)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(gold)
    return 2 * precision * recall / (precision + recall)


def matched_denotation_f1(chart: ChartResult, b: int,
                          predicted: Set[Tuple[int, int]],
                          gold_denotations: Dict[Tuple[int, int], List[int]]
                          ) -> List[float]:
    """One F1 per constituent in the predicted/gold intersection."""
    out = []
    for span in sorted(gold_denotations):
        if tuple(span) not in predicted or tuple(span) not in chart.d_of:
            continue
        d = chart.d_of[tuple(span)][b]
        pred = {int(o) for o in np.nonzero(d > DENOTATION_THRESHOLD)[0]}
        out.append(f1_sets(pred, set(gold_denotations[span])))
    return out


def render_bracketing(tree: TreeNode, tokens: Sequence[str]) -> str:
    def walk(node: TreeNode) -> str:
        if node.is_leaf:
            return tokens[node.span[0]]
        return f"( {walk(node.left)} {walk(node.right)} )"

    return walk(tree)


@dataclass
class EvalReport:
    n_examples: int = 0
    n_correct: int = 0
    gold_constituents_total: int = 0
    gold_constituents_matched: int = 0
    recall_skipped: int = 0          # examples with no gold constituents
    f1_values: int = 0               # matched constituents contributing to F1
    f1_sum: float = 0.0
    f1_absent: int = 0               # examples with gold sets but no match
    per_template: Dict[str, List[int]] = field(default_factory=dict)  # [correct, total]

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_examples if self.n_examples else float("nan")

    @property
    def constituent_recall(self) -> Optional[float]:
        if self.gold_constituents_total == 0:
            return None
        return self.gold_constituents_matched / self.gold_constituents_total

    @property
    def denotation_f1(self) -> Optional[float]:
        if self.f1_values == 0:
            return None
        return self.f1_sum / self.f1_values

    def to_json(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "accuracy": self.accuracy,
            "constituent_recall": self.constituent_recall,
            "denotation_f1": self.denotation_f1,
            "gold_constituents": {"total": self.gold_constituents_total,
                                  "matched": self.gold_constituents_matched},
            "recall_skipped": self.recall_skipped,
            "f1_constituents": self.f1_values,
            "f1_absent": self.f1_absent,
            "per_template": {k: {"correct": c, "total": t, "accuracy": c / t}
                             for k, (c, t) in sorted(self.per_template.items())},
        }

    def render_table(self) -> str:
        lines = [f"examples            {self.n_examples}",
                 f"answer accuracy     {self.accuracy:.4f}"]
        if self.constituent_recall is not None:
            lines.append(f"constituent recall  {self.constituent_recall:.4f} "
                         f"({self.gold_constituents_matched}/{self.gold_constituents_total}, "
                         f"{self.recall_skipped} skipped)")
        if self.denotation_f1 is not None:
            lines.append(f"denotation F1       {self.denotation_f1:.4f} "
                         f"(over {self.f1_values} constituents, "
                         f"{self.f1_absent} examples unmatched)")
        if self.per_template:
            lines.append("per template:")
            width = max(len(k) for k in self.per_template)
            for k, (c, t) in sorted(self.per_template.items()):
                lines.append(f"  {k.ljust(width)}  {c / t:.4f} ({c}/{t})")
        return "\n".join(lines)


def evaluate(params: Dict[str, Tensor], cfg: ModelConfig,
             prepared: Sequence[Prepared], batch_size: int,
             sep_id: Optional[int] = None,
             answers: Optional[Sequence[str]] = None
             ) -> Tuple[EvalReport, List[dict]]:
    """Streams the dataset in eval mode; returns the report and per-example rows.

    Rows carry tokens, gold/predicted answers, the bracketing, per-node
    modules, and thresholded object sets, ready for a JSONL dump.
    """
    report = EvalReport()
    rows: List[dict] = [None] * len(prepared)  # repopulated in input order

    buckets: Dict[int, List[Tuple[int, Prepared]]] = {}
    for pos, p in enumerate(prepared):
        buckets.setdefault(len(p.ids), []).append((pos, p))

    for n in sorted(buckets):
        items = buckets[n]
        for lo in range(0, len(items), batch_size):
            chunk = items[lo:lo + batch_size]
            batch = collate([p for _, p in chunk], cfg.grounded)
            res = batch_forward(params, cfg, batch, sep_id=sep_id)
            pred_ids = np.argmax(res.answer_logits.data, axis=-1)
            for b, (pos, p) in enumerate(chunk):
                correct = int(pred_ids[b]) == p.target
                report.n_examples += 1
                report.n_correct += int(correct)
                ex = p.example
                template = (ex.template if ex is not None and ex.template
                            else f"n={n}")
                cell = report.per_template.setdefault(template, [0, 0])
                cell[0] += int(correct)
                cell[1] += 1

                tree = extract_tree(res, b)
                spans = tree_constituents(tree)
                row = {"tokens": list(ex.tokens) if ex else [],
                       "gold_answer": ex.answer if ex else str(p.target),
                       "predicted_answer": (answers[int(pred_ids[b])] if answers
                                            else str(int(pred_ids[b]))),
                       "correct": bool(correct),
                       "bracketing": render_bracketing(tree, ex.tokens) if ex else "",
                       "nodes": _node_rows(tree)}
                if ex is not None and ex.gold_constituents is not None:
                    rec = constituent_recall(spans, ex.gold_constituents)
                    if rec is None:
                        report.recall_skipped += 1
                    else:
                        gold_set = {tuple(s) for s in ex.gold_constituents}
                        report.gold_constituents_total += len(gold_set)
                        report.gold_constituents_matched += len(gold_set & spans)
                        row["constituent_recall"] = rec
                if ex is not None and ex.gold_denotations:
                    f1s = matched_denotation_f1(res, b, spans, ex.gold_denotations)
                    if f1s:
                        report.f1_values += len(f1s)
                        report.f1_sum += sum(f1s)
                        row["denotation_f1"] = sum(f1s) / len(f1s)
                    else:
                        report.f1_absent += 1
                rows[pos] = row
    return report, rows


def _node_rows(tree: TreeNode) -> List[dict]:
    out = []

    def walk(node: TreeNode) -> None:
        entry = {"span": list(node.span)}
        if node.split is not None:
            entry["split"] = node.split
        if node.module is not None:
            entry["module"] = node.module
        if node.objects is not None:
            entry["objects"] = node.objects
        out.append(entry)
        if not node.is_leaf:
            walk(node.left)
            walk(node.right)

    walk(tree)
    return out


def dump_predictions(rows: Sequence[dict], path: str) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(", ", ": ")) + "\n")
    return len(rows)
