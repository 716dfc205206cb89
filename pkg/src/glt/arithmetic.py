"""Arithmetic expression benchmark: three compositional splits.

Expressions alternate single-digit numbers with + and *; the answer is
the value under standard precedence, kept in 0..100 by resampling. The
three splits probe memorization (easy), operator generalization (three
operator positions whose operator is flipped at test time), and length
extrapolation (train up to 6 numbers, test on 8).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .data import Example, Vocab

OPS = ("+", "*")
DIGITS = tuple(str(d) for d in range(10))
ANSWER_MIN, ANSWER_MAX = 0, 100
ANSWERS = tuple(str(v) for v in range(ANSWER_MIN, ANSWER_MAX + 1))
MAX_REJECTIONS = 10_000
SPLIT_KINDS = ("easy", "operation", "length")

N_TRAIN_DEFAULT = 6
TEST_SET_SIZE_DEFAULT = 2000


def vocab() -> Vocab:
    return Vocab(DIGITS + OPS)


def evaluate_expression(tokens) -> int:
    """Value with * binding tighter than +."""
    total = 0
    product = int(tokens[0])
    for op, num in zip(tokens[1::2], tokens[2::2]):
        if op == "*":
            product *= int(num)
        else:
            total += product
            product = int(num)
    return total + product


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    n_train: int = N_TRAIN_DEFAULT
    n_test: int = N_TRAIN_DEFAULT
    op_positions: Tuple[int, ...] = ()
    train_ops: Tuple[str, ...] = ()
    test_set_size: int = TEST_SET_SIZE_DEFAULT

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"split kind must be one of {SPLIT_KINDS}, got {self.kind!r}")
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("expression lengths start at 2 numbers")
        if self.kind == "operation" and len(self.op_positions) != 3:
            raise ValueError("operation split fixes exactly 3 operator positions")

    def test_op_at(self, position: int) -> Optional[str]:
        """Fixed operator at a constrained position during test (flipped)."""
        if position in self.op_positions:
            train_op = self.train_ops[self.op_positions.index(position)]
            return "*" if train_op == "+" else "+"
        return None

    def train_op_at(self, position: int) -> Optional[str]:
        if position in self.op_positions:
            return self.train_ops[self.op_positions.index(position)]
        return None


def make_split(kind: str, seed: int, n_train: int = N_TRAIN_DEFAULT,
               n_test: Optional[int] = None,
               test_set_size: int = TEST_SET_SIZE_DEFAULT) -> SplitSpec:
    if n_test is None:
        n_test = n_train + 2 if kind == "length" else n_train
    if kind != "operation":
        return SplitSpec(kind, n_train, n_test, test_set_size=test_set_size)
    rng = np.random.default_rng([seed, 0xA11])
    positions = tuple(int(i) for i in sorted(rng.choice(n_train - 1, size=3, replace=False)))
    ops = tuple(OPS[i] for i in rng.integers(0, 2, size=3))
    return SplitSpec(kind, n_train, n_test, positions, ops, test_set_size)


def _sample_expression(rng: np.random.Generator, n_numbers: int, spec: SplitSpec,
                       phase: str, excluded: frozenset) -> List[str]:
    """One token list honoring the split, rejected until the value is in range."""
    for _ in range(MAX_REJECTIONS):
        tokens: List[str] = []
        for slot in range(n_numbers):
            tokens.append(DIGITS[rng.integers(10)])
            if slot == n_numbers - 1:
                break
            if spec.kind == "operation":
                fixed = (spec.train_op_at(slot) if phase == "train"
                         else spec.test_op_at(slot))
            else:
                fixed = None
            tokens.append(fixed if fixed is not None else OPS[rng.integers(2)])
        value = evaluate_expression(tokens)
        if not ANSWER_MIN <= value <= ANSWER_MAX:
            continue
        if excluded and " ".join(tokens) in excluded:
            continue
        return tokens
    raise RuntimeError(f"no in-range expression found after {MAX_REJECTIONS} rejections "
                       f"(n={n_numbers}, kind={spec.kind})")


_PHASE_CODES = {"train": 0, "test": 1, "val": 2}


class ArithmeticDataset:
    """Deterministic example streams for one (split, seed) pair.

    The easy split excludes the exact test-set expressions from the train
    and validation streams; the test set itself is fixed by the spec's
    test_set_size so the exclusion set never depends on callers.
    """

    def __init__(self, spec: SplitSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self._test_cache: Optional[List[Example]] = None
        self.excluded = frozenset(
            " ".join(ex.tokens) for ex in self.test_examples()
        ) if spec.kind == "easy" else frozenset()

    def _example(self, rng, n_numbers, phase, excluded) -> Example:
        tokens = _sample_expression(rng, n_numbers, self.spec, phase, excluded)
        return Example(tokens=tokens, answer=str(evaluate_expression(tokens)))

    def test_examples(self) -> List[Example]:
        if self._test_cache is None:
            out = []
            for i in range(self.spec.test_set_size):
                rng = np.random.default_rng([self.seed, _PHASE_CODES["test"], i])
                out.append(self._example(rng, self.spec.n_test, "test", frozenset()))
            self._test_cache = out
        return self._test_cache

    def _phase_stream(self, phase: str, count: int, start: int) -> Iterator[Example]:
        for i in range(start, start + count):
            rng = np.random.default_rng([self.seed, _PHASE_CODES[phase], i])
            n = int(rng.integers(2, self.spec.n_train + 1))
            yield self._example(rng, n, phase, self.excluded)

    def train_examples(self, count: int, start: int = 0) -> Iterator[Example]:
        return self._phase_stream("train", count, start)

    def val_examples(self, count: int) -> List[Example]:
        return list(self._phase_stream("val", count, 0))

    def train_batch(self, step: int, batch_size: int, mixed: bool = False,
                    max_n: Optional[int] = None) -> List[Example]:
        """One training batch; lengths are shared (default) or drawn per example.

        max_n caps the operand count below spec.n_train (length curriculum).
        """
        rng = np.random.default_rng([self.seed, 3, step])
        hi = self.spec.n_train if max_n is None else min(max_n, self.spec.n_train)
        if mixed:
            return [self._example(rng, int(rng.integers(2, hi + 1)),
                                  "train", self.excluded)
                    for _ in range(batch_size)]
        n = int(rng.integers(2, hi + 1))
        return [self._example(rng, n, "train", self.excluded)
                for _ in range(batch_size)]


def gen_arithmetic(spec: SplitSpec, seed: int, count: int,
                   phase: str = "train") -> Iterator[Example]:
    """File-oriented stream; test phase replays the canonical test set."""
    ds = ArithmeticDataset(spec, seed)
    if phase == "test":
        if count > spec.test_set_size:
            raise ValueError(f"test set holds {spec.test_set_size} examples")
        return iter(ds.test_examples()[:count])
    if phase == "val":
        return iter(ds.val_examples(count))
    return ds.train_examples(count)
