"""Example records, JSONL IO, stop-word removal, and closed vocabularies.

Dataset files hold raw tokens (stop words included); removal is a
preprocessing step owned by the training/eval configuration, and gold
span annotations are remapped through it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .grounding import Scene

Span = Tuple[int, int]

# Footnoted removal list; punctuation is any token with no alphanumerics.
STOP_WORDS = frozenset({"the", "there", "is", "a", "as", "of", "are", "other",
                        "on", "that"})


def is_stop_word(token: str) -> bool:
    return token in STOP_WORDS or not any(c.isalnum() for c in token)


@dataclass
class Example:
    tokens: List[str]
    answer: str
    scene: Optional[Scene] = None
    gold_constituents: Optional[List[Span]] = None
    gold_denotations: Optional[Dict[Span, List[int]]] = None
    template: Optional[str] = None


def example_to_json(ex: Example) -> dict:
    d = {"tokens": list(ex.tokens), "answer": ex.answer}
    if ex.scene is not None:
        d["scene"] = {"objects": ex.scene.to_json()}
    if ex.gold_constituents is not None:
        d["gold_constituents"] = [[i, j] for i, j in ex.gold_constituents]
    if ex.gold_denotations is not None:
        d["gold_denotations"] = [[i, j, sorted(objs)]
                                 for (i, j), objs in sorted(ex.gold_denotations.items())]
    if ex.template is not None:
        d["template"] = ex.template
    return d


def example_from_json(d: dict) -> Example:
    scene = Scene.from_json(d["scene"]["objects"]) if "scene" in d else None
    consts = None
    if "gold_constituents" in d:
        consts = [(int(i), int(j)) for i, j in d["gold_constituents"]]
    dens = None
    if "gold_denotations" in d:
        dens = {(int(i), int(j)): [int(o) for o in objs]
                for i, j, objs in d["gold_denotations"]}
    return Example(tokens=list(d["tokens"]), answer=str(d["answer"]), scene=scene,
                   gold_constituents=consts, gold_denotations=dens,
                   template=d.get("template"))


def write_jsonl(path, examples: Iterable[Example]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex)) + "\n")
            count += 1
    return count


def read_jsonl(path) -> List[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(example_from_json(json.loads(line)))
    return out


def remove_stop_words(tokens: Sequence[str],
                      spans: Optional[Sequence[Span]] = None,
                      denotations: Optional[Dict[Span, List[int]]] = None):
    """Drop stop words; remap span annotations onto the kept indices.

    A span maps to the range of kept tokens it covered; spans left with
    fewer than two tokens are dropped. Returns (tokens, spans, denotations)
    with the latter two None when not supplied.
    """
    keep = [not is_stop_word(t) for t in tokens]
    kept_before = np.cumsum([0] + [int(k) for k in keep])
    new_tokens = [t for t, k in zip(tokens, keep) if k]

    def remap(span: Span) -> Optional[Span]:
        i, j = span
        ni, nj = int(kept_before[i]), int(kept_before[j])
        return (ni, nj) if nj - ni >= 2 else None

    new_spans = None
    if spans is not None:
        new_spans = []
        for s in spans:
            m = remap(s)
            if m is not None and m not in new_spans:
                new_spans.append(m)
    new_dens = None
    if denotations is not None:
        new_dens = {}
        for s, objs in denotations.items():
            m = remap(s)
            if m is not None:
                new_dens[m] = objs
    return new_tokens, new_spans, new_dens


def preprocess(ex: Example, strip_stop_words: bool) -> Example:
    if not strip_stop_words:
        return ex
    toks, spans, dens = remove_stop_words(ex.tokens, ex.gold_constituents,
                                          ex.gold_denotations)
    return Example(tokens=toks, answer=ex.answer, scene=ex.scene,
                   gold_constituents=spans, gold_denotations=dens,
                   template=ex.template)


class UnknownTokenError(ValueError):
    def __init__(self, tokens: Sequence[str]):
        self.tokens = sorted(set(tokens))
        super().__init__(f"tokens not in the closed vocabulary: {self.tokens}")


class Vocab:
    """Closed token-to-id map with a stable, sorted ordering."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: List[str] = sorted(set(tokens))
        self._id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._id

    def id_of(self, token: str) -> int:
        return self._id[token]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        unknown = [t for t in tokens if t not in self._id]
        if unknown:
            raise UnknownTokenError(unknown)
        return np.array([self._id[t] for t in tokens], dtype=np.int64)

    def to_json(self) -> List[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocab":
        return cls(tokens)
