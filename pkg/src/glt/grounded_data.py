"""Miniature grounded QA: scenes, templated questions, symbolic executor.

Questions are built from a 19-combo template bank over three question
types (exist, count, query-attribute), one optional relation (left of,
right of, same color as, same size as), and one optional connective
(and/or over two attribute predicates). The compositional split holds
out four combos whose primitives all still occur in training, so test
questions recombine familiar pieces in unfamiliar structures.

Every example carries the scene, the raw token sequence (stop words
included), gold constituent spans with object-set denotations, and an
answer produced by the symbolic executor defined here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .data import Example, Span, Vocab
from .grounding import COLORS, MATERIALS, SHAPES, SIZES, Scene, SceneObject

QUESTION_TYPES = ("exist", "count", "query")
RELATIONS = ("none", "left", "right", "same_color", "same_size")
CONNECTIVES = ("none", "and", "or")

ANSWERS: Tuple[str, ...] = (("no", "yes") + tuple(str(i) for i in range(9))
                            + COLORS + SHAPES + SIZES + MATERIALS)

ATTR_KINDS = ("size", "color", "material", "shape")
_KIND_VALUES = {"size": SIZES, "color": COLORS, "material": MATERIALS, "shape": SHAPES}
_PLURAL = {"cube": "cubes", "sphere": "spheres", "cylinder": "cylinders",
           "thing": "things"}

MIN_OBJECTS, MAX_SCENE_OBJECTS = 3, 8
HELD_OUT_COUNT = 4
SPLIT_KINDS = ("iid", "compositional")


def all_template_combos() -> List[str]:
    """The 19 valid (qtype, relation, connective) combinations."""
    combos = []
    for q in QUESTION_TYPES:
        for rel in RELATIONS:
            for conn in CONNECTIVES:
                if conn != "none" and rel != "none":
                    continue
                if q == "query" and conn != "none":
                    continue
                combos.append(f"{q}|{rel}|{conn}")
    return combos


def vocab() -> Vocab:
    """Static closed vocabulary covering the whole template grammar."""
    tokens = set("is there a that the as are of how many what left right same and or "
                 "thing things color shape size material".split())
    tokens.update({"?", ";"})
    for values in _KIND_VALUES.values():
        tokens.update(values)
    tokens.update(_PLURAL.values())
    return Vocab(sorted(tokens))


@dataclass(frozen=True)
class GroundedSplit:
    kind: str  # iid | compositional
    held_out: Tuple[str, ...] = ()

    def train_combos(self) -> List[str]:
        return [c for c in all_template_combos() if c not in self.held_out]

    def test_combos(self) -> List[str]:
        if self.kind == "compositional":
            return list(self.held_out)
        return all_template_combos()


def make_grounded_split(kind: str, seed: int) -> GroundedSplit:
    if kind not in SPLIT_KINDS:
        raise ValueError(f"grounded split kind must be one of {SPLIT_KINDS}, got {kind!r}")
    if kind == "iid":
        return GroundedSplit("iid")
    combos = all_template_combos()
    rng = np.random.default_rng([seed, 0xC0])
    order = [combos[i] for i in rng.permutation(len(combos))]
    held: List[str] = []

    def covered(train: Sequence[str]) -> bool:
        parts = [c.split("|") for c in train]
        return (all(any(p[0] == q for p in parts) for q in QUESTION_TYPES)
                and all(any(p[1] == r for p in parts) for r in RELATIONS)
                and all(any(p[2] == c for p in parts) for c in CONNECTIVES))

    for combo in order:
        if len(held) == HELD_OUT_COUNT:
            break
        candidate = held + [combo]
        if covered([c for c in combos if c not in candidate]):
            held.append(combo)
    return GroundedSplit("compositional", tuple(sorted(held)))


@dataclass(frozen=True)
class Filter:
    """Conjunction of up to two attribute constraints."""
    size: Optional[str] = None
    color: Optional[str] = None
    material: Optional[str] = None
    shape: Optional[str] = None

    def matches(self, obj: SceneObject) -> bool:
        for kind in ATTR_KINDS:
            want = getattr(self, kind)
            if want is not None and getattr(obj, kind) != want:
                return False
        return True

    def kinds(self) -> List[str]:
        return [k for k in ATTR_KINDS if getattr(self, k) is not None]

    def phrase(self, plural: bool = False) -> List[str]:
        """Surface tokens: size color material [shape-or-thing head]."""
        words = [getattr(self, k) for k in ("size", "color", "material")
                 if getattr(self, k) is not None]
        head = self.shape if self.shape is not None else "thing"
        return words + [_PLURAL[head] if plural else head]


@dataclass(frozen=True)
class Question:
    qtype: str
    rel: str
    conn: str
    f1: Optional[Filter] = None
    f2: Optional[Filter] = None
    pred1: Optional[Tuple[str, str]] = None  # (kind, value) for connectives
    pred2: Optional[Tuple[str, str]] = None
    query_kind: Optional[str] = None

    @property
    def combo(self) -> str:
        return f"{self.qtype}|{self.rel}|{self.conn}"


def filter_set(scene: Scene, f: Filter) -> Set[int]:
    return {i for i, o in enumerate(scene.objects) if f.matches(o)}


def relation_set(scene: Scene, rel: str, ref: int) -> Set[int]:
    ref_obj = scene.objects[ref]
    if rel == "left":
        return {i for i, o in enumerate(scene.objects) if o.x < ref_obj.x}
    if rel == "right":
        return {i for i, o in enumerate(scene.objects) if o.x > ref_obj.x}
    if rel == "same_color":
        return {i for i, o in enumerate(scene.objects)
                if i != ref and o.color == ref_obj.color}
    if rel == "same_size":
        return {i for i, o in enumerate(scene.objects)
                if i != ref and o.size == ref_obj.size}
    raise ValueError(f"unknown relation {rel!r}")


def predicate_set(scene: Scene, pred: Tuple[str, str]) -> Set[int]:
    kind, value = pred
    return {i for i, o in enumerate(scene.objects) if getattr(o, kind) == value}


def _referent(scene: Scene, f2: Filter) -> Optional[int]:
    matches = filter_set(scene, f2)
    return next(iter(matches)) if len(matches) == 1 else None


def _subject_set(scene: Scene, q: Question) -> Optional[Set[int]]:
    """Objects the question is about; None when a referent is not unique."""
    if q.conn != "none":
        s1, s2 = predicate_set(scene, q.pred1), predicate_set(scene, q.pred2)
        return s1 & s2 if q.conn == "and" else s1 | s2
    subject = filter_set(scene, q.f1)
    if q.rel != "none":
        ref = _referent(scene, q.f2)
        if ref is None:
            return None
        subject = subject & relation_set(scene, q.rel, ref)
    return subject


def execute(scene: Scene, q: Question) -> Optional[str]:
    """Answer string, or None when the question is ill-posed for the scene."""
    subject = _subject_set(scene, q)
    if subject is None:
        return None
    if q.qtype == "exist":
        return "yes" if subject else "no"
    if q.qtype == "count":
        return str(len(subject))
    if len(subject) != 1:
        return None
    target = scene.objects[next(iter(subject))]
    return getattr(target, q.query_kind)


_REL_WORDS = {"left": ["left", "of", "the"], "right": ["right", "of", "the"],
              "same_color": ["the", "same", "color", "as", "the"],
              "same_size": ["the", "same", "size", "as", "the"]}


def render(q: Question) -> Tuple[List[str], List[Span], Dict[Span, str]]:
    """Raw tokens plus gold spans tagged with their denotation source.

    The tag map uses: 'f1', 'f2', 'rel' (relation phrase + referent), and
    'subj' (subject with relation applied) or 'conn' (predicate pair);
    gold object sets are attached later, once the scene is known.
    """
    spans: List[Span] = []
    tags: Dict[Span, str] = {}

    def add(span: Span, tag: str):
        spans.append(span)
        tags[span] = tag

    if q.conn != "none":
        pred = [q.pred1[1], q.conn, q.pred2[1]]
        if q.qtype == "exist":
            tokens = ["is", "there", "a", "thing", "that", "is"] + pred + ["?"]
            add((6, 9), "conn")
        else:
            tokens = ["how", "many", "things", "are"] + pred + ["?"]
            add((4, 7), "conn")
        return tokens, spans, tags

    if q.qtype == "exist":
        head, f1 = ["is", "there", "a"], q.f1.phrase()
    elif q.qtype == "count":
        head, f1 = ["how", "many"], q.f1.phrase(plural=True)
    else:
        head, f1 = ["what", q.query_kind, "is", "the"], q.f1.phrase()
    f1_span = (len(head), len(head) + len(f1))
    tokens = head + f1

    if q.rel == "none":
        if q.qtype == "count":
            tokens += ["are", "there"]
    else:
        glue = ["are"] if q.qtype == "count" else ["that", "is"]
        rel_words = glue + _REL_WORDS[q.rel]
        rel_start = len(tokens)
        f2 = q.f2.phrase()
        f2_span = (rel_start + len(rel_words), rel_start + len(rel_words) + len(f2))
        tokens += rel_words + f2
        add(f1_span, "f1")
        add(f2_span, "f2")
        add((rel_start, f2_span[1]), "rel")
        add((f1_span[0], f2_span[1]), "subj")
        tokens += ["?"]
        return tokens, spans, tags

    if len(f1) >= 2:
        add(f1_span, "f1")
    tokens += ["?"]
    return tokens, spans, tags


def gold_sets(scene: Scene, q: Question, tags: Dict[Span, str]) -> Dict[Span, List[int]]:
    out: Dict[Span, List[int]] = {}
    for span, tag in tags.items():
        if tag == "f1":
            objs = filter_set(scene, q.f1)
        elif tag == "f2":
            objs = filter_set(scene, q.f2)
        elif tag == "rel":
            objs = relation_set(scene, q.rel, _referent(scene, q.f2))
        elif tag == "subj":
            objs = _subject_set(scene, q)
        else:  # conn
            objs = _subject_set(scene, q)
        out[span] = sorted(objs)
    return out


def sample_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(MIN_OBJECTS, MAX_SCENE_OBJECTS + 1))
    objs = []
    for _ in range(n):
        objs.append(SceneObject(
            color=COLORS[rng.integers(len(COLORS))],
            shape=SHAPES[rng.integers(len(SHAPES))],
            size=SIZES[rng.integers(len(SIZES))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
            x=float(np.round(rng.uniform(0.05, 0.95), 6)),
            y=float(np.round(rng.uniform(0.05, 0.95), 6))))
    return Scene(tuple(objs))


def _sample_filter(rng: np.random.Generator, from_obj: Optional[SceneObject] = None,
                   n_attrs: Optional[int] = None) -> Filter:
    k = int(n_attrs if n_attrs is not None else rng.integers(1, 3))
    kinds = [ATTR_KINDS[i] for i in rng.choice(len(ATTR_KINDS), size=k, replace=False)]
    values = {}
    for kind in kinds:
        if from_obj is not None:
            values[kind] = getattr(from_obj, kind)
        else:
            domain = _KIND_VALUES[kind]
            values[kind] = domain[rng.integers(len(domain))]
    return Filter(**values)


def _unique_referent_filter(rng, scene: Scene) -> Optional[Filter]:
    ref = int(rng.integers(len(scene)))
    for n_attrs in (1, 2, 2):
        f = _sample_filter(rng, from_obj=scene.objects[ref], n_attrs=n_attrs)
        if _referent(scene, f) == ref:
            return f
    return None


def _sample_question(rng, scene: Scene, combo: str, want: Optional[str]) -> Optional[Question]:
    """One question for the combo, or None; `want` pins exist answers."""
    qtype, rel, conn = combo.split("|")
    if conn != "none":
        kinds = [ATTR_KINDS[i] for i in rng.choice(len(ATTR_KINDS), size=2,
                                                   replace=conn == "or")]
        if conn == "or" and kinds[0] == kinds[1]:
            d = _KIND_VALUES[kinds[0]]
            vals = [d[i] for i in rng.choice(len(d), size=2, replace=False)]
        else:
            if kinds[0] == kinds[1]:
                return None
            vals = [getattr(scene.objects[rng.integers(len(scene))], k) if rng.random() < 0.7
                    else _KIND_VALUES[k][rng.integers(len(_KIND_VALUES[k]))]
                    for k in kinds]
        q = Question(qtype, rel, conn, pred1=(kinds[0], vals[0]), pred2=(kinds[1], vals[1]))
    elif qtype == "query":
        subject = int(rng.integers(len(scene)))
        f1 = _sample_filter(rng, from_obj=scene.objects[subject])
        q_kinds = [k for k in ATTR_KINDS if k not in f1.kinds()]
        if rel in ("same_color", "same_size"):
            banned = "color" if rel == "same_color" else "size"
            q_kinds = [k for k in q_kinds if k != banned]
        if not q_kinds:
            return None
        query_kind = q_kinds[rng.integers(len(q_kinds))]
        f2 = None
        if rel != "none":
            f2 = _unique_referent_filter(rng, scene)
            if f2 is None or _referent(scene, f2) == subject and rel in ("same_color",
                                                                        "same_size"):
                return None
        q = Question(qtype, rel, conn, f1=f1, f2=f2, query_kind=query_kind)
    else:
        anchor = (scene.objects[rng.integers(len(scene))]
                  if (want != "no" and rng.random() < 0.7) else None)
        f1 = _sample_filter(rng, from_obj=anchor)
        f2 = None
        if rel != "none":
            f2 = _unique_referent_filter(rng, scene)
            if f2 is None:
                return None
        q = Question(qtype, rel, conn, f1=f1, f2=f2)
    answer = execute(scene, q)
    if answer is None:
        return None
    if qtype == "exist" and want is not None and answer != want:
        return None
    return q


_PHASE_CODES = {"train": 0, "test": 1, "val": 2}
_SCENE_TRIES = 60
_QUESTION_TRIES = 40


def make_example(rng: np.random.Generator, combos: Sequence[str],
                 index: int) -> Example:
    combo = combos[rng.integers(len(combos))]
    want = ("yes" if index % 2 == 0 else "no") if combo.startswith("exist") else None
    for _ in range(_SCENE_TRIES):
        scene = sample_scene(rng)
        for _ in range(_QUESTION_TRIES):
            q = _sample_question(rng, scene, combo, want)
            if q is None:
                continue
            tokens, spans, tags = render(q)
            return Example(tokens=tokens, answer=execute(scene, q), scene=scene,
                           gold_constituents=spans,
                           gold_denotations=gold_sets(scene, q, tags),
                           template=q.combo)
    raise RuntimeError(f"could not satisfy template {combo} after "
                       f"{_SCENE_TRIES * _QUESTION_TRIES} attempts")


def gen_grounded(split: GroundedSplit, seed: int, count: int,
                 phase: str = "train") -> Iterator[Example]:
    combos = split.test_combos() if phase == "test" else split.train_combos()
    code = _PHASE_CODES[phase]
    for i in range(count):
        rng = np.random.default_rng([seed, code, i])
        yield make_example(rng, combos, i)
