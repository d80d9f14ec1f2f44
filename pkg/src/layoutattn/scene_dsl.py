"""Controlled scene-description language.

A description is a short English sentence built from a closed vocabulary of
30 nouns (six super-categories of five), eight colours and four axis-aligned
relations.  The grammar is documented in ``docs/grammar.md``.  This module
parses descriptions, renders per-object local captions, checks relation sets
for ordering cycles and generates the synthetic benchmark.

Coordinates are normalised to ``[0, 1]^2`` with the origin at the top-left,
``x`` growing rightwards and ``y`` growing downwards, so "above" means a
smaller ``y``.
"""

from __future__ import annotations

import enum
import graphlib
import json
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContradictionError, ParseError

SUPER_CATEGORIES: dict[str, tuple[str, ...]] = {
    "vehicle": ("car", "bus", "truck", "motorcycle", "bicycle"),
    "street": ("mailbox", "bench", "hydrant", "sign", "lamp"),
    "animal": ("dog", "cat", "horse", "sheep", "bird"),
    "furniture": ("chair", "bed", "couch", "table", "shelf"),
    "kitchen": ("cup", "bowl", "bottle", "spoon", "knife"),
    "food": ("apple", "banana", "sandwich", "cake", "pizza"),
}
NOUNS: tuple[str, ...] = tuple(n for group in SUPER_CATEGORIES.values() for n in group)
COLORS: tuple[str, ...] = ("red", "black", "white", "blue", "green", "yellow", "brown", "silver")
NOUN_INDEX = {n: i for i, n in enumerate(NOUNS)}
COLOR_INDEX = {c: i for i, c in enumerate(COLORS)}


class RelationKind(str, enum.Enum):
    LEFT_OF = "LeftOf"
    RIGHT_OF = "RightOf"
    ABOVE = "Above"
    BELOW = "Below"

    @property
    def axis(self) -> int:
        """0 for the horizontal relations, 1 for the vertical ones."""
        return 0 if self in (RelationKind.LEFT_OF, RelationKind.RIGHT_OF) else 1

    @property
    def subject_first(self) -> bool:
        """True when the subject has the smaller coordinate on ``axis``."""
        return self in (RelationKind.LEFT_OF, RelationKind.ABOVE)

    def holds(self, subject_xy, object_xy, margin: float = 0.0) -> bool:
        a, b = subject_xy[self.axis], object_xy[self.axis]
        if self.subject_first:
            return b - a > margin if margin == 0.0 else b - a >= margin
        return a - b > margin if margin == 0.0 else a - b >= margin


RELATION_PHRASES: dict[RelationKind, tuple[str, ...]] = {
    RelationKind.LEFT_OF: ("to the left of", "left of", "on the left of", "on the left side of"),
    RelationKind.RIGHT_OF: ("to the right of", "right of", "on the right of", "on the right side of"),
    RelationKind.ABOVE: ("above", "over", "on top of"),
    RelationKind.BELOW: ("below", "under", "beneath", "underneath"),
}
COPULAS: tuple[str, ...] = ("is", "sits", "stands", "is placed", "is located", "appears")
CONNECTIVES: tuple[str, ...] = ("and", ",", ", and", ", while", ";", "while")
ARTICLES = ("a", "an", "the")
LOCAL_PREFIX = ("a", "photo", "of")

_PHRASE_TOKENS: list[tuple[tuple[str, ...], RelationKind]] = sorted(
    ((tuple(p.split()), kind) for kind, ps in RELATION_PHRASES.items() for p in ps),
    key=lambda item: -len(item[0]),
)
_COPULA_TOKENS = sorted((tuple(c.split()) for c in COPULAS), key=len, reverse=True)
_CONNECTIVE_TOKENS = sorted(
    (tuple(c.replace(",", " , ").split()) for c in CONNECTIVES), key=len, reverse=True
)

FUNCTION_WORDS: tuple[str, ...] = tuple(
    sorted(
        {w for p in RELATION_PHRASES.values() for phrase in p for w in phrase.split()}
        | {w for c in COPULAS for w in c.split()}
        | {"and", "while", "there", "we", "see", "photo", ",", ";", "."}
        | set(ARTICLES)
        | set(LOCAL_PREFIX)
    )
)
VOCABULARY: tuple[str, ...] = FUNCTION_WORDS + NOUNS + COLORS

_TOKEN_RE = re.compile(r"[a-z]+|[,.;]|\S")


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    noun: str
    color: Optional[str] = None


@dataclass(frozen=True)
class RelationSpec:
    subject_id: int
    object_id: int
    kind: RelationKind


@dataclass(frozen=True)
class SceneDescription:
    global_text: str
    objects: tuple[ObjectSpec, ...]
    relations: tuple[RelationSpec, ...]
    local_texts: tuple[str, ...]
    # token index (into tokenize(global_text)) of each object's introducing noun
    mention_positions: tuple[int, ...] = field(default=(), compare=False)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def cell(self) -> tuple[int, int]:
        return (len(self.objects), len(self.relations))

    def object(self, obj_id: int) -> ObjectSpec:
        return self.objects[obj_id - 1]


@dataclass(frozen=True)
class LabeledDescription:
    """A description paired with an optional ground-truth centre layout."""

    description: SceneDescription
    layout: Optional[tuple[tuple[float, float], ...]] = None


def tokenize(text: str) -> list[tuple[str, int]]:
    """Split text into lowercase tokens paired with their byte offsets."""
    tokens = []
    lowered = text.lower()
    for m in _TOKEN_RE.finditer(lowered):
        offset = len(text[: m.start()].encode("utf-8"))
        tok = m.group(0)
        if not (tok.isalpha() and tok.isascii()) and tok not in {",", ".", ";"}:
            raise ParseError(f"unexpected character {tok!r}", offset)
        tokens.append((tok, offset))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0
        self.objects: list[ObjectSpec] = []
        self.positions: list[int] = []
        self.by_noun: dict[str, int] = {}
        self.relations: list[RelationSpec] = []

    # -- token helpers -------------------------------------------------
    def _offset(self) -> int:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos][1]
        return len(self.text.encode("utf-8"))

    def _peek(self, k: int = 0) -> Optional[str]:
        i = self.pos + k
        return self.tokens[i][0] if i < len(self.tokens) else None

    def _error(self, message: str) -> ParseError:
        tok = self._peek()
        found = "end of input" if tok is None else repr(tok)
        return ParseError(f"{message}, found {found}", self._offset())

    def _match_seq(self, seq: Sequence[str]) -> bool:
        if all(self._peek(k) == w for k, w in enumerate(seq)):
            self.pos += len(seq)
            return True
        return False

    def _expect(self, word: str) -> None:
        if not self._match_seq((word,)):
            raise self._error(f"expected {word!r}")

    # -- grammar -------------------------------------------------------
    def parse(self) -> SceneDescription:
        if not self.tokens:
            raise ParseError("empty description", 0)
        self._clause()
        while self._peek() is not None:
            if self._peek() == "." and self._peek(1) is None:
                self.pos += 1
                break
            if not self._connective():
                raise self._error("expected a connective or end of description")
            self._clause()
        if not check_contradictions(self.relations):
            raise ContradictionError(f"relations in {self.text!r} contain an ordering cycle")
        objects = tuple(self.objects)
        return SceneDescription(
            global_text=self.text,
            objects=objects,
            relations=tuple(self.relations),
            local_texts=tuple(render_local_description(o) for o in objects),
            mention_positions=tuple(self.positions),
        )

    def _connective(self) -> bool:
        if self._peek() == "." and self._peek(1) is not None:
            self.pos += 1
            return True
        return any(self._match_seq(c) for c in _CONNECTIVE_TOKENS)

    def _relation(self) -> Optional[RelationKind]:
        for seq, kind in _PHRASE_TOKENS:
            if self._match_seq(seq):
                return kind
        return None

    def _copula(self) -> bool:
        return any(self._match_seq(c) for c in _COPULA_TOKENS)

    def _add_relation(self, subject: int, obj: int, kind: RelationKind, offset: int) -> None:
        if subject == obj:
            raise ParseError("an object cannot be related to itself", offset)
        self.relations.append(RelationSpec(subject, obj, kind))

    def _clause(self) -> None:
        start = self._offset()
        if self._match_seq(("there", "is")) or self._match_seq(("we", "see")):
            subject = self._np()
            kind = self._relation()
            if kind is not None:
                self._add_relation(subject, self._np(), kind, start)
            return
        kind = self._relation()
        if kind is not None:
            # inverted order: "<relation> NP <copula> NP"
            obj = self._np()
            if not self._copula():
                raise self._error("expected a verb after the inverted relation phrase")
            self._add_relation(self._np(), obj, kind, start)
            return
        subject = self._np()
        save = self.pos
        if self._copula():
            kind = self._relation()
            if kind is None:
                self.pos = save
                raise self._error("expected a relation phrase after the verb")
            self._add_relation(subject, self._np(), kind, start)

    def _np(self) -> int:
        offset = self._offset()
        article = self._peek()
        if article not in ARTICLES:
            raise self._error("expected an article ('a', 'an' or 'the')")
        self.pos += 1
        color = None
        if self._peek() in COLOR_INDEX:
            color = self._peek()
            self.pos += 1
        noun = self._peek()
        if noun not in NOUN_INDEX:
            raise self._error("expected a noun from the vocabulary")
        noun_pos = self.pos
        self.pos += 1
        if noun in self.by_noun:
            existing = self.objects[self.by_noun[noun] - 1]
            if article != "the":
                raise ParseError(f"{noun!r} is already introduced; refer to it with 'the'", offset)
            if color is not None and color != existing.color:
                raise ParseError(f"colour {color!r} does not match the earlier {noun!r}", offset)
            return existing.id
        obj = ObjectSpec(id=len(self.objects) + 1, noun=noun, color=color)
        self.objects.append(obj)
        self.positions.append(noun_pos)
        self.by_noun[noun] = obj.id
        return obj.id


def parse_description(text: str) -> SceneDescription:
    """Parse a description in the scene DSL.

    Objects are numbered from 1 in order of first mention.  Raises
    :class:`ParseError` on malformed input and :class:`ContradictionError`
    when the relations cannot be satisfied by any layout.
    """
    return _Parser(text).parse()


def render_local_description(obj: ObjectSpec) -> str:
    if obj.color:
        return f"A photo of a {obj.color} {obj.noun}"
    return f"A photo of a {obj.noun}"


def _order_edges(relations: Iterable[RelationSpec], axis: int) -> list[tuple[int, int]]:
    edges = []
    for rel in relations:
        if rel.kind.axis != axis:
            continue
        if rel.kind.subject_first:
            edges.append((rel.subject_id, rel.object_id))
        else:
            edges.append((rel.object_id, rel.subject_id))
    return edges


def check_contradictions(relations: Iterable[RelationSpec]) -> bool:
    """True iff both per-axis ordering graphs are acyclic."""
    relations = list(relations)
    for axis in (0, 1):
        graph: dict[int, set[int]] = {}
        for lo, hi in _order_edges(relations, axis):
            if lo == hi:
                return False
            graph.setdefault(hi, set()).add(lo)
        try:
            tuple(graphlib.TopologicalSorter(graph).static_order())
        except graphlib.CycleError:
            return False
    return True


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _np_text(obj: ObjectSpec, introduced: set[int]) -> str:
    words = ([obj.color] if obj.color else []) + [obj.noun]
    if obj.id in introduced:
        return "the " + obj.noun
    introduced.add(obj.id)
    return _article(words[0]) + " " + " ".join(words)


def render_description(desc: SceneDescription) -> str:
    """Canonical text for a description; ``parse_description`` inverts it.

    Relation clauses are emitted in order.  Objects must be introduced in id
    order, so any object that a clause would introduce too early is preceded
    by plain mentions of the objects before it.
    """
    introduced: set[int] = set()
    clauses = []

    def mention_upto(limit: int) -> None:
        for i in range(len(introduced) + 1, limit):
            clauses.append(_np_text(desc.object(i), introduced))

    for rel in desc.relations:
        s, o = rel.subject_id, rel.object_id
        new = sorted({s, o} - introduced)
        if new and new != list(range(len(introduced) + 1, len(introduced) + 1 + len(new))):
            mention_upto(new[-1])
            new = [new[-1]]
        phrase = RELATION_PHRASES[rel.kind][0]
        if len(new) == 2 and o < s:
            obj_np = _np_text(desc.object(o), introduced)
            clauses.append(f"{phrase} {obj_np} is {_np_text(desc.object(s), introduced)}")
        else:
            sub_np = _np_text(desc.object(s), introduced)
            clauses.append(f"{sub_np} is {phrase} {_np_text(desc.object(o), introduced)}")
    mention_upto(len(desc.objects) + 1)
    if len(clauses) == 1:
        text = clauses[0]
    else:
        text = ", ".join(clauses[:-1]) + " and " + clauses[-1]
    return text[0].upper() + text[1:] + "."


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

DEFAULT_CELL_COUNTS: dict[tuple[int, int], int] = {
    (2, 1): 200,
    (3, 1): 50,
    (3, 2): 50,
    (4, 2): 50,
    (4, 3): 50,
    (5, 3): 50,
    (5, 4): 50,
}
LAYOUT_RANGE = (0.1, 0.9)
LAYOUT_MARGIN = 0.15
COLOR_PROBABILITY = 0.5


def validate_cells(counts: dict[tuple[int, int], int]) -> None:
    for (n, m), count in counts.items():
        if not 2 <= n <= 5:
            raise ConfigError(f"object count N={n} outside [2, 5]")
        if not 1 <= m <= n - 1:
            raise ConfigError(f"relation count M={m} outside [1, N-1] for N={n}")
        if count < 0:
            raise ConfigError(f"negative count {count} for cell N={n}, M={m}")


def _sample_relations(rng: np.random.Generator, n: int, m: int) -> list[RelationSpec]:
    pairs = list(combinations(range(1, n + 1), 2))
    kinds = list(RelationKind)
    while True:
        chosen = rng.choice(len(pairs), size=m, replace=False)
        rels = []
        for idx in chosen:
            a, b = pairs[idx]
            if rng.random() < 0.5:
                a, b = b, a
            rels.append(RelationSpec(a, b, kinds[rng.integers(len(kinds))]))
        if check_contradictions(rels):
            return rels


def _random_topo_order(rng: np.random.Generator, n: int, edges: list[tuple[int, int]]) -> list[int]:
    preds = {i: set() for i in range(1, n + 1)}
    for lo, hi in edges:
        preds[hi].add(lo)
    order: list[int] = []
    remaining = set(preds)
    while remaining:
        ready = sorted(i for i in remaining if not (preds[i] & remaining))
        pick = ready[rng.integers(len(ready))]
        order.append(pick)
        remaining.remove(pick)
    return order


def sample_layout_for(
    rng: np.random.Generator,
    n: int,
    relations: Sequence[RelationSpec],
    margin: float = LAYOUT_MARGIN,
    max_rounds: int = 10_000,
) -> list[tuple[float, float]]:
    """Rejection-sample object centres satisfying every relation by ``margin``.

    Each axis is sampled independently: uniform draws in ``LAYOUT_RANGE`` are
    sorted and handed out along a random topological order of that axis'
    constraint graph, and the draw is rejected unless every constrained gap is
    at least ``margin``.
    """
    lo, hi = LAYOUT_RANGE
    coords = np.zeros((n, 2))
    for axis in (0, 1):
        edges = _order_edges(relations, axis)
        for _ in range(max_rounds):
            values = np.sort(rng.uniform(lo, hi, size=n))
            order = _random_topo_order(rng, n, edges)
            axis_vals = np.empty(n)
            for rank, obj_id in enumerate(order):
                axis_vals[obj_id - 1] = values[rank]
            if all(axis_vals[b - 1] - axis_vals[a - 1] >= margin for a, b in edges):
                coords[:, axis] = axis_vals
                break
        else:
            raise ConfigError(f"could not place {n} objects with margin {margin}")
    return [(float(x), float(y)) for x, y in coords]


def _render_generated(
    rng: np.random.Generator, objs: list[tuple[str, Optional[str]]], rels: list[RelationSpec]
) -> str:
    """Render abstract objects (0-based list, relation ids 1-based) with random templates."""
    clauses: list[tuple[str, ...]] = [("rel", str(i)) for i in range(len(rels))]
    related = {r.subject_id for r in rels} | {r.object_id for r in rels}
    clauses += [("np", str(i)) for i in range(1, len(objs) + 1) if i not in related]
    order = rng.permutation(len(clauses))
    introduced: set[int] = set()

    def np_text(i: int) -> str:
        noun, color = objs[i - 1]
        if i in introduced:
            if color and rng.random() < 0.3:
                return f"the {color} {noun}"
            return f"the {noun}"
        introduced.add(i)
        words = ([color] if color else []) + [noun]
        return _article(words[0]) + " " + " ".join(words)

    parts = []
    for ci in order:
        kind_, payload = clauses[ci]
        if kind_ == "np":
            parts.append(np_text(int(payload)))
            continue
        rel = rels[int(payload)]
        phrases = RELATION_PHRASES[rel.kind]
        phrase = phrases[rng.integers(len(phrases))]
        pattern = rng.integers(5)
        if pattern == 0:
            parts.append(f"{np_text(rel.subject_id)} is {phrase} {np_text(rel.object_id)}")
        elif pattern == 1:
            verb = COPULAS[1 + rng.integers(len(COPULAS) - 1)]
            parts.append(f"{np_text(rel.subject_id)} {verb} {phrase} {np_text(rel.object_id)}")
        elif pattern == 2:
            parts.append(f"there is {np_text(rel.subject_id)} {phrase} {np_text(rel.object_id)}")
        elif pattern == 3:
            obj_np = np_text(rel.object_id)
            verb = COPULAS[rng.integers(len(COPULAS))]
            parts.append(f"{phrase} {obj_np} {verb} {np_text(rel.subject_id)}")
        else:
            parts.append(f"we see {np_text(rel.subject_id)} {phrase} {np_text(rel.object_id)}")
    text = parts[0]
    for part in parts[1:]:
        conn = CONNECTIVES[rng.integers(len(CONNECTIVES))]
        text += ("" if conn.startswith((",", ";")) else " ") + conn + " " + part
    return text[0].upper() + text[1:] + "."


def generate_item(
    rng: np.random.Generator, n: int, m: int, with_layout: bool = True
) -> LabeledDescription:
    groups = list(SUPER_CATEGORIES.values())
    group = groups[rng.integers(len(groups))]
    nouns = [group[i] for i in rng.choice(len(group), size=n, replace=False)]
    colors = [
        COLORS[rng.integers(len(COLORS))] if rng.random() < COLOR_PROBABILITY else None
        for _ in range(n)
    ]
    rels = _sample_relations(rng, n, m)
    layout = sample_layout_for(rng, n, rels) if with_layout else None
    text = _render_generated(rng, list(zip(nouns, colors)), rels)
    desc = parse_description(text)
    # parsed ids follow mention order; map abstract ids through the (unique) nouns
    parsed_id = {o.noun: o.id for o in desc.objects}
    remap = {i + 1: parsed_id[noun] for i, noun in enumerate(nouns)}
    expected = tuple(RelationSpec(remap[r.subject_id], remap[r.object_id], r.kind) for r in rels)
    assert set(expected) == set(desc.relations), (text, expected, desc.relations)
    if layout is not None:
        ordered = [None] * n
        for i, xy in enumerate(layout):
            ordered[remap[i + 1] - 1] = xy
        layout = tuple(ordered)
    return LabeledDescription(desc, layout)


def paraphrase(rng: np.random.Generator, item: LabeledDescription, relabel: bool = True) -> LabeledDescription:
    """Re-render a labelled item with fresh templates and connectives.

    With ``relabel`` the nouns are redrawn from one random super-category and
    the colours of coloured objects are redrawn too, so only the relation
    structure and the layout survive.  Used as training-time augmentation.
    """
    desc = item.description
    n = desc.n_objects
    if relabel:
        groups = list(SUPER_CATEGORIES.values())
        group = groups[rng.integers(len(groups))]
        nouns = [group[i] for i in rng.choice(len(group), size=n, replace=False)]
        colors = [COLORS[rng.integers(len(COLORS))] if o.color else None for o in desc.objects]
    else:
        nouns = [o.noun for o in desc.objects]
        colors = [o.color for o in desc.objects]
    text = _render_generated(rng, list(zip(nouns, colors)), list(desc.relations))
    new = parse_description(text)
    parsed_id = {o.noun: o.id for o in new.objects}
    layout = item.layout
    if layout is not None:
        ordered = [None] * n
        for i, xy in enumerate(layout):
            ordered[parsed_id[nouns[i]] - 1] = xy
        layout = tuple(ordered)
    return LabeledDescription(new, layout)


def generate_dataset(
    counts: Optional[dict[tuple[int, int], int]] = None,
    seed: int = 0,
    with_layout: bool = True,
) -> list[LabeledDescription]:
    """Generate the synthetic benchmark, one independent stream per (N, M) cell."""
    counts = dict(DEFAULT_CELL_COUNTS if counts is None else counts)
    validate_cells(counts)
    items = []
    for (n, m) in sorted(counts):
        rng = np.random.default_rng([seed, n, m])
        items.extend(generate_item(rng, n, m, with_layout) for _ in range(counts[(n, m)]))
    return items


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------


def item_to_json(item: LabeledDescription) -> dict:
    d = item.description
    return {
        "text": d.global_text,
        "objects": [{"id": o.id, "noun": o.noun, "color": o.color} for o in d.objects],
        "relations": [
            {"sub": r.subject_id, "obj": r.object_id, "kind": r.kind.value} for r in d.relations
        ],
        "layout": None
        if item.layout is None
        else [{"id": i + 1, "cx": cx, "cy": cy} for i, (cx, cy) in enumerate(item.layout)],
    }


def item_from_json(record: dict) -> LabeledDescription:
    desc = parse_description(record["text"])
    objects = tuple(ObjectSpec(o["id"], o["noun"], o.get("color")) for o in record["objects"])
    relations = tuple(
        RelationSpec(r["sub"], r["obj"], RelationKind(r["kind"])) for r in record["relations"]
    )
    if objects != desc.objects or set(relations) != set(desc.relations):
        raise ParseError("stored objects/relations disagree with the text", 0)
    layout = None
    if record.get("layout") is not None:
        by_id = {e["id"]: (float(e["cx"]), float(e["cy"])) for e in record["layout"]}
        layout = tuple(by_id[o.id] for o in desc.objects)
    return LabeledDescription(desc, layout)


def write_jsonl(items: Iterable[LabeledDescription], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item_to_json(item), sort_keys=True) + "\n")


def read_jsonl(path) -> list[LabeledDescription]:
    with open(path, encoding="utf-8") as fh:
        return [item_from_json(json.loads(line)) for line in fh if line.strip()]


def parse_counts(spec: str) -> dict[tuple[int, int], int]:
    """Parse ``"2:1=10,3:2=5"`` into ``{(2, 1): 10, (3, 2): 5}``."""
    counts = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            cell, count = part.split("=")
            n, m = cell.split(":")
            counts[(int(n), int(m))] = int(count)
        except ValueError as exc:
            raise ConfigError(f"bad count entry {part!r}; expected N:M=COUNT") from exc
    validate_cells(counts)
    return counts
