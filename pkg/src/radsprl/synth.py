"""Seeded synthetic radiology sentences with known spatial annotations.

A grammar is a set of weighted templates plus slot lexicons. Template syntax:

* ``word`` is copied literally;
* ``{SLOT}`` draws one lexicon entry, ``{SLOT?}`` does so half of the time;
* ``[T0,L1:...]`` marks its contents as a span carrying every listed role,
  where the letter is the role (``I`` indicator, ``T`` trajector, ``L``
  landmark, ``D`` diagnosis, ``H`` hedge) and the digit the relation;
* ``[D0*:...]`` repeats its contents 1 to 4 times joined by ``or``, each
  repetition being its own span.

The first letter is capitalised and a final period attached. Besides the
corpus, :func:`generate` returns a tally of what it emitted, computed from its
own bookkeeping rather than by re-reading the corpus.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Mapping

import numpy as np

from .corpus import (
    AnnotatedSentence,
    Corpus,
    CorpusStats,
    RoleLabel,
    Span,
    SpatialRelation,
    load_lexicon,
    relation_category,
)
from .preprocess import PUNCT

ROLE_CODES = {
    "I": None,
    "T": RoleLabel.TRAJECTOR,
    "L": RoleLabel.LANDMARK,
    "D": RoleLabel.DIAGNOSIS,
    "H": RoleLabel.HEDGE,
}

_GROUP = re.compile(r"\[([A-Z]\d+(?:,[A-Z]\d+)*)(\*?):([^\[\]]*)\]")
_SLOT = re.compile(r"^\{([A-Z_]+)(\??)\}$")
_TAG = re.compile(r"^([A-Z])(\d+)$")


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class _Word:
    literal: str | None = None
    slot: str | None = None
    optional: bool = False


@dataclass(frozen=True)
class _Group:
    tags: tuple[tuple[str, int], ...]
    repeat: bool
    words: tuple[_Word, ...]


@dataclass(frozen=True)
class Template:
    name: str
    pattern: str
    weight: float
    items: tuple  # of _Word | _Group

    @property
    def n_relations(self) -> int:
        return 1 + max(idx for item in self.items if isinstance(item, _Group) for _, idx in item.tags)


@dataclass(frozen=True)
class TemplateGrammar:
    templates: tuple[Template, ...]
    lexicons: dict[str, tuple[str, ...]]
    repeat_weights: dict[int, float] = field(default_factory=lambda: {1: 0.6, 2: 0.25, 3: 0.1, 4: 0.05})
    report_size: tuple[int, int] = (1, 4)

    def template(self, name: str) -> Template:
        for t in self.templates:
            if t.name == name:
                return t
        raise KeyError(name)


def _parse_words(text: str, where: str) -> tuple[_Word, ...]:
    words = []
    for w in text.split():
        m = _SLOT.match(w)
        if m:
            words.append(_Word(slot=m.group(1), optional=bool(m.group(2))))
        elif "{" in w or "}" in w or "[" in w or "]" in w:
            raise GrammarError(f"{where}: malformed token {w!r}")
        else:
            words.append(_Word(literal=w))
    return tuple(words)


def parse_template(name: str, pattern: str, weight: float = 1.0) -> Template:
    where = f"template {name!r}"
    items: list = []
    pos = 0
    for m in _GROUP.finditer(pattern):
        items.extend(_parse_words(pattern[pos : m.start()], where))
        tags = []
        for tag in m.group(1).split(","):
            code, idx = _TAG.match(tag).groups()
            if code not in ROLE_CODES:
                raise GrammarError(f"{where}: unknown role code {code!r}")
            tags.append((code, int(idx)))
        repeat = bool(m.group(2))
        if repeat and len(tags) != 1:
            raise GrammarError(f"{where}: a repeated group must carry exactly one role")
        words = _parse_words(m.group(3), where)
        if not words or all(w.optional for w in words):
            raise GrammarError(f"{where}: group {m.group(0)!r} can render empty")
        items.append(_Group(tuple(tags), repeat, words))
        pos = m.end()
    items.extend(_parse_words(pattern[pos:], where))

    groups = [it for it in items if isinstance(it, _Group)]
    if not groups:
        raise GrammarError(f"{where}: no annotated groups")
    n_rel = 1 + max(idx for g in groups for _, idx in g.tags)
    for r in range(n_rel):
        indicators = [g for g in groups if ("I", r) in g.tags]
        if len(indicators) != 1:
            raise GrammarError(f"{where}: relation {r} needs exactly one indicator group")
        if indicators[0].repeat:
            raise GrammarError(f"{where}: indicator group cannot repeat")
    if weight < 0:
        raise GrammarError(f"{where}: negative weight")
    return Template(name, pattern, float(weight), tuple(items))


def _check_entry(slot: str, entry: str) -> None:
    if not entry.split():
        raise GrammarError(f"lexicon {slot}: empty entry")
    bad = set(entry) & set(PUNCT)
    if bad:
        raise GrammarError(f"lexicon {slot}: entry {entry!r} contains punctuation {''.join(sorted(bad))!r}")


def grammar_from_dict(obj: Mapping) -> TemplateGrammar:
    unknown = set(obj) - {"templates", "lexicons", "repeat_weights", "report_size"}
    if unknown:
        raise GrammarError(f"unknown grammar keys: {sorted(unknown)}")
    try:
        lexicons = {k: tuple(v) for k, v in obj["lexicons"].items()}
        templates = tuple(
            parse_template(name, tmpl["pattern"], tmpl.get("weight", 1.0))
            for name, tmpl in obj["templates"].items()
        )
    except KeyError as exc:
        raise GrammarError(f"grammar is missing {exc}") from None
    for slot, entries in lexicons.items():
        if not entries:
            raise GrammarError(f"lexicon {slot} is empty")
        for e in entries:
            _check_entry(slot, e)
    prepositions = load_lexicon()
    for e in lexicons.get("PREP", ()):
        if e.lower() not in prepositions:
            raise GrammarError(f"PREP entry {e!r} is not in the preposition lexicon")
    for t in templates:
        for item in t.items:
            words = item.words if isinstance(item, _Group) else (item,)
            for w in words:
                if w.slot is not None and w.slot not in lexicons:
                    raise GrammarError(f"template {t.name!r} uses undefined slot {w.slot}")
                if w.literal is not None:
                    _check_entry(t.name, w.literal)
    repeat = {int(k): float(v) for k, v in obj.get("repeat_weights", {"1": 1.0}).items()}
    if not repeat or min(repeat) < 1 or min(repeat.values()) < 0 or sum(repeat.values()) <= 0:
        raise GrammarError("repeat_weights must map counts >= 1 to non-negative weights")
    lo, hi = obj.get("report_size", (1, 4))
    if not 1 <= lo <= hi:
        raise GrammarError("report_size must satisfy 1 <= min <= max")
    return TemplateGrammar(templates, lexicons, repeat, (int(lo), int(hi)))


def load_grammar(path: str | os.PathLike | None = None) -> TemplateGrammar:
    """Read a JSON grammar; the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("radsprl.data").joinpath("grammar.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GrammarError(f"grammar is not valid JSON: {exc}") from None
    return grammar_from_dict(obj)


def default_grammar() -> TemplateGrammar:
    return load_grammar()


def _normalize_name(name: str) -> str:
    return name.strip().lower().replace("-", "_")


def resolve_weights(grammar: TemplateGrammar, weights: Mapping[str, float] | None) -> np.ndarray:
    """Template probabilities. ``weights`` replaces the grammar's own; unnamed templates get 0."""
    names = [t.name for t in grammar.templates]
    if weights is None:
        w = np.array([t.weight for t in grammar.templates], dtype=float)
    else:
        given = {_normalize_name(k): float(v) for k, v in weights.items()}
        unknown = set(given) - set(names)
        if unknown:
            raise GrammarError(f"unknown templates in weights: {sorted(unknown)}")
        w = np.array([given.get(n, 0.0) for n in names])
    if (w < 0).any() or w.sum() <= 0:
        raise GrammarError("template weights must be non-negative with a positive sum")
    return w / w.sum()


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass
class _Draft:
    words: list[str] = field(default_factory=list)
    length: int = 0
    # (relation, role code) -> list of (start, end)
    spans: dict[tuple[int, str], list[tuple[int, int]]] = field(default_factory=dict)

    def add(self, text: str) -> tuple[int, int]:
        """Append space-separated words; returns the character range they occupy."""
        start = self.length + (1 if self.words else 0)
        for w in text.split():
            self.length += len(w) + (1 if self.words else 0)
            self.words.append(w)
        return start, self.length


def _render_words(words, grammar: TemplateGrammar, rng: np.random.Generator) -> str:
    out = []
    for w in words:
        if w.literal is not None:
            out.append(w.literal)
            continue
        if w.optional and rng.random() < 0.5:
            continue
        lex = grammar.lexicons[w.slot]
        out.append(lex[rng.integers(len(lex))])
    return " ".join(out)


def render(template: Template, grammar: TemplateGrammar, rng: np.random.Generator) -> tuple[str, list[SpatialRelation]]:
    """One sentence and its relations (in indicator order) from ``template``."""
    draft = _Draft()
    counts = sorted(grammar.repeat_weights)
    probs = np.array([grammar.repeat_weights[c] for c in counts])
    probs = probs / probs.sum()
    for item in template.items:
        if isinstance(item, _Word):
            draft.add(_render_words((item,), grammar, rng))
            continue
        n = counts[rng.choice(len(counts), p=probs)] if item.repeat else 1
        for k in range(n):
            if k:
                draft.add("or")
            char_range = draft.add(_render_words(item.words, grammar, rng))
            for tag in item.tags:
                draft.spans.setdefault((tag[1], tag[0]), []).append(char_range)
    text = " ".join(draft.words)
    text = text[0].upper() + text[1:] + "."
    relations = []
    for r in range(template.n_relations):
        (ind,) = draft.spans[(r, "I")]
        fields = {}
        for code, role in ROLE_CODES.items():
            if role is None:
                continue
            fields[role] = tuple(Span.from_text(text, s, e) for s, e in draft.spans.get((r, code), ()))
        relations.append(
            SpatialRelation(
                indicator=Span.from_text(text, *ind),
                trajectors=fields[RoleLabel.TRAJECTOR],
                landmarks=fields[RoleLabel.LANDMARK],
                diagnoses=fields[RoleLabel.DIAGNOSIS],
                hedges=fields[RoleLabel.HEDGE],
            )
        )
    relations.sort(key=lambda rel: rel.indicator.key)
    return text, relations


# ---------------------------------------------------------------------------
# tally
# ---------------------------------------------------------------------------


@dataclass
class Tally:
    """Running counts of everything the generator emits."""

    relations: int = 0
    roles: dict[RoleLabel, int] = field(default_factory=lambda: {r: 0 for r in RoleLabel})
    sentences: int = 0
    tokens: int = 0
    max_indicators: int = 0
    categories: dict[str, int] = field(
        default_factory=lambda: dict.fromkeys(
            ("traj_land_only", "with_diag_no_hedge", "with_hedge_no_diag", "all_four"), 0
        )
    )
    multi_diagnosis: int = 0
    max_diagnoses: int = 0
    per_template: dict[str, int] = field(default_factory=dict)

    def record(self, template: str, n_words: int, relations: list[SpatialRelation]) -> None:
        self.sentences += 1
        # every word is a token and the final period is one more
        self.tokens += n_words + 1
        self.max_indicators = max(self.max_indicators, len(relations))
        self.per_template[template] = self.per_template.get(template, 0) + 1
        for rel in relations:
            self.relations += 1
            counts = rel.role_counts()
            for role, c in counts.items():
                self.roles[role] += c
            cat = relation_category(counts)
            if cat is not None:
                self.categories[cat] += 1
            n_diag = counts[RoleLabel.DIAGNOSIS]
            self.multi_diagnosis += n_diag > 1
            self.max_diagnoses = max(self.max_diagnoses, n_diag)

    def as_stats(self) -> CorpusStats:
        return CorpusStats(
            n_relations=self.relations,
            n_trajectors=self.roles[RoleLabel.TRAJECTOR],
            n_landmarks=self.roles[RoleLabel.LANDMARK],
            n_diagnoses=self.roles[RoleLabel.DIAGNOSIS],
            n_hedges=self.roles[RoleLabel.HEDGE],
            n_sentences_with_indicator=self.sentences,
            max_indicators_per_sentence=self.max_indicators,
            n_rel_traj_land_only=self.categories["traj_land_only"],
            n_rel_with_diag_no_hedge=self.categories["with_diag_no_hedge"],
            n_rel_with_hedge_no_diag=self.categories["with_hedge_no_diag"],
            n_rel_all_four=self.categories["all_four"],
            n_rel_multi_diagnosis=self.multi_diagnosis,
            max_diagnoses_per_relation=self.max_diagnoses,
            avg_sentence_length_tokens=Fraction(self.tokens, self.sentences) if self.sentences else Fraction(0),
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _generate(
    seed: int,
    grammar: TemplateGrammar | None,
    weights: Mapping[str, float] | None,
    n_sentences: int | None,
    n_relations: int | None,
) -> tuple[Corpus, Tally]:
    grammar = grammar or default_grammar()
    probs = resolve_weights(grammar, weights)
    rng = np.random.default_rng(seed)
    tally = Tally()
    sentences: list[AnnotatedSentence] = []
    lo, hi = grammar.report_size
    report, left, index_in_report = -1, 0, 0

    def done() -> bool:
        if n_sentences is not None:
            return len(sentences) >= n_sentences
        return tally.relations >= n_relations

    if n_relations is not None:
        sizes = {t.n_relations for t, p in zip(grammar.templates, probs) if p > 0}
        if n_relations > 0 and 1 not in sizes:
            raise GrammarError("an exact relation count needs a single-relation template")

    while not done():
        template = grammar.templates[rng.choice(len(grammar.templates), p=probs)]
        if n_relations is not None and tally.relations + template.n_relations > n_relations:
            continue
        text, relations = render(template, grammar, rng)
        if left == 0:
            report += 1
            left = int(rng.integers(lo, hi + 1))
            index_in_report = 0
        sentences.append(
            AnnotatedSentence(
                report_id=f"synth-{report:05d}",
                sentence_id=f"s{index_in_report}",
                text=text,
                relations=tuple(relations),
            )
        )
        left -= 1
        index_in_report += 1
        tally.record(template.name, len(text.split()), relations)
    return Corpus(tuple(sentences)), tally


def generate(
    n: int,
    seed: int,
    grammar: TemplateGrammar | None = None,
    weights: Mapping[str, float] | None = None,
) -> tuple[Corpus, Tally]:
    """``n`` annotated sentences drawn from ``grammar`` (default grammar if None)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return _generate(seed, grammar, weights, n_sentences=n, n_relations=None)


def generate_relations(
    n_relations: int,
    seed: int,
    grammar: TemplateGrammar | None = None,
    weights: Mapping[str, float] | None = None,
) -> tuple[Corpus, Tally]:
    """Sentences whose relations (hence tagger instances) total exactly ``n_relations``."""
    if n_relations < 0:
        raise ValueError("n_relations must be non-negative")
    return _generate(seed, grammar, weights, n_sentences=None, n_relations=n_relations)
