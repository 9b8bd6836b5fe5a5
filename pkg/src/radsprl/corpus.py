"""Rad-SpRL corpus data model, JSON-lines I/O, statistics and annotator agreement.

Spans are standoff character offsets into the sentence text. On disk a span is
``{"start": int, "end": int}``; the covered text is rebuilt on load.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Callable, Iterable, Iterator, Sequence


class RoleLabel(str, enum.Enum):
    TRAJECTOR = "TRAJECTOR"
    LANDMARK = "LANDMARK"
    DIAGNOSIS = "DIAGNOSIS"
    HEDGE = "HEDGE"


ROLES: tuple[RoleLabel, ...] = tuple(RoleLabel)

# attribute name on SpatialRelation for each role
ROLE_FIELDS = {
    RoleLabel.TRAJECTOR: "trajectors",
    RoleLabel.LANDMARK: "landmarks",
    RoleLabel.DIAGNOSIS: "diagnoses",
    RoleLabel.HEDGE: "hedges",
}


class CorpusError(ValueError):
    """Base class for corpus validation and parse failures."""


class CorpusParseError(CorpusError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class SpanBoundsError(CorpusError):
    pass


class DuplicateIndicatorError(CorpusError):
    pass


class SentenceMismatchError(CorpusError):
    pass


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    text: str = field(default="", compare=False)

    @classmethod
    def from_text(cls, sentence: str, start: int, end: int) -> "Span":
        if not 0 <= start < end <= len(sentence):
            raise SpanBoundsError(
                f"span [{start}, {end}) outside sentence of length {len(sentence)}"
            )
        return cls(start, end, sentence[start:end])

    @property
    def key(self) -> tuple[int, int]:
        return (self.start, self.end)

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class SpatialRelation:
    indicator: Span
    trajectors: tuple[Span, ...] = ()
    landmarks: tuple[Span, ...] = ()
    diagnoses: tuple[Span, ...] = ()
    hedges: tuple[Span, ...] = ()

    def spans(self, role: RoleLabel) -> tuple[Span, ...]:
        return getattr(self, ROLE_FIELDS[role])

    def role_counts(self) -> dict[RoleLabel, int]:
        return {role: len(self.spans(role)) for role in ROLES}


@dataclass(frozen=True)
class AnnotatedSentence:
    report_id: str
    sentence_id: str
    text: str
    relations: tuple[SpatialRelation, ...] = ()

    @property
    def key(self) -> tuple[str, str]:
        return (self.report_id, self.sentence_id)


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[AnnotatedSentence, ...] = ()

    @property
    def report_ids(self) -> frozenset[str]:
        return frozenset(s.report_id for s in self.sentences)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[AnnotatedSentence]:
        return iter(self.sentences)

    def by_key(self) -> dict[tuple[str, str], AnnotatedSentence]:
        return {s.key: s for s in self.sentences}


# ---------------------------------------------------------------------------
# validation and I/O
# ---------------------------------------------------------------------------


def validate_sentence(sentence: AnnotatedSentence) -> None:
    """Raise a :class:`CorpusError` if any sentence-level invariant is broken."""
    where = f"report {sentence.report_id!r} sentence {sentence.sentence_id!r}"
    n = len(sentence.text)
    seen: set[tuple[int, int]] = set()
    for rel in sentence.relations:
        spans = [("indicator", rel.indicator)]
        for role in ROLES:
            spans.extend((role.value.lower(), s) for s in rel.spans(role))
        for name, span in spans:
            if not 0 <= span.start < span.end <= n:
                raise SpanBoundsError(
                    f"{where}: {name} span [{span.start}, {span.end}) "
                    f"outside text of length {n}"
                )
            if span.text != sentence.text[span.start : span.end]:
                raise SpanBoundsError(f"{where}: {name} span text does not match sentence")
        for role in ROLES:
            ordered = sorted(rel.spans(role))
            for a, b in zip(ordered, ordered[1:]):
                if a.overlaps(b):
                    raise CorpusError(
                        f"{where}: overlapping {role.value} spans "
                        f"[{a.start}, {a.end}) and [{b.start}, {b.end})"
                    )
        if rel.indicator.key in seen:
            raise DuplicateIndicatorError(
                f"{where}: duplicate indicator span "
                f"[{rel.indicator.start}, {rel.indicator.end})"
            )
        seen.add(rel.indicator.key)


def make_corpus(sentences: Iterable[AnnotatedSentence]) -> Corpus:
    sentences = tuple(sentences)
    keys: set[tuple[str, str]] = set()
    for s in sentences:
        validate_sentence(s)
        if s.key in keys:
            raise CorpusError(
                f"duplicate sentence_id {s.sentence_id!r} in report {s.report_id!r}"
            )
        keys.add(s.key)
    return Corpus(sentences)


def _span_from_json(obj, text: str) -> Span:
    start, end = obj["start"], obj["end"]
    if not isinstance(start, int) or not isinstance(end, int):
        raise TypeError("span offsets must be integers")
    # bounds are checked by validate_sentence with a better message
    return Span(start, end, text[start:end] if 0 <= start < end <= len(text) else "")


def sentence_from_dict(obj: dict) -> AnnotatedSentence:
    text = obj["text"]
    relations = []
    for r in obj.get("relations", []):
        relations.append(
            SpatialRelation(
                indicator=_span_from_json(r["indicator"], text),
                **{
                    attr: tuple(_span_from_json(s, text) for s in r.get(attr, []))
                    for attr in ROLE_FIELDS.values()
                },
            )
        )
    return AnnotatedSentence(
        report_id=str(obj["report_id"]),
        sentence_id=str(obj["sentence_id"]),
        text=text,
        relations=tuple(relations),
    )


def sentence_to_dict(sentence: AnnotatedSentence) -> dict:
    def span(s: Span) -> dict:
        return {"start": s.start, "end": s.end}

    return {
        "report_id": sentence.report_id,
        "sentence_id": sentence.sentence_id,
        "text": sentence.text,
        "relations": [
            {
                "indicator": span(r.indicator),
                **{attr: [span(s) for s in r.spans(role)] for role, attr in ROLE_FIELDS.items()},
            }
            for r in sentence.relations
        ],
    }


def parse_corpus_lines(lines: Iterable[str]) -> Corpus:
    sentences = []
    keys: set[tuple[str, str]] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            sentence = sentence_from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise CorpusParseError(lineno, f"malformed record ({exc})") from exc
        try:
            validate_sentence(sentence)
        except CorpusError as exc:
            exc.args = (f"line {lineno}: {exc}",)
            raise
        if sentence.key in keys:
            raise CorpusParseError(
                lineno,
                f"duplicate sentence_id {sentence.sentence_id!r} "
                f"in report {sentence.report_id!r}",
            )
        keys.add(sentence.key)
        sentences.append(sentence)
    return Corpus(tuple(sentences))


def load_corpus(path: str | os.PathLike) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus_lines(fh)


def dump_corpus_lines(corpus: Corpus) -> Iterator[str]:
    for s in corpus.sentences:
        yield json.dumps(sentence_to_dict(s), ensure_ascii=False) + "\n"


def write_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(dump_corpus_lines(corpus))


# ---------------------------------------------------------------------------
# descriptive statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    n_relations: int = 0
    n_trajectors: int = 0
    n_landmarks: int = 0
    n_diagnoses: int = 0
    n_hedges: int = 0
    n_sentences_with_indicator: int = 0
    max_indicators_per_sentence: int = 0
    n_rel_traj_land_only: int = 0
    n_rel_with_diag_no_hedge: int = 0
    n_rel_with_hedge_no_diag: int = 0
    n_rel_all_four: int = 0
    n_rel_multi_diagnosis: int = 0
    max_diagnoses_per_relation: int = 0
    avg_sentence_length_tokens: Fraction = Fraction(0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg_sentence_length_tokens"] = float(self.avg_sentence_length_tokens)
        return d


def relation_category(counts: dict[RoleLabel, int]) -> str | None:
    """Bucket a relation by which roles it carries.

    Returns one of ``"traj_land_only"``, ``"with_diag_no_hedge"``,
    ``"with_hedge_no_diag"``, ``"all_four"``, or None when the relation lacks a
    trajector or a landmark.
    """
    if not (counts[RoleLabel.TRAJECTOR] and counts[RoleLabel.LANDMARK]):
        return None
    diag, hedge = counts[RoleLabel.DIAGNOSIS] > 0, counts[RoleLabel.HEDGE] > 0
    if diag and hedge:
        return "all_four"
    if diag:
        return "with_diag_no_hedge"
    if hedge:
        return "with_hedge_no_diag"
    return "traj_land_only"


def compute_stats(corpus: Corpus, tokenizer: Callable[[str], Sequence] | None = None) -> CorpusStats:
    if tokenizer is None:
        from .preprocess import tokenize as tokenizer

    role_totals = {role: 0 for role in ROLES}
    categories = {
        "traj_land_only": 0,
        "with_diag_no_hedge": 0,
        "with_hedge_no_diag": 0,
        "all_four": 0,
    }
    n_rel = n_sent = max_ind = multi_diag = max_diag = 0
    total_tokens = 0
    for sentence in corpus.sentences:
        if not sentence.relations:
            continue
        n_sent += 1
        total_tokens += len(tokenizer(sentence.text))
        max_ind = max(max_ind, len(sentence.relations))
        for rel in sentence.relations:
            n_rel += 1
            counts = rel.role_counts()
            for role, c in counts.items():
                role_totals[role] += c
            cat = relation_category(counts)
            if cat is not None:
                categories[cat] += 1
            n_diag = counts[RoleLabel.DIAGNOSIS]
            multi_diag += n_diag > 1
            max_diag = max(max_diag, n_diag)
    return CorpusStats(
        n_relations=n_rel,
        n_trajectors=role_totals[RoleLabel.TRAJECTOR],
        n_landmarks=role_totals[RoleLabel.LANDMARK],
        n_diagnoses=role_totals[RoleLabel.DIAGNOSIS],
        n_hedges=role_totals[RoleLabel.HEDGE],
        n_sentences_with_indicator=n_sent,
        max_indicators_per_sentence=max_ind,
        n_rel_traj_land_only=categories["traj_land_only"],
        n_rel_with_diag_no_hedge=categories["with_diag_no_hedge"],
        n_rel_with_hedge_no_diag=categories["with_hedge_no_diag"],
        n_rel_all_four=categories["all_four"],
        n_rel_multi_diagnosis=multi_diag,
        max_diagnoses_per_relation=max_diag,
        avg_sentence_length_tokens=Fraction(total_tokens, n_sent) if n_sent else Fraction(0),
    )


def format_stats(stats: CorpusStats) -> str:
    rows = [
        ("Average length of sentence containing spatial relation",
         f"{float(stats.avg_sentence_length_tokens):.2f}"),
        ("Spatial Indicator", stats.n_relations),
        ("Trajector", stats.n_trajectors),
        ("Landmark", stats.n_landmarks),
        ("Diagnosis", stats.n_diagnoses),
        ("Hedge", stats.n_hedges),
        ("Sentences containing at least 1 Spatial Indicator", stats.n_sentences_with_indicator),
        ("Maximum number of Spatial Indicator in any sentence", stats.max_indicators_per_sentence),
        ("Spatial relations containing only Trajector and Landmark", stats.n_rel_traj_land_only),
        ("Spatial relations containing only Trajector, Landmark, and Diagnosis",
         stats.n_rel_with_diag_no_hedge),
        ("Spatial relations containing only Trajector, Landmark, and Hedge",
         stats.n_rel_with_hedge_no_diag),
        ("Spatial relations containing all 4 spatial roles", stats.n_rel_all_four),
        ("Spatial relations containing more than 1 Diagnosis", stats.n_rel_multi_diagnosis),
        ("Maximum Diagnosis terms associated with any spatial relation",
         stats.max_diagnoses_per_relation),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{'Parameter':<{width}} | Frequency", "-" * (width + 12)]
    lines += [f"{name:<{width}} | {value}" for name, value in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# annotator agreement
# ---------------------------------------------------------------------------

DEFAULT_LEXICON_RESOURCE = "prepositions.txt"


def load_lexicon(path: str | os.PathLike | None = None) -> frozenset[str]:
    """Read a one-token-per-line preposition lexicon (the bundled one by default)."""
    if path is None:
        text = resources.files("radsprl.data").joinpath(DEFAULT_LEXICON_RESOURCE).read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def cohen_kappa(a: Sequence[bool], b: Sequence[bool]) -> float:
    """Cohen's kappa for two annotators' binary decisions over the same candidates."""
    if len(a) != len(b):
        raise ValueError(f"decision lists differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n == 0:
        raise ValueError("no candidate decisions")
    agree = sum(bool(x) == bool(y) for x, y in zip(a, b))
    yes_a, yes_b = sum(map(bool, a)), sum(map(bool, b))
    p_o = Fraction(agree, n)
    p_e = Fraction(yes_a * yes_b + (n - yes_a) * (n - yes_b), n * n)
    if p_e == 1:
        # both annotators constant and equal
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def _matched_pairs(
    anns_a: Corpus, anns_b: Corpus
) -> list[tuple[AnnotatedSentence, AnnotatedSentence]]:
    a_map, b_map = anns_a.by_key(), anns_b.by_key()
    if a_map.keys() != b_map.keys():
        only_a = sorted(a_map.keys() - b_map.keys())[:3]
        only_b = sorted(b_map.keys() - a_map.keys())[:3]
        raise SentenceMismatchError(
            f"annotation sets cover different sentences (only in A: {only_a}, only in B: {only_b})"
        )
    pairs = []
    for key, sa in a_map.items():
        sb = b_map[key]
        if sa.text != sb.text:
            raise SentenceMismatchError(f"sentence {key} has different text in the two sets")
        pairs.append((sa, sb))
    return pairs


def indicator_decisions(
    anns_a: Corpus,
    anns_b: Corpus,
    lexicon: Iterable[str] | None = None,
    tokenizer: Callable[[str], Sequence] | None = None,
) -> tuple[list[bool], list[bool]]:
    """Yes/no indicator decisions of both annotators over every lexicon token."""
    if tokenizer is None:
        from .preprocess import tokenize as tokenizer
    lexicon = load_lexicon() if lexicon is None else frozenset(w.lower() for w in lexicon)
    dec_a: list[bool] = []
    dec_b: list[bool] = []
    for sa, sb in _matched_pairs(anns_a, anns_b):
        ind_a = [r.indicator for r in sa.relations]
        ind_b = [r.indicator for r in sb.relations]
        for tok in tokenizer(sa.text):
            if tok.text.lower() not in lexicon:
                continue
            probe = Span(tok.start, tok.end)
            dec_a.append(any(probe.overlaps(s) for s in ind_a))
            dec_b.append(any(probe.overlaps(s) for s in ind_b))
    return dec_a, dec_b


def _role_span_keys(corpus_pairs, side: int, role: RoleLabel) -> set:
    keys = set()
    for pair in corpus_pairs:
        s = pair[side]
        for rel in s.relations:
            for span in rel.spans(role):
                keys.add((s.key, rel.indicator.key, span.key))
    return keys


def _f1(n_gold: int, n_pred: int, tp: int) -> float:
    if n_gold == 0 and n_pred == 0:
        return 1.0
    if tp == 0:
        return 0.0
    p, r = tp / n_pred, tp / n_gold
    return 2 * p * r / (p + r)


def pairwise_role_f1(anns_a: Corpus, anns_b: Corpus, role: RoleLabel) -> float:
    """Exact-match F1 treating A as gold and B as prediction for one role.

    A span matches only with identical boundaries under the same indicator span
    of the same sentence. Agreement on absence (no spans on either side) is 1.0.
    """
    pairs = _matched_pairs(anns_a, anns_b)
    gold = _role_span_keys(pairs, 0, RoleLabel(role))
    pred = _role_span_keys(pairs, 1, RoleLabel(role))
    return _f1(len(gold), len(pred), len(gold & pred))


@dataclass(frozen=True)
class AgreementReport:
    kappa_indicator: float
    role_f1: dict[RoleLabel, float]
    n_candidates: int = 0

    def to_dict(self) -> dict:
        return {
            "kappa_indicator": self.kappa_indicator,
            "n_candidates": self.n_candidates,
            "role_f1": {role.value: f for role, f in self.role_f1.items()},
        }


def agreement(
    anns_a: Corpus,
    anns_b: Corpus,
    lexicon: Iterable[str] | None = None,
    tokenizer: Callable[[str], Sequence] | None = None,
) -> AgreementReport:
    dec_a, dec_b = indicator_decisions(anns_a, anns_b, lexicon, tokenizer)
    return AgreementReport(
        kappa_indicator=cohen_kappa(dec_a, dec_b),
        role_f1={role: pairwise_role_f1(anns_a, anns_b, role) for role in ROLES},
        n_candidates=len(dec_a),
    )


def format_agreement(report: AgreementReport, label: str = "All reports") -> str:
    header = ["", "Kappa", "Overall F1", "", "", ""]
    sub = ["Reports", "Sp-In", "Trajector", "Landmark", "Diagnosis", "Hedge"]
    row = [label, f"{report.kappa_indicator:.2f}"] + [
        f"{report.role_f1[role]:.2f}" for role in ROLES
    ]
    widths = [max(len(h), len(s), len(r)) for h, s, r in zip(header, sub, row)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([fmt(header), fmt(sub), "-" * (sum(widths) + 3 * (len(widths) - 1)), fmt(row)])
