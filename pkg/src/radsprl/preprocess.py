"""Tokenization, sentence splitting, per-indicator instance expansion and BIO coding."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence, TextIO

from .corpus import (
    ROLE_FIELDS,
    ROLES,
    AnnotatedSentence,
    Corpus,
    CorpusError,
    RoleLabel,
    Span,
    SpatialRelation,
)

log = logging.getLogger(__name__)

PUNCT = frozenset(".,;:()/?")

O = "O"
INDICATOR = "INDICATOR"
B_INDICATOR = "B-INDICATOR"
I_INDICATOR = "I-INDICATOR"

ROLE_LABELS: tuple[str, ...] = (O, INDICATOR) + tuple(
    f"{prefix}-{role.value}" for role in ROLES for prefix in ("B", "I")
)
INDICATOR_LABELS: tuple[str, ...] = (O, B_INDICATOR, I_INDICATOR)

TASKS = ("roles", "indicator")


def label_set(task: str) -> tuple[str, ...]:
    if task == "roles":
        return ROLE_LABELS
    if task == "indicator":
        return INDICATOR_LABELS
    raise ValueError(f"unknown task {task!r}")


class AlignmentError(CorpusError):
    pass


class OverlappingRolesError(CorpusError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


Tokenizer = Callable[[str], Sequence[Token]]


def tokenize(text: str) -> list[Token]:
    """Whitespace split, then peel punctuation off both ends of each chunk."""
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", text):
        start, end = m.start(), m.end()
        head: list[Token] = []
        tail: list[Token] = []
        while start < end and text[start] in PUNCT:
            head.append(Token(text[start], start, start + 1))
            start += 1
        while end > start and text[end - 1] in PUNCT:
            tail.append(Token(text[end - 1], end - 1, end))
            end -= 1
        tokens.extend(head)
        if start < end:
            tokens.append(Token(text[start:end], start, end))
        tokens.extend(reversed(tail))
    return tokens


ABBREVIATIONS = frozenset(
    ["dr.", "mr.", "mrs.", "ms.", "a.m.", "p.m.", "e.g.", "i.e.", "vs.", "approx.", "st.", "no.", "fig."]
)

_BOUNDARY = re.compile(r"[.?](?=\s+[A-Z0-9])")


def split_sentences(report_text: str) -> list[tuple[str, int, int]]:
    """Split a report into ``(sentence, start, end)`` triples.

    A boundary is a period or question mark followed by whitespace and an
    uppercase letter or digit, unless the word ending there is a known
    abbreviation.
    """
    out: list[tuple[str, int, int]] = []
    start = 0
    for m in _BOUNDARY.finditer(report_text):
        end = m.end()
        word_start = end
        while word_start > 0 and not report_text[word_start - 1].isspace():
            word_start -= 1
        if report_text[word_start:end].lower() in ABBREVIATIONS:
            continue
        out.append((start, end))
        start = end
    out.append((start, len(report_text)))
    result = []
    for s, e in out:
        while s < e and report_text[s].isspace():
            s += 1
        while e > s and report_text[e - 1].isspace():
            e -= 1
        if s < e:
            result.append((report_text[s:e], s, e))
    return result


# ---------------------------------------------------------------------------
# alignment and BIO coding
# ---------------------------------------------------------------------------


@dataclass
class AlignmentStats:
    """Counts spans that had to be widened to token boundaries."""

    snapped: int = 0

    def reset(self) -> None:
        self.snapped = 0


alignment_stats = AlignmentStats()


def align_span(tokens: Sequence[Token], span: Span) -> tuple[int, int]:
    """Map a character span to an inclusive-exclusive token index range.

    Boundaries falling inside a token widen the span to cover that token.
    """
    hit = [i for i, t in enumerate(tokens) if t.start < span.end and span.start < t.end]
    if not hit:
        raise AlignmentError(
            f"span [{span.start}, {span.end}) {span.text!r} does not overlap any token"
        )
    first, last = hit[0], hit[-1]
    if tokens[first].start != span.start or tokens[last].end != span.end:
        alignment_stats.snapped += 1
        log.warning(
            "span [%d, %d) %r snapped to token boundaries [%d, %d)",
            span.start, span.end, span.text, tokens[first].start, tokens[last].end,
        )
    return first, last + 1


def bio_encode(
    tokens: Sequence[Token], relation: SpatialRelation, task: str = "roles"
) -> list[str]:
    """Label tokens for one relation: B-/I- role tags plus INDICATOR on the trigger."""
    labels = [O] * len(tokens)
    owner: list[str | None] = [None] * len(tokens)

    def claim(i: int, j: int, name: str, first: str, rest: str) -> None:
        for k in range(i, j):
            if owner[k] is not None:
                raise OverlappingRolesError(
                    f"token {tokens[k].text!r} at {tokens[k].start} claimed by both "
                    f"{owner[k]} and {name}"
                )
            owner[k] = name
            labels[k] = first if k == i else rest

    i, j = align_span(tokens, relation.indicator)
    if task == "roles":
        claim(i, j, "indicator", INDICATOR, INDICATOR)
        for role in ROLES:
            for span in relation.spans(role):
                a, b = align_span(tokens, span)
                claim(a, b, role.value, f"B-{role.value}", f"I-{role.value}")
    else:
        claim(i, j, "indicator", B_INDICATOR, I_INDICATOR)
    return labels


def _reconstruct(tokens: Sequence[Token], start_tok: int, end_tok: int, text: str | None) -> Span:
    start, end = tokens[start_tok].start, tokens[end_tok - 1].end
    if text is not None:
        return Span(start, end, text[start:end])
    pieces = []
    pos = start
    for t in tokens[start_tok:end_tok]:
        pieces.append(" " * (t.start - pos) + t.text)
        pos = t.end
    return Span(start, end, "".join(pieces))


@dataclass
class DecodedSpans:
    roles: dict[RoleLabel, list[Span]] = field(default_factory=lambda: {r: [] for r in ROLES})
    indicators: list[Span] = field(default_factory=list)


def bio_decode(
    tokens: Sequence[Token], labels: Sequence[str], text: str | None = None
) -> DecodedSpans:
    """Turn a label sequence back into spans.

    An I-X that does not continue a B-X/I-X run opens a new X span. INDICATOR
    runs (and B-/I-INDICATOR runs) come back in ``indicators``.
    """
    if len(tokens) != len(labels):
        raise ValueError(f"{len(tokens)} tokens but {len(labels)} labels")
    out = DecodedSpans()
    runs: list[tuple[str, int, int]] = []
    current: str | None = None
    for k, label in enumerate(labels):
        if label == O:
            current = None
            continue
        if label == INDICATOR:
            kind, begins = "INDICATOR", current != "INDICATOR"
        else:
            prefix, _, kind = label.partition("-")
            begins = prefix == "B" or current != kind
        if begins:
            runs.append((kind, k, k + 1))
        else:
            kind_, a, _ = runs[-1]
            runs[-1] = (kind_, a, k + 1)
        current = kind
    for kind, a, b in runs:
        span = _reconstruct(tokens, a, b, text)
        if kind == "INDICATOR":
            out.indicators.append(span)
        else:
            out.roles[RoleLabel(kind)].append(span)
    return out


def relation_from_decoded(indicator: Span, decoded: DecodedSpans) -> SpatialRelation:
    return SpatialRelation(
        indicator=indicator,
        **{ROLE_FIELDS[role]: tuple(decoded.roles[role]) for role in ROLES},
    )


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    tokens: tuple[Token, ...]
    labels: tuple[str, ...]
    indicator_flags: tuple[int, ...]
    # (report_id, sentence_id, (indicator start, end)); indicator is None for
    # sentence-level indicator-task instances
    source: tuple[str, str, tuple[int, int] | None]
    text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def indicator(self) -> Span | None:
        ind = self.source[2]
        if ind is None:
            return None
        return Span(ind[0], ind[1], self.text[ind[0] : ind[1]])

    def gold_relation(self) -> SpatialRelation:
        return relation_from_decoded(self.indicator, bio_decode(self.tokens, self.labels, self.text))


def expand_instances(
    sentence: AnnotatedSentence, tokenizer: Tokenizer = tokenize
) -> list[Instance]:
    """One role-task instance per spatial relation of the sentence."""
    if not sentence.relations:
        return []
    tokens = tuple(tokenizer(sentence.text))
    out = []
    for rel in sentence.relations:
        try:
            labels = bio_encode(tokens, rel)
        except CorpusError as exc:
            raise type(exc)(
                f"report {sentence.report_id!r} sentence {sentence.sentence_id!r}: {exc}"
            ) from exc
        flags = tuple(int(lab == INDICATOR) for lab in labels)
        out.append(
            Instance(
                tokens=tokens,
                labels=tuple(labels),
                indicator_flags=flags,
                source=(sentence.report_id, sentence.sentence_id, rel.indicator.key),
                text=sentence.text,
            )
        )
    return out


def indicator_instance(sentence: AnnotatedSentence, tokenizer: Tokenizer = tokenize) -> Instance:
    """Sentence-level instance tagging every indicator with B-/I-INDICATOR."""
    tokens = tuple(tokenizer(sentence.text))
    labels = [O] * len(tokens)
    for rel in sentence.relations:
        for k, lab in enumerate(bio_encode(tokens, rel, task="indicator")):
            if lab != O:
                if labels[k] != O:
                    raise OverlappingRolesError(
                        f"report {sentence.report_id!r} sentence {sentence.sentence_id!r}: "
                        "overlapping indicators"
                    )
                labels[k] = lab
    return Instance(
        tokens=tokens,
        labels=tuple(labels),
        indicator_flags=(0,) * len(tokens),
        source=(sentence.report_id, sentence.sentence_id, None),
        text=sentence.text,
    )


def expand_corpus(
    corpus: Corpus,
    tokenizer: Tokenizer = tokenize,
    task: str = "roles",
    strict: bool = True,
) -> list[Instance]:
    """Expand every sentence; with ``strict=False`` unalignable sentences are skipped."""
    out: list[Instance] = []
    skipped = 0
    for sentence in corpus.sentences:
        try:
            if task == "roles":
                out.extend(expand_instances(sentence, tokenizer))
            else:
                # sentences without relations are negatives for indicator detection
                out.append(indicator_instance(sentence, tokenizer))
        except CorpusError as exc:
            if strict:
                raise
            skipped += 1
            log.warning("skipping sentence: %s", exc)
    if skipped:
        log.warning("skipped %d sentences that could not be aligned", skipped)
    return out


def count_unique_indicator_positions(corpus: Corpus) -> int:
    return len(
        {(s.key, r.indicator.key) for s in corpus.sentences for r in s.relations}
    )


# ---------------------------------------------------------------------------
# two-column text format
# ---------------------------------------------------------------------------


def write_two_column(instances: Iterable[Instance], fh: TextIO) -> None:
    for inst in instances:
        ind = inst.source[2]
        if ind is not None:
            fh.write(f"#indicator={ind[0]},{ind[1]}\n")
        for tok, lab in zip(inst.tokens, inst.labels):
            fh.write(f"{tok.text}\t{lab}\n")
        fh.write("\n")


def read_two_column(fh: TextIO) -> Iterator[tuple[tuple[int, int] | None, list[str], list[str]]]:
    """Yield ``(indicator offsets, tokens, labels)`` blocks."""
    indicator = None
    toks: list[str] = []
    labs: list[str] = []
    for lineno, raw in enumerate(fh, 1):
        line = raw.rstrip("\n")
        if not line:
            if toks:
                yield indicator, toks, labs
            indicator, toks, labs = None, [], []
        elif line.startswith("#indicator="):
            a, b = line[len("#indicator="):].split(",")
            indicator = (int(a), int(b))
        else:
            try:
                tok, lab = line.split("\t")
            except ValueError:
                raise ValueError(f"line {lineno}: expected token<TAB>label") from None
            toks.append(tok)
            labs.append(lab)
    if toks:
        yield indicator, toks, labs


def label_counts(instances: Iterable[Instance]) -> Counter:
    return Counter(lab for inst in instances for lab in inst.labels)
