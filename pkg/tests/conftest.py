import re

import numpy as np
import pytest

from radsprl.corpus import AnnotatedSentence, Span, SpatialRelation
from radsprl.tagger import TaggerConfig


def span(text: str, phrase: str, occurrence: int = 0) -> Span:
    """Character span of the ``occurrence``-th whole-word appearance of ``phrase``."""
    matches = list(re.finditer(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", text))
    m = matches[occurrence]
    return Span.from_text(text, m.start(), m.end())


FIG2A = "Mild streaky opacities are present in the left lung base"
SPINE = "Minimal degenerative changes of the thoracic spine"
CHAIN = "Scarring is seen in the right lung apex above the left clavicle"


def fig2a_sentence(report="r1", sid="s1") -> AnnotatedSentence:
    rel = SpatialRelation(
        indicator=span(FIG2A, "in"),
        trajectors=(span(FIG2A, "Mild streaky opacities"),),
        landmarks=(span(FIG2A, "left lung base"),),
    )
    return AnnotatedSentence(report, sid, FIG2A, (rel,))


def spine_sentence(report="r1", sid="s2") -> AnnotatedSentence:
    rel = SpatialRelation(
        indicator=span(SPINE, "of"),
        trajectors=(span(SPINE, "Minimal degenerative changes"),),
        landmarks=(span(SPINE, "thoracic spine"),),
    )
    return AnnotatedSentence(report, sid, SPINE, (rel,))


def chained_sentence(report="r2", sid="s1") -> AnnotatedSentence:
    apex = span(CHAIN, "right lung apex")
    r1 = SpatialRelation(
        indicator=span(CHAIN, "in"),
        trajectors=(span(CHAIN, "Scarring"),),
        landmarks=(apex,),
    )
    r2 = SpatialRelation(
        indicator=span(CHAIN, "above"),
        trajectors=(apex,),
        landmarks=(span(CHAIN, "left clavicle"),),
    )
    return AnnotatedSentence(report, sid, CHAIN, (r1, r2))


@pytest.fixture
def small_config() -> TaggerConfig:
    return TaggerConfig(
        word_dim=8, char_dim=6, char_hidden=5, ind_dim=3, lstm_hidden=10, max_epochs=3, batch_size=4
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

# (criterion, outcome, detail) tuples appended by tests/test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{outcome:4}  {name}: {detail}")
