import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radsprl.corpus import (
    AnnotatedSentence,
    Corpus,
    CorpusParseError,
    DuplicateIndicatorError,
    RoleLabel,
    SentenceMismatchError,
    Span,
    SpanBoundsError,
    SpatialRelation,
    agreement,
    cohen_kappa,
    compute_stats,
    dump_corpus_lines,
    format_agreement,
    format_stats,
    indicator_decisions,
    load_corpus,
    load_lexicon,
    make_corpus,
    pairwise_role_f1,
    parse_corpus_lines,
    relation_category,
    write_corpus,
)
from radsprl.synth import generate

from conftest import FIG2A, chained_sentence, fig2a_sentence, span, spine_sentence


def _line(sentence: AnnotatedSentence) -> str:
    return next(iter(dump_corpus_lines(Corpus((sentence,)))))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def test_load_single_fig2a_sentence(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(_line(fig2a_sentence()) + "\n")
    corpus = load_corpus(path)
    assert len(corpus) == 1
    (sentence,) = corpus.sentences
    assert len(sentence.relations) == 1
    rel = sentence.relations[0]
    assert rel.indicator.text == "in"
    assert [s.text for s in rel.trajectors] == ["Mild streaky opacities"]
    assert [s.text for s in rel.landmarks] == ["left lung base"]


def test_span_text_is_not_stored_on_disk():
    record = json.loads(_line(fig2a_sentence()))
    assert "text" not in record["relations"][0]["indicator"]
    assert record["text"] == FIG2A


def test_empty_file_gives_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_corpus(path)) == 0


def test_landmark_past_end_is_rejected_with_ids():
    record = json.loads(_line(fig2a_sentence("rep7", "sent3")))
    record["relations"][0]["landmarks"][0]["end"] = len(FIG2A) + 4
    with pytest.raises(SpanBoundsError, match="rep7.*sent3"):
        parse_corpus_lines([json.dumps(record)])


def test_parse_error_reports_line_number():
    good = _line(fig2a_sentence())
    with pytest.raises(CorpusParseError, match="line 2"):
        parse_corpus_lines([good, "{not json"])


def test_missing_field_is_a_parse_error():
    record = json.loads(_line(fig2a_sentence()))
    del record["relations"][0]["indicator"]
    with pytest.raises(CorpusParseError, match="line 1"):
        parse_corpus_lines([json.dumps(record)])


def test_duplicate_indicator_is_rejected():
    s = fig2a_sentence()
    dup = AnnotatedSentence(s.report_id, s.sentence_id, s.text, s.relations * 2)
    with pytest.raises(DuplicateIndicatorError):
        make_corpus([dup])


def test_overlapping_spans_in_one_role_are_rejected():
    rel = SpatialRelation(
        indicator=span(FIG2A, "in"),
        trajectors=(span(FIG2A, "Mild streaky"), span(FIG2A, "streaky opacities")),
    )
    with pytest.raises(ValueError):
        make_corpus([AnnotatedSentence("r", "s", FIG2A, (rel,))])


def test_duplicate_sentence_ids_within_a_report_are_rejected():
    with pytest.raises(ValueError):
        make_corpus([fig2a_sentence("r", "s"), spine_sentence("r", "s")])


def test_shared_span_across_relations_is_allowed():
    corpus = make_corpus([chained_sentence()])
    r1, r2 = corpus.sentences[0].relations
    assert r1.landmarks[0] == r2.trajectors[0]


def test_write_then_load_round_trip(tmp_path):
    corpus = make_corpus([fig2a_sentence(), spine_sentence(), chained_sentence()])
    path = tmp_path / "out.jsonl"
    write_corpus(corpus, path)
    assert load_corpus(path) == corpus


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 30))
def test_round_trip_on_generated_corpora(seed, n):
    corpus, _ = generate(n, seed)
    assert parse_corpus_lines(list(dump_corpus_lines(corpus))) == corpus


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def test_stats_of_empty_corpus_are_zero():
    stats = compute_stats(Corpus())
    assert all(v == 0 for v in stats.to_dict().values())


def test_stats_by_hand():
    diag_text = "Opacity in the left base which may represent atelectasis or pneumonia"
    rel = SpatialRelation(
        indicator=span(diag_text, "in"),
        trajectors=(span(diag_text, "Opacity"),),
        landmarks=(span(diag_text, "left base"),),
        diagnoses=(span(diag_text, "atelectasis"), span(diag_text, "pneumonia")),
        hedges=(span(diag_text, "may represent"),),
    )
    corpus = make_corpus(
        [
            fig2a_sentence(),
            chained_sentence(),
            AnnotatedSentence("r3", "s1", diag_text, (rel,)),
            AnnotatedSentence("r3", "s2", "No acute findings", ()),
        ]
    )
    stats = compute_stats(corpus)
    assert stats.n_relations == 4
    assert stats.n_trajectors == 4
    assert stats.n_landmarks == 4
    assert stats.n_diagnoses == 2
    assert stats.n_hedges == 1
    assert stats.n_sentences_with_indicator == 3
    assert stats.max_indicators_per_sentence == 2
    assert stats.n_rel_traj_land_only == 3
    assert stats.n_rel_all_four == 1
    assert stats.n_rel_with_diag_no_hedge == 0
    assert stats.n_rel_multi_diagnosis == 1
    assert stats.max_diagnoses_per_relation == 2
    # 10 + 12 + 11 tokens over the three sentences with relations
    assert stats.avg_sentence_length_tokens == Fraction(33, 3)
    table = format_stats(stats)
    assert "Spatial relations containing all 4 spatial roles" in table


def test_stats_are_permutation_invariant():
    corpus, _ = generate(40, 5)
    flipped = Corpus(tuple(reversed(corpus.sentences)))
    assert compute_stats(corpus) == compute_stats(flipped)


def test_relation_category_requires_trajector_and_landmark():
    counts = {r: 0 for r in RoleLabel}
    counts[RoleLabel.TRAJECTOR] = 1
    assert relation_category(counts) is None
    counts[RoleLabel.LANDMARK] = 2
    assert relation_category(counts) == "traj_land_only"
    counts[RoleLabel.HEDGE] = 1
    assert relation_category(counts) == "with_hedge_no_diag"
    counts[RoleLabel.DIAGNOSIS] = 1
    assert relation_category(counts) == "all_four"


# ---------------------------------------------------------------------------
# agreement
# ---------------------------------------------------------------------------


Y, N = True, False


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([Y, N, Y, N], [Y, N, Y, N], 1.0),
        ([Y, Y, N, N], [Y, N, Y, N], 0.0),
        ([Y, Y, Y, N], [Y, Y, N, N], 0.5),
    ],
)
def test_kappa_fixtures(a, b, expected):
    assert cohen_kappa(a, b) == pytest.approx(expected, abs=1e-12)


def test_kappa_is_one_when_chance_agreement_is_total():
    assert cohen_kappa([Y, Y, Y], [Y, Y, Y]) == 1.0


def test_kappa_errors():
    with pytest.raises(ValueError):
        cohen_kappa([Y], [Y, N])
    with pytest.raises(ValueError):
        cohen_kappa([], [])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
def test_kappa_is_symmetric_and_bounded(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    k = cohen_kappa(a, b)
    assert k == pytest.approx(cohen_kappa(b, a), abs=1e-15)
    assert -1.0 <= k <= 1.0


def _with_trajectors(spans):
    s = fig2a_sentence()
    rel = SpatialRelation(indicator=s.relations[0].indicator, trajectors=tuple(spans))
    return make_corpus([AnnotatedSentence(s.report_id, s.sentence_id, s.text, (rel,))])


def test_role_f1_identical_is_one():
    a = make_corpus([fig2a_sentence(), chained_sentence()])
    for role in RoleLabel:
        assert pairwise_role_f1(a, a, role) == 1.0


def test_role_f1_spurious_span():
    a = _with_trajectors([span(FIG2A, "Mild"), span(FIG2A, "opacities")])
    b = _with_trajectors([span(FIG2A, "Mild"), span(FIG2A, "opacities"), span(FIG2A, "present")])
    assert pairwise_role_f1(a, b, RoleLabel.TRAJECTOR) == pytest.approx(0.8)
    assert pairwise_role_f1(b, a, RoleLabel.TRAJECTOR) == pytest.approx(0.8)


def test_role_f1_shifted_spans_is_zero():
    a = _with_trajectors([span(FIG2A, "streaky")])
    shifted = Span.from_text(FIG2A, a.sentences[0].relations[0].trajectors[0].start + 1,
                             a.sentences[0].relations[0].trajectors[0].end + 1)
    b = _with_trajectors([shifted])
    assert pairwise_role_f1(a, b, RoleLabel.TRAJECTOR) == 0.0


def test_role_f1_sentence_mismatch():
    with pytest.raises(SentenceMismatchError):
        pairwise_role_f1(make_corpus([fig2a_sentence()]), make_corpus([spine_sentence()]), RoleLabel.TRAJECTOR)


def test_default_lexicon_contains_required_prepositions():
    lex = load_lexicon()
    for word in "in of within at near on with between around along above below behind".split():
        assert word in lex


def test_indicator_decisions_cover_lexicon_tokens():
    a = make_corpus([chained_sentence()])
    dec_a, dec_b = indicator_decisions(a, a)
    # "in" and "above" are both prepositions and both indicators
    assert dec_a == dec_b == [True, True]


def test_agreement_identical_corpora():
    a = make_corpus([fig2a_sentence(), spine_sentence(), chained_sentence()])
    report = agreement(a, a)
    assert report.kappa_indicator == 1.0
    assert all(v == 1.0 for v in report.role_f1.values())
    assert "Kappa" in format_agreement(report)
