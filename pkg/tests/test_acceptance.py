"""Acceptance criteria, one test per criterion.

Each test records a PASS or FAIL line that is printed in the
"acceptance criteria" section at the end of the pytest run. The real-corpus
criterion runs only when ``RADSPRL_REAL_CORPUS`` points at the annotated
corpus in JSON-lines form.
"""

import contextlib
import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from radsprl import crf
from radsprl.cli import main as cli_main
from radsprl.corpus import ROLES, RoleLabel, Span, SpatialRelation, cohen_kappa, compute_stats, load_corpus
from radsprl.evaluation import cross_validate
from radsprl.nn import AdamState, adam_step, clip_global_norm, grad_check
from radsprl.preprocess import bio_decode, bio_encode, expand_corpus, tokenize
from radsprl.scoring import exact_match
from radsprl.synth import generate, generate_relations
from radsprl.tagger import (
    TaggerConfig,
    check_gradients,
    decode_labels,
    encode,
    gold_ids,
    init_model,
    loss_and_grad,
    make_batch,
)
from radsprl.vocab import build_vocab

from conftest import ACCEPTANCE_RESULTS, FIG2A, fig2a_sentence, span

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(name: str):
    """Record PASS with the collected details, or FAIL with the assertion message."""
    details: list[str] = []
    start = time.perf_counter()
    try:
        yield details
    except pytest.skip.Exception as exc:
        ACCEPTANCE_RESULTS.append((name, "SKIP", str(exc.msg)))
        raise
    except BaseException as exc:
        ACCEPTANCE_RESULTS.append((name, "FAIL", f"{type(exc).__name__}: {exc}".splitlines()[0]))
        raise
    details.append(f"{time.perf_counter() - start:.1f}s")
    ACCEPTANCE_RESULTS.append((name, "PASS", "; ".join(details)))


# ---------------------------------------------------------------------------


def test_crf_oracle_equivalence():
    with criterion("CRF oracle equivalence (500 cases)") as info:
        rng = np.random.default_rng(20240)
        start = time.perf_counter()
        worst_z = worst_v = 0.0
        for _ in range(500):
            n, L = int(rng.integers(1, 7)), int(rng.integers(1, 11))
            E = rng.normal(0, 2, (n, L))
            T = crf.init_transitions(L)
            T[:L, :L] = rng.normal(0, 2, (L, L))
            T[L, :L] = rng.normal(0, 2, L)
            T[:L, L + 1] = rng.normal(0, 2, L)
            worst_z = max(worst_z, abs(crf.log_partition(E, T) - crf.brute_force_partition(E, T)))
            worst_v = max(worst_v, abs(crf.viterbi(E, T)[1] - crf.brute_force_decode(E, T)[1]))
        elapsed = time.perf_counter() - start
        info += [f"max |logZ diff| {worst_z:.1e}", f"max |viterbi diff| {worst_v:.1e}"]
        assert worst_z < 1e-6
        assert worst_v < 1e-9
        assert elapsed < 30


def test_gradient_correctness():
    with criterion("Gradient correctness (full tagger and CRF)") as info:
        start = time.perf_counter()
        result = check_gradients(TaggerConfig(), seed=0, n_samples=200)
        info.append(f"tagger max rel err {result.max_error:.1e} over {sum(result.n_checked.values())} coords")
        assert result.max_error < 1e-4, result.per_group
        assert min(result.n_checked.values()) >= 1
        for group in ("sent_fwd.W", "sent_bwd.W", "char_fwd.W", "char_bwd.W", "proj.W"):
            assert result.n_checked[group] >= 200, group

        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            n, L = int(rng.integers(1, 7)), int(rng.integers(2, 11))
            E = rng.normal(size=(n, L))
            T = crf.init_transitions(L)
            free = ~crf.fixed_mask(L)
            T[free] = rng.normal(size=int(free.sum()))
            gold = list(rng.integers(0, L, n))
            _, dE, dT = crf.nll_and_grad(E, T, gold)
            res = grad_check(
                lambda: crf.nll_loss(E, T, gold),
                {"E": E, "T": T},
                {"E": dE, "T": dT},
                eps=1e-3,
                pools={"T": np.flatnonzero(free.ravel())},
                rng=rng,
                stencil=4,
            )
            worst = max(worst, res.max_error)
        info.append(f"CRF max rel err {worst:.1e}")
        assert worst < 1e-6
        assert time.perf_counter() - start < 120


def _random_alignable_relation(rng):
    n = int(rng.integers(2, 16))
    words = ["".join(rng.choice(list("abcdefghij"), size=int(rng.integers(1, 7)))) for _ in range(n)]
    text = " ".join(words)
    starts = np.cumsum([0] + [len(w) + 1 for w in words[:-1]])
    cuts = sorted(set(rng.integers(1, n, size=int(rng.integers(0, n))).tolist()))
    bounds = [0, *cuts, n]
    runs = list(zip(bounds, bounds[1:]))

    def run_span(a, b):
        return Span.from_text(text, int(starts[a]), int(starts[b - 1]) + len(words[b - 1]))

    ind = int(rng.integers(len(runs)))
    roles = {r: [] for r in ROLES}
    for k, (a, b) in enumerate(runs):
        choice = int(rng.integers(len(ROLES) + 1))
        if k != ind and choice < len(ROLES):
            roles[ROLES[choice]].append(run_span(a, b))
    rel = SpatialRelation(
        indicator=run_span(*runs[ind]),
        trajectors=tuple(roles[RoleLabel.TRAJECTOR]),
        landmarks=tuple(roles[RoleLabel.LANDMARK]),
        diagnoses=tuple(roles[RoleLabel.DIAGNOSIS]),
        hedges=tuple(roles[RoleLabel.HEDGE]),
    )
    return text, rel


def test_bio_round_trip():
    with criterion("BIO round trip (1000 relations)") as info:
        rng = np.random.default_rng(1000)
        failures = 0
        for _ in range(1000):
            text, rel = _random_alignable_relation(rng)
            toks = tokenize(text)
            decoded = bio_decode(toks, bio_encode(toks, rel), text)
            ok = decoded.indicators == [rel.indicator] and all(
                decoded.roles[r] == list(rel.spans(r)) for r in ROLES
            )
            failures += not ok
        info.append(f"{failures} failures")
        assert failures == 0


def test_scorer_fixtures():
    with criterion("Scorer fixtures") as info:
        text = "Opacities and nodules in the left base near the hilum"
        ind = span(text, "in")
        gold = SpatialRelation(ind, trajectors=(span(text, "Opacities"), span(text, "nodules")),
                               landmarks=(span(text, "left base"),))
        same = exact_match([gold], [gold]).overall
        assert (same.precision, same.recall, same.f1) == (1.0, 1.0, 1.0)

        g = fig2a_sentence().relations[0]
        p = replace(g, trajectors=(span(FIG2A, "streaky opacities"),))
        traj = exact_match([g], [p]).roles[RoleLabel.TRAJECTOR]
        assert (traj.tp, traj.fp, traj.fn) == (0, 1, 1)

        wrong = replace(gold, landmarks=(span(text, "hilum"),))
        overall = exact_match([gold], [wrong]).overall
        assert (overall.tp, overall.fp, overall.fn) == (2, 1, 1)
        assert overall.precision == overall.recall == overall.f1 == 2 / 3

        full = SpatialRelation(ind, trajectors=gold.trajectors, landmarks=gold.landmarks,
                               diagnoses=(span(text, "hilum"),), hedges=(span(text, "the", 1),))
        per_role = exact_match([full], [full]).roles
        assert all(per_role[r].f1 == 1.0 for r in ROLES)
        info.append("3 fixtures exact, gold vs gold 1.0 on every role")


def test_agreement_fixtures():
    with criterion("Agreement fixtures (Cohen's kappa)") as info:
        Y, N = True, False
        cases = [
            ([Y, N, Y, N], [Y, N, Y, N], 1.0),
            ([Y, Y, N, N], [Y, N, Y, N], 0.0),
            ([Y, Y, Y, N], [Y, Y, N, N], 0.5),
        ]
        for a, b, expected in cases:
            assert abs(cohen_kappa(a, b) - expected) <= 1e-12
        info.append("kappa 1.0, 0.0, 0.5 to 1e-12")


def test_memorization():
    with criterion("Memorization sanity (10 instances)") as info:
        start = time.perf_counter()
        corpus, _ = generate_relations(10, 42)
        insts = expand_corpus(corpus)
        assert len(insts) == 10
        cfg = TaggerConfig(lr=0.01)
        words, chars = build_vocab(insts)
        model = init_model(cfg, words, chars, np.random.default_rng(0))
        batch = make_batch([encode(model, i) for i in insts], [gold_ids(model, i) for i in insts])
        state = AdamState(lr=cfg.lr, decay=cfg.lr_decay)
        drop_rng = np.random.default_rng(1)
        gold = [list(i.labels) for i in insts]
        memorized_at = None
        for epoch in range(1, 201):
            _, grads = loss_and_grad(model, batch, training=True, rng=drop_rng)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state)
            state.next_epoch()
            if decode_labels(model, insts) == gold:
                memorized_at = epoch
                break
        elapsed = time.perf_counter() - start
        info.append(f"all 10 reproduced after epoch {memorized_at}")
        assert memorized_at is not None
        assert elapsed < 60


@pytest.mark.slow
def test_synthetic_cross_validation():
    with criterion("End-to-end synthetic CV (600 instances, seed 42)") as info:
        start = time.perf_counter()
        corpus, _ = generate_relations(600, 42)
        report = cross_validate(corpus, TaggerConfig(), k=10, seed=42)
        elapsed = time.perf_counter() - start
        overall = report.overall_mean()
        roles = report.role_means()
        info += [
            f"overall F1 {overall.f1:.4f}",
            f"trajector F1 {roles[RoleLabel.TRAJECTOR].f1:.4f}",
            f"landmark F1 {roles[RoleLabel.LANDMARK].f1:.4f}",
        ]
        assert not [f.fold for f in report.folds if f.error]
        assert overall.f1 >= 0.95
        assert roles[RoleLabel.TRAJECTOR].f1 >= 0.90
        assert roles[RoleLabel.LANDMARK].f1 >= 0.90
        assert elapsed < 15 * 60, f"took {elapsed:.0f}s"


def test_statistics_oracle():
    with criterion("Statistics oracle (10 seeds)") as info:
        for seed in range(10):
            corpus, tally = generate(300, seed)
            assert compute_stats(corpus) == tally.as_stats(), f"seed {seed}"
        info.append("compute_stats equals generator tally")


def test_cv_determinism(tmp_path, capsys):
    with criterion("Determinism of cv report JSON") as info:
        corpus = tmp_path / "c.jsonl"
        assert cli_main(["synth", "--output", str(corpus), "--n", "120", "--relations", "--seed", "42"]) == 0
        small = ["--word-dim", "16", "--char-dim", "8", "--char-hidden", "8", "--lstm-hidden", "16",
                 "--max-epochs", "2", "--seed", "42"]
        blobs = []
        for name in ("first", "second"):
            out = tmp_path / f"{name}.json"
            assert cli_main(["cv", "--corpus", str(corpus), "--output", str(out), "--with-indicator", *small]) == 0
            blobs.append(out.read_bytes())
        capsys.readouterr()
        assert blobs[0] == blobs[1]
        info.append(f"two 10-fold runs byte-identical ({len(blobs[0])} bytes)")


REFERENCE_F1 = {
    RoleLabel.TRAJECTOR: 0.9028,
    RoleLabel.LANDMARK: 0.9461,
    RoleLabel.DIAGNOSIS: 0.7147,
    RoleLabel.HEDGE: 0.7327,
}


@pytest.mark.slow
def test_real_corpus_conditional(tmp_path):
    with criterion("Real corpus (conditional)") as info:
        path = os.environ.get("RADSPRL_REAL_CORPUS")
        if not path:
            pytest.skip("RADSPRL_REAL_CORPUS not set; the annotated corpus is distributed on request only")
        corpus = load_corpus(path)
        n_rel = compute_stats(corpus).n_relations
        n_inst = len(expand_corpus(corpus))
        info.append(f"{n_rel} relations, {n_inst} instances (reference 1972 / 1867)")
        assert n_inst == n_rel
        report = cross_validate(corpus, TaggerConfig(), k=10, seed=0, with_indicator=True)
        roles = report.role_means()
        for role, target in REFERENCE_F1.items():
            assert abs(roles[role].f1 - target) <= 0.03, f"{role.value} F1 {roles[role].f1:.4f}"
        assert abs(report.overall_mean().f1 - 0.8922) <= 0.03
        assert abs(report.indicator_mean().f1 - 0.8782) <= 0.03
