"""Bi-LSTM-CRF tagger: character Bi-LSTM word features, word and indicator
embeddings, a sentence Bi-LSTM, a linear emission layer and a CRF.

Mini-batches are run through the network together, padded and masked; the
masking leaves each instance's loss and gradient exactly what it would be on
its own.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import crf
from .corpus import AnnotatedSentence, Corpus, Span, SpatialRelation
from .nn import (
    AdamState,
    LSTMParams,
    adam_step,
    bilstm_forward,
    bilstm_backward,
    clip_global_norm,
    GradCheckResult,
    dropout_mask,
    glorot_uniform,
    grad_check,
)
from .preprocess import (
    INDICATOR,
    expand_instances,
    indicator_instance,
    O,
    Instance,
    Token,
    align_span,
    bio_decode,
    label_set,
    relation_from_decoded,
    tokenize,
)
from .scoring import PRF, RoleScores, exact_match, span_match
from .vocab import (
    PAD_ID,
    EmbeddingTable,
    TokenEncoding,
    Vocabulary,
    build_vocab,
    encode_instance,
    load_pretrained,
    random_table,
)

log = logging.getLogger(__name__)


@dataclass
class TaggerConfig:
    word_dim: int = 100
    char_dim: int = 100
    char_hidden: int = 50
    ind_dim: int = 5
    lstm_hidden: int = 250
    dropout: float = 0.5
    lr: float = 0.01
    lr_decay: float = 0.99
    max_epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    task: str = "roles"
    bio_constraints: bool = False
    min_freq: int = 1
    clip_norm: float = 5.0
    patience: int | None = None

    def validate(self) -> "TaggerConfig":
        for name in ("word_dim", "char_dim", "char_hidden", "ind_dim", "lstm_hidden", "batch_size", "min_freq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.task not in ("roles", "indicator"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TaggerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingDivergedError(FloatingPointError):
    pass


class MissingIndicatorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

LSTM_GROUPS = ("char_fwd", "char_bwd", "sent_fwd", "sent_bwd")


class TaggerModel:
    def __init__(
        self,
        config: TaggerConfig,
        word_vocab: Vocabulary,
        char_vocab: Vocabulary,
        params: dict[str, np.ndarray],
    ):
        self.config = config
        self.word_vocab = word_vocab
        self.char_vocab = char_vocab
        self.labels = label_set(config.task)
        self.label_index = {lab: i for i, lab in enumerate(self.labels)}
        self.params = params
        L = len(self.labels)
        forbidden = crf.bio_forbidden(self.labels) if config.bio_constraints else None
        self.frozen_transitions = crf.fixed_mask(L, forbidden)
        self._check_shapes()

    @property
    def uses_indicator(self) -> bool:
        return self.config.task == "roles"

    def lstm(self, group: str) -> LSTMParams:
        p = self.params
        return LSTMParams(p[f"{group}.W"], p[f"{group}.U"], p[f"{group}.b"])

    def tables(self) -> dict[str, EmbeddingTable]:
        out = {
            "word": EmbeddingTable(self.params["word_emb"]),
            "char": EmbeddingTable(self.params["char_emb"]),
        }
        if self.uses_indicator:
            out["indicator"] = EmbeddingTable(self.params["ind_emb"])
        return out

    def input_dim(self) -> int:
        c = self.config
        return c.word_dim + 2 * c.char_hidden + (c.ind_dim if self.uses_indicator else 0)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        L = len(self.labels)
        shapes: dict[str, tuple[int, ...]] = {
            "word_emb": (len(self.word_vocab), c.word_dim),
            "char_emb": (len(self.char_vocab), c.char_dim),
        }
        if self.uses_indicator:
            shapes["ind_emb"] = (2, c.ind_dim)
        for group, d, h in (
            ("char_fwd", c.char_dim, c.char_hidden),
            ("char_bwd", c.char_dim, c.char_hidden),
            ("sent_fwd", self.input_dim(), c.lstm_hidden),
            ("sent_bwd", self.input_dim(), c.lstm_hidden),
        ):
            shapes[f"{group}.W"] = (4 * h, d)
            shapes[f"{group}.U"] = (4 * h, h)
            shapes[f"{group}.b"] = (4 * h,)
        shapes["proj.W"] = (2 * c.lstm_hidden, L)
        shapes["proj.b"] = (L,)
        shapes["transitions"] = (L + 2, L + 2)
        return shapes

    def _check_shapes(self) -> None:
        expected = self.expected_shapes()
        if list(expected) != list(self.params):
            raise ValueError(f"parameter names {list(self.params)} != {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(
    config: TaggerConfig,
    word_vocab: Vocabulary,
    char_vocab: Vocabulary,
    rng: np.random.Generator,
    pretrained: str | os.PathLike | None = None,
) -> TaggerModel:
    c = config.validate()
    L = len(label_set(c.task))
    if pretrained is not None:
        word = load_pretrained(pretrained, word_vocab, c.word_dim, rng).matrix
    else:
        word = random_table(len(word_vocab), c.word_dim, rng).matrix
    params: dict[str, np.ndarray] = {
        "word_emb": word,
        "char_emb": random_table(len(char_vocab), c.char_dim, rng).matrix,
    }
    if c.task == "roles":
        # two rows, flag 0 and flag 1; neither is padding
        params["ind_emb"] = rng.uniform(-math.sqrt(3 / c.ind_dim), math.sqrt(3 / c.ind_dim), (2, c.ind_dim))
    in_dim = c.word_dim + 2 * c.char_hidden + (c.ind_dim if c.task == "roles" else 0)
    for group, d, h in (
        ("char_fwd", c.char_dim, c.char_hidden),
        ("char_bwd", c.char_dim, c.char_hidden),
        ("sent_fwd", in_dim, c.lstm_hidden),
        ("sent_bwd", in_dim, c.lstm_hidden),
    ):
        lstm = LSTMParams.init(rng, d, h)
        params[f"{group}.W"], params[f"{group}.U"], params[f"{group}.b"] = lstm.W, lstm.U, lstm.b
    params["proj.W"] = glorot_uniform(rng, (L, 2 * c.lstm_hidden)).T.copy()
    params["proj.b"] = np.zeros(L)
    forbidden = crf.bio_forbidden(label_set(c.task)) if c.bio_constraints else None
    params["transitions"] = crf.init_transitions(L, forbidden)
    return TaggerModel(c, word_vocab, char_vocab, params)


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    word_ids: np.ndarray  # (N,) over all tokens of all instances
    char_ids: np.ndarray  # (Tc, W) distinct character sequences, padded with PAD_ID
    char_lengths: np.ndarray  # (W,)
    char_index: np.ndarray  # (N,) row of each token's character sequence
    flags: np.ndarray  # (N,)
    lengths: np.ndarray  # (B,) tokens per instance
    gold: list[np.ndarray] | None = None

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)])

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Time and batch index of every token in the padded sentence tensor."""
        b_idx = np.repeat(np.arange(len(self.lengths)), self.lengths)
        t_idx = np.concatenate([np.arange(n) for n in self.lengths])
        return t_idx, b_idx


def make_batch(
    encodings: Sequence[Sequence[TokenEncoding]], gold: Sequence[Sequence[int]] | None = None
) -> Batch:
    if any(len(enc) == 0 for enc in encodings):
        raise ValueError("empty instance in batch")
    tokens = [tok for enc in encodings for tok in enc]
    # the character Bi-LSTM runs once per distinct spelling in the batch
    rows: dict[tuple[int, ...], int] = {}
    char_index = np.array([rows.setdefault(t.char_indices, len(rows)) for t in tokens], dtype=np.int64)
    spellings = list(rows)
    char_lengths = np.array([len(c) for c in spellings], dtype=np.int64)
    if (char_lengths == 0).any():
        raise ValueError("token with no characters")
    char_ids = np.full((int(char_lengths.max()), len(spellings)), PAD_ID, dtype=np.int64)
    for j, chars in enumerate(spellings):
        char_ids[: len(chars), j] = chars
    return Batch(
        word_ids=np.array([t.word_index for t in tokens], dtype=np.int64),
        char_ids=char_ids,
        char_lengths=char_lengths,
        char_index=char_index,
        flags=np.array([t.indicator_flag for t in tokens], dtype=np.int64),
        lengths=np.array([len(enc) for enc in encodings], dtype=np.int64),
        gold=None if gold is None else [np.asarray(g, dtype=np.int64) for g in gold],
    )


@dataclass
class _Cache:
    batch: Batch
    char_cache: object
    sent_cache: object
    x_mask: np.ndarray
    h_mask: np.ndarray
    h_drop: np.ndarray
    t_idx: np.ndarray
    b_idx: np.ndarray


def forward(
    model: TaggerModel,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, _Cache]:
    """Emission scores (N, L) for every token in the batch."""
    p = model.params
    c = model.config
    p_drop = c.dropout if training else 0.0
    if p_drop > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")

    xc = p["char_emb"][batch.char_ids]
    _, char_final, char_cache = bilstm_forward(
        xc, batch.char_lengths, model.lstm("char_fwd"), model.lstm("char_bwd")
    )
    parts = [p["word_emb"][batch.word_ids], char_final[batch.char_index]]
    if model.uses_indicator:
        parts.append(p["ind_emb"][batch.flags])
    x = np.concatenate(parts, axis=1)
    x_mask = dropout_mask(x.shape, p_drop, rng)
    x = x * x_mask

    t_idx, b_idx = batch.positions()
    S, B = int(batch.lengths.max()), len(batch.lengths)
    xs = np.zeros((S, B, x.shape[1]))
    xs[t_idx, b_idx] = x
    out, _, sent_cache = bilstm_forward(xs, batch.lengths, model.lstm("sent_fwd"), model.lstm("sent_bwd"))
    h = out[t_idx, b_idx]
    h_mask = dropout_mask(h.shape, p_drop, rng)
    h_drop = h * h_mask
    emissions = h_drop @ p["proj.W"] + p["proj.b"]
    return emissions, _Cache(batch, char_cache, sent_cache, x_mask, h_mask, h_drop, t_idx, b_idx)


def backward(model: TaggerModel, d_emissions: np.ndarray, d_trans: np.ndarray, cache: _Cache) -> dict[str, np.ndarray]:
    p = model.params
    c = model.config
    batch = cache.batch
    grads: dict[str, np.ndarray] = {}

    grads["proj.W"] = cache.h_drop.T @ d_emissions
    grads["proj.b"] = d_emissions.sum(axis=0)
    dh = (d_emissions @ p["proj.W"].T) * cache.h_mask
    S, B = int(batch.lengths.max()), len(batch.lengths)
    d_out = np.zeros((S, B, dh.shape[1]))
    d_out[cache.t_idx, cache.b_idx] = dh
    dxs, g_sf, g_sb = bilstm_backward(d_out, None, model.lstm("sent_fwd"), model.lstm("sent_bwd"), cache.sent_cache)
    dx = dxs[cache.t_idx, cache.b_idx] * cache.x_mask

    wd, cd = c.word_dim, 2 * c.char_hidden
    d_word = np.zeros_like(p["word_emb"])
    np.add.at(d_word, batch.word_ids, dx[:, :wd])
    d_char_final = np.zeros((len(batch.char_lengths), cd))
    np.add.at(d_char_final, batch.char_index, dx[:, wd : wd + cd])
    if model.uses_indicator:
        d_ind = np.zeros_like(p["ind_emb"])
        np.add.at(d_ind, batch.flags, dx[:, wd + cd :])

    dxc, g_cf, g_cb = bilstm_backward(None, d_char_final, model.lstm("char_fwd"), model.lstm("char_bwd"), cache.char_cache)
    d_char = np.zeros_like(p["char_emb"])
    np.add.at(d_char, batch.char_ids, dxc)

    # padding rows never move
    d_word[PAD_ID] = 0.0
    d_char[PAD_ID] = 0.0
    grads["word_emb"] = d_word
    grads["char_emb"] = d_char
    if model.uses_indicator:
        grads["ind_emb"] = d_ind
    for group, g in (("char_fwd", g_cf), ("char_bwd", g_cb), ("sent_fwd", g_sf), ("sent_bwd", g_sb)):
        grads[f"{group}.W"], grads[f"{group}.U"], grads[f"{group}.b"] = g.W, g.U, g.b
    d_trans = d_trans.copy()
    d_trans[model.frozen_transitions] = 0.0
    grads["transitions"] = d_trans
    return {name: grads[name] for name in p}


def loss_and_grad(
    model: TaggerModel,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    need_grad: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean CRF negative log-likelihood over the batch, and its gradient."""
    if batch.gold is None:
        raise ValueError("batch has no gold labels")
    emissions, cache = forward(model, batch, training, rng)
    T = model.params["transitions"]
    n = len(batch.gold)
    if not need_grad:
        off = batch.offsets
        total = sum(crf.nll_loss(emissions[off[k] : off[k + 1]], T, g) for k, g in enumerate(batch.gold))
        return total / n, None
    t_idx, b_idx = cache.t_idx, cache.b_idx
    S = int(batch.lengths.max())
    E = np.zeros((S, n, emissions.shape[1]))
    E[t_idx, b_idx] = emissions
    gold = np.zeros((S, n), dtype=np.int64)
    gold[t_idx, b_idx] = np.concatenate(batch.gold)
    losses, dE, d_trans = crf.batch_nll_and_grad(E, batch.lengths, T, gold)
    d_em = dE[t_idx, b_idx]
    return float(losses.sum()) / n, backward(model, d_em / n, d_trans / n, cache)


def emissions_for(model: TaggerModel, encodings: Sequence[TokenEncoding]) -> np.ndarray:
    """Emission matrix (n_tokens, L) for one encoded instance, dropout off."""
    em, _ = forward(model, make_batch([encodings]))
    return em


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def encode(model: TaggerModel, instance: Instance) -> list[TokenEncoding]:
    enc = encode_instance(instance, model.word_vocab, model.char_vocab)
    if not model.uses_indicator:
        enc = [dataclasses.replace(e, indicator_flag=0) for e in enc]
    return enc


def gold_ids(model: TaggerModel, instance: Instance) -> list[int]:
    return [model.label_index[lab] for lab in instance.labels]


def decode_labels(model: TaggerModel, instances: Sequence[Instance], batch_size: int = 64) -> list[list[str]]:
    """Viterbi label sequences; empty instances come back as empty lists."""
    out: list[list[str]] = [[] for _ in instances]
    todo = [i for i, inst in enumerate(instances) if len(inst.tokens)]
    T = model.params["transitions"]
    for s in range(0, len(todo), batch_size):
        chunk = todo[s : s + batch_size]
        batch = make_batch([encode(model, instances[i]) for i in chunk])
        em, _ = forward(model, batch)
        off = batch.offsets
        for k, i in enumerate(chunk):
            path, _ = crf.viterbi(em[off[k] : off[k + 1]], T)
            out[i] = [model.labels[j] for j in path]
    return out


def _instance_key(inst: Instance):
    return (inst.source[0], inst.source[1], inst.source[2])


def predicted_relation(inst: Instance, labels: Sequence[str]) -> SpatialRelation:
    """Role spans decoded from ``labels``; the indicator comes from the instance."""
    decoded = bio_decode(inst.tokens, labels, inst.text or None)
    return relation_from_decoded(inst.indicator, decoded)


def score_roles(gold: Sequence[Instance], predicted: Sequence[Sequence[str]]) -> RoleScores:
    g = {_instance_key(inst): inst.gold_relation() for inst in gold}
    p = {_instance_key(inst): predicted_relation(inst, labs) for inst, labs in zip(gold, predicted)}
    return exact_match(g, p)


def score_indicators(gold: Sequence[Instance], predicted: Sequence[Sequence[str]]) -> PRF:
    g, p = [], []
    for inst, labs in zip(gold, predicted):
        key = (inst.source[0], inst.source[1])
        g.extend((key, s) for s in bio_decode(inst.tokens, inst.labels).indicators)
        p.extend((key, s) for s in bio_decode(inst.tokens, labs).indicators)
    return span_match(g, p)


def evaluate(model: TaggerModel, instances: Sequence[Instance]) -> float:
    """Overall exact-match F1 (roles micro-averaged, or indicator spans)."""
    labels = decode_labels(model, instances)
    if model.config.task == "roles":
        return score_roles(instances, labels).overall.f1
    return score_indicators(instances, labels).f1


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_f1: float | None
    lr: float


@dataclass
class TrainingLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float | None = None

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
        }


def train(
    train_instances: Sequence[Instance],
    val_instances: Sequence[Instance] | None,
    config: TaggerConfig,
    pretrained: str | os.PathLike | None = None,
    step_callback=None,
) -> tuple[TaggerModel, TrainingLog]:
    """Adam on the mean CRF NLL over shuffled mini-batches.

    After every epoch the model is scored on ``val_instances`` and the
    parameters of the best epoch (earliest on ties) are kept. Without
    validation data the last epoch is kept.
    """
    config.validate()
    if config.max_epochs < 1:
        raise ValueError("no training performed (max_epochs < 1)")
    if not train_instances:
        raise ValueError("empty training set")
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    word_vocab, char_vocab = build_vocab(train_instances, config.min_freq)
    model = init_model(config, word_vocab, char_vocab, np.random.default_rng(init_ss), pretrained)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)

    encoded = [(encode(model, inst), gold_ids(model, inst)) for inst in train_instances]
    state = AdamState(lr=config.lr, decay=config.lr_decay)
    history = TrainingLog()
    best_params = None
    best_f1 = -1.0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        lr = state.effective_lr
        order = shuffle_rng.permutation(len(encoded))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            batch = make_batch([encoded[i][0] for i in idx], [encoded[i][1] for i in idx])
            loss, grads = loss_and_grad(model, batch, training=True, rng=drop_rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {state.step + 1}"
                )
            clip_global_norm(grads, config.clip_norm)
            adam_step(model.params, grads, state)
            total += loss * len(idx)
            if step_callback is not None:
                step_callback(epoch, state.step, loss)
        mean_loss = total / len(encoded)
        val_f1 = evaluate(model, val_instances) if val_instances else None
        history.epochs.append(EpochLog(epoch, mean_loss, val_f1, lr))
        log.info("epoch %d loss %.4f val_f1 %s lr %.6f", epoch, mean_loss, val_f1, lr)
        if best_params is None or val_f1 is None or val_f1 > best_f1:
            best_params = model.copy_params()
            best_f1 = val_f1 if val_f1 is not None else best_f1
            history.best_epoch = epoch
            history.best_val_f1 = val_f1
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
        state.next_epoch()
    model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _as_span(text: str, ind) -> Span:
    if isinstance(ind, Span):
        return Span(ind.start, ind.end, text[ind.start : ind.end])
    start, end = ind
    return Span.from_text(text, start, end)


def instance_for_indicator(text: str, tokens: Sequence[Token], indicator: Span, source=("", "")) -> Instance:
    a, b = align_span(tokens, indicator)
    flags = tuple(int(a <= k < b) for k in range(len(tokens)))
    return Instance(
        tokens=tuple(tokens),
        labels=tuple(INDICATOR if f else O for f in flags),
        indicator_flags=flags,
        source=(source[0], source[1], indicator.key),
        text=text,
    )


def predict(model: TaggerModel, sentence, indicators: Iterable | None = None, tokenizer=tokenize):
    """Predict for raw text or a prepared :class:`Instance`.

    Roles task: returns one :class:`SpatialRelation` per supplied indicator
    (``(start, end)`` pairs or spans; an Instance carries its own). Indicator
    task: returns the predicted indicator spans.
    """
    if isinstance(sentence, Instance):
        text, tokens = sentence.text, sentence.tokens
        if model.config.task == "roles" and indicators is None:
            if sentence.indicator is None:
                raise MissingIndicatorError("instance has no indicator")
            indicators = [sentence.indicator]
    else:
        text = sentence
        tokens = tuple(tokenizer(text))
    if not tokens:
        return []
    if model.config.task == "indicator":
        inst = Instance(tuple(tokens), (O,) * len(tokens), (0,) * len(tokens), ("", "", None), text)
        (labels,) = decode_labels(model, [inst])
        return bio_decode(tokens, labels, text).indicators
    if indicators is None:
        raise MissingIndicatorError("the roles task needs indicator positions")
    spans = [_as_span(text, ind) for ind in indicators]
    insts = [instance_for_indicator(text, tokens, s) for s in spans]
    labels = decode_labels(model, insts)
    return [predicted_relation(inst, labs) for inst, labs in zip(insts, labels)]


def predict_corpus(
    model: TaggerModel,
    corpus: Corpus,
    indicator_model: TaggerModel | None = None,
    tokenizer=tokenize,
) -> Corpus:
    """Predicted annotations mirroring ``corpus``.

    A roles model uses the corpus's own indicators unless an indicator model
    is given; an indicator model alone yields relations with no role spans.
    """
    out = []
    for s in corpus.sentences:
        tokens = tuple(tokenizer(s.text))
        if model.config.task == "indicator":
            rels = tuple(SpatialRelation(ind) for ind in predict(model, s.text, tokenizer=tokenizer))
        else:
            if indicator_model is not None:
                inds = predict(indicator_model, s.text, tokenizer=tokenizer)
            else:
                inds = [r.indicator for r in s.relations]
            insts = [instance_for_indicator(s.text, tokens, ind, s.key) for ind in inds]
            labels = decode_labels(model, insts)
            rels = tuple(predicted_relation(i, lab) for i, lab in zip(insts, labels))
        out.append(AnnotatedSentence(s.report_id, s.sentence_id, s.text, rels))
    return Corpus(tuple(out))


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_SENTENCE = "Scarring at right apex"


def gradcheck_instance(task: str = "roles") -> Instance:
    """A four-token instance with a trajector, an indicator and a landmark."""
    text = GRADCHECK_SENTENCE
    rel = SpatialRelation(
        indicator=Span.from_text(text, 9, 11),
        trajectors=(Span.from_text(text, 0, 8),),
        landmarks=(Span.from_text(text, 12, 22),),
    )
    sentence = AnnotatedSentence("gradcheck", "0", text, (rel,))
    return indicator_instance(sentence) if task == "indicator" else expand_instances(sentence)[0]


def check_gradients(
    config: TaggerConfig | None = None,
    seed: int = 0,
    n_samples: int = 200,
    eps: float = 1e-2,
    stencil: int = 4,
) -> GradCheckResult:
    """Finite-difference check of the full tagger loss (dropout off) on one instance.

    Embedding groups are sampled only over the rows the instance uses and the
    transition matrix only over trainable entries; every other group is
    sampled uniformly.
    """
    config = config or TaggerConfig()
    rng = np.random.default_rng(seed)
    inst = gradcheck_instance(config.task)
    word_vocab, char_vocab = build_vocab([inst])
    model = init_model(config, word_vocab, char_vocab, rng)
    T = model.params["transitions"]
    trainable = ~model.frozen_transitions
    T[trainable] = rng.normal(0.0, 0.5, size=int(trainable.sum()))
    enc = encode(model, inst)
    batch = make_batch([enc], [gold_ids(model, inst)])
    _, grads = loss_and_grad(model, batch)

    def rows(name: str, ids) -> np.ndarray:
        width = model.params[name].shape[1]
        return np.array([r * width + c for r in sorted(set(ids)) if r != PAD_ID for c in range(width)])

    pools = {
        "word_emb": rows("word_emb", batch.word_ids),
        "char_emb": rows("char_emb", batch.char_ids.ravel()),
        "transitions": np.flatnonzero(trainable.ravel()),
    }
    if model.uses_indicator:
        pools["ind_emb"] = np.arange(model.params["ind_emb"].size)
    return grad_check(
        lambda: loss_and_grad(model, batch, need_grad=False)[0],
        model.params,
        grads,
        eps=eps,
        n_samples=n_samples,
        rng=rng,
        pools=pools,
        stencil=stencil,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RSPRL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def checkpoint_bytes(model: TaggerModel, format_version: int = FORMAT_VERSION) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "labels": list(model.labels),
        "word_vocab": model.word_vocab.to_list(),
        "char_vocab": model.char_vocab.to_list(),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params.values())
    payload = MAGIC + struct.pack("<IQ", format_version, len(head)) + head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(data: bytes) -> TaggerModel:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 4:
        raise CheckpointChecksumError("checkpoint truncated")
    version, head_len = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointChecksumError("checkpoint checksum mismatch (file corrupt or truncated)")
    header = json.loads(data[fixed : fixed + head_len].decode("utf-8"))
    config = TaggerConfig.from_dict(header["config"])
    params = {}
    pos = fixed + head_len
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data) - 4:
        raise CheckpointError("parameter blocks do not fill the checkpoint")
    model = TaggerModel(
        config,
        Vocabulary.from_list(header["word_vocab"]),
        Vocabulary.from_list(header["char_vocab"]),
        params,
    )
    if list(model.labels) != header["labels"]:
        raise CheckpointError("label set in checkpoint does not match its task")
    return model


def save_model(model: TaggerModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_model(path: str | os.PathLike) -> TaggerModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
