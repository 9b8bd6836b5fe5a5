"""Linear-chain CRF: path scores, forward algorithm, Viterbi, NLL and its gradient.

Transitions are an (L+2, L+2) matrix ``T`` with ``T[a, b]`` the score of label
``b`` following ``a``; index ``L`` is a virtual START and ``L + 1`` a virtual
STOP. Entries that can never be used (into START, out of STOP) hold ``NEG``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import logsumexp

NEG = -1e4
BRUTE_FORCE_LIMIT = 10**7


def n_labels(T: np.ndarray) -> int:
    return T.shape[0] - 2


def init_transitions(L: int, forbidden: np.ndarray | None = None) -> np.ndarray:
    T = np.zeros((L + 2, L + 2))
    T[:, L] = NEG
    T[L + 1, :] = NEG
    if forbidden is not None:
        T[forbidden] = NEG
    return T


def fixed_mask(L: int, forbidden: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of transition entries that must never be trained."""
    mask = np.zeros((L + 2, L + 2), dtype=bool)
    mask[:, L] = True
    mask[L + 1, :] = True
    if forbidden is not None:
        mask |= forbidden
    return mask


def bio_forbidden(labels: Sequence[str]) -> np.ndarray:
    """Transitions that produce ill-formed BIO: O -> I-X, B-X/I-X -> I-Y (X != Y), START -> I-X."""
    L = len(labels)
    forbidden = np.zeros((L + 2, L + 2), dtype=bool)
    for b, lab in enumerate(labels):
        if not lab.startswith("I-"):
            continue
        kind = lab[2:]
        forbidden[L, b] = True
        for a, prev in enumerate(labels):
            if prev.partition("-")[2] != kind:
                forbidden[a, b] = True
    return forbidden


def _check(E: np.ndarray, T: np.ndarray) -> int:
    L = n_labels(T)
    if E.ndim != 2 or E.shape[1] != L:
        raise ValueError(f"emissions {E.shape} do not match {L} labels")
    if E.shape[0] == 0:
        raise ValueError("empty sequence")
    return L


def score_sequence(E: np.ndarray, T: np.ndarray, labels: Sequence[int]) -> float:
    L = _check(E, T)
    n = E.shape[0]
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} tokens")
    y = np.asarray(labels)
    if y.min() < 0 or y.max() >= L:
        raise ValueError("label index out of range")
    score = T[L, y[0]] + E[np.arange(n), y].sum() + T[y[-1], L + 1]
    score += T[y[:-1], y[1:]].sum()
    return float(score)


def _alphas(E: np.ndarray, T: np.ndarray) -> np.ndarray:
    L = n_labels(T)
    trans = T[:L, :L]
    alpha = np.empty_like(E)
    alpha[0] = T[L, :L] + E[0]
    for t in range(1, E.shape[0]):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + trans, axis=0) + E[t]
    return alpha


def log_partition(E: np.ndarray, T: np.ndarray) -> float:
    L = _check(E, T)
    alpha = _alphas(E, T)
    return float(logsumexp(alpha[-1] + T[:L, L + 1]))


def marginals(E: np.ndarray, T: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Forward-backward: returns (log Z, dlogZ/dE, dlogZ/dT)."""
    L = _check(E, T)
    n = E.shape[0]
    trans = T[:L, :L]
    alpha = _alphas(E, T)
    log_z = float(logsumexp(alpha[-1] + T[:L, L + 1]))
    beta = np.empty_like(E)
    beta[-1] = T[:L, L + 1]
    for t in range(n - 2, -1, -1):
        beta[t] = logsumexp(trans + (E[t + 1] + beta[t + 1])[None, :], axis=1)
    unary = np.exp(alpha + beta - log_z)
    dT = np.zeros_like(T)
    if n > 1:
        pair = np.exp(
            alpha[:-1, :, None] + trans[None] + (E[1:] + beta[1:])[:, None, :] - log_z
        )
        dT[:L, :L] = pair.sum(axis=0)
    dT[L, :L] = unary[0]
    dT[:L, L + 1] = unary[-1]
    return log_z, unary, dT


def viterbi(E: np.ndarray, T: np.ndarray) -> tuple[list[int], float]:
    """Best path and its score; ties go to the lowest label index."""
    L = _check(E, T)
    n = E.shape[0]
    trans = T[:L, :L]
    delta = T[L, :L] + E[0]
    back = np.empty((n, L), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(L)] + E[t]
    final = delta + T[:L, L + 1]
    best = int(np.argmax(final))
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    path.reverse()
    return path, float(final[path[-1]])


def nll_loss(E: np.ndarray, T: np.ndarray, gold: Sequence[int]) -> float:
    return log_partition(E, T) - score_sequence(E, T, gold)


def nll_and_grad(
    E: np.ndarray, T: np.ndarray, gold: Sequence[int]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log-likelihood of ``gold`` with gradients w.r.t. E and T."""
    log_z, dE, dT = marginals(E, T)
    L = n_labels(T)
    y = np.asarray(gold)
    loss = log_z - score_sequence(E, T, gold)
    dE = dE.copy()
    dE[np.arange(len(y)), y] -= 1.0
    dT[L, y[0]] -= 1.0
    dT[y[-1], L + 1] -= 1.0
    np.subtract.at(dT, (y[:-1], y[1:]), 1.0)
    return loss, dE, dT


def batch_nll_and_grad(
    E: np.ndarray, lengths: np.ndarray, T: np.ndarray, gold: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded-batch version of :func:`nll_and_grad`.

    ``E`` is (S, B, L) and ``gold`` (S, B); column ``b`` uses its first
    ``lengths[b]`` steps. Returns per-sequence losses (B,), dE (S, B, L) with
    zeros on padding, and dT summed over the batch.
    """
    S, B, L = E.shape
    if L != n_labels(T):
        raise ValueError(f"emissions have {L} labels, transitions {n_labels(T)}")
    lengths = np.asarray(lengths)
    if lengths.min() < 1 or lengths.max() > S:
        raise ValueError("sequence lengths must lie in [1, S]")
    trans, start, stop = T[:L, :L], T[L, :L], T[:L, L + 1]
    cols = np.arange(B)
    last = lengths - 1
    valid = np.arange(S)[:, None] < lengths[None, :]

    alpha = np.empty((S, B, L))
    alpha[0] = start + E[0]
    for t in range(1, S):
        alpha[t] = logsumexp(alpha[t - 1][:, :, None] + trans, axis=1) + E[t]
    log_z = logsumexp(alpha[last, cols] + stop, axis=1)

    beta = np.zeros((S, B, L))
    beta[S - 1] = stop
    for t in range(S - 2, -1, -1):
        rec = logsumexp(trans[None] + (E[t + 1] + beta[t + 1])[:, None, :], axis=2)
        beta[t] = np.where((t == last)[:, None], stop, rec)
    unary_arg = np.where(valid[..., None], alpha + beta - log_z[None, :, None], -np.inf)
    dE = np.exp(unary_arg)
    dT = np.zeros_like(T)
    if S > 1:
        pair_arg = (
            alpha[:-1, :, :, None]
            + trans
            + (E[1:] + beta[1:])[:, :, None, :]
            - log_z[None, :, None, None]
        )
        pair = np.exp(np.where(valid[1:, :, None, None], pair_arg, -np.inf))
        dT[:L, :L] = pair.sum(axis=(0, 1))
    dT[L, :L] = dE[0].sum(axis=0)
    dT[:L, L + 1] = dE[last, cols].sum(axis=0)

    t_idx, b_idx = np.nonzero(valid)
    y = np.asarray(gold)[t_idx, b_idx]
    gold_score = np.bincount(b_idx, weights=E[t_idx, b_idx, y], minlength=B)
    first, final = np.asarray(gold)[0], np.asarray(gold)[last, cols]
    gold_score += start[first] + stop[final]
    inner = valid[1:]
    t1, b1 = np.nonzero(inner)
    prev, nxt = np.asarray(gold)[t1, b1], np.asarray(gold)[t1 + 1, b1]
    gold_score += np.bincount(b1, weights=trans[prev, nxt], minlength=B)

    dE[t_idx, b_idx, y] -= 1.0
    np.subtract.at(dT, (np.full(B, L), first), 1.0)
    np.subtract.at(dT, (final, np.full(B, L + 1)), 1.0)
    np.subtract.at(dT, (prev, nxt), 1.0)
    return log_z - gold_score, dE, dT


def _all_paths(n: int, L: int) -> np.ndarray:
    """Every label sequence as a row of an (L**n, n) array, in lexicographic order."""
    if L**n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{L}^{n} paths exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")
    return np.indices((L,) * n, dtype=np.int64).reshape(n, -1).T


def _path_scores(E: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = _check(E, T)
    n = E.shape[0]
    paths = _all_paths(n, L)
    scores = T[L, paths[:, 0]] + T[paths[:, -1], L + 1]
    for t in range(n):
        scores = scores + E[t, paths[:, t]]
    for t in range(1, n):
        scores = scores + T[paths[:, t - 1], paths[:, t]]
    return paths, scores


def brute_force_partition(E: np.ndarray, T: np.ndarray) -> float:
    """log Z by enumerating every label sequence."""
    _, scores = _path_scores(E, T)
    return float(logsumexp(scores))


def brute_force_decode(E: np.ndarray, T: np.ndarray) -> tuple[list[int], float]:
    paths, scores = _path_scores(E, T)
    k = int(np.argmax(scores))
    return paths[k].tolist(), float(scores[k])
