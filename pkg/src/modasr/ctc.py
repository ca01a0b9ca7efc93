"""CTC loss, its exact gradient, the path-collapse mapping, decoders, and a
brute-force enumeration oracle.

All dynamic programming is done in log space with log-sum-exp; there is no
probability-space fallback. Ties in argmax decoding break toward the lowest
symbol id so decoding is deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, InfeasibleAlignmentError, OracleSizeError

NEG_INF = -np.inf

# Enumeration guard for the brute-force oracle: K**T path limit.
BRUTE_FORCE_MAX_PATHS = 10_000_000


@dataclass
class PosteriorSeq:
    """Per-frame log-probability distributions over an alphabet that
    includes the blank symbol. Shape (T, K)."""

    log_probs: np.ndarray
    blank_id: int

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.log_probs.ndim != 2:
            raise DataError(f"posterior matrix must be 2-D, got {self.log_probs.shape}")
        if not 0 <= self.blank_id < self.log_probs.shape[1]:
            raise DataError(f"blank id {self.blank_id} outside alphabet")

    @classmethod
    def from_probs(cls, probs, blank_id: int) -> "PosteriorSeq":
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(probs), blank_id)

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.log_probs.shape[1]


def expand_with_blanks(labels: Sequence[int], blank_id: int) -> list[int]:
    """Interleave blanks around every label: [b, l1, b, l2, ..., b]."""
    out = [blank_id]
    for lab in labels:
        out.append(int(lab))
        out.append(blank_id)
    return out


def collapse(path: Sequence[int], blank_id: int) -> list[int]:
    """Merge adjacent repeats, then delete blanks. Repeats separated by a
    blank survive the merge."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank_id:
            out.append(int(sym))
        prev = sym
    return out


def min_frames_needed(labels: Sequence[int]) -> int:
    """Shortest path length that can emit ``labels``: one frame per label
    plus one separating blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate_labels(labels: Sequence[int], post: PosteriorSeq) -> list[int]:
    labels = [int(x) for x in labels]
    for lab in labels:
        if lab == post.blank_id:
            raise DataError("label sequence contains the blank id")
        if not 0 <= lab < post.num_symbols:
            raise DataError(f"label id {lab} outside alphabet of size {post.num_symbols}")
    return labels


def ctc_loss(post: PosteriorSeq, labels: Sequence[int]):
    """Negative log-probability of ``labels`` under the posterior sequence,
    plus the exact gradient of the loss w.r.t. every log-probability entry.

    Raises InfeasibleAlignmentError when the label sequence cannot fit in
    the available frames.
    """
    labels = _validate_labels(labels, post)
    t_len = post.num_frames
    if t_len < min_frames_needed(labels):
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels need >= {min_frames_needed(labels)} frames, have {t_len}")

    lp = post.log_probs
    states = np.array(expand_with_blanks(labels, post.blank_id), dtype=np.int64)
    n_states = states.size

    # skip transition s-2 -> s allowed where the state is a label differing
    # from the label two states back
    skip_ok = np.zeros(n_states, dtype=bool)
    if n_states > 2:
        skip_ok[2:] = (states[2:] != post.blank_id) & (states[2:] != states[:-2])

    skip_idx = np.flatnonzero(skip_ok)
    emit = lp[:, states]                       # (T, S)

    alpha = np.full((t_len, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[skip_idx] = np.logaddexp(acc[skip_idx], prev[skip_idx - 2])
        alpha[t] = acc + emit[t]

    if n_states > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]
    if not np.isfinite(log_p):
        raise InfeasibleAlignmentError("no feasible alignment has nonzero probability")

    beta = np.full((t_len, n_states), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if n_states > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[skip_idx - 2] = np.logaddexp(acc[skip_idx - 2], nxt[skip_idx])
        beta[t] = acc + emit[t]

    # occupancy gamma[t, s]: posterior mass of paths sitting in state s at
    # time t, with the double-counted emission divided back out (alpha and
    # beta both include emit[t, s]; where either is -inf the state is dead)
    ab = alpha + beta
    with np.errstate(invalid="ignore"):
        gamma = np.exp(np.where(np.isfinite(ab), ab - emit, NEG_INF) - log_p)
    # fold state occupancies onto their symbols: grad[t, k] = -sum_s 1[states[s]=k] gamma[t, s]
    fold = np.zeros((n_states, post.num_symbols))
    fold[np.arange(n_states), states] = 1.0
    grad = -(gamma @ fold)
    return float(-log_p), grad


def ctc_brute_force(post: PosteriorSeq, labels: Sequence[int]) -> float:
    """Oracle: enumerate every length-T path, sum the probability of those
    collapsing to ``labels``, return the negative log of that sum.

    Infeasible targets come back as +inf (probability zero). Guarded to
    K**T <= 10^7 paths.
    """
    labels = [int(x) for x in _validate_labels(labels, post)]
    t_len, k = post.log_probs.shape
    if k ** t_len > BRUTE_FORCE_MAX_PATHS:
        raise OracleSizeError(f"{k}^{t_len} paths exceed the enumeration guard")
    target = tuple(labels)
    probs = np.exp(post.log_probs)
    terms = []
    for path in itertools.product(range(k), repeat=t_len):
        if tuple(collapse(path, post.blank_id)) != target:
            continue
        p = 1.0
        for t, sym in enumerate(path):
            p *= probs[t, sym]
        terms.append(p)
    total = math.fsum(terms)
    if total == 0.0:
        return math.inf
    return -math.log(total)


def label_posterior_by_enumeration(post: PosteriorSeq) -> dict[tuple, float]:
    """Oracle: full posterior over collapsed label sequences, computed by
    enumerating every path. Same size guard as ctc_brute_force."""
    t_len, k = post.log_probs.shape
    if k ** t_len > BRUTE_FORCE_MAX_PATHS:
        raise OracleSizeError(f"{k}^{t_len} paths exceed the enumeration guard")
    probs = np.exp(post.log_probs)
    out: dict[tuple, list] = {}
    for path in itertools.product(range(k), repeat=t_len):
        p = 1.0
        for t, sym in enumerate(path):
            p *= probs[t, sym]
        out.setdefault(tuple(collapse(path, post.blank_id)), []).append(p)
    return {lab: math.fsum(ps) for lab, ps in out.items()}


def greedy_decode(post: PosteriorSeq) -> list[int]:
    """Per-frame argmax (ties to the lowest id), then collapse."""
    path = np.argmax(post.log_probs, axis=1)
    return collapse(path, post.blank_id)


def greedy_path_score(post: PosteriorSeq) -> float:
    return float(post.log_probs.max(axis=1).sum())


def prefix_beam_decode(post: PosteriorSeq, beam_width: int):
    """Standard CTC prefix beam search over collapsed label prefixes.

    Each prefix carries separate probability mass for 'ends in blank' and
    'ends in its last label'; hypotheses are ranked by total log-probability
    descending. No language-model term.
    """
    if beam_width < 1:
        raise DataError("beam_width must be >= 1")
    lp = post.log_probs
    blank = post.blank_id
    symbols = [s for s in range(post.num_symbols) if s != blank]

    # prefix -> [log p(ends with blank), log p(ends with non-blank)]
    beams: dict[tuple, list] = {(): [0.0, NEG_INF]}
    for t in range(post.num_frames):
        nxt: dict[tuple, list] = {}

        def bump(prefix, slot, val):
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[slot] = np.logaddexp(entry[slot], val)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + lp[t, blank])
            if prefix:
                bump(prefix, 1, pnb + lp[t, prefix[-1]])
            for sym in symbols:
                extended = prefix + (sym,)
                if prefix and sym == prefix[-1]:
                    # repeat must be reachable only through a blank
                    bump(extended, 1, pb + lp[t, sym])
                else:
                    bump(extended, 1, total + lp[t, sym])
        ranked = sorted(nxt.items(),
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beams = dict(ranked[:beam_width])

    scored = [(list(prefix), float(np.logaddexp(pb, pnb)))
              for prefix, (pb, pnb) in beams.items()]
    scored.sort(key=lambda it: (-it[1], it[0]))
    return scored
