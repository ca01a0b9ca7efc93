"""Phone-synchronous subsampling of CTC posterior sequences.

Frames whose blank probability exceeds a threshold carry no label
information and are dropped before the posterior sequence reaches the
downstream word model. In ``separator`` mode every maximal dropped run is
replaced by a single synthetic one-hot-blank row, which preserves repeat
boundaries and therefore greedy-decode results whenever the threshold is at
least 0.5. ``drop_all`` removes the runs outright and is deliberately lossy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .ctc import NEG_INF, PosteriorSeq
from .errors import ConfigurationError

# source_indices value marking a synthetic separator row
SEPARATOR = -1

MODES = ("separator", "drop_all")


@dataclass
class PsdConfig:
    blank_threshold: float = 0.5
    mode: str = "separator"

    def __post_init__(self):
        if not 0.0 <= self.blank_threshold <= 1.0:
            raise ConfigurationError("blank_threshold must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")


@dataclass
class CompactPosteriorSeq:
    """Filtered posterior sequence. Retained rows are bit-identical copies
    of source rows; ``source_indices`` maps each row back to its original
    frame, with SEPARATOR marking synthetic rows."""

    log_probs: np.ndarray
    source_indices: np.ndarray
    blank_id: int
    orig_len: int = field(default=0)

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    def as_distributions(self) -> np.ndarray:
        """Probability-space rows (separator rows become exact one-hots)."""
        return np.exp(self.log_probs)


def _separator_row(num_symbols: int, blank_id: int) -> np.ndarray:
    row = np.full(num_symbols, NEG_INF)
    row[blank_id] = 0.0
    return row


def psd_filter(post: Union[PosteriorSeq, CompactPosteriorSeq],
               cfg: PsdConfig) -> CompactPosteriorSeq:
    """Drop blank-dominated frames (P(blank) > threshold).

    Accepts a raw posterior sequence or an already-compacted one; existing
    separator rows are exempt from re-filtering, which makes the filter
    idempotent in separator mode.
    """
    lp = post.log_probs
    t_len, k = lp.shape
    blank = post.blank_id
    if isinstance(post, CompactPosteriorSeq):
        src = post.source_indices
        orig_len = post.orig_len
    else:
        src = np.arange(t_len, dtype=np.int64)
        orig_len = t_len

    blank_prob = np.exp(lp[:, blank])
    is_sep = src == SEPARATOR
    removable = (blank_prob > cfg.blank_threshold) & ~is_sep

    rows = []
    indices = []
    run_open = False
    for t in range(t_len):
        if removable[t]:
            if cfg.mode == "separator" and not run_open:
                rows.append(_separator_row(k, blank))
                indices.append(SEPARATOR)
            run_open = True
        else:
            rows.append(lp[t])
            indices.append(int(src[t]))
            run_open = False
    if rows:
        out = np.vstack(rows)
    else:
        out = np.zeros((0, k))
    return CompactPosteriorSeq(out, np.asarray(indices, dtype=np.int64),
                               blank, orig_len)


def compression_ratio(post: Union[PosteriorSeq, CompactPosteriorSeq],
                      cfg: PsdConfig) -> float:
    """Kept-to-original frame ratio T'/T of applying the filter."""
    t_len = post.log_probs.shape[0]
    if t_len < 1:
        raise ConfigurationError("need at least one frame")
    return psd_filter(post, cfg).num_frames / t_len
