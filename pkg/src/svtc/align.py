"""Monotonic frame-to-gloss alignment and the pooling that feeds it onward.

The alignment is a max-product path through the matrix of labeled-gloss
probability columns: starting at the top-left cell, each step moves down or
down-right, ending at the bottom-right cell, so every labeled gloss receives
at least one frame.  Paths are found on detached probabilities; gradients
never flow through the path selection, only through the pooled features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .ctc import BLANK, ProbStream
from .ndgrad import Array

# row-stochastic inputs can contain exact zeros early in training
PROB_FLOOR = 1e-12


@dataclass
class AlignmentPath:
    """Length-T' assignment of frames to gloss positions 0..N-1."""

    assignment: list
    log_score: float

    @property
    def n_glosses(self) -> int:
        return self.assignment[-1] + 1

    def validate(self) -> None:
        a = self.assignment
        if not a or a[0] != 0:
            raise ValueError("path must start at gloss 0")
        for x, y in zip(a, a[1:]):
            if y - x not in (0, 1):
                raise ValueError("path steps must be 0 or +1")


@dataclass
class SegmentSpans:
    """N contiguous [start, end) frame ranges partitioning [0, T')."""

    spans: list = field(default_factory=list)

    def __len__(self):
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def validate(self, total: int | None = None) -> None:
        if not self.spans:
            raise ValueError("no spans")
        if self.spans[0][0] != 0:
            raise ValueError("spans must start at frame 0")
        for (s0, e0), (s1, _) in zip(self.spans, self.spans[1:]):
            if e0 != s1:
                raise ValueError("spans must be contiguous")
        for s, e in self.spans:
            if s >= e:
                raise ValueError(f"empty span [{s},{e})")
        if total is not None and self.spans[-1][1] != total:
            raise ValueError("spans must cover the full frame range")


def extract_columns(stream, labels) -> np.ndarray:
    """Gloss-probability columns for the labeled sequence: [T', N].

    Duplicate labels yield duplicate columns.  Columns are taken as-is; no
    renormalization after dropping the blank and unlabeled columns.
    """
    if isinstance(stream, ProbStream):
        mat = stream.prob_matrix()
    else:
        mat = np.asarray(stream.data if isinstance(stream, Array) else stream, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a [T', C] probability matrix")
    C = mat.shape[1]
    idx = []
    for c in labels:
        c = int(c)
        if c == BLANK:
            raise ValueError("labels must not contain the blank id")
        if not 0 < c < C:
            raise ValueError(f"label id {c} out of range for {C} classes")
        idx.append(c)
    if not idx:
        raise ValueError("empty label sequence")
    return mat[:, idx]


def dtw_align(M) -> AlignmentPath:
    """Max-product monotonic path through M [T', N] by dynamic programming.

    Probabilities are floored at ``PROB_FLOOR`` before the log.  On score
    ties the advance (down-right move) happens as early as possible, so
    later glosses keep the longer segments.
    """
    m = M.data if isinstance(M, Array) else np.asarray(M, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("alignment matrix must be 2-D")
    T, N = m.shape
    if N < 1:
        raise ValueError("need at least one gloss column")
    if T < N:
        raise ValueError(f"cannot align {N} glosses onto {T} frames")
    lm = np.log(np.maximum(m, PROB_FLOOR))

    best = np.full((T, N), -np.inf)
    best[0, 0] = lm[0, 0]
    advance = np.zeros((T, N), dtype=bool)
    for t in range(1, T):
        prev = best[t - 1]
        stay = prev
        adv = np.full(N, -np.inf)
        adv[1:] = prev[:-1]
        # strict > : on ties keep the stay-predecessor, which backtracks to
        # the path whose advances happen earliest
        take = adv > stay
        advance[t] = take
        best[t] = np.where(take, adv, stay) + lm[t]

    assignment = [0] * T
    n = N - 1
    assignment[T - 1] = n
    for t in range(T - 1, 0, -1):
        if advance[t, n]:
            n -= 1
        assignment[t - 1] = n

    score = 0.0
    for t in range(T):
        score += lm[t, assignment[t]]
    return AlignmentPath(assignment=assignment, log_score=score)


def path_to_spans(path: AlignmentPath) -> SegmentSpans:
    """Maximal runs of frames assigned to each gloss, in order."""
    a = path.assignment
    spans = []
    start = 0
    for t in range(1, len(a)):
        if a[t] != a[t - 1]:
            spans.append((start, t))
            start = t
    spans.append((start, len(a)))
    return SegmentSpans(spans=spans)


def pool_visual(features: Array, spans: SegmentSpans) -> Array:
    """Per-gloss mean of frame features [T', d] -> [N, d].

    The spans must partition [0, T'); gradient flows into the features but
    never into the span selection.
    """
    T = features.data.shape[0]
    spans.validate(total=T)
    return ndgrad.pool_spans(features, spans.spans)


def pool_tokens(token_features: Array, token_to_gloss) -> Array:
    """Per-gloss mean of token features using the tokenizer's gloss map.

    The map must be monotonic non-decreasing and cover every gloss position
    0..N-1; the end-of-sequence token is not part of the map.
    """
    mapping = [int(g) for g in token_to_gloss]
    n_tokens = token_features.data.shape[0]
    if len(mapping) != n_tokens:
        raise ValueError(f"map length {len(mapping)} != token count {n_tokens}")
    if not mapping:
        raise ValueError("empty token map")
    if mapping[0] != 0:
        raise ValueError("token map must start at gloss 0")
    for a, b in zip(mapping, mapping[1:]):
        if b - a not in (0, 1):
            raise ValueError("token map must be monotonic and onto 0..N-1")
    spans = []
    start = 0
    for i in range(1, len(mapping)):
        if mapping[i] != mapping[i - 1]:
            spans.append((start, i))
            start = i
    spans.append((start, len(mapping)))
    return ndgrad.pool_spans(token_features, spans)
