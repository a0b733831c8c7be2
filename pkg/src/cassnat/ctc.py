"""CTC loss, forced alignment, alignment decoding and token segmentation.

Blank is label 0. Frame indices in segmentations are 1-based and inclusive;
array indices inside the dynamic programs are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, InfeasibleError, NoTokenError, UsageError
from .tensor import Tensor, make_output

BLANK = 0
NEG_INF = -np.inf


class LogPosteriorGrid:
    """Frame-by-label log-probabilities; rows are renormalized on construction."""

    def __init__(self, logp):
        logp = np.asarray(logp, dtype=np.float64)
        if logp.ndim != 2 or logp.shape[0] < 1 or logp.shape[1] < 2:
            raise DimensionError(f"grid must be T'xV with T'>=1, V>=2; got {logp.shape}")
        m = logp.max(axis=1, keepdims=True)
        self.logp = logp - (m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True)))

    @classmethod
    def from_probs(cls, probs) -> "LogPosteriorGrid":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=np.float64)))

    @property
    def frames(self) -> int:
        return self.logp.shape[0]

    @property
    def vocab(self) -> int:
        return self.logp.shape[1]


def _as_logp(grid) -> np.ndarray:
    if isinstance(grid, LogPosteriorGrid):
        return grid.logp
    if isinstance(grid, Tensor):
        grid = grid.data
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise DimensionError(f"grid must be T'xV with T'>=1, V>=2; got {arr.shape}")
    return arr


@dataclass(frozen=True)
class AlignmentPath:
    labels: tuple[int, ...]
    log_prob: float

    def __len__(self) -> int:
        return len(self.labels)


class Segment(NamedTuple):
    token: int
    start: int
    end: int


def collapse(path) -> list[int]:
    """Merge repeated labels, then drop blanks."""
    labels = path.labels if isinstance(path, AlignmentPath) else path
    out, prev = [], None
    for z in labels:
        z = int(z)
        if z != prev and z != BLANK:
            out.append(z)
        prev = z
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest grid that can emit ``labels``: one frame each plus a blank between equal neighbours."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _extended(labels: Sequence[int], frames: int, vocab: int) -> tuple[np.ndarray, np.ndarray]:
    labels = [int(y) for y in labels]
    if not labels:
        raise UsageError("CTC target sequence must be non-empty")
    if any(y == BLANK for y in labels):
        raise UsageError("CTC target contains the blank label")
    if any(y < 0 or y >= vocab for y in labels):
        raise UsageError(f"CTC target label out of range [1, {vocab})")
    need = min_frames(labels)
    if frames < need:
        raise InfeasibleError(f"T'={frames} frames cannot emit {len(labels)} labels; need at least {need}")
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(len(ext), dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def _shift(v: np.ndarray, k: int, fill=NEG_INF) -> np.ndarray:
    out = np.full_like(v, fill)
    out[k:] = v[:-k]
    return out


def _forward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    t_len, s_len = lp.shape[0], len(ext)
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        alpha[t] = acc + lp[t, ext]
    return alpha


def _backward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    t_len, s_len = lp.shape[0], len(ext)
    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = lp[-1, ext[-1]]
    beta[-1, -2] = lp[-1, ext[-2]]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = np.logaddexp(nxt, _shift(nxt[::-1], 1)[::-1])
        acc = np.where(skip_from, np.logaddexp(acc, _shift(nxt[::-1], 2)[::-1]), acc)
        beta[t] = acc + lp[t, ext]
    return beta


def _loss_and_grad(lp: np.ndarray, labels: Sequence[int], need_grad: bool):
    ext, skip = _extended(labels, lp.shape[0], lp.shape[1])
    alpha = _forward(lp, ext, skip)
    loglik = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(loglik):
        raise InfeasibleError("target has zero probability under the grid")
    if not need_grad:
        return -loglik, None
    beta = _backward(lp, ext, skip)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - lp[:, ext] - loglik)
    post = np.nan_to_num(post, nan=0.0)
    occ = np.zeros_like(lp)
    for s, k in enumerate(ext):
        occ[:, k] += post[:, s]
    return -loglik, -occ


def ctc_loss(grid, labels: Sequence[int]) -> float:
    """Negative log of the summed probability of every path collapsing to ``labels``."""
    return float(_loss_and_grad(_as_logp(grid), labels, need_grad=False)[0])


def ctc_loss_tensor(logp: Tensor, labels: Sequence[int]) -> Tensor:
    """Differentiable CTC loss of a single (T', V) log-probability tensor.

    Grid entries are treated as free log-probabilities, so the gradient is the
    negated per-frame label occupancy.
    """
    loss, grad = _loss_and_grad(logp.data, labels, need_grad=True)
    return make_output("ctc_loss", np.asarray(loss), (logp,), lambda g: (g * grad,))


def ctc_loss_batch(logp: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance CTC losses of a padded (B, T'max, V) tensor, returned as shape (B,)."""
    if logp.ndim != 3 or len(lengths) != logp.shape[0] or len(targets) != logp.shape[0]:
        raise DimensionError("ctc_loss_batch needs (B, T, V) log-probs with B lengths and targets")
    losses = np.zeros(logp.shape[0])
    grad = np.zeros_like(logp.data)
    for b, (n, y) in enumerate(zip(lengths, targets)):
        losses[b], grad[b, :n] = _loss_and_grad(logp.data[b, :n], y, need_grad=True)
    return make_output("ctc_loss_batch", losses, (logp,), lambda g: (g[:, None, None] * grad,))


def ctc_forced_align(grid, labels: Sequence[int]) -> AlignmentPath:
    """Viterbi path Z* among alignments collapsing to ``labels``.

    Ties keep the higher extended-state index, so labels are emitted as early
    as possible.
    """
    lp = _as_logp(grid)
    ext, skip = _extended(labels, lp.shape[0], lp.shape[1])
    t_len, s_len = lp.shape[0], len(ext)
    delta = np.full((t_len, s_len), NEG_INF)
    back = np.zeros((t_len, s_len), dtype=np.int64)
    delta[0, 0] = lp[0, ext[0]]
    delta[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = delta[t - 1]
        cand = np.stack([prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), NEG_INF)])
        choice = np.argmax(cand, axis=0)  # first max wins: stay > step > skip
        delta[t] = cand[choice, np.arange(s_len)] + lp[t, ext]
        back[t] = choice
    s = s_len - 1 if delta[-1, -1] >= delta[-1, -2] else s_len - 2
    best = delta[-1, s]
    if not np.isfinite(best):
        raise InfeasibleError("target has zero probability under the grid")
    states = [s]
    for t in range(t_len - 1, 0, -1):
        s -= back[t, s]
        states.append(s)
    states.reverse()
    return AlignmentPath(tuple(int(ext[s]) for s in states), float(best))


def best_path_decode(grid) -> AlignmentPath:
    """Per-frame argmax; ties go to the lower label id, so blank wins them."""
    lp = _as_logp(grid)
    labels = np.argmax(lp, axis=1)
    score = 0.0
    for t, z in enumerate(labels):
        score += lp[t, z]
    return AlignmentPath(tuple(int(z) for z in labels), float(score))


def beam_align_nbest(grid, beam: int) -> list[AlignmentPath]:
    """Top-``beam`` frame-level paths by joint log-probability.

    Frames are independent given the grid, so a frame-synchronous beam of
    width ``beam`` keeps the exact top-``beam`` set. Equal scores are ordered
    lexicographically by label sequence.
    """
    if beam < 1:
        raise UsageError(f"beam must be >= 1, got {beam}")
    lp = _as_logp(grid)
    hyps: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for t in range(lp.shape[0]):
        row = lp[t]
        cand = [(score + row[k], labels + (k,)) for score, labels in hyps for k in range(lp.shape[1])]
        cand.sort(key=lambda h: (-h[0], h[1]))
        hyps = cand[:beam]
    return [AlignmentPath(labels, float(score)) for score, labels in hyps]


def alignment_to_segments(path) -> list[Segment]:
    """Token spans (t_{u-1}, t_u] where t_u is the last frame of token u's run.

    Blanks before a token belong to it; blanks after the final run belong to
    no token.
    """
    labels = path.labels if isinstance(path, AlignmentPath) else tuple(path)
    ends: list[tuple[int, int]] = []
    for t, z in enumerate(labels):
        z = int(z)
        if z == BLANK:
            continue
        last_of_run = t + 1 == len(labels) or int(labels[t + 1]) != z
        if last_of_run:
            ends.append((z, t + 1))
    if not ends:
        raise NoTokenError("alignment collapses to an empty token sequence")
    segs, prev_end = [], 0
    for token, end in ends:
        segs.append(Segment(token, prev_end + 1, end))
        prev_end = end
    return segs


def expand_segments(segs: Sequence[Segment], context: int, frames: int) -> list[Segment]:
    """Widen each span by ``context`` frames per side, clipped to [1, frames]."""
    if context < 0:
        raise UsageError(f"context must be >= 0, got {context}")
    return [Segment(s.token, max(1, s.start - context), min(frames, s.end + context)) for s in segs]
