"""Masked scaled dot-product attention, heads, clipped relative positions, masks.

Masks are boolean numpy arrays with True meaning "may attend". They are
applied before the softmax so each row renormalizes over permitted keys.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .ctc import Segment
from .errors import ConfigError, DimensionError, MaskError, NoTokenError
from .tensor import Tensor


# ---------------------------------------------------------------- masks

def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    ok = mask.any(axis=-1)
    if not ok.all():
        bad = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise MaskError(f"mask row {bad} permits no keys")
    return mask


def make_trigger_mask(segs: Sequence[Segment], frames: int) -> np.ndarray:
    """Row u is True exactly on frames [start_u, end_u] (1-based, inclusive)."""
    if not segs:
        raise NoTokenError("cannot build a trigger mask for zero tokens")
    mask = np.zeros((len(segs), frames), dtype=bool)
    for u, s in enumerate(segs):
        if not 1 <= s.start <= s.end <= frames:
            raise DimensionError(f"segment {s} outside [1, {frames}]")
        mask[u, s.start - 1:s.end] = True
    return mask


def make_bimask(n: int, valid: int, n_q: int | None = None) -> np.ndarray:
    """Bidirectional mask: every query sees the first ``valid`` keys, padding excluded."""
    if not 0 < valid <= n:
        raise DimensionError(f"valid={valid} must lie in [1, {n}]")
    mask = np.zeros((n if n_q is None else n_q, n), dtype=bool)
    mask[:, :valid] = True
    return mask


def make_causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------- relative positions

@dataclass
class RelPosTable:
    k: int
    table: Tensor  # (2k+1, d_head)

    def __post_init__(self):
        if self.table.shape[0] != 2 * self.k + 1:
            raise ConfigError(f"relative table needs 2k+1={2 * self.k + 1} rows, has {self.table.shape[0]}")

    def index(self, distance: int) -> int:
        return int(np.clip(distance, -self.k, self.k)) + self.k


def relpos_index(n_q: int, n_k: int, k: int) -> np.ndarray:
    """Row index into the table for every (query i, key j): clip(j - i, -k, k) + k."""
    d = np.arange(n_k)[None, :] - np.arange(n_q)[:, None]
    return np.clip(d, -k, k) + k


def relpos_logit(q: np.ndarray, distance: int, rel: RelPosTable) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(q @ rel.table.data[rel.index(distance)] / math.sqrt(q.shape[-1]))


# ---------------------------------------------------------------- attention

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                         relpos: RelPosTable | None = None) -> tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d) + R, masked) V over the last two axes.

    Returns the output and the weight tensor. ``relpos`` adds
    q_i . E[clip(j - i)] / sqrt(d) to each logit.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes Q{q.shape} K{k.shape} V{v.shape}")
    d = q.shape[-1]
    n_q, n_k = q.shape[-2], k.shape[-2]
    scale = 1.0 / math.sqrt(d)
    logits = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), scale)
    if relpos is not None:
        rel = ops.matmul(q, ops.transpose(relpos.table, (1, 0)))
        rel = ops.gather_lastdim(rel, relpos_index(n_q, n_k, relpos.k))
        logits = ops.add(logits, ops.scale(rel, scale))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (n_q, n_k):
            raise DimensionError(f"mask {mask.shape} vs attention {n_q}x{n_k}")
        check_mask(mask)
    weights = ops.softmax_lastdim(logits, mask)
    return ops.matmul(weights, v), weights


def split_heads(x: Tensor, nh: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, nh, d // nh))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, nh, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.reshape(ops.transpose(x, axes), (*lead, n, nh * dh))


def multi_head_attention(x_q: Tensor, x_kv: Tensor, mask, p: dict, nh: int,
                         relpos: RelPosTable | None = None) -> tuple[Tensor, Tensor]:
    """Project, attend per head, concatenate, project back.

    ``p`` holds ``wq bq wk bk wv bv wo bo``. Inputs are (..., n, d_att); a mask
    of shape (n_q, n_k) or (B, n_q, n_k) is shared across heads. The second
    return value holds the per-head weights, shape (..., nh, n_q, n_k).
    """
    d_att = p["wq"].shape[1]
    if d_att % nh:
        raise ConfigError(f"d_att={d_att} is not divisible by nh={nh}")
    q = split_heads(ops.linear(x_q, p["wq"], p["bq"]), nh)
    k = split_heads(ops.linear(x_kv, p["wk"], p["bk"]), nh)
    v = split_heads(ops.linear(x_kv, p["wv"], p["bv"]), nh)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask[..., None, :, :]  # broadcast over heads
    out, weights = scaled_dot_attention(q, k, v, mask, relpos)
    return ops.linear(merge_heads(out), p["wo"], p["bo"]), weights


def init_attention(rng: np.random.Generator, d_att: int, d_kv: int | None = None) -> dict:
    d_kv = d_att if d_kv is None else d_kv
    s_q, s_o = 1.0 / math.sqrt(d_att), 1.0 / math.sqrt(d_att)
    s_kv = 1.0 / math.sqrt(d_kv)
    return {
        "wq": rng.normal(0, s_q, (d_att, d_att)), "bq": np.zeros(d_att),
        "wk": rng.normal(0, s_kv, (d_kv, d_att)), "bk": np.zeros(d_att),
        "wv": rng.normal(0, s_kv, (d_kv, d_att)), "bv": np.zeros(d_att),
        "wo": rng.normal(0, s_o, (d_att, d_att)), "bo": np.zeros(d_att),
    }
