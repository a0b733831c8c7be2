"""Attention-weight dumps, token-level acoustic embedding tables, cosine neighbours, PCA."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .blocks import RunCtx, frontend_frames
from .ctc import min_frames
from .errors import DegenerateError, UsageError
from .model import CassNat

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- attention dumps

@dataclass
class AttentionDump:
    layer: str
    head: int        # 1-based
    weights: np.ndarray


def last_layers(model: CassNat) -> list[str]:
    """Self-attention of the last SAD block and the last MAD block."""
    return [f"sad.{model.cfg.n_sad - 1}.self", f"mad.{model.cfg.n_mad - 1}.self"]


def dump_attention(model: CassNat, feats: np.ndarray, layers: Sequence[str] | None = None,
                   heads: Sequence[int] | None = None, labels: Sequence[int] | None = None) -> list[AttentionDump]:
    """Per-head weight matrices of one utterance.

    With ``labels`` the tokens come from forced alignment, otherwise from the
    best CTC path. ``heads`` are 1-based.
    """
    ctx = RunCtx()
    ctx.attn = {}
    if labels is not None:
        model.forward_train(feats, [list(labels)], ctx=ctx)
    else:
        res = model.decode_greedy(feats, ctx=ctx)
        if not res[0].tokens:
            raise UsageError("utterance decodes to zero tokens; no decoder attention to dump")
    layers = list(layers) if layers is not None else last_layers(model)
    heads = list(heads) if heads is not None else list(range(1, model.cfg.nh + 1))
    out = []
    for name in layers:
        if name not in ctx.attn:
            raise UsageError(f"unknown attention layer {name!r}; have {sorted(ctx.attn)}")
        w = ctx.attn[name][0]
        for h in heads:
            if not 1 <= h <= w.shape[0]:
                raise UsageError(f"head {h} out of range 1..{w.shape[0]}")
            out.append(AttentionDump(name.removesuffix(".self"), h, w[h - 1]))
    return out


def write_attention(dumps: Iterable[AttentionDump], fh: TextIO) -> None:
    for d in dumps:
        n_q, n_k = d.weights.shape
        fh.write(f"# layer={d.layer} head={d.head} rows={n_q} cols={n_k}\n")
        for row in d.weights:
            fh.write(" ".join(f"{v:.8g}" for v in row) + "\n")


def read_attention(fh: TextIO) -> list[AttentionDump]:
    dumps, cur, rows = [], None, []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if cur is not None:
                dumps.append(AttentionDump(cur[0], cur[1], np.array(rows)))
            kv = dict(item.split("=") for item in line[1:].split())
            cur, rows = (kv["layer"], int(kv["head"])), []
        else:
            rows.append([float(v) for v in line.split()])
    if cur is not None:
        dumps.append(AttentionDump(cur[0], cur[1], np.array(rows)))
    return dumps


# ---------------------------------------------------------------- embedding tables

class EmbeddingTable:
    """Running per-token mean of embedding vectors."""

    def __init__(self):
        self.means: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {}

    def add(self, token: int, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        n = self.counts.get(token, 0) + 1
        self.counts[token] = n
        if n == 1:
            self.means[token] = vec.copy()
        else:
            self.means[token] = self.means[token] + (vec - self.means[token]) / n

    def __contains__(self, token: int) -> bool:
        return token in self.means

    def __len__(self) -> int:
        return len(self.means)

    def tokens(self) -> list[int]:
        return sorted(self.means)

    def matrix(self) -> tuple[list[int], np.ndarray]:
        toks = self.tokens()
        return toks, np.stack([self.means[t] for t in toks])

    def write(self, fh: TextIO) -> None:
        for t in self.tokens():
            fh.write(f"{t}\t{self.counts[t]}\t" + " ".join(repr(float(v)) for v in self.means[t]) + "\n")

    @classmethod
    def read(cls, fh: TextIO) -> "EmbeddingTable":
        table = cls()
        for line in fh:
            if not line.strip():
                continue
            tok, count, vec = line.rstrip("\n").split("\t")
            table.means[int(tok)] = np.array([float(v) for v in vec.split()])
            table.counts[int(tok)] = int(count)
        return table


def extract_embeddings(model: CassNat, dataset, tap: str = "tae", batch: int = 32) -> EmbeddingTable:
    """Token-level acoustic embeddings labelled by ground truth, averaged per token.

    ``tap`` selects the representation: the TAE output (default), the last
    SAD output or the last MAD output.
    """
    if tap not in ("tae", "sad", "mad"):
        raise UsageError(f"tap must be tae, sad or mad; got {tap!r}")
    table = EmbeddingTable()
    skipped = 0
    for i in range(0, len(dataset), batch):
        chunk = dataset[i:i + batch]
        ok = []
        for feats, y in chunk:
            if not y or frontend_frames(len(feats)) < min_frames(y):
                skipped += 1
                continue
            ok.append((feats, y))
        if not ok:
            continue
        art = model.forward_train([f for f, _ in ok], [y for _, y in ok])
        src = {"tae": art.dec.embeddings, "sad": art.dec.sad_states, "mad": art.dec.states}[tap].data
        for b, (_, y) in enumerate(ok):
            for u, tok in enumerate(y):
                table.add(int(tok), src[b, u])
    if skipped:
        log.warning("skipped %d infeasible utterances", skipped)
    return table


def cosine_neighbors(table: EmbeddingTable, token: int, n: int) -> list[tuple[int, float]]:
    """Other tokens ranked by descending cosine similarity to ``token`` (ties by id)."""
    if token not in table:
        raise UsageError(f"token {token} not in the embedding table")
    if len(table) <= n:
        raise UsageError(f"table holds {len(table)} tokens; need more than n={n}")
    q = table.means[token]
    qn = np.linalg.norm(q)
    if qn == 0:
        raise DegenerateError(f"token {token} has a zero-norm embedding")
    sims = []
    for t in table.tokens():
        if t == token:
            continue
        v = table.means[t]
        vn = np.linalg.norm(v)
        if vn == 0:
            raise DegenerateError(f"token {t} has a zero-norm embedding")
        sims.append((t, float(q @ v / (qn * vn))))
    sims.sort(key=lambda s: (-s[1], s[0]))
    return sims[:n]


def mutual_top_k(table: EmbeddingTable, a: int, b: int, k: int = 3) -> bool:
    return (b in [t for t, _ in cosine_neighbors(table, a, k)]
            and a in [t for t, _ in cosine_neighbors(table, b, k)])


# ---------------------------------------------------------------- PCA

def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm falls below
    ``tol * ||A||_F``. Returns eigenvalues in descending order and
    the matching eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise UsageError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # theta**2 would overflow; t -> 1 / (2 theta)
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class PCAResult:
    coords: np.ndarray       # (n, 2)
    explained: np.ndarray    # (2,) variances along the two axes
    components: np.ndarray   # (2, d)
    mean: np.ndarray

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained / self.total_variance if self.total_variance > 0 else self.explained

    total_variance: float = 0.0


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if len(nz) and vec[nz[0]] < 0:
        return -vec
    return vec


def pca_2d(vectors) -> PCAResult:
    """Project onto the top two principal axes of the centred data."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise UsageError(f"pca_2d needs at least 2 vectors of dimension >= 2, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    # Spread at the level of rounding in the mean counts as no spread.
    if np.ptp(x, axis=0).max() <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise DegenerateError("all vectors are identical (rank-0 data)")
    w, v = jacobi_eigh(cov)
    comps = np.stack([_fix_sign(v[:, 0]), _fix_sign(v[:, 1])])
    w = np.maximum(w, 0.0)
    return PCAResult(xc @ comps.T, w[:2].copy(), comps, mu, float(w.sum()))


def write_pca(tokens: Sequence[int], res: PCAResult, fh: TextIO) -> None:
    for t, (x, y) in zip(tokens, res.coords):
        fh.write(f"{t}\t{x:.10g}\t{y:.10g}\n")
