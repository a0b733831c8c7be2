"""Joint CTC/CE objective, its iterated (middle-layer) form and label smoothing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .ctc import ctc_loss_batch
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_ce: float = 0.9
    lambda_ctc: float = 0.5
    global_ctc_weight: float = 0.5
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_ctc", "global_ctc_weight", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class LossTerms:
    total: Tensor
    ctc_final: float
    ctc_middle: float
    ce_final: float
    ce_middle: float

    def log_fields(self) -> list[float]:
        return [float(self.total.data), self.ctc_final, self.ctc_middle, self.ce_final, self.ce_middle]


def smoothing_targets(targets: Sequence[Sequence[int]], n_rows: int, vocab: int, eps: float,
                      dtype=np.float64) -> np.ndarray:
    """(B, n_rows, V) target distributions, each row pre-divided by the utterance's token count."""
    if vocab < 2:
        raise DimensionError("label smoothing needs at least two classes")
    out = np.zeros((len(targets), n_rows, vocab), dtype=dtype)
    off = eps / (vocab - 1)
    for b, y in enumerate(targets):
        y = np.asarray(y, dtype=np.int64)
        if len(y) > n_rows:
            raise DimensionError(f"{len(y)} labels for {n_rows} prediction rows")
        if len(y) and (y.min() < 0 or y.max() >= vocab):
            raise UsageError(f"label out of range [0, {vocab})")
        if len(y) == 0:
            continue
        out[b, : len(y)] = off
        out[b, np.arange(len(y)), y] = 1.0 - eps
        out[b, : len(y)] /= len(y)
    return out


def smoothed_ce_batch(logp: Tensor, targets: Sequence[Sequence[int]], eps: float) -> Tensor:
    """Per-utterance mean-over-tokens cross-entropy against smoothed targets, shape (B,)."""
    tgt = smoothing_targets(targets, logp.shape[1], logp.shape[2], eps, logp.dtype)
    return ops.scale(ops.sum(ops.mul(logp, tgt), axis=(1, 2)), -1.0)


def smoothed_ce(logp: Tensor, y: Sequence[int], eps: float) -> Tensor:
    """Cross-entropy of (U, V) log-probs against (1-eps) on the label and eps/(V-1) elsewhere."""
    if logp.ndim != 2 or len(y) != logp.shape[0]:
        raise DimensionError(f"{len(y)} labels for log-probs of shape {logp.shape}")
    batched = ops.reshape(logp, (1, *logp.shape))
    return ops.reshape(smoothed_ce_batch(batched, [y], eps), ())


def _check_rows(art) -> None:
    for b, y in enumerate(art.targets):
        n = int(art.dec.token_valid[b].sum())
        if n != len(y):
            raise AssertionError(f"utterance {b}: {n} decoder rows for {len(y)} labels")


def joint_loss(art, lam: float, eps: float = 0.1) -> LossTerms:
    """lam * CTC(final grid) + (1 - lam) * smoothed CE(final decoder), batch mean."""
    _check_rows(art)
    ctc = ctc_loss_batch(art.enc.ctc_final, art.enc.lengths, art.targets)
    ce = smoothed_ce_batch(art.dec.dec_final, art.targets, eps)
    total = ops.mean(ops.add(ops.scale(ctc, lam), ops.scale(ce, 1.0 - lam)))
    return LossTerms(total, float(ctc.data.mean()), float("nan"), float(ce.data.mean()), float("nan"))


def combine_iterated(ctc_final, ctc_middle, ce_final, ce_middle, cfg: LossConfig):
    """w [l_ctc CTCf + (1 - l_ctc) CTCm] + (1 - w) [l_ce CEf + (1 - l_ce) CEm].

    Works on floats and on Tensors. Terms whose coefficient is exactly zero
    are skipped, so absent middle outputs are allowed when their ratio is 1.
    """
    def part(final, middle, lam):
        if lam == 1.0:
            return final
        if middle is None:
            raise ConfigError("iterated loss needs middle-layer outputs when its ratio is below 1")
        return _lin(final, lam, middle, 1.0 - lam)

    ctc = part(ctc_final, ctc_middle, cfg.lambda_ctc)
    ce = part(ce_final, ce_middle, cfg.lambda_ce)
    return _lin(ctc, cfg.global_ctc_weight, ce, 1.0 - cfg.global_ctc_weight)


def _lin(a, wa, b, wb):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ops.add(ops.scale(a, wa), ops.scale(b, wb))
    return wa * a + wb * b


def iterated_loss(art, cfg: LossConfig) -> LossTerms:
    """Final and middle CTC/CE losses mixed by the task ratios; batch mean."""
    _check_rows(art)
    eps = cfg.label_smoothing
    ctc_f = ctc_loss_batch(art.enc.ctc_final, art.enc.lengths, art.targets)
    ce_f = smoothed_ce_batch(art.dec.dec_final, art.targets, eps)
    ctc_m = ce_m = None
    if cfg.lambda_ctc < 1.0:
        if art.enc.ctc_middle is None:
            raise ConfigError("iterated loss needs the middle CTC head (enc_mid > 0)")
        ctc_m = ctc_loss_batch(art.enc.ctc_middle, art.enc.lengths, art.targets)
    if cfg.lambda_ce < 1.0:
        if art.dec.dec_middle is None:
            raise ConfigError("iterated loss needs the middle decoder head (mad_mid > 0)")
        ce_m = smoothed_ce_batch(art.dec.dec_middle, art.targets, eps)
    total = ops.mean(combine_iterated(ctc_f, ctc_m, ce_f, ce_m, cfg))
    nan = float("nan")
    return LossTerms(
        total, float(ctc_f.data.mean()), nan if ctc_m is None else float(ctc_m.data.mean()),
        float(ce_f.data.mean()), nan if ce_m is None else float(ce_m.data.mean()),
    )


def at_loss(logp: Tensor, out_ids: np.ndarray, out_lens: np.ndarray, enc, lam: float, eps: float) -> LossTerms:
    """Hybrid CTC/attention loss of the AT baseline (teacher forcing)."""
    targets = [list(out_ids[b, : out_lens[b]]) for b in range(len(out_lens))]
    ctc_t = [t[:-1] for t in targets]  # drop end symbol
    ctc = ctc_loss_batch(enc.ctc_final, enc.lengths, ctc_t)
    ce = smoothed_ce_batch(logp, targets, eps)
    total = ops.mean(ops.add(ops.scale(ctc, lam), ops.scale(ce, 1.0 - lam)))
    return LossTerms(total, float(ctc.data.mean()), float("nan"), float(ce.data.mean()), float("nan"))
