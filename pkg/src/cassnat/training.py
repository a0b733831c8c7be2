"""Adam with inverse-square-root warmup, the training loop, evaluation and averaging."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .blocks import RunCtx
from .data import SpecMaskConfig, spec_mask
from .errors import ConfigError, NumericError
from .losses import LossConfig, LossTerms, at_loss, iterated_loss
from .model import ATBaseline, CassNat, pad_batch
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

Dataset = Sequence[tuple[np.ndarray, list[int]]]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    n_average: int = 3
    patience: int = 0  # epochs without improvement before stopping; 0 disables
    seed: int = 0
    eval_batch: int = 64
    spec: SpecMaskConfig = field(default_factory=SpecMaskConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup < 1 or self.n_average < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, warmup >= 1 and n_average >= 1 required")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0")


def noam_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup`` steps, then decay as 1/sqrt(step)."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * p.grad
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: a.copy() for k, a in state["m"].items()}
        self.v = {k: a.copy() for k, a in state["v"].items()}


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


# ---------------------------------------------------------------- evaluation

def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


@dataclass
class EvalResult:
    token_accuracy: float
    sequence_error: float
    n_utts: int
    hypotheses: list[list[int]] = field(default_factory=list, repr=False)


def decode_dataset(model, data: Dataset, batch: int = 64) -> list[list[int]]:
    hyps: list[list[int]] = []
    for i in range(0, len(data), batch):
        chunk = data[i:i + batch]
        feats = [f for f, _ in chunk]
        if isinstance(model, ATBaseline):
            hyps.extend(r.tokens for f in feats for r in model.decode(f))
        else:
            hyps.extend(r.tokens for r in model.decode_greedy(feats))
    return hyps


def evaluate(model, data: Dataset, batch: int = 64) -> EvalResult:
    """Token accuracy = 1 - total edit distance / total reference tokens."""
    hyps = decode_dataset(model, data, batch)
    errs = sum(edit_distance(h, y) for h, (_, y) in zip(hyps, data))
    n_ref = sum(len(y) for _, y in data)
    seq_err = sum(h != list(y) for h, (_, y) in zip(hyps, data)) / max(len(data), 1)
    return EvalResult(1.0 - errs / max(n_ref, 1), seq_err, len(data), hyps)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: dict
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best: list[tuple[float, int, dict[str, np.ndarray]]] = field(default_factory=list)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: TrainState
    history: list[dict]
    loss_log: list[list[float]]
    diverged: bool = False
    seconds: float = 0.0


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def average_params(snaps: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: sum(s[k] for s in snaps) / len(snaps) for k in snaps[0]}


def step_loss(model, feats, lengths, targets, loss_cfg: LossConfig, ctx: RunCtx) -> LossTerms:
    if isinstance(model, ATBaseline):
        enc, logp, out_ids, out_lens = model.forward_train(feats, targets, lengths, ctx)
        return at_loss(logp, out_ids, out_lens, enc, loss_cfg.global_ctc_weight, loss_cfg.label_smoothing)
    art = model.forward_train(feats, targets, lengths, ctx)
    return iterated_loss(art, loss_cfg)


def train(model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, loss_cfg: LossConfig,
          log_file: TextIO | None = None, resume: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch training with per-epoch validation and best-k checkpoint averaging.

    Batches are shuffled with a generator keyed on (seed, epoch); dropout and
    masking are keyed on the global step, so resuming from an epoch boundary
    reproduces an uninterrupted run exactly.
    """
    params = model.params
    for p in params.values():
        p.requires_grad = True
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state = TrainState(_snapshot(params), opt.state())
    if resume is not None:
        for k, a in resume.params.items():
            params[k].data = a.copy()
        opt.load(resume.opt)
        state = copy.deepcopy(resume)
    dropout = model.cfg.dropout
    loss_log: list[list[float]] = []
    t0 = time.perf_counter()
    diverged = False
    last_good = _snapshot(params)
    since_best = 0

    while state.epoch < cfg.epochs:
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, state.epoch])).permutation(len(train_set))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            state.step += 1
            feats = []
            for j, u in enumerate(idx):
                f = train_set[u][0]
                if cfg.spec.n_time_masks or cfg.spec.n_freq_masks:
                    f = spec_mask(f, cfg.spec.n_time_masks, cfg.spec.max_time, cfg.spec.n_freq_masks,
                                  cfg.spec.max_freq, np.random.SeedSequence([cfg.seed, 2, state.step, j]))
                feats.append(f)
            x, lengths = pad_batch(feats, model.cfg.dtype)
            targets = [train_set[u][1] for u in idx]
            ctx = RunCtx(training=True, dropout=dropout, seed=cfg.seed, step=state.step)
            for p in params.values():
                p.grad = None
            try:
                with Tape() as tape:
                    terms = step_loss(model, Tensor(x), lengths, targets, loss_cfg, ctx)
                if not np.isfinite(terms.total.data):
                    raise NumericError("loss is not finite")
                backward(tape, terms.total)
                clip_grads(params, cfg.grad_clip)
            except NumericError as exc:
                log.error("divergence at step %d: %s; restoring last good parameters", state.step, exc)
                for k, a in last_good.items():
                    params[k].data = a.copy()
                diverged = True
                break
            opt.step(noam_lr(state.step, cfg.peak_lr, cfg.warmup))
            row = [state.step, *terms.log_fields()]
            loss_log.append(row)
            if log_file is not None:
                log_file.write(f"{row[0]}\t" + "\t".join(f"{v:.6f}" for v in row[1:]) + "\n")
        if diverged:
            break
        state.epoch += 1
        ev = evaluate(model, val_set, cfg.eval_batch)
        rec = {"epoch": state.epoch, "step": state.step, "val_token_acc": ev.token_accuracy,
               "val_seq_err": ev.sequence_error, "seconds": time.perf_counter() - t0}
        state.history.append(rec)
        log.info("epoch %d step %d val acc %.4f seq err %.4f", state.epoch, state.step,
                 ev.token_accuracy, ev.sequence_error)
        if on_epoch is not None:
            on_epoch(rec)
        improved = not state.best or ev.token_accuracy > max(b[0] for b in state.best)
        state.best.append((ev.token_accuracy, state.epoch, _snapshot(params)))
        state.best.sort(key=lambda b: (-b[0], -b[1]))
        del state.best[cfg.n_average:]
        last_good = _snapshot(params)
        state.params = last_good
        state.opt = opt.state()
        since_best = 0 if improved else since_best + 1
        if cfg.patience and since_best >= cfg.patience:
            break

    if state.best:
        final = average_params([b[2] for b in state.best])
    else:
        final = _snapshot(params)
    out = {k: Tensor(a, name=k) for k, a in final.items()}
    return TrainResult(out, state, state.history, loss_log, diverged, time.perf_counter() - t0)
