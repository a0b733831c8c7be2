"""Finite-difference checks of every trainable block at toy widths.

Each check draws random inputs and parameters, reduces the block output to a
scalar with a fixed random projection, and runs :func:`grad_check` over the
block input and all of its parameters together. A fault can be injected into
any block: its output then passes through an identity whose backward is
deliberately wrong, which the check must catch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import RelPosTable, init_attention, multi_head_attention
from .blocks import (
    RunCtx, conv_frontend, conv_module, encoder_block, init_conv, init_encoder_block, init_frontend,
    init_mad_block, init_relpos, init_sad_block, init_tae, mad_block, sad_block, token_acoustic_extractor,
)
from .ctc import ctc_loss_batch
from .errors import UsageError
from .gradcheck import GradCheckReport, grad_check
from .losses import LossConfig, iterated_loss, smoothed_ce_batch
from .model import CassNat, ModelConfig
from .tensor import Tensor, make_output

D, NH, DFF, K_REL = 8, 2, 16, 3


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}\t{self.name}\tmax_rel_error={self.report.max_rel_error:.3e}"
                f"\ttol={self.report.tol:g}\tprobes={self.report.n_probes}")


def _faulty(x: Tensor) -> Tensor:
    """Identity forward, gradient scaled by 1.5 backward."""
    return make_output("fault", x.data.copy(), (x,), lambda g: (1.5 * g,))


def _project(out: Tensor, rng) -> Tensor:
    r = rng.normal(size=out.shape)
    return ops.sum(ops.mul(out, r))


def _tensors(raw: dict) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=np.float64), name=k) for k, v in raw.items()}


def _jitter(raw: dict, rng, scale: float = 0.3) -> dict:
    """Break symmetric initial values (unit gains, zero biases) so every path is exercised."""
    return {k: np.asarray(v) + rng.normal(0, scale, np.shape(v)) for k, v in raw.items()}


# Gradients below this magnitude are compared in absolute terms (tol * FLOOR);
# finite-difference round-off on structurally zero gradients reaches ~1e-9.
FLOOR = 1e-4


def _run(name: str, rng, x: Tensor, params: dict[str, Tensor], body: Callable, fault: bool,
         tol: float, probes: int, seed: int) -> CheckResult:
    names = list(params)

    def f(x_, *ps):
        out = body(x_, dict(zip(names, ps)))
        if fault:
            out = _faulty(out)
        return out if out.data.size == 1 else _project(out, np.random.default_rng(seed + 1))

    rep = grad_check(f, [x, *params.values()], tol=tol, probes=probes, seed=seed, floor=FLOOR)
    return CheckResult(name, rep)


def _valid(lengths, n):
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def check_frontend(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 9, 8)))
    p = _tensors(_jitter(init_frontend(rng, 8, D, channels=4), rng, 0.1))
    return _run("frontend", rng, x, p, lambda x_, p_: conv_frontend(x_, p_, [9, 6])[0], fault, tol, probes, seed)


def check_attention(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 5, D)))
    valid = _valid([5, 3], 5)
    mask = np.broadcast_to(valid[:, None, :], (2, 5, 5))
    p = _tensors(init_attention(rng, D))
    p["rel"] = Tensor(init_relpos(rng, K_REL, D // NH))

    def body(x_, p_):
        rel = RelPosTable(K_REL, p_["rel"])
        return multi_head_attention(x_, x_, mask, p_, NH, rel)[0]
    return _run("attention", rng, x, p, body, fault, tol, probes, seed)


def check_conv(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 6, D)))
    valid = _valid([6, 4], 6)
    p = _tensors(_jitter(init_conv(rng, D, 3), rng))
    return _run("conv", rng, x, p, lambda x_, p_: conv_module(x_, p_, None, valid), fault, tol, probes, seed)


def check_encoder(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 6, D)))
    valid = _valid([6, 4], 6)
    mask = np.broadcast_to(valid[:, None, :], (2, 6, 6))
    p = _tensors(_jitter(init_encoder_block(rng, D, DFF, 3), rng))
    p["rel"] = Tensor(init_relpos(rng, K_REL, D // NH))

    def body(x_, p_):
        return encoder_block(x_, mask, p_, RelPosTable(K_REL, p_["rel"]), NH, None, valid)
    return _run("encoder", rng, x, p, body, fault, tol, probes, seed)


def check_tae(rng, fault, tol, probes, seed):
    h = Tensor(rng.normal(size=(2, 6, D)))
    trigger = np.zeros((2, 3, 6), dtype=bool)
    for b, spans in enumerate([[(0, 2), (1, 4), (3, 6)], [(0, 3), (2, 4), (0, 4)]]):
        for u, (s, e) in enumerate(spans):
            trigger[b, u, s:e] = True
    p = _tensors(_jitter(init_tae(rng, D, DFF), rng))
    return _run("tae", rng, h, p, lambda h_, p_: token_acoustic_extractor(h_, trigger, p_, NH), fault, tol, probes, seed)


def check_sad(rng, fault, tol, probes, seed):
    s = Tensor(rng.normal(size=(2, 4, D)))
    valid = _valid([4, 2], 4)
    mask = np.broadcast_to(valid[:, None, :], (2, 4, 4))
    p = _tensors(_jitter(init_sad_block(rng, D, DFF), rng))
    p["rel"] = Tensor(init_relpos(rng, K_REL, D // NH))

    def body(s_, p_):
        return sad_block(s_, mask, p_, RelPosTable(K_REL, p_["rel"]), NH)
    return _run("sad", rng, s, p, body, fault, tol, probes, seed)


def check_mad(rng, fault, tol, probes, seed):
    s = Tensor(rng.normal(size=(2, 4, D)))
    valid = _valid([4, 2], 4)
    h_valid = _valid([6, 5], 6)
    self_mask = np.broadcast_to(valid[:, None, :], (2, 4, 4))
    cross_mask = np.broadcast_to(h_valid[:, None, :], (2, 4, 6))
    p = _tensors(_jitter(init_mad_block(rng, D, DFF, 3), rng))
    p["rel"] = Tensor(init_relpos(rng, K_REL, D // NH))
    p["h"] = Tensor(rng.normal(size=(2, 6, D)))

    def body(s_, p_):
        return mad_block(s_, p_["h"], self_mask, cross_mask, p_, RelPosTable(K_REL, p_["rel"]), NH, None, valid)
    return _run("mad", rng, s, p, body, fault, tol, probes, seed)


def check_ctc(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 7, 4)))
    lengths, targets = [7, 5], [[1, 2, 2], [3, 1]]
    body = lambda x_, _p: ops.mean(ctc_loss_batch(ops.log_softmax(x_), lengths, targets))  # noqa: E731
    return _run("ctc", rng, x, {}, body, fault, tol, probes, seed)


def check_ce(rng, fault, tol, probes, seed):
    x = Tensor(rng.normal(size=(2, 4, 5)))
    targets = [[1, 4, 2, 2], [3, 1]]
    body = lambda x_, _p: ops.mean(smoothed_ce_batch(ops.log_softmax(x_), targets, 0.1))  # noqa: E731
    return _run("ce", rng, x, {}, body, fault, tol, probes, seed)


def toy_config(**overrides) -> ModelConfig:
    base = dict(feat_dim=8, vocab=5, d_att=D, nh=NH, d_ff=DFF, n_enc=2, n_sad=1, n_mad=2,
                k_enc=4, k_dec=2, enc_kernel=3, dec_kernel=3, frontend_channels=4, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def check_objective(rng, fault, tol, probes, seed):
    cfg = toy_config()
    model = CassNat(cfg, seed=seed)
    feats = [rng.normal(size=(20, 8)), rng.normal(size=(16, 8))]
    targets = [[1, 2, 3], [4, 2]]
    x = Tensor(np.stack([feats[0], np.pad(feats[1], ((0, 4), (0, 0)))]))
    lengths = [20, 16]

    def body(x_, p_):
        model.params = p_
        art = model.forward_train(x_, targets, lengths, RunCtx())
        return iterated_loss(art, LossConfig()).total
    return _run("objective", rng, x, dict(model.params), body, fault, tol, probes, seed)


CHECKS: dict[str, Callable] = {
    "frontend": check_frontend,
    "attention": check_attention,
    "conv": check_conv,
    "encoder": check_encoder,
    "tae": check_tae,
    "sad": check_sad,
    "mad": check_mad,
    "ctc": check_ctc,
    "ce": check_ce,
    "objective": check_objective,
}


def run_suite(modules=None, inject_fault: str | None = None, tol: float = 1e-4, probes: int = 60,
              seed: int = 0) -> list[CheckResult]:
    """Run the selected checks (all by default) in a fixed order."""
    names = list(CHECKS) if not modules else list(modules)
    for n in names + ([inject_fault] if inject_fault else []):
        if n not in CHECKS:
            raise UsageError(f"unknown gradient check {n!r}; choose from {', '.join(CHECKS)}")
    out = []
    for i, n in enumerate(names):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(CHECKS[n](rng, n == inject_fault, tol, probes, seed))
    return out
