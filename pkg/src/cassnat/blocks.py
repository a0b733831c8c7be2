"""Composite layers: frontend, half-step FFN, convolution module, encoder/SAD/MAD blocks, TAE.

Block functions take a flat parameter dict whose keys are relative to the
block (``ffn1.w1``, ``self.wq`` ...); :func:`scope` cuts such a view out of a
model-wide dict. Batched inputs are (B, n, d) with boolean ``valid`` arrays
of shape (B, n) marking real (non-padding) positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import RelPosTable, init_attention, multi_head_attention
from .errors import ConfigError
from .tensor import Tensor


def scope(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class RunCtx:
    """Per-forward switches: dropout on/off and its counter-based key."""

    training: bool = False
    dropout: float = 0.0
    seed: int = 0
    step: int = 0
    _layer: int = field(default=0, repr=False)
    attn: dict | None = None  # filled with per-head weights when not None

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout <= 0.0:
            return x
        self._layer += 1
        return ops.dropout(x, self.dropout, ops.dropout_generator(self.seed, self.step, self._layer))

    def keep(self, name: str, weights: Tensor) -> None:
        if self.attn is not None:
            self.attn[name] = weights.data


EVAL = RunCtx()


def _ctx(ctx: RunCtx | None) -> RunCtx:
    return EVAL if ctx is None else ctx


def _zero_padding(x: Tensor, valid) -> Tensor:
    if valid is None:
        return x
    return ops.mul(x, np.asarray(valid, dtype=x.dtype)[..., None])


# ---------------------------------------------------------------- frontend

def frontend_frames(t: int) -> int:
    return -(-(-(-t // 2)) // 2)


def conv_frontend(features: Tensor, p: dict, lengths=None) -> tuple[Tensor, np.ndarray]:
    """Two stride-2 3x3 convolutions with swish, flatten channels x frequency, project.

    ``features`` is (B, T, F). Returns (B, T', d_att) and the per-utterance T'.
    """
    bsz, t, f = features.shape
    if f < 4:
        raise ConfigError(f"feature width {f} is too small for two stride-2 reductions (need >= 4)")
    if t < 1:
        raise ConfigError("need at least one input frame")
    lengths = np.full(bsz, t) if lengths is None else np.asarray(lengths)
    len1 = -(-lengths // 2)
    len2 = -(-len1 // 2)
    x = ops.mul(features, (np.arange(t)[None, :] < lengths[:, None]).astype(features.dtype)[:, :, None])
    x = ops.reshape(x, (bsz, t, f, 1))
    x = ops.swish(ops.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
    x = ops.mul(x, (np.arange(x.shape[1])[None, :] < len1[:, None]).astype(x.dtype)[:, :, None, None])
    x = ops.swish(ops.conv2d(x, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
    x = ops.mul(x, (np.arange(x.shape[1])[None, :] < len2[:, None]).astype(x.dtype)[:, :, None, None])
    _, t2, f2, c = x.shape
    x = ops.reshape(x, (bsz, t2, f2 * c))
    return ops.linear(x, p["proj.w"], p["proj.b"]), len2


def init_frontend(rng, feat_dim: int, d_att: int, channels: int = 64) -> dict:
    f2 = frontend_frames(feat_dim)
    return {
        "conv1.w": rng.normal(0, 1.0 / 3.0, (3, 3, 1, channels)), "conv1.b": np.zeros(channels),
        "conv2.w": rng.normal(0, 1.0 / math.sqrt(9 * channels), (3, 3, channels, channels)),
        "conv2.b": np.zeros(channels),
        "proj.w": rng.normal(0, 1.0 / math.sqrt(f2 * channels), (f2 * channels, d_att)),
        "proj.b": np.zeros(d_att),
    }


# ---------------------------------------------------------------- sub-layers

def ffn(x: Tensor, p: dict, ctx: RunCtx | None = None) -> Tensor:
    ctx = _ctx(ctx)
    h = ops.swish(ops.linear(x, p["w1"], p["b1"]))
    return ops.linear(ctx.drop(h), p["w2"], p["b2"])


def ffn_half(x: Tensor, p: dict, ctx: RunCtx | None = None) -> Tensor:
    return ops.add(x, ops.scale(ffn(x, p, ctx), 0.5))


def layer_norm(x: Tensor, p: dict) -> Tensor:
    return ops.layer_norm(x, p["g"], p["b"], 1e-5)


def conv_branch(x: Tensor, p: dict, ctx: RunCtx | None = None, valid=None) -> Tensor:
    """pointwise(2d) -> GLU -> depthwise -> LayerNorm -> swish -> pointwise(d) -> dropout."""
    ctx = _ctx(ctx)
    h = ops.glu(ops.linear(x, p["pw1.w"], p["pw1.b"]))
    h = _zero_padding(h, valid)
    h = ops.depthwise_conv1d(h, p["dw.w"], p["dw.b"])
    h = ops.swish(ops.layer_norm(h, p["ln.g"], p["ln.b"], 1e-5))
    return ctx.drop(ops.linear(h, p["pw2.w"], p["pw2.b"]))


def conv_module(x: Tensor, p: dict, ctx: RunCtx | None = None, valid=None) -> Tensor:
    if p["dw.w"].shape[0] % 2 == 0:
        raise ConfigError(f"depthwise kernel width must be odd, got {p['dw.w'].shape[0]}")
    return ops.add(x, conv_branch(x, p, ctx, valid))


# ---------------------------------------------------------------- blocks

def encoder_block(x: Tensor, mask, p: dict, relpos: RelPosTable | None, nh: int,
                  ctx: RunCtx | None = None, valid=None, name: str = "enc") -> Tensor:
    """Half FFN, self-attention with LN on its output, conv module, half FFN, final LN."""
    ctx = _ctx(ctx)
    x = ffn_half(x, scope(p, "ffn1."), ctx)
    a, w = multi_head_attention(x, x, mask, scope(p, "self."), nh, relpos)
    ctx.keep(f"{name}.self", w)
    x = ops.add(x, ctx.drop(layer_norm(a, scope(p, "ln_self."))))
    x = conv_module(x, scope(p, "conv."), ctx, valid)
    return layer_norm(ffn_half(x, scope(p, "ffn2."), ctx), scope(p, "ln_out."))


def mad_block(s: Tensor, h: Tensor, self_mask, cross_mask, p: dict, relpos: RelPosTable | None,
              nh: int, ctx: RunCtx | None = None, valid=None, name: str = "mad") -> Tensor:
    """Mixed-attention decoder block.

    s1 = s + FFN(s)/2
    s2 = s1 + LN(SelfAttn(s1))
    s3 = s2 + Conv(s2)
    s4 = s3 + LN(CrossAttn(s3, H))
    o  = LN(s4 + FFN(s4)/2)
    """
    ctx = _ctx(ctx)
    s1 = ffn_half(s, scope(p, "ffn1."), ctx)
    a, w = multi_head_attention(s1, s1, self_mask, scope(p, "self."), nh, relpos)
    ctx.keep(f"{name}.self", w)
    s2 = ops.add(s1, ctx.drop(layer_norm(a, scope(p, "ln_self."))))
    s3 = conv_module(s2, scope(p, "conv."), ctx, valid)
    c, w = multi_head_attention(s3, h, cross_mask, scope(p, "cross."), nh)
    ctx.keep(f"{name}.cross", w)
    s4 = ops.add(s3, ctx.drop(layer_norm(c, scope(p, "ln_cross."))))
    return layer_norm(ffn_half(s4, scope(p, "ffn2."), ctx), scope(p, "ln_out."))


def sad_block(s: Tensor, mask, p: dict, relpos: RelPosTable | None, nh: int,
              ctx: RunCtx | None = None, name: str = "sad") -> Tensor:
    """Pre-norm self-attention block without convolution and without access to H."""
    ctx = _ctx(ctx)
    n = layer_norm(s, scope(p, "ln1."))
    a, w = multi_head_attention(n, n, mask, scope(p, "self."), nh, relpos)
    ctx.keep(f"{name}.self", w)
    s = ops.add(s, ctx.drop(a))
    return ops.add(s, ctx.drop(ffn(layer_norm(s, scope(p, "ln2.")), scope(p, "ffn."), ctx)))


def token_acoustic_extractor(h: Tensor, trigger, p: dict, nh: int,
                             ctx: RunCtx | None = None, name: str = "tae") -> Tensor:
    """One embedding per token: position queries cross-attend to H under the trigger mask.

    ``trigger`` is (U, T') or (B, U, T').
    """
    ctx = _ctx(ctx)
    trigger = np.asarray(trigger, dtype=bool)
    n_tok = trigger.shape[-2]
    pos = Tensor(ops.sinusoidal_positions(n_tok, p["pos.w"].shape[0]), dtype=h.dtype)
    q = ops.linear(pos, p["pos.w"], p["pos.b"])
    e, w = multi_head_attention(q, h, trigger, scope(p, "cross."), nh)
    ctx.keep(f"{name}.cross", w)
    return ffn_half(e, scope(p, "ffn."), ctx)


# ---------------------------------------------------------------- initialisation

def _ln(d: int) -> dict:
    return {"g": np.ones(d), "b": np.zeros(d)}


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


def init_ffn(rng, d: int, d_ff: int) -> dict:
    return {
        "w1": rng.normal(0, 1.0 / math.sqrt(d), (d, d_ff)), "b1": np.zeros(d_ff),
        "w2": rng.normal(0, 1.0 / math.sqrt(d_ff), (d_ff, d)), "b2": np.zeros(d),
    }


def init_conv(rng, d: int, kernel: int) -> dict:
    if kernel % 2 == 0:
        raise ConfigError(f"depthwise kernel width must be odd, got {kernel}")
    return {
        "pw1.w": rng.normal(0, 1.0 / math.sqrt(d), (d, 2 * d)), "pw1.b": np.zeros(2 * d),
        "dw.w": rng.normal(0, 1.0 / math.sqrt(kernel), (kernel, d)), "dw.b": np.zeros(d),
        "ln.g": np.ones(d), "ln.b": np.zeros(d),
        "pw2.w": rng.normal(0, 1.0 / math.sqrt(d), (d, d)), "pw2.b": np.zeros(d),
    }


def init_encoder_block(rng, d: int, d_ff: int, kernel: int) -> dict:
    p = {}
    p.update(_prefixed("ffn1.", init_ffn(rng, d, d_ff)))
    p.update(_prefixed("self.", init_attention(rng, d)))
    p.update(_prefixed("ln_self.", _ln(d)))
    p.update(_prefixed("conv.", init_conv(rng, d, kernel)))
    p.update(_prefixed("ffn2.", init_ffn(rng, d, d_ff)))
    p.update(_prefixed("ln_out.", _ln(d)))
    return p


def init_mad_block(rng, d: int, d_ff: int, kernel: int) -> dict:
    p = init_encoder_block(rng, d, d_ff, kernel)
    p.update(_prefixed("cross.", init_attention(rng, d)))
    p.update(_prefixed("ln_cross.", _ln(d)))
    return p


def init_sad_block(rng, d: int, d_ff: int) -> dict:
    p = {}
    p.update(_prefixed("ln1.", _ln(d)))
    p.update(_prefixed("self.", init_attention(rng, d)))
    p.update(_prefixed("ln2.", _ln(d)))
    p.update(_prefixed("ffn.", init_ffn(rng, d, d_ff)))
    return p


def init_tae(rng, d: int, d_ff: int) -> dict:
    p = {"pos.w": rng.normal(0, 1.0 / math.sqrt(d), (d, d)), "pos.b": np.zeros(d)}
    p.update(_prefixed("cross.", init_attention(rng, d)))
    p.update(_prefixed("ffn.", init_ffn(rng, d, d_ff)))
    return p


def init_relpos(rng, k: int, d_head: int) -> np.ndarray:
    return rng.normal(0, 1.0 / math.sqrt(d_head), (2 * k + 1, d_head))
