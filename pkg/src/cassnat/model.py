"""CASS-NAT assembly and the autoregressive (AT) baseline.

Both models share the convolutional frontend, the conformer-style encoder
and the final CTC head, so an AT checkpoint can seed a CASS-NAT encoder.
Everything runs on padded batches; single-utterance helpers wrap them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import ops
from .attention import RelPosTable, init_attention, make_causal_mask, multi_head_attention
from .blocks import (
    RunCtx, conv_frontend, encoder_block, ffn, frontend_frames, init_encoder_block, init_ffn,
    init_frontend, init_mad_block, init_relpos, init_sad_block, init_tae, layer_norm, mad_block,
    sad_block, scope, token_acoustic_extractor,
)
from .ctc import (
    BLANK, AlignmentPath, Segment, alignment_to_segments, beam_align_nbest, best_path_decode,
    collapse, ctc_forced_align, expand_segments,
)
from .errors import CheckpointError, ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    feat_dim: int = 16
    vocab: int = 13  # includes blank = 0
    d_att: int = 32
    nh: int = 4
    d_ff: int = 128
    n_enc: int = 4
    n_tae: int = 1
    n_sad: int = 3
    n_mad: int = 4
    n_at_dec: int = 3
    k_enc: int = 20
    k_dec: int = 8
    enc_kernel: int = 15
    dec_kernel: int = 7
    frontend_channels: int = 64
    dropout: float = 0.1
    trigger_context: int = 1
    enc_mid: int = -1  # 1-based block after which the middle CTC head sits; -1 = middle, 0 = none
    mad_mid: int = -1
    blank: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.enc_mid == -1:
            self.enc_mid = self.n_enc // 2
        if self.mad_mid == -1:
            self.mad_mid = self.n_mad // 2
        self.validate()

    def validate(self) -> None:
        for name in ("feat_dim", "vocab", "d_att", "nh", "d_ff", "n_enc", "n_tae", "n_sad", "n_mad",
                     "n_at_dec", "frontend_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_att % self.nh:
            raise ConfigError(f"d_att={self.d_att} is not divisible by nh={self.nh}")
        if self.n_tae != 1:
            raise ConfigError("the token acoustic extractor is a single block (n_tae = 1)")
        if self.blank != BLANK:
            raise ConfigError("blank id is fixed to 0")
        if self.vocab < 2:
            raise ConfigError("vocab must include blank plus at least one token")
        if self.feat_dim < 4:
            raise ConfigError(f"feat_dim={self.feat_dim} is too small for two stride-2 reductions")
        for name in ("enc_kernel", "dec_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd, got {getattr(self, name)}")
        if self.k_enc < 0 or self.k_dec < 0 or self.trigger_context < 0:
            raise ConfigError("k_enc, k_dec and trigger_context must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.enc_mid and not 1 <= self.enc_mid < self.n_enc:
            raise ConfigError(f"enc_mid={self.enc_mid} must lie strictly inside the {self.n_enc}-block encoder")
        if self.mad_mid and not 1 <= self.mad_mid < self.n_mad:
            raise ConfigError(f"mad_mid={self.mad_mid} must lie strictly inside the {self.n_mad}-block MAD")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision}")

    @property
    def d_head(self) -> int:
        return self.d_att // self.nh

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- containers

@dataclass
class EncoderOutput:
    h: Tensor                  # (B, T', d)
    lengths: np.ndarray        # (B,)
    ctc_final: Tensor          # (B, T', V) log-probs
    ctc_middle: Tensor | None

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.h.shape[1])[None, :] < self.lengths[:, None]

    def grid(self, b: int, middle: bool = False) -> np.ndarray:
        src = self.ctc_middle if middle else self.ctc_final
        return src.data[b, : self.lengths[b]]


@dataclass
class DecoderOutput:
    embeddings: Tensor         # TAE output (B, U, d)
    dec_final: Tensor          # (B, U, V) log-probs
    dec_middle: Tensor | None
    token_valid: np.ndarray    # (B, U)
    segments: list[list[Segment]]
    expanded: list[list[Segment]]
    states: Tensor | None = None      # final MAD output before projection
    sad_states: Tensor | None = None  # last SAD output


@dataclass
class ForwardArtifacts:
    enc: EncoderOutput
    dec: DecoderOutput
    alignments: list[AlignmentPath]
    targets: list[list[int]]
    attention: dict | None = None

    @property
    def h(self) -> Tensor:
        return self.enc.h

    @property
    def dec_final(self) -> Tensor:
        return self.dec.dec_final

    @property
    def dec_middle(self) -> Tensor | None:
        return self.dec.dec_middle

    @property
    def ctc_final(self) -> Tensor:
        return self.enc.ctc_final

    @property
    def ctc_middle(self) -> Tensor | None:
        return self.enc.ctc_middle


@dataclass
class DecodeResult:
    tokens: list[int]
    logpost: np.ndarray            # (U, V) per-token log-posteriors
    decoder_passes: int
    alignment: AlignmentPath | None = None
    score: float = 0.0             # mean over tokens of the chosen log-posterior

    @property
    def mean_logpost(self) -> float:
        return self.score


def pad_batch(feats: Sequence[np.ndarray], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]), dtype=dtype)
    for b, f in enumerate(feats):
        out[b, : len(f)] = f
    return out, lengths


def _as_batch(feats, lengths=None, dtype=np.float64) -> tuple[Tensor, np.ndarray]:
    if isinstance(feats, Tensor):
        x = feats
    elif isinstance(feats, (list, tuple)):
        arr, lengths = pad_batch(feats, dtype)
        x = Tensor(arr)
    else:
        x = Tensor(np.asarray(feats, dtype=dtype))
    if x.ndim == 2:
        x = ops.reshape(x, (1, *x.shape))
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1])
    return x, np.asarray(lengths)


def _to_tensors(raw: dict, dtype) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype), name=k) for k, v in raw.items()}


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


# ---------------------------------------------------------------- shared encoder

class _Encoder:
    cfg: ModelConfig
    params: dict[str, Tensor]
    kind = "base"

    @staticmethod
    def _init_encoder(rng, cfg: ModelConfig) -> dict:
        raw = _prefixed("frontend.", init_frontend(rng, cfg.feat_dim, cfg.d_att, cfg.frontend_channels))
        raw["enc.rel"] = init_relpos(rng, cfg.k_enc, cfg.d_head)
        for i in range(cfg.n_enc):
            raw.update(_prefixed(f"enc.{i}.", init_encoder_block(rng, cfg.d_att, cfg.d_ff, cfg.enc_kernel)))
        raw["ctc.final.w"] = rng.normal(0, 1.0 / math.sqrt(cfg.d_att), (cfg.d_att, cfg.vocab))
        raw["ctc.final.b"] = np.zeros(cfg.vocab)
        return raw

    def encode(self, feats, lengths=None, ctx: RunCtx | None = None, middle: bool = True) -> EncoderOutput:
        """Frontend, encoder stack, CTC log-posteriors at the final and middle layers."""
        cfg, p = self.cfg, self.params
        x, lengths = _as_batch(feats, lengths, cfg.dtype)
        if x.shape[1] < 1:
            raise ConfigError("need at least one input frame")
        h, lens = conv_frontend(x, scope(p, "frontend."), lengths)
        valid = np.arange(h.shape[1])[None, :] < lens[:, None]
        mask = np.broadcast_to(valid[:, None, :], (h.shape[0], h.shape[1], h.shape[1]))
        rel = RelPosTable(cfg.k_enc, p["enc.rel"])
        mid = None
        for i in range(cfg.n_enc):
            h = encoder_block(h, mask, scope(p, f"enc.{i}."), rel, cfg.nh, ctx, valid, name=f"enc.{i}")
            if i + 1 == cfg.enc_mid:
                mid = h
        ctc_final = ops.log_softmax(ops.linear(h, p["ctc.final.w"], p["ctc.final.b"]))
        ctc_mid = None
        if middle and mid is not None and "ctc.mid.w" in p:
            ctc_mid = ops.log_softmax(ops.linear(mid, p["ctc.mid.w"], p["ctc.mid.b"]))
        return EncoderOutput(h, lens, ctc_final, ctc_mid)

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("frontend.", "enc.", "ctc.final."))]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


# ---------------------------------------------------------------- CASS-NAT

class CassNat(_Encoder):
    """CTC-alignment-based single-step non-autoregressive transformer."""

    kind = "cassnat"

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg, seed)

    @classmethod
    def init_params(cls, cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        raw = cls._init_encoder(rng, cfg)
        if cfg.enc_mid:
            raw["ctc.mid.w"] = rng.normal(0, 1.0 / math.sqrt(cfg.d_att), (cfg.d_att, cfg.vocab))
            raw["ctc.mid.b"] = np.zeros(cfg.vocab)
        raw.update(_prefixed("tae.", init_tae(rng, cfg.d_att, cfg.d_ff)))
        raw["dec.rel"] = init_relpos(rng, cfg.k_dec, cfg.d_head)
        for i in range(cfg.n_sad):
            raw.update(_prefixed(f"sad.{i}.", init_sad_block(rng, cfg.d_att, cfg.d_ff)))
        for i in range(cfg.n_mad):
            raw.update(_prefixed(f"mad.{i}.", init_mad_block(rng, cfg.d_att, cfg.d_ff, cfg.dec_kernel)))
        raw["out.final.w"] = rng.normal(0, 1.0 / math.sqrt(cfg.d_att), (cfg.d_att, cfg.vocab))
        raw["out.final.b"] = np.zeros(cfg.vocab)
        if cfg.mad_mid:
            raw["out.mid.w"] = rng.normal(0, 1.0 / math.sqrt(cfg.d_att), (cfg.d_att, cfg.vocab))
            raw["out.mid.b"] = np.zeros(cfg.vocab)
        return _to_tensors(raw, cfg.dtype)

    # -- decoder ---------------------------------------------------------

    def decoder(self, enc: EncoderOutput, segments: Sequence[Sequence[Segment]],
                ctx: RunCtx | None = None, middle: bool = True) -> DecoderOutput:
        """TAE -> SAD stack -> MAD stack over token spans; one pass for the whole batch."""
        cfg, p = self.cfg, self.params
        bsz, frames = enc.h.shape[0], enc.h.shape[1]
        enc_valid = enc.valid
        expanded = [expand_segments(s, cfg.trigger_context, int(enc.lengths[b])) for b, s in enumerate(segments)]
        n_tok = max(len(s) for s in segments)
        trigger = np.zeros((bsz, n_tok, frames), dtype=bool)
        tok_valid = np.zeros((bsz, n_tok), dtype=bool)
        for b, segs in enumerate(expanded):
            for u, s in enumerate(segs):
                trigger[b, u, s.start - 1:s.end] = True
            trigger[b, len(segs):] = enc_valid[b]  # padding rows: ignored, but must be attendable
            tok_valid[b, : len(segs)] = True
        self_mask = np.broadcast_to(tok_valid[:, None, :], (bsz, n_tok, n_tok))
        cross_mask = np.broadcast_to(enc_valid[:, None, :], (bsz, n_tok, frames))

        emb = token_acoustic_extractor(enc.h, trigger, scope(p, "tae."), cfg.nh, ctx)
        rel = RelPosTable(cfg.k_dec, p["dec.rel"])
        s = emb
        for i in range(cfg.n_sad):
            s = sad_block(s, self_mask, scope(p, f"sad.{i}."), rel, cfg.nh, ctx, name=f"sad.{i}")
        sad_out = s
        mid = None
        for i in range(cfg.n_mad):
            s = mad_block(s, enc.h, self_mask, cross_mask, scope(p, f"mad.{i}."), rel, cfg.nh, ctx,
                          tok_valid, name=f"mad.{i}")
            if i + 1 == cfg.mad_mid:
                mid = s
        final = ops.log_softmax(ops.linear(s, p["out.final.w"], p["out.final.b"]))
        dec_mid = None
        if middle and mid is not None and "out.mid.w" in p:
            dec_mid = ops.log_softmax(ops.linear(mid, p["out.mid.w"], p["out.mid.b"]))
        return DecoderOutput(emb, final, dec_mid, tok_valid, [list(g) for g in segments], expanded, s, sad_out)

    # -- training forward -------------------------------------------------

    def forward_train(self, feats, targets: Sequence[Sequence[int]], lengths=None,
                      ctx: RunCtx | None = None, retain_attention: bool = False) -> ForwardArtifacts:
        """Encode, force-align Y against the final CTC grid, decode over the aligned spans."""
        if targets and isinstance(targets[0], (int, np.integer)):
            targets = [targets]
        targets = [[int(y) for y in t] for t in targets]
        if retain_attention:
            ctx = ctx or RunCtx()
            ctx.attn = {}
        enc = self.encode(feats, lengths, ctx)
        aligns, segs = [], []
        for b, y in enumerate(targets):
            z = ctc_forced_align(enc.grid(b), y)
            aligns.append(z)
            segs.append(alignment_to_segments(z))
        dec = self.decoder(enc, segs, ctx)
        return ForwardArtifacts(enc, dec, aligns, targets, ctx.attn if ctx is not None else None)

    # -- inference --------------------------------------------------------

    def decode_greedy(self, feats, lengths=None, ctx: RunCtx | None = None) -> list[DecodeResult]:
        """Best-path alignment, then a single decoder pass for every non-empty utterance."""
        enc = self.encode(feats, lengths, ctx, middle=False)
        paths = [best_path_decode(enc.grid(b)) for b in range(enc.h.shape[0])]
        results: list[DecodeResult | None] = [None] * len(paths)
        live = [b for b, z in enumerate(paths) if collapse(z)]
        for b, z in enumerate(paths):
            if b not in live:
                results[b] = DecodeResult([], np.zeros((0, self.cfg.vocab)), 0, z, 0.0)
        if live:
            sub = _select(enc, live)
            dec = self.decoder(sub, [alignment_to_segments(paths[b]) for b in live], ctx, middle=False)
            for i, b in enumerate(live):
                results[b] = _read_tokens(dec, i, paths[b])
        return results

    def decode_nbest(self, feats, beam: int, ctx: RunCtx | None = None) -> tuple[list[DecodeResult], int]:
        """Rank the top-``beam`` CTC alignments by mean decoder log-posterior.

        Returns the ranked hypotheses and the decoder pass count (one per
        non-empty candidate alignment).
        """
        enc = self.encode(feats, None, ctx, middle=False)
        if enc.h.shape[0] != 1:
            raise ConfigError("decode_nbest handles one utterance at a time")
        paths = beam_align_nbest(enc.grid(0), beam)

        def run(live_paths: list[AlignmentPath]) -> list[DecodeResult]:
            sub = _select(enc, [0] * len(live_paths))
            dec = self.decoder(sub, [alignment_to_segments(z) for z in live_paths], ctx, middle=False)
            return [_read_tokens(dec, i, z) for i, z in enumerate(live_paths)]

        return rank_alignments(paths, run, self.cfg.vocab)


def rank_alignments(paths: Sequence[AlignmentPath], run: Callable[[list[AlignmentPath]], list[DecodeResult]],
                    vocab: int) -> tuple[list[DecodeResult], int]:
    """Score candidate alignments with ``run`` and sort by decoder confidence.

    Empty alignments score -inf and cost no decoder pass. The sort is stable,
    so equal scores keep CTC order.
    """
    live = [z for z in paths if collapse(z)]
    scored = run(live) if live else []
    it = iter(scored)
    hyps = []
    for z in paths:
        if collapse(z):
            hyps.append(next(it))
        else:
            hyps.append(DecodeResult([], np.zeros((0, vocab)), 0, z, -math.inf))
    order = sorted(range(len(hyps)), key=lambda i: -hyps[i].score)
    return [hyps[i] for i in order], len(live)


def _select(enc: EncoderOutput, rows: Sequence[int]) -> EncoderOutput:
    rows = list(rows)
    if rows == list(range(enc.h.shape[0])):
        return enc
    h = Tensor(enc.h.data[rows])
    return EncoderOutput(h, enc.lengths[rows], Tensor(enc.ctc_final.data[rows]), None)


def _read_tokens(dec: DecoderOutput, i: int, path: AlignmentPath) -> DecodeResult:
    n = int(dec.token_valid[i].sum())
    logpost = dec.dec_final.data[i, :n]
    tokens = [int(t) for t in np.argmax(logpost, axis=1)]
    score = float(np.mean(logpost[np.arange(n), tokens]))
    return DecodeResult(tokens, logpost, 1, path, score)


# ---------------------------------------------------------------- AT baseline

class ATBaseline(_Encoder):
    """CTC/attention hybrid with a causal transformer decoder, decoded greedily."""

    kind = "at"

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg, seed)

    @property
    def eos(self) -> int:
        return self.cfg.vocab  # also used as start symbol

    @classmethod
    def init_params(cls, cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        raw = cls._init_encoder(rng, cfg)
        d, v1 = cfg.d_att, cfg.vocab + 1
        raw["at.emb"] = rng.normal(0, 1.0 / math.sqrt(d), (v1, d))
        for i in range(cfg.n_at_dec):
            pre = f"at.{i}."
            for ln in ("ln1.", "ln2.", "ln3."):
                raw[pre + ln + "g"] = np.ones(d)
                raw[pre + ln + "b"] = np.zeros(d)
            raw.update(_prefixed(pre + "self.", init_attention(rng, d)))
            raw.update(_prefixed(pre + "cross.", init_attention(rng, d)))
            raw.update(_prefixed(pre + "ffn.", init_ffn(rng, d, cfg.d_ff)))
        raw["at.ln_out.g"] = np.ones(d)
        raw["at.ln_out.b"] = np.zeros(d)
        raw["at.out.w"] = rng.normal(0, 1.0 / math.sqrt(d), (d, v1))
        raw["at.out.b"] = np.zeros(v1)
        return _to_tensors(raw, cfg.dtype)

    def decoder(self, enc: EncoderOutput, prefixes: np.ndarray, prefix_lengths: np.ndarray,
                ctx: RunCtx | None = None) -> Tensor:
        """Causal decoder over (B, L) input ids; returns (B, L, V+1) log-probs."""
        cfg, p = self.cfg, self.params
        bsz, n = prefixes.shape
        x = ops.embedding_lookup(p["at.emb"], prefixes)
        x = ops.add(ops.scale(x, math.sqrt(cfg.d_att)), ops.sinusoidal_positions(n, cfg.d_att).astype(cfg.dtype))
        tok_valid = np.arange(n)[None, :] < np.asarray(prefix_lengths)[:, None]
        self_mask = make_causal_mask(n)[None] & (tok_valid[:, None, :] | np.eye(n, dtype=bool)[None])
        cross_mask = np.broadcast_to(enc.valid[:, None, :], (bsz, n, enc.h.shape[1]))
        c = ctx if ctx is not None else RunCtx()
        for i in range(cfg.n_at_dec):
            bp = scope(p, f"at.{i}.")
            hq = layer_norm(x, scope(bp, "ln1."))
            a, w = multi_head_attention(hq, hq, self_mask, scope(bp, "self."), cfg.nh)
            c.keep(f"at.{i}.self", w)
            x = ops.add(x, c.drop(a))
            a, w = multi_head_attention(layer_norm(x, scope(bp, "ln2.")), enc.h, cross_mask,
                                        scope(bp, "cross."), cfg.nh)
            c.keep(f"at.{i}.cross", w)
            x = ops.add(x, c.drop(a))
            x = ops.add(x, c.drop(ffn(layer_norm(x, scope(bp, "ln3.")), scope(bp, "ffn."), c)))
        x = layer_norm(x, scope(p, "at.ln_out."))
        return ops.log_softmax(ops.linear(x, p["at.out.w"], p["at.out.b"]))

    def forward_train(self, feats, targets: Sequence[Sequence[int]], lengths=None,
                      ctx: RunCtx | None = None):
        """Teacher-forced pass; returns (encoder output, decoder log-probs, output ids, output lengths)."""
        if targets and isinstance(targets[0], (int, np.integer)):
            targets = [targets]
        enc = self.encode(feats, lengths, ctx, middle=False)
        bsz = len(targets)
        n = max(len(t) for t in targets) + 1
        inp = np.zeros((bsz, n), dtype=np.int64)
        out = np.zeros((bsz, n), dtype=np.int64)
        for b, t in enumerate(targets):
            inp[b, 0] = self.eos
            inp[b, 1:len(t) + 1] = t
            out[b, : len(t)] = t
            out[b, len(t)] = self.eos
        lens = np.array([len(t) + 1 for t in targets])
        return enc, self.decoder(enc, inp, lens, ctx), out, lens

    def decode(self, feats, force_length: int | None = None) -> list[DecodeResult]:
        """Greedy left-to-right decoding, one decoder pass per emitted token plus the final one.

        Output is capped at 2*T' tokens; the pass that hits the cap is
        counted and treated as end-of-sequence. ``force_length`` suppresses
        end-of-sequence until that many tokens exist and stops there (used
        for latency measurements).
        """
        enc = self.encode(feats, None, None, middle=False)
        results = []
        for b in range(enc.h.shape[0]):
            sub = _select(enc, [b])
            cap = 2 * int(enc.lengths[b]) if force_length is None else force_length
            seq = [self.eos]
            tokens, logposts, passes = [], [], 0
            while True:
                logp = self.decoder(sub, np.array([seq]), np.array([len(seq)]))
                passes += 1
                row = logp.data[0, -1]
                if force_length is not None and len(tokens) < force_length:
                    row = row.copy()
                    row[self.eos] = -np.inf
                tok = int(np.argmax(row))
                if tok == self.eos or len(tokens) >= cap:
                    break
                tokens.append(tok)
                logposts.append(logp.data[0, -1])
                seq.append(tok)
            lp = np.array(logposts) if tokens else np.zeros((0, self.cfg.vocab + 1))
            score = float(np.mean(lp[np.arange(len(tokens)), tokens])) if tokens else 0.0
            results.append(DecodeResult(tokens, lp, passes, None, score))
        return results


# ---------------------------------------------------------------- encoder transfer

def init_encoder_from_at(at_params: dict[str, Tensor], nat_params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copy frontend, encoder and final CTC head tensors from an AT model into CASS-NAT params."""
    out = dict(nat_params)
    for name, src in at_params.items():
        if not name.startswith(("frontend.", "enc.", "ctc.final.")):
            continue
        if name not in nat_params:
            raise CheckpointError(f"parameter {name} missing from the CASS-NAT model")
        if nat_params[name].shape != src.shape:
            raise CheckpointError(
                f"parameter {name}: AT shape {src.shape} vs CASS-NAT shape {nat_params[name].shape}")
        out[name] = Tensor(src.data.copy(), name=name)
    return out


def build_model(kind: str, cfg: ModelConfig, params=None, seed: int = 0):
    if kind == "cassnat":
        return CassNat(cfg, params, seed)
    if kind == "at":
        return ATBaseline(cfg, params, seed)
    raise ConfigError(f"unknown model kind {kind!r}")
