"""Synthetic transduction task and SpecAugment-style masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class SyntheticTaskSpec:
    """Token sequences rendered as noisy repeated prototype frames.

    Prototypes come in families of ``family_size`` siblings: each sibling is
    its family centre plus an offset of length ``sibling_offset``. Siblings
    are the "similar" tokens the embedding analysis looks for.
    """

    vocab_size: int = 12       # real tokens, ids 1..vocab_size; blank 0 is extra
    feat_dim: int = 16
    dur_min: int = 8
    dur_max: int = 12
    len_min: int = 2
    len_max: int = 6
    noise: float = 0.1
    family_size: int = 2
    sibling_offset: float = 1.5
    min_distance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2 or self.feat_dim < 4:
            raise ConfigError("synthetic task needs vocab_size >= 2 and feat_dim >= 4")
        if not 1 <= self.dur_min <= self.dur_max:
            raise ConfigError(f"bad duration range [{self.dur_min}, {self.dur_max}]")
        if not 1 <= self.len_min <= self.len_max:
            raise ConfigError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.noise < 0 or self.family_size < 1 or self.vocab_size % self.family_size:
            raise ConfigError("noise must be >= 0 and family_size must divide vocab_size")


def make_prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    """(vocab_size + 1, F) templates; row 0 (blank) is unused and zero."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919]))
    for _ in range(1000):
        n_fam = spec.vocab_size // spec.family_size
        centres = rng.normal(0.0, 1.0, (n_fam, spec.feat_dim))
        offs = rng.normal(0.0, 1.0, (n_fam, spec.family_size, spec.feat_dim))
        offs *= spec.sibling_offset / np.linalg.norm(offs, axis=-1, keepdims=True)
        protos = (centres[:, None, :] + offs).reshape(spec.vocab_size, spec.feat_dim)
        dist = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= spec.min_distance:
            return np.vstack([np.zeros((1, spec.feat_dim)), protos])
    raise ConfigError("could not draw prototypes honouring min_distance")


def families(spec: SyntheticTaskSpec) -> list[list[int]]:
    """Token ids grouped by prototype family."""
    return [list(range(1 + f * spec.family_size, 1 + (f + 1) * spec.family_size))
            for f in range(spec.vocab_size // spec.family_size)]


def generate_synthetic(spec: SyntheticTaskSpec, n: int, stream: int = 0,
                       durations: int | None = None) -> list[tuple[np.ndarray, list[int]]]:
    """``n`` (features, tokens) pairs; ``stream`` selects an independent split.

    Neighbouring tokens always differ, otherwise their frames would merge
    into one indistinguishable run. ``durations`` pins every token length.
    """
    protos = make_prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    out = []
    for _ in range(n):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        tokens: list[int] = []
        for _ in range(length):
            choices = [t for t in range(1, spec.vocab_size + 1) if not tokens or t != tokens[-1]]
            tokens.append(int(rng.choice(choices)))
        frames = []
        for t in tokens:
            d = durations if durations is not None else int(rng.integers(spec.dur_min, spec.dur_max + 1))
            frames.append(np.repeat(protos[t][None, :], d, axis=0))
        feats = np.concatenate(frames, axis=0)
        if spec.noise > 0:
            feats = feats + rng.normal(0.0, spec.noise, feats.shape)
        out.append((feats, tokens))
    return out


def render_tokens(spec: SyntheticTaskSpec, tokens, seed: int = 0) -> np.ndarray:
    """Features for a given token sequence (used by the latency benchmark)."""
    protos = make_prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 104729, seed]))
    frames = [np.repeat(protos[t][None, :], int(rng.integers(spec.dur_min, spec.dur_max + 1)), axis=0)
              for t in tokens]
    feats = np.concatenate(frames, axis=0)
    return feats + rng.normal(0.0, spec.noise, feats.shape) if spec.noise > 0 else feats


@dataclass
class SpecMaskConfig:
    n_time_masks: int = 0
    max_time: int = 0
    n_freq_masks: int = 0
    max_freq: int = 0


def spec_mask(features: np.ndarray, n_time_masks: int, max_t: int, n_freq_masks: int, max_f: int,
              seed) -> np.ndarray:
    """Zero random time spans and frequency bands; each width is uniform on [0, max]."""
    t_len, f_len = features.shape
    if n_time_masks and max_t >= t_len:
        max_t = t_len - 1
    if n_freq_masks and max_f >= f_len:
        max_f = f_len - 1
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = features.copy()
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        s = int(rng.integers(0, t_len - w + 1))
        out[s:s + w, :] = 0.0
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_f + 1))
        s = int(rng.integers(0, f_len - w + 1))
        out[:, s:s + w] = 0.0
    return out
