"""Binary feature files and checkpoints, and the ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SpecMaskConfig, SyntheticTaskSpec
from .errors import CheckpointError, ConfigError, FormatError
from .losses import LossConfig
from .model import ModelConfig, build_model
from .tensor import Tensor
from .training import TrainConfig, TrainState

FEATURE_MAGIC = b"CNAT"
FEATURE_VERSION = 1
CKPT_MAGIC = b"CNCK"
CKPT_VERSION = 1
_PRECISION = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_PRECISION_INV = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


# ---------------------------------------------------------------- feature files

def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise FormatError(f"features must be 2-D (T x F), got shape {feats.shape}")
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t, f))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need 16 bytes)")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    version, t, f = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 16 + 4 * t * f
    if len(raw) != expected:
        raise FormatError(f"{path}: payload ends at offset {len(raw)}, expected {expected}")
    if t < 1 or f < 1:
        raise FormatError(f"{path}: empty feature matrix {t}x{f} at offset 8")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(t, f).astype(np.float64)


def list_inputs(path) -> list[Path]:
    """A single feature file, or every ``*.feat`` file in a directory, sorted by name."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.feat"))
        if not files:
            raise FormatError(f"{p}: no .feat files")
        return files
    if not p.exists():
        raise FormatError(f"{p}: no such file")
    return [p]


def utt_id(path) -> str:
    return Path(path).stem


# ---------------------------------------------------------------- checkpoints

def _pack_params(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _PRECISION:
            raise CheckpointError(f"parameter {name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", _PRECISION[dt]))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def write_checkpoint(path, kind: str, cfg: ModelConfig, params: dict, extra: dict | None = None,
                     tensors: dict[str, np.ndarray] | None = None) -> None:
    """Header, JSON config, named tensor table, trailing SHA-256 of everything before it."""
    meta = json.dumps({"kind": kind, "model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    table = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    if tensors:
        clash = set(table) & set(tensors)
        if clash:
            raise CheckpointError(f"duplicate tensor names: {sorted(clash)}")
        table.update(tensors)
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta)) + meta + _pack_params(table)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    kind: str
    cfg: ModelConfig
    params: dict[str, Tensor]
    extra: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self):
        return build_model(self.kind, self.cfg, self.params)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(body[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (tag,) = struct.unpack_from("<B", body, off)
        off += 1
        if tag not in _PRECISION_INV:
            raise CheckpointError(f"{path}: parameter {name} has unknown precision tag {tag}")
        dt = _PRECISION_INV[tag]
        size = int(np.prod(shape)) * dt.itemsize
        if name in table:
            raise CheckpointError(f"{path}: parameter {name} stored twice")
        table[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += size
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after parameter table")

    kind = meta["kind"]
    cfg = ModelConfig.from_dict(meta["model"])
    expected = build_model(kind, cfg).params
    params = {}
    for name, ref in expected.items():
        if name not in table:
            raise CheckpointError(f"{path}: parameter {name} missing")
        if table[name].shape != ref.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {table[name].shape}, expected {ref.shape}")
        params[name] = Tensor(table.pop(name).astype(cfg.dtype, copy=False), name=name)
    stray = [k for k in table if not k.startswith("__")]
    if stray:
        raise CheckpointError(f"{path}: unexpected parameters {stray[:5]}")
    return Checkpoint(kind, cfg, params, meta.get("extra", {}), table)


def save_train_state(path, kind: str, cfg: ModelConfig, state: TrainState, extra: dict | None = None) -> None:
    tensors = {}
    for k in state.params:
        tensors[f"__m__.{k}"] = state.opt["m"][k]
        tensors[f"__v__.{k}"] = state.opt["v"][k]
    for i, (_, _, snap) in enumerate(state.best):
        for k, a in snap.items():
            tensors[f"__best{i}__.{k}"] = a
    meta = dict(extra or {})
    meta["train_state"] = {
        "t": state.opt["t"], "epoch": state.epoch, "step": state.step, "history": state.history,
        "best": [[acc, ep] for acc, ep, _ in state.best],
    }
    write_checkpoint(path, kind, cfg, state.params, meta, tensors)


def load_train_state(path) -> tuple[Checkpoint, TrainState]:
    ck = read_checkpoint(path)
    ts = ck.extra.get("train_state")
    if ts is None:
        raise CheckpointError(f"{path}: no training state stored")
    params = {k: t.data for k, t in ck.params.items()}
    opt = {"t": ts["t"], "m": {k: ck.tensors[f"__m__.{k}"] for k in params},
           "v": {k: ck.tensors[f"__v__.{k}"] for k in params}}
    best = [(acc, ep, {k: ck.tensors[f"__best{i}__.{k}"] for k in params})
            for i, (acc, ep) in enumerate(ts["best"])]
    return ck, TrainState(params, opt, ts["epoch"], ts["step"], ts["history"], best)


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "data": SyntheticTaskSpec,
             "train": TrainConfig, "specaug": SpecMaskConfig}
_TOP = {"n_train": int, "n_val": int, "n_test": int, "seed": int}


def _convert(raw: str, typ, where: str):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines; unknown keys and bad values are rejected."""
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _TOP:
            top[key] = _convert(raw, _TOP[key], where)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        hints = typing.get_type_hints(_SECTIONS[section])
        fld = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        if name not in fld or name == "spec":
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[section][name] = _convert(raw, hints[name], where)

    env_seed = os.environ.get("CASSNAT_SEED")
    if env_seed is not None:
        top["seed"] = _convert(env_seed, int, "CASSNAT_SEED")
    seed = int(top.get("seed", 0))
    data = SyntheticTaskSpec(**values["data"])
    mvals = dict(values["model"])
    mvals.setdefault("feat_dim", data.feat_dim)
    mvals.setdefault("vocab", data.vocab_size + 1)
    model = ModelConfig(**mvals)
    if model.feat_dim != data.feat_dim or model.vocab != data.vocab_size + 1:
        raise ConfigError(f"{source}: model.feat_dim/vocab must match data.feat_dim/vocab_size+1")
    tvals = dict(values["train"])
    tvals.setdefault("seed", seed)
    train = TrainConfig(spec=SpecMaskConfig(**values["specaug"]), **tvals)
    return RunConfig(model, LossConfig(**values["loss"]), data, train,
                     int(top.get("n_train", 2000)), int(top.get("n_val", 200)), int(top.get("n_test", 200)), seed)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(), str(path))


def shipped_config(name: str = "synthetic_small.cfg") -> Path:
    return Path(__file__).parent / "configs" / name
