"""Command-line entry point: ``cassnat <command> ...`` or ``python -m cassnat``.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .analysis import (
    EmbeddingTable, cosine_neighbors, dump_attention, extract_embeddings, last_layers, pca_2d,
    write_attention, write_pca,
)
from .blocks import frontend_frames
from .ctc import LogPosteriorGrid, alignment_to_segments, ctc_forced_align, min_frames
from .data import SyntheticTaskSpec, generate_synthetic, render_tokens
from .errors import (
    CassNatError, ConfigError, FormatError, InfeasibleError, NumericError, UsageError,
)
from .gradsuite import CHECKS, run_suite
from .io import (
    Checkpoint, RunConfig, load_run_config, load_train_state, list_inputs, read_checkpoint,
    read_features, save_train_state, utt_id, write_checkpoint, write_features,
)
from .model import ATBaseline, CassNat, build_model, init_encoder_from_at
from .training import evaluate, train

log = logging.getLogger("cassnat")

SPLITS = {"train": 1, "val": 2, "test": 3}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def load_split(rc: RunConfig, split: str, n: int | None = None) -> list[tuple[np.ndarray, list[int]]]:
    """A synthetic split with features rounded to 32-bit, as stored in feature files."""
    count = n if n is not None else {"train": rc.n_train, "val": rc.n_val, "test": rc.n_test}[split]
    data = generate_synthetic(rc.data, count, stream=SPLITS[split])
    return [(f.astype(np.float32).astype(np.float64), y) for f, y in data]


def _check_feasible(data, name: str) -> None:
    bad = [i for i, (f, y) in enumerate(data) if frontend_frames(len(f)) < min_frames(y)]
    if bad:
        raise InfeasibleError(f"{len(bad)} {name} utterances are too short for their labels (first: #{bad[0]})")


def _data_spec(ck: Checkpoint) -> SyntheticTaskSpec:
    if "data" in ck.extra:
        return SyntheticTaskSpec(**ck.extra["data"])
    return SyntheticTaskSpec(vocab_size=ck.cfg.vocab - 1, feat_dim=ck.cfg.feat_dim)


def _read_inputs(path, feat_dim: int) -> list[tuple[str, np.ndarray]]:
    out = []
    for f in list_inputs(path):
        x = read_features(f)
        if x.shape[1] != feat_dim:
            raise FormatError(f"{f}: feature width {x.shape[1]} does not match the model ({feat_dim})")
        out.append((utt_id(f), x))
    return out


def _read_labels(path, n: int | None = None) -> list[list[int]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([int(t) for t in line.split()])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: labels must be integers") from None
    if n is not None and len(rows) != n:
        raise FormatError(f"{path}: {len(rows)} label lines for {n} utterances")
    return rows


def _fmt_tokens(tokens: Sequence[int]) -> str:
    return " ".join(str(t) for t in tokens)


# ---------------------------------------------------------------- train

def cmd_train(args, out: TextIO) -> int:
    rc = load_run_config(args.config)
    kind = "at" if args.at_baseline else "cassnat"
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    train_set, val_set, test_set = load_split(rc, "train"), load_split(rc, "val"), load_split(rc, "test")
    for name, d in (("training", train_set), ("validation", val_set), ("test", test_set)):
        _check_feasible(d, name)

    model = build_model(kind, rc.model, seed=rc.seed)
    if args.init_encoder:
        if kind != "cassnat":
            raise UsageError("--init-encoder applies to CASS-NAT training only")
        src = read_checkpoint(args.init_encoder)
        if src.kind != "at":
            raise UsageError(f"{args.init_encoder} is a {src.kind} checkpoint, expected an AT one")
        model.params = init_encoder_from_at(src.params, model.params)

    extra = {"data": dataclasses.asdict(rc.data), "seed": rc.seed}
    resume = None
    if args.resume:
        ck, resume = load_train_state(args.resume)
        if ck.kind != kind or ck.cfg != rc.model:
            raise ConfigError(f"{args.resume} was written for a different model configuration")

    def on_epoch(rec):
        print(f"epoch {rec['epoch']}\tval_token_acc={rec['val_token_acc']:.4f}"
              f"\tval_seq_err={rec['val_seq_err']:.4f}", file=out, flush=True)

    with open(outdir / "loss.log", "a" if resume else "w") as fh:
        if not resume:
            fh.write("step\tloss\tctc_final\tctc_mid\tce_final\tce_mid\n")
        res = train(model, train_set, val_set, rc.train, rc.loss, fh, resume, on_epoch)

    save_train_state(outdir / "state.ckpt", kind, rc.model, res.state, extra)
    if res.state.best:
        write_checkpoint(outdir / "best.ckpt", kind, rc.model, res.state.best[0][2], extra)
    write_checkpoint(outdir / "model.ckpt", kind, rc.model, res.params, extra)
    with open(outdir / "history.tsv", "w") as fh:
        fh.write("epoch\tstep\tval_token_acc\tval_seq_err\tseconds\n")
        for h in res.history:
            fh.write(f"{h['epoch']}\t{h['step']}\t{h['val_token_acc']:.6f}\t{h['val_seq_err']:.6f}"
                     f"\t{h['seconds']:.1f}\n")

    model.params = res.params
    val = evaluate(model, val_set, rc.train.eval_batch)
    test = evaluate(model, test_set, rc.train.eval_batch)
    summary = {
        "kind": kind, "epochs": res.state.epoch, "steps": res.state.step, "diverged": res.diverged,
        "val_token_acc": f"{val.token_accuracy:.6f}", "val_seq_err": f"{val.sequence_error:.6f}",
        "test_token_acc": f"{test.token_accuracy:.6f}", "test_seq_err": f"{test.sequence_error:.6f}",
        "seconds": f"{res.seconds:.1f}",
    }
    (outdir / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in summary.items()))
    print(f"final validation token accuracy: {val.token_accuracy:.4f} (sequence error {val.sequence_error:.4f})",
          file=out)
    print(f"held-out test token accuracy: {test.token_accuracy:.4f} (sequence error {test.sequence_error:.4f})",
          file=out)
    if res.diverged:
        raise NumericError("training diverged; last good parameters were saved")
    return 0


# ---------------------------------------------------------------- synth

def cmd_synth(args, out: TextIO) -> int:
    """Write a synthetic split as feature files plus a labels file."""
    rc = load_run_config(args.config)
    data = load_split(rc, args.split, args.n)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(data))))
    with open(outdir / "labels.txt", "w") as fh:
        for i, (f, y) in enumerate(data):
            write_features(outdir / f"utt{i:0{width}d}.feat", f)
            fh.write(_fmt_tokens(y) + "\n")
    print(f"wrote {len(data)} utterances to {outdir}", file=out)
    return 0


# ---------------------------------------------------------------- decode

def cmd_decode(args, out: TextIO) -> int:
    ck = read_checkpoint(args.ckpt)
    model = ck.model()
    if args.beam is not None and args.beam < 1:
        raise UsageError("--beam must be >= 1")
    for uid, x in _read_inputs(args.input, ck.cfg.feat_dim):
        if isinstance(model, ATBaseline):
            r = model.decode(x)[0]
            passes = r.decoder_passes
        elif args.beam is None:
            r = model.decode_greedy(x)[0]
            passes = r.decoder_passes
        else:
            ranked, passes = model.decode_nbest(x, args.beam)
            r = ranked[0]
        print(f"{uid}\t{_fmt_tokens(r.tokens)}\t{r.mean_logpost:.6f}\t{passes}", file=out)
    return 0


# ---------------------------------------------------------------- align

def cmd_align(args, out: TextIO) -> int:
    """Forced alignment of given labels; ``--grid`` inputs hold posterior probabilities directly."""
    files = list_inputs(args.input)
    labels = _read_labels(args.labels, len(files))
    model = None
    if not args.grid:
        if not args.ckpt:
            raise UsageError("align needs --ckpt unless --grid is given")
        model = read_checkpoint(args.ckpt).model()
    failures = 0
    for f, y in zip(files, labels):
        uid = utt_id(f)
        x = read_features(f)
        try:
            if model is None:
                grid = LogPosteriorGrid.from_probs(x)
            else:
                if x.shape[1] != model.cfg.feat_dim:
                    raise FormatError(f"{f}: feature width {x.shape[1]} does not match the model")
                grid = LogPosteriorGrid(model.encode(x, middle=False).grid(0))
            segs = alignment_to_segments(ctc_forced_align(grid, y))
        except NumericError:
            raise
        except CassNatError as exc:
            failures += 1
            print(f"{uid}: {exc}", file=sys.stderr)
            print(f"# {uid} failed", file=out)
            continue
        print(f"# {uid}", file=out)
        for s in segs:
            print(f"{s.token}\t{s.start}\t{s.end}", file=out)
    if failures:
        print(f"{failures} of {len(files)} utterances could not be aligned", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- bench

def _median_time(fn, repeats: int) -> tuple[float, object]:
    fn()  # warm-up
    times, res = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), res


def bench(nat: CassNat, at: ATBaseline, spec: SyntheticTaskSpec, lengths: Sequence[int], repeats: int,
          seed: int = 0) -> list[dict]:
    """Median decode wall clock of both models on synthetic utterances of each output length."""
    enc_keys = ("feat_dim", "d_att", "nh", "d_ff", "n_enc", "k_enc", "enc_kernel", "frontend_channels", "vocab")
    for k in enc_keys:
        if getattr(nat.cfg, k) != getattr(at.cfg, k):
            raise ConfigError(f"checkpoints disagree on encoder setting {k}")
    rows = []
    for length in lengths:
        rng = np.random.default_rng(np.random.SeedSequence([seed, length]))
        tokens = [int(rng.integers(1, spec.vocab_size + 1))]
        while len(tokens) < length:
            t = int(rng.integers(1, spec.vocab_size + 1))
            if t != tokens[-1]:
                tokens.append(t)
        x = render_tokens(spec, tokens, seed)
        t_nat, r_nat = _median_time(lambda: nat.decode_greedy(x)[0], repeats)
        t_at, r_at = _median_time(lambda: at.decode(x, force_length=length)[0], repeats)
        rows.append({"length": length, "frames": len(x), "nat_seconds": t_nat, "at_seconds": t_at,
                     "nat_passes": r_nat.decoder_passes, "at_passes": r_at.decoder_passes,
                     "nat_tokens": len(r_nat.tokens), "speedup": t_at / t_nat})
    return rows


def cmd_bench(args, out: TextIO) -> int:
    from threadpoolctl import threadpool_limits

    ck_nat, ck_at = read_checkpoint(args.ckpt_nat), read_checkpoint(args.ckpt_at)
    if ck_nat.kind != "cassnat" or ck_at.kind != "at":
        raise UsageError("--ckpt-nat must hold a CASS-NAT model and --ckpt-at an AT model")
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    if not lengths or min(lengths) < 1 or args.repeats < 1:
        raise UsageError("lengths must be positive integers and --repeats >= 1")
    with threadpool_limits(limits=1):
        rows = bench(ck_nat.model(), ck_at.model(), _data_spec(ck_nat), lengths, args.repeats)
    print("length\tframes\tnat_ms\tat_ms\tnat_passes\tat_passes\tnat_tokens\tspeedup", file=out)
    for r in rows:
        print(f"{r['length']}\t{r['frames']}\t{1e3 * r['nat_seconds']:.2f}\t{1e3 * r['at_seconds']:.2f}"
              f"\t{r['nat_passes']}\t{r['at_passes']}\t{r['nat_tokens']}\t{r['speedup']:.2f}", file=out)
    print("# corpus-scale reference real-time factors: NAT 0.014, AT 0.499 (about 36x); not measured here",
          file=out)
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args, out: TextIO) -> int:
    seed = load_run_config(args.config).seed if args.config else 0
    modules = [m for spec in (args.module or []) for m in spec.split(",") if m]
    results = run_suite(modules or None, args.inject_fault, tol=args.tol, probes=args.probes, seed=seed)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------- analyze

def _parse_heads(text: str | None, nh: int) -> list[int]:
    if text is None:
        return list(range(1, nh + 1))
    heads = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-", 1)
            heads.extend(range(int(a), int(b) + 1))
        elif part:
            heads.append(int(part))
    return heads


def _table_from_args(args, model) -> EmbeddingTable:
    if args.table:
        with open(args.table) as fh:
            return EmbeddingTable.read(fh)
    if not (args.input and args.labels):
        raise UsageError("need --table, or --input with --labels, to build the embedding table")
    inputs = _read_inputs(args.input, model.cfg.feat_dim)
    labels = _read_labels(args.labels, len(inputs))
    return extract_embeddings(model, [(x, y) for (_, x), y in zip(inputs, labels)], tap=args.tap)


def cmd_analyze(args, out: TextIO) -> int:
    model = None
    if args.ckpt:
        ck = read_checkpoint(args.ckpt)
        if ck.kind != "cassnat":
            raise UsageError("analysis needs a CASS-NAT checkpoint")
        model = ck.model()
    elif not (args.mode in ("pca", "neighbors") and args.table):
        raise UsageError(f"--mode {args.mode} needs --ckpt")

    if args.mode == "attn":
        if not args.input:
            raise UsageError("--mode attn needs --input")
        layers = last_layers(model) if args.layer == "last" else args.layer.split(",")
        heads = _parse_heads(args.heads, model.cfg.nh)
        inputs = _read_inputs(args.input, model.cfg.feat_dim)
        labels = _read_labels(args.labels, len(inputs)) if args.labels else [None] * len(inputs)
        for (uid, x), y in zip(inputs, labels):
            if len(inputs) > 1:
                print(f"# utt={uid}", file=out)
            write_attention(dump_attention(model, x, layers, heads, y), out)
    elif args.mode == "embed":
        _table_from_args(args, model).write(out)
    elif args.mode == "pca":
        table = _table_from_args(args, model)
        toks, mat = table.matrix()
        res = pca_2d(mat)
        print(f"# explained_variance\t{res.explained[0]:.10g}\t{res.explained[1]:.10g}", file=out)
        write_pca(toks, res, out)
    elif args.mode == "neighbors":
        if args.token is None:
            raise UsageError("--mode neighbors needs --token")
        table = _table_from_args(args, model)
        for rank, (tok, sim) in enumerate(cosine_neighbors(table, args.token, args.n), 1):
            print(f"{rank}\t{tok}\t{sim:.10f}", file=out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cassnat", description="CTC-alignment-based single-step non-autoregressive ASR toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train CASS-NAT or the AT baseline on the synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-encoder", help="AT checkpoint whose encoder seeds the CASS-NAT encoder")
    t.add_argument("--at-baseline", action="store_true")
    t.add_argument("--resume", help="state.ckpt written by an earlier run")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="export a synthetic split as feature files and labels")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=list(SPLITS), default="test")
    s.add_argument("-n", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("decode", help="decode feature files")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--beam", type=int, default=None)
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("align", help="forced-align label sequences")
    a.add_argument("--ckpt")
    a.add_argument("--input", required=True)
    a.add_argument("--labels", required=True)
    a.add_argument("--grid", action="store_true", help="inputs are posterior grids, not features")
    a.set_defaults(func=cmd_align)

    b = sub.add_parser("bench", help="decode latency of CASS-NAT against the AT baseline")
    b.add_argument("--ckpt-nat", required=True)
    b.add_argument("--ckpt-at", required=True)
    b.add_argument("--lengths", default="10,25,50")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks of every block")
    g.add_argument("--config")
    g.add_argument("--module", action="append", help=f"one of {', '.join(CHECKS)}; repeatable")
    g.add_argument("--inject-fault", help="corrupt the backward pass of this block")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--probes", type=int, default=60)
    g.set_defaults(func=cmd_gradcheck)

    n = sub.add_parser("analyze", help="attention dumps, embedding tables, PCA and neighbours")
    n.add_argument("--ckpt")
    n.add_argument("--input")
    n.add_argument("--mode", choices=["attn", "embed", "pca", "neighbors"], required=True)
    n.add_argument("--layer", default="last")
    n.add_argument("--heads")
    n.add_argument("--labels")
    n.add_argument("--table", help="embedding table written by --mode embed")
    n.add_argument("--tap", choices=["tae", "sad", "mad"], default="tae")
    n.add_argument("--token", type=int)
    n.add_argument("-n", type=int, default=5)
    n.set_defaults(func=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = out if out is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, out)
    except CassNatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
