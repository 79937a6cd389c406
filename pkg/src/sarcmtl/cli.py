"""Command line entry point: ``sarcmtl {synth,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ROWS, ablation_run, write_ablation
from .autodiff import finite_diff_check
from .data import (ARSARCASM_TEST_SIZE, ARSARCASM_TRAIN_SIZE, RESERVED, DataError, Record,
                   SynthConfig, Vocab, encode_records, parse_dataset, synth_generate,
                   write_dataset)
from .metrics import evaluate, write_matrices
from .model import Model, ModelConfig, VariantKind, batch_loss, load_checkpoint
from .training import NumericError, TrainConfig, train, write_run_dir

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("sarcmtl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=d.learning_rate,
                   help="Adam learning rate (5e-6 suits a pretrained encoder)")
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--adam-eps", type=float, default=d.adam_eps)
    g.add_argument("--dev-ratio", type=float, default=d.dev_ratio)
    g.add_argument("--encoder", choices=("bag", "transformer"), default=d.encoder)
    g.add_argument("--d", type=int, default=d.d, help="hidden width")
    g.add_argument("--layers", type=int, default=d.layers)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--d-ff", type=int, default=None, help="feed-forward width (default 2*d)")
    g.add_argument("--nmax", type=int, default=d.n_max, help="maximum sequence length incl. [CLS]")
    g.add_argument("--min-freq", type=int, default=d.min_freq, help="vocabulary frequency cutoff")


def _train_config(args, variant: str, seed: int) -> TrainConfig:
    return TrainConfig(variant=VariantKind(variant), learning_rate=args.lr,
                       batch_size=args.batch_size, epochs=args.epochs, beta1=args.beta1,
                       beta2=args.beta2, adam_eps=args.adam_eps, seed=seed,
                       dev_ratio=args.dev_ratio, encoder=args.encoder, d=args.d,
                       layers=args.layers, heads=args.heads, d_ff=args.d_ff,
                       n_max=args.nmax, min_freq=args.min_freq)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="sarcmtl", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sc = SynthConfig()
    p = sub.add_parser("synth", help="write a synthetic dataset TSV", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output TSV path")
    p.add_argument("--n", type=int, default=sc.n_examples, help="number of examples")
    p.add_argument("--vocab-size", type=int, default=sc.vocab_size)
    p.add_argument("--max-len", type=int, default=sc.max_len, help="max tokens per example")
    p.add_argument("--min-len", type=int, default=sc.min_len)
    p.add_argument("--p-sarcastic", type=float, default=sc.p_sarcastic)
    p.add_argument("--p-neg-given-sarc", type=float, default=sc.p_neg_given_sarc)
    p.add_argument("--signal-strength", type=float, default=sc.signal_strength)
    p.add_argument("--indicators-per-class", type=int, default=sc.indicators_per_class)
    p.add_argument("--nmax", type=int, default=sc.n_max)
    p.add_argument("--seed", type=int, default=sc.seed)

    p = sub.add_parser("train", help="train one variant into a run directory", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training TSV (split 80/20 into train/dev)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--variant", choices=[v.value for v in VariantKind], default="MTL_ATTINTER")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expect-count", type=int, default=None,
                   help=f"assert the record count (official train file: {ARSARCASM_TRAIN_SIZE})")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", default=None, help="also write report and matrix TSVs here")
    p.add_argument("--expect-count", type=int, default=None,
                   help=f"assert the record count (official test file: {ARSARCASM_TEST_SIZE})")

    p = sub.add_parser("ablate", help="run the five-model ablation grid", formatter_class=fmt)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--models", default=",".join(ROWS), help="comma-separated table rows")
    p.add_argument("--jobs", type=int, default=1, help="parallel (variant, seed) cells")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model",
                       formatter_class=fmt)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--nmax", type=int, default=6)
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--encoder", choices=("bag", "transformer"), default="transformer")
    p.add_argument("--variant", choices=[v.value for v in VariantKind], default="MTL_ATTINTER")
    p.add_argument("--eps", type=float, default=1e-3, help="central-difference step")
    p.add_argument("--plain", action="store_true",
                   help="single central difference instead of the eps, eps/2 extrapolation")
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = SynthConfig(vocab_size=args.vocab_size, n_examples=args.n, max_len=args.max_len,
                      min_len=args.min_len, p_sarcastic=args.p_sarcastic,
                      p_neg_given_sarc=args.p_neg_given_sarc,
                      signal_strength=args.signal_strength,
                      indicators_per_class=args.indicators_per_class, n_max=args.nmax,
                      seed=args.seed)
    records = synth_generate(cfg)
    write_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out} (seed={args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    records = parse_dataset(args.data, expected_count=args.expect_count)
    cfg = _train_config(args, args.variant, args.seed)
    result = train(records, cfg)
    run_dir = write_run_dir(result, cfg, args.run_dir, extra={"data": str(args.data)})
    last = result.history.epochs[-1]
    print(f"seed={cfg.seed} variant={cfg.variant.value} final loss {last.loss_total:.4f}")
    print(f"dev: {last.dev.summary()}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = parse_dataset(args.data, expected_count=args.expect_count)
    report = evaluate(model, records)
    seed = model.config.seed
    text = f"# checkpoint={args.checkpoint} variant={model.config.variant.value} seed={seed}\n"
    text += report.to_text()
    print(text, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        write_matrices(report, out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    rows = [r.strip() for r in args.models.split(",") if r.strip()]
    bad = [r for r in rows if r not in ROWS]
    if bad or not seeds:
        raise UsageError(f"--models must be drawn from {list(ROWS)} and --seeds non-empty")
    train_records = parse_dataset(args.train_data)
    test_records = parse_dataset(args.test_data)
    cfg = _train_config(args, "MTL_ATTINTER", seeds[0])
    t0 = time.time()
    result = ablation_run(train_records, test_records, seeds, cfg, rows, jobs=args.jobs)
    out = write_ablation(result, args.run_dir)
    snapshot = {"train": cfg.to_dict(), "seeds": seeds, "models": rows,
                "train_data": str(args.train_data), "test_data": str(args.test_data)}
    (out / "config.snapshot").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    print(result.table_text(), end="")
    print(f"wrote {out} in {time.time() - t0:.0f}s")
    return EXIT_OK


def run_gradcheck(d: int = 8, nmax: int = 6, vocab: int = 50, batch: int = 4, layers: int = 2,
                  heads: int = 4, encoder: str = "transformer", variant: str = "MTL_ATTINTER",
                  eps: float = 1e-3, seed: int = 0, richardson: bool = True):
    """Finite-difference check of the mean joint loss of a random tiny model.

    Returns the check result and the parameter groups it covered.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=VariantKind(variant), vocab_size=vocab, n_max=nmax, d=d,
                      encoder=encoder, layers=layers, heads=heads, seed=seed)
    model = Model.create(cfg)
    # perturb the zero-initialised biases so their gradients are generic
    for name, p in model.params.items():
        if name.split(".")[-1].startswith("b"):
            p.value += rng.normal(0.0, 0.1, size=p.shape)
    words = Vocab([f"w{i}" for i in range(vocab - len(RESERVED))])
    records = []
    for _ in range(batch):
        n = int(rng.integers(1, nmax))
        text = " ".join(f"w{j}" for j in rng.integers(0, vocab - len(RESERVED), size=n))
        records.append(Record(text, int(rng.integers(3)), int(rng.integers(2))))
    b = encode_records(records, words, nmax)
    res = finite_diff_check(lambda: batch_loss(model, b), model.params, eps=eps,
                            richardson=richardson)
    groups = sorted({n.split(".")[0] for n in model.params})
    return res, groups


def cmd_gradcheck(args) -> int:
    if args.nmax < 2 or args.batch < 1 or args.vocab < 4:
        raise UsageError("gradcheck needs --nmax >= 2, --batch >= 1 and --vocab >= 4")
    t0 = time.time()
    res, groups = run_gradcheck(args.d, args.nmax, args.vocab, args.batch, args.layers,
                                args.heads, args.encoder, args.variant, args.eps, args.seed,
                                richardson=not args.plain)
    print(f"gradcheck variant={args.variant} d={args.d} nmax={args.nmax} "
          f"vocab={args.vocab} batch={args.batch} seed={args.seed}")
    print(f"parameter groups: {', '.join(groups)}")
    print(res)
    ok = res.max_rel_err <= args.tol
    print(f"max_rel_err={res.max_rel_err:.6e} tol={args.tol:g} "
          f"{'PASS' if ok else 'FAIL'} ({time.time() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # configuration values rejected by validate()
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
