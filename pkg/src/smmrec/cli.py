"""Command-line entry point: preprocess, augment, train, eval, ablate,
gradcheck.

Heavy imports (numpy model stack, numba kernels) happen inside the
subcommands that need them so cheap commands stay fast. All diagnostics
go to stderr; data goes to stdout or files. Exit codes: 0 success,
2 usage/configuration error, 1 runtime error.

Config precedence: command-line flag > --config JSON file > built-in
default; the resolved configuration is echoed into every report.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, SmmrecError

log = logging.getLogger("smmrec")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("SMMREC_LOG", "error").strip().lower()
    if level not in _LOG_LEVELS:
        raise ConfigurationError(f"SMMREC_LOG must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config file {p} must hold a JSON object")
    return cfg


def _emit(obj, out_path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        print(text)


def _build_strategy(args, file_cfg: dict):
    from .masking import MaskingStrategy

    kwargs = dict(file_cfg.get("strategy", {}))
    if getattr(args, "strategy", None):
        kwargs["kind"] = args.strategy
    if getattr(args, "max_len", None):
        kwargs["max_len"] = args.max_len
    if getattr(args, "mask_k", None):
        kwargs["mask_k"] = args.mask_k
    if getattr(args, "mlm_ratio", None):
        kwargs["mlm_ratio"] = args.mlm_ratio
    return MaskingStrategy(**kwargs)


def _build_model_config(args, file_cfg: dict, vocab_size: int, strategy):
    from .masking import CLM
    from .model import ModelConfig

    kwargs = dict(file_cfg.get("model", {}))
    kwargs["vocab_size"] = vocab_size
    kwargs.setdefault("causal", strategy.kind == CLM)
    if getattr(args, "max_len", None):
        kwargs["max_len"] = args.max_len
    else:
        kwargs.setdefault("max_len", strategy.max_len)
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    return ModelConfig(**kwargs)


def _build_train_config(args, file_cfg: dict, strategy):
    from .training import TrainConfig

    kwargs = dict(file_cfg.get("train", {}))
    if getattr(args, "batch_size", None):
        kwargs["batch_size"] = args.batch_size
    if getattr(args, "epochs", None):
        kwargs["epochs"] = args.epochs
    if getattr(args, "learning_rate", None):
        kwargs["learning_rate"] = args.learning_rate
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    kwargs["strategy"] = strategy
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from .data import ColumnMap, ingest_events, preprocess_events, save_dataset

    path = Path(args.input)
    if not path.exists():
        raise ConfigurationError(f"input file not found: {path}")
    delimiter = {None: None, "comma": ",", "tab": "\t", "\\t": "\t"}.get(
        args.delimiter, args.delimiter
    )
    columns = ColumnMap(args.session_col, args.item_col, args.time_col, delimiter)
    with path.open() as fh:
        events, row_errors = ingest_events(fh, columns)
    for err in row_errors:
        print(f"row error at line {err.line_number}: {err.message}", file=sys.stderr)
    boundary = args.split_boundary
    fraction = None if boundary is not None else args.test_fraction
    dataset = preprocess_events(
        events, boundary=boundary, test_fraction=fraction, min_item_freq=args.min_item_freq
    )
    stats = save_dataset(dataset, args.out)
    print(json.dumps(stats.__dict__, indent=2))
    return 0


def _augment_sessions(args):
    from .data import FIRST_ITEM, Session, load_dataset

    if args.session:
        try:
            items = [int(tok) for tok in args.session.replace(" ", "").split(",") if tok]
        except ValueError:
            raise ConfigurationError(f"--session must be comma-separated integers, got {args.session!r}")
        if any(i < FIRST_ITEM for i in items):
            raise ConfigurationError(f"item indices must be >= {FIRST_ITEM} (0/1 are PAD/MASK)")
        return [Session("cli", items, 0)]
    if args.dataset:
        ds = load_dataset(args.dataset)
        return ds.train if args.split == "train" else ds.test
    raise ConfigurationError("augment needs --session or --dataset")


def cmd_augment(args) -> int:
    from .masking import example_to_json_obj, training_examples

    strategy = _build_strategy(args, _load_config_file(args.config))
    sessions = _augment_sessions(args)
    seed = args.seed if args.seed is not None else 42
    examples = training_examples(sessions, strategy, seed, args.epoch)
    lines = [json.dumps(example_to_json_obj(ex)) for ex in examples]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .model import init_model
    from .training import fit

    file_cfg = _load_config_file(args.config)
    dataset = load_dataset(args.dataset)
    strategy = _build_strategy(args, file_cfg)
    vocab_size = dataset.vocab.num_items + 2
    model_config = _build_model_config(args, file_cfg, vocab_size, strategy)
    train_config = _build_train_config(args, file_cfg, strategy)
    model = init_model(model_config)
    out = Path(args.out)
    _, report = fit(model, dataset, train_config, out_dir=out)
    (out / "report.json").write_text(json.dumps(report.to_json_obj(), indent=2) + "\n")
    print(json.dumps(report.to_json_obj(), indent=2))
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset, prefix_augment
    from .evaluation import evaluate, item_knn_baseline, pop_baseline
    from .masking import MaskingStrategy
    from .model import load_checkpoint

    file_cfg = _load_config_file(args.config)
    dataset = load_dataset(args.dataset)
    keep = args.dump_ranks is not None

    if args.baseline:
        strategy = _build_strategy(args, file_cfg)
        pairs = prefix_augment(dataset.test, window=strategy.max_len)
        if args.baseline == "pop":
            report = pop_baseline(dataset.train, pairs, dataset.vocab, k=args.k, keep_ranks=keep)
        else:
            report = item_knn_baseline(
                dataset.train, pairs, dataset.vocab, k=args.k, mode=args.knn_mode, keep_ranks=keep
            )
    else:
        if not args.checkpoint:
            raise ConfigurationError("eval needs --checkpoint or --baseline")
        model = load_checkpoint(args.checkpoint)
        strat_kwargs = dict(file_cfg.get("strategy", {}))
        if args.strategy:
            strat_kwargs["kind"] = args.strategy
        elif "kind" not in strat_kwargs:
            strat_kwargs["kind"] = "clm" if model.config.causal else "smm"
        strat_kwargs.setdefault("max_len", model.config.max_len)
        if args.mask_k:
            strat_kwargs["mask_k"] = args.mask_k
        strategy = MaskingStrategy(**strat_kwargs)
        pairs = prefix_augment(dataset.test, window=strategy.max_len)
        report = evaluate(model, pairs, strategy, dataset.vocab, k=args.k, keep_ranks=keep)

    obj = report.to_json_obj()
    if keep:
        ranks = obj.pop("per_instance_ranks")
        with Path(args.dump_ranks).open("w") as fh:
            for row in ranks:
                fh.write(json.dumps(row) + "\n")
    _emit(obj, args.out)
    return 0


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .model import ModelConfig
    from .training import ablate

    file_cfg = _load_config_file(args.config)
    dataset = load_dataset(args.dataset)
    strategy = _build_strategy(args, file_cfg)
    vocab_size = dataset.vocab.num_items + 2
    model_config = _build_model_config(args, file_cfg, vocab_size, strategy)
    train_config = _build_train_config(args, file_cfg, strategy)
    toggles = [t for t in (args.toggles or "").split(",") if t]
    rows = ablate(dataset, model_config, train_config, toggles, k=args.k)
    _emit(rows, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    import itertools

    import numpy as np

    from .autodiff import FD_CHECK_LOSS_SCALE, gradient_check
    from .masking import smm_examples
    from .model import ModelConfig, forward, init_model
    from .training import objective_loss

    session = list(range(2, 2 + args.session_len))
    batch = smm_examples(session, args.max_len, mask_k=2, session_id="gradcheck")

    combos = (
        list(itertools.product([False, True], repeat=4))
        if args.all_combos
        else [(args.weight_tying, args.pre_ln_rmsnorm, args.cope, args.causal)]
    )
    worst = 0.0
    for tying, pre_ln, cope, causal in combos:
        config = ModelConfig(
            vocab_size=2 + args.session_len + 2,
            hidden=args.hidden,
            layers=args.layers,
            heads=args.heads,
            ffn_mult=2,
            max_len=args.max_len,
            dropout=0.0,
            causal=causal,
            weight_tying=tying,
            pre_ln_rmsnorm=pre_ln,
            cope=cope,
            seed=args.seed if args.seed is not None else 42,
        )
        model = init_model(config, dtype=np.float64)
        err = gradient_check(
            lambda: objective_loss(forward(model, batch), batch) * FD_CHECK_LOSS_SCALE,
            model.parameters(),
            eps=args.eps,
        )
        worst = max(worst, err)
        print(
            f"tying={int(tying)} pre_ln={int(pre_ln)} cope={int(cope)} causal={int(causal)}"
            f" max_rel_err={err:.3e}",
            file=sys.stderr,
        )
    print(json.dumps({"max_relative_error": float(worst), "tolerance": args.tol,
                      "passed": bool(worst < args.tol)}))
    return 0 if worst < args.tol else 1


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smmrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (default 42)")
    common.add_argument("--workers", type=int, default=1,
                        help="worker count for internal parallelism (currently sequential)")

    p = sub.add_parser("preprocess", parents=[common], help="events log -> dataset directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session-col", default="session_id")
    p.add_argument("--item-col", default="item_id")
    p.add_argument("--time-col", default="timestamp")
    p.add_argument("--delimiter", default=None,
                   help="field delimiter; 'comma', 'tab', or a literal (default: sniff)")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--split-boundary", type=int, default=None,
                   help="absolute epoch-ms boundary (overrides --test-fraction)")
    p.add_argument("--min-item-freq", type=int, default=5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", parents=[common], help="dump masked training examples as JSONL")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--session", help="inline comma-separated item indices")
    p.add_argument("--strategy", choices=["smm", "mlm", "clm"], default="smm")
    p.add_argument("--max-len", type=int)
    p.add_argument("--mask-k", type=int)
    p.add_argument("--mlm-ratio", type=float)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=["smm", "mlm", "clm"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--mask-k", type=int)
    p.add_argument("--mlm-ratio", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rank test pairs with a checkpoint or baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["pop", "itemknn"])
    p.add_argument("--knn-mode", choices=["last", "sum"], default="last")
    p.add_argument("--strategy", choices=["smm", "mlm", "clm"])
    p.add_argument("--max-len", type=int)
    p.add_argument("--mask-k", type=int)
    p.add_argument("--mlm-ratio", type=float)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--dump-ranks", help="write per-instance ranks as JSONL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="cumulative optimization ablation table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--toggles", default="weight_tying,pre_ln_rmsnorm,cope")
    p.add_argument("--strategy", choices=["smm", "mlm", "clm"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--mask-k", type=int)
    p.add_argument("--mlm-ratio", type=float)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference verification of the tape gradients")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--session-len", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--all-combos", action="store_true",
                   help="sweep all 16 toggle combinations")
    p.add_argument("--weight-tying", action="store_true", default=True)
    p.add_argument("--pre-ln-rmsnorm", action="store_true", default=True)
    p.add_argument("--cope", action="store_true", default=True)
    p.add_argument("--causal", action="store_true", default=False)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SmmrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
