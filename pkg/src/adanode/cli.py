"""Command-line front end.

Subcommands: gen (synthetic datasets), train (source model), adapt
(test-time adaptation of alpha/gamma), eval (metrics on labeled data),
bench (full experiment grid). Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .adaptation import LR_SEARCH_GRID, AdaptConfig, adapt, adapt_with_lr_search
from .bench import (
    ExperimentGrid,
    aggregate,
    evaluate,
    grid_from_dict,
    grid_to_dict,
    load_grid,
    run_grid,
)
from .errors import AdanodeError, ConfigError, ParseError, UsageError
from .model import (
    AdaptationParams,
    Architecture,
    LatentODEModel,
    load_checkpoint,
    save_checkpoint,
)
from .shiftgen import (
    SEVERITIES,
    SHIFT_KINDS,
    SIGNAL_KINDS,
    GlyphSequenceSpec,
    ShiftSpec,
    SignalSpec,
    gen_dataset,
    gen_glyph_dataset,
    read_dataset,
    write_dataset,
)
from .train import TrainConfig, fit_source_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

GLYPH = "glyph"
GLYPH_SHIFT = "dt"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hidden_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("hidden widths must be integers") from None
    if not widths:
        raise argparse.ArgumentTypeError("at least one hidden width is needed")
    return widths


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("seeds must be integers") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is needed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adanode", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate a synthetic dataset CSV")
    p.add_argument("--signal", required=True, choices=(*SIGNAL_KINDS, GLYPH))
    p.add_argument("--shift", choices=(*SHIFT_KINDS, GLYPH_SHIFT),
                   help="shift kind; glyph signals always use 'dt'")
    p.add_argument("--severity", type=int, required=True, choices=SEVERITIES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n-series", type=int, default=8)
    p.add_argument("--context-len", type=int, default=24)
    p.add_argument("--horizon-len", type=int, default=16)
    p.add_argument("--dt-sample", type=float, default=0.05)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--frequency", type=float, default=1.0)
    p.add_argument("--phase", type=float, default=0.0)
    p.add_argument("--slope", type=float, default=1.0)
    p.add_argument("--intercept", type=float, default=0.0)
    p.add_argument("--damping", type=float, default=0.5)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--frames", type=int, default=20, help="glyph frames per series")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit a source model and save a checkpoint")
    p.add_argument("--data", required=True, help="training dataset CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--n-samples", type=int, default=3)
    p.add_argument("--beta", type=float, default=0.1, help="KL weight")
    p.add_argument("--consistency-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-lat", type=int, default=8)
    p.add_argument("--enc-len", type=int, default=32)
    p.add_argument("--hidden", type=_hidden_widths, default=(64,),
                   help="comma-separated hidden widths, e.g. 64 or 64,64")
    p.add_argument("--activation", choices=("tanh", "relu", "softplus"),
                   default="tanh")
    p.add_argument("--no-fine-tune", action="store_true",
                   help="skip the reduced-rate second training stage")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fit (alpha, gamma) on an unlabeled batch")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset CSV (targets ignored)")
    p.add_argument("--out", required=True, help="adapted-parameters JSON path")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--n-samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--search", action="store_true",
                   help="search learning rates %s and keep the best loss"
                   % (LR_SEARCH_GRID,))
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score forecasts on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapted", help="adapted-parameters JSON from 'adapt'")
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--seeds", type=_seed_list, default=(0,),
                   help="comma-separated evaluation seeds")
    p.add_argument("--predictions", help="write per-point predictions CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the full experiment grid")
    p.add_argument("--config", help="grid config JSON; defaults fill gaps")
    p.add_argument("--out-dir", help="override the config output directory")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config as JSON and exit")
    p.set_defaults(func=cmd_bench)
    return parser


def cmd_gen(args) -> int:
    if args.signal == GLYPH:
        if args.shift not in (None, GLYPH_SHIFT):
            raise UsageError("glyph datasets only support the 'dt' shift")
        ds = gen_glyph_dataset(
            GlyphSequenceSpec(frames=args.frames),
            args.severity,
            args.n_series,
            args.seed,
            split=args.split,
        )
    else:
        if args.shift in (None, GLYPH_SHIFT):
            raise UsageError("1-D signals need --shift ampfreq or delay")
        signal = SignalSpec(
            kind=args.signal,
            amplitude=args.amplitude,
            frequency=args.frequency,
            phase=args.phase,
            slope=args.slope,
            intercept=args.intercept,
            damping=args.damping,
            noise_std=args.noise_std,
        )
        ds = gen_dataset(
            signal,
            ShiftSpec(kind=args.shift, severity=args.severity),
            args.n_series,
            args.context_len,
            args.horizon_len,
            args.dt_sample,
            args.seed,
            split=args.split,
        )
    write_dataset(ds, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    data = read_dataset(args.data)
    if not data.windows:
        raise UsageError("training dataset has no windows")
    arch = Architecture(
        d_obs=data.windows[0].d_obs,
        d_lat=args.d_lat,
        enc_len=args.enc_len,
        enc_hidden=args.hidden,
        node_hidden=args.hidden,
        dec_hidden=args.hidden,
        activation=args.activation,
    )
    model = LatentODEModel.init_random(arch, seed=args.seed)
    config = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        n_samples=args.n_samples,
        beta=args.beta,
        consistency_weight=args.consistency_weight,
        seed=args.seed,
        log_every=args.log_every,
    )
    losses = fit_source_model(model, data, config, fine_tune=not args.no_fine_tune)
    save_checkpoint(model, args.out)
    print(f"trained {len(losses)} epochs, final loss {losses[-1]:.6f}, "
          f"checkpoint {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    model = load_checkpoint(args.model)
    data = read_dataset(args.data)
    config = AdaptConfig(
        batch=[w.without_targets() for w in data.windows],
        learning_rate=args.learning_rate,
        steps=args.steps,
        lam=args.lam,
        n_samples=args.n_samples,
        seed=args.seed,
    )
    if args.search:
        params, trace, rate = adapt_with_lr_search(model, config)
    else:
        params, trace = adapt(model, config)
        rate = args.learning_rate
    doc = {
        "alpha": params.alpha,
        "gamma": params.gamma,
        "final_loss": float(trace.best().total),
        "steps": args.steps,
        "seed": args.seed,
    }
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2) + "\n")
    print(f"adapted alpha={params.alpha:.6f} gamma={params.gamma:.6f} "
          f"loss={doc['final_loss']:.6f} (learning rate {rate:g})")
    return EXIT_OK


def _load_adapted(path) -> AdaptationParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"adapted-parameters file is not valid JSON: {exc}") from None
    try:
        return AdaptationParams(alpha=float(doc["alpha"]), gamma=float(doc["gamma"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"adapted-parameters file is malformed: {exc!r}") from None


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    data = read_dataset(args.data)
    adaptation = _load_adapted(args.adapted) if args.adapted else None
    results = evaluate(
        model,
        data,
        adaptation=adaptation,
        n_samples=args.n_samples,
        seeds=args.seeds,
        predictions_path=args.predictions,
    )
    stats = aggregate(results)
    doc = {
        "rows": [
            {"seed": r.seed, "mse": r.mse, "cc": r.cc, "ccc": r.ccc}
            for r in results
        ],
        "mean": {name: stats[name][0] for name in stats},
        "std": (
            {name: stats[name][1] for name in stats}
            if len(results) > 1
            else None
        ),
        "adaptation": (
            {"alpha": adaptation.alpha, "gamma": adaptation.gamma}
            if adaptation
            else None
        ),
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.config:
        grid = load_grid(args.config)
    else:
        grid = ExperimentGrid()
    if args.out_dir:
        grid = grid_from_dict({**grid_to_dict(grid), "out_dir": args.out_dir})
    if args.print_config:
        print(json.dumps(grid_to_dict(grid), indent=2))
        return EXIT_OK
    if not args.config:
        raise UsageError("bench needs --config (or --print-config)")
    paths = run_grid(grid)
    for name in ("metrics", "improvement", "summary"):
        print(f"{name}: {paths[name]}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdanodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())
