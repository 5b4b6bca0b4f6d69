"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from fedrkg.config import DATA_DIR_ENV, REGIMES, SWEEP_AXES, ConfigError, parse_config
from fedrkg.dataset import DatasetError, save_cache
from fedrkg.runner import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, load_dataset, run, sweep


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedrkg",
        description="Simulate federated recommendation with knowledge guidance.",
        epilog=f"Datasets are looked up under ${DATA_DIR_ENV}/<dataset>/ unless --data-path is given.",
    )
    p.add_argument("--config", help="JSON config file; flags override its values")
    data = p.add_argument_group("data")
    data.add_argument("--dataset", help="amazon-video, filmtrust, lastfm-2k, ml-1m or synthetic")
    data.add_argument("--data-path", help="rating file, dataset directory, or cache file")
    data.add_argument("--format", help="raw file format tag (defaults to the dataset name)")
    data.add_argument("--min-interactions", type=int)
    data.add_argument("--stats", action="store_true", help="print dataset statistics and exit")
    data.add_argument("--write-cache", metavar="PATH", help="write the preprocessed dataset cache and exit")

    model = p.add_argument_group("training")
    model.add_argument("--regime", choices=REGIMES)
    model.add_argument("--seed", type=int)
    model.add_argument("--rounds", type=int, help="communication rounds T")
    model.add_argument("--t-int", type=int, help="guidance interval")
    model.add_argument("--beta", type=float, help="retention coefficient")
    model.add_argument("--eta", type=float)
    model.add_argument("--eta-gate", type=float)
    model.add_argument("--epochs", type=int, help="local epochs per round")
    model.add_argument("--e-gate", type=int, help="gate epochs per guidance round")
    model.add_argument("--dim", type=int, help="embedding dimension")
    model.add_argument("--clients-per-round", type=int)
    model.add_argument("--batch-size", type=int)
    model.add_argument(
        "--negative-pool",
        choices=("train", "all"),
        help="train: negatives may include held-out items; all: held-out items are never negatives",
    )

    priv = p.add_argument_group("privacy")
    priv.add_argument("--privacy", type=_bool, metavar="on|off")
    priv.add_argument("--clip", type=float, help="L2 clip threshold C")
    priv.add_argument("--sigma", type=float, help="Gaussian noise std")

    out = p.add_argument_group("evaluation and output")
    out.add_argument("--eval-interval", type=int)
    out.add_argument("--eval-ks", help="comma-separated cutoffs, e.g. 5,10")
    out.add_argument("--patience", type=int, help="evaluations without improvement before stopping")
    out.add_argument("--output-dir")
    out.add_argument("--run-id")
    out.add_argument("--workers", type=int)
    out.add_argument("--snapshot-interval", type=int, help="rounds between resumable snapshots (0 = off)")
    out.add_argument("--dtype", choices=("float64", "float32"))
    out.add_argument("--analysis", action="store_const", const=True, help="write group analyses")
    out.add_argument("--sweep", nargs=2, metavar=("AXIS", "VALUES"), help=f"AXIS in {SWEEP_AXES}, VALUES comma-separated")
    out.add_argument("--resume", metavar="SNAPSHOT")
    out.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    out.add_argument("-v", "--verbose", action="store_true")
    return p


_NON_CONFIG = {"config", "stats", "write_cache", "sweep", "resume", "print_config", "verbose"}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    check_paths = not args.print_config
    try:
        config = parse_config(overrides, args.config, check_paths=check_paths)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    if args.print_config:
        print(config.to_json())
        return EXIT_OK

    if args.stats or args.write_cache:
        try:
            dataset = load_dataset(config)
        except DatasetError as exc:
            print(f"dataset error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        if args.write_cache:
            save_cache(dataset, args.write_cache)
        print(json.dumps(dataset.stats(), indent=2))
        return EXIT_OK

    if args.sweep:
        axis, raw_values = args.sweep
        values = [v.strip() for v in raw_values.split(",") if v.strip()]
        try:
            results = sweep(config, axis, values)
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            return EXIT_CONFIG
        except Exception as exc:  # noqa: BLE001
            print(f"sweep failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        for r in results:
            print(json.dumps(r, default=str))
        return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_RUNTIME

    return run(config, resume=args.resume)


if __name__ == "__main__":
    sys.exit(main())
