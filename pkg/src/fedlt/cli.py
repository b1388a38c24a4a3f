"""Command line entry point: ``fedlt run``, ``fedlt sweep``, ``fedlt report``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .experiment import (
    METHODS,
    SWEEP_AXES,
    ExperimentConfig,
    load_config,
    read_config_file,
    run_experiment,
    run_sweep,
)
from .nn import ConfigError

log = logging.getLogger("fedlt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_HELP = {
    "method": f"one of {', '.join(METHODS)}",
    "rebalance_factor": "re-balance factor (alias --lambda)",
    "threshold": "per-class sample threshold, or 'inf' (alias --threshold-t)",
    "seeds": "comma-separated seeds",
    "hidden": "comma-separated hidden widths of the encoder",
    "tail_classes": "binary imbalance: comma-separated tail classes",
    "ratio_vector": "ratio loss: comma-separated per-class ratios (default: oracle)",
    "output_dir": "output directory (relative paths resolve under $FEDLT_OUTPUT_ROOT)",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file of settings; flags override it")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag]
        if f.name == "rebalance_factor":
            names.append("--lambda")
        if f.name == "threshold":
            names.append("--threshold-t")
        if isinstance(getattr(ExperimentConfig(), f.name), bool):
            if f.name == "figures":
                p.add_argument("--no-figures", dest="figures", action="store_const",
                               const=False, default=argparse.SUPPRESS, help="skip PNG figures")
            else:
                p.add_argument(*names, dest=f.name, action="store_const", const=True,
                               default=argparse.SUPPRESS)
            continue
        p.add_argument(*names, dest=f.name, default=argparse.SUPPRESS, metavar="VALUE",
                       help=_HELP.get(f.name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment over all seeds")
    _add_config_flags(run)

    sweep = sub.add_parser("sweep", help="run one experiment per value of an axis")
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="comma-separated values ('inf' allowed for threshold_t)")
    _add_config_flags(sweep)

    report = sub.add_parser("report", help="re-render figures for an existing run or sweep directory")
    report.add_argument("directory", type=Path)
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    return {k: v for k, v in vars(ns).items() if k in names}


def _warn_ignored(cfg: ExperimentConfig, given: set[str]) -> None:
    if cfg.method == "redgrape":
        return
    for key, label in (("rebalance_factor", "lambda"), ("threshold", "threshold")):
        if key in given:
            log.warning("%s is ignored for the %s baseline", label, cfg.method)


def _given_keys(ns: argparse.Namespace) -> set[str]:
    keys = set(_overrides(ns))
    if getattr(ns, "config", None) is not None:
        keys |= set(read_config_file(ns.config))
    return keys


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if ns.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if ns.command == "report":
            from .plotting import plot_run, plot_sweep
            d = ns.directory
            if (d / "curves.csv").exists():
                print(plot_run(d))
            elif d.is_dir() and any((p / "curves.csv").exists() for p in d.iterdir()):
                print(plot_sweep(d))
            else:
                raise ConfigError(f"directory: {d} holds no curves.csv")
            return EXIT_OK

        cfg = load_config(ns.config, _overrides(ns))
        _warn_ignored(cfg, _given_keys(ns))
        if ns.command == "run":
            summary = run_experiment(cfg)
            o, t = summary["overall_accuracy"], summary["tail_accuracy"]
            print(f"{cfg.method}: overall {100 * o['mean']:.2f} +- {100 * o['std']:.2f}, "
                  f"tail {100 * t['mean']:.2f} +- {100 * t['std']:.2f} (last {summary['last_k']} rounds)")
        else:
            values = [v.strip() for v in ns.values.split(",") if v.strip()]
            if not values:
                raise ConfigError("values: must be nonempty")
            for row in run_sweep(cfg, ns.axis, values):
                print(f"{ns.axis}={row['value']}: overall {100 * row['overall_mean']:.2f}, "
                      f"tail {100 * row['tail_mean']:.2f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"fedlt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # fail-stop: report and exit nonzero
        log.debug("runtime failure", exc_info=True)
        print(f"fedlt: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
