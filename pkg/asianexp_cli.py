"""
asianexp command line: price, converge, verify and mc.

Exit codes: 0 success, 2 configuration error, 3 numerical failure flags,
4 convergence slope failure, 5 identity suite failure.
"""
import argparse
import json
import logging
import math
import sys

import numpy as np
import pandas as pd

from asianexp_config import ExperimentConfig, apply_overrides, load_config
from asianexp_errors import ConfigError, ExpansionError
from asianexp_mc import convergence_table, simulate_price
from asianexp_pricer import price, self_consistency_table
from asianexp_verify import SUITES, run_suite

# Configuration
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_SLOPE = 4
EXIT_IDENTITY = 5
FLOAT_FORMAT = "%.17g"

logger = logging.getLogger(__name__)


def status(prefix, message):
    print(f"[{prefix}] {message}", file=sys.stderr)


def _encode(value, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return json.dumps(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return FLOAT_FORMAT % value if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        if len(value) == 0:
            return "[]"
        items = [f"{pad}{_encode(v, indent, level + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(value).__name__}")


def dumps_record(record, indent=2):
    """JSON text with every float written to 17 significant digits."""
    return _encode(record, indent, 0) + "\n"


def base_record(cfg, **fields):
    """Schema-stable record: the fixed fields always present, absent data as null."""
    record = {
        "model": cfg.model,
        "payoff": cfg.payoff,
        "t": cfg.t,
        "T": cfg.T,
        "x": cfg.state_vector(),
        "N": cfg.N,
        "values": [],
        "greeks": {},
        "slopes": None,
        "pass": None,
    }
    record.update(fields)
    return record


def greek_name(alpha):
    names = {(1,): "delta", (2,): "gamma"}
    head, rest = alpha[:1], alpha[1:]
    if not any(rest) and head in names:
        return names[head]
    return "D" + "".join(str(a) for a in alpha)


def emit(cfg, record, frame):
    if cfg.format == "csv":
        text = frame.to_csv(index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    else:
        text = dumps_record(record)
    path = cfg.output_path()
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        status("+", f"Wrote {path}")
    else:
        sys.stdout.write(text)


def cmd_price(cfg):
    cfg.validate("price")
    model = cfg.build_model()
    payoff = cfg.payoff_factory()(cfg.T)
    d = model.d
    alphas = [tuple(1 if i == 0 else 0 for i in range(d)), tuple(2 if i == 0 else 0 for i in range(d))]
    alphas.append(tuple(1 if i == d - 1 else 0 for i in range(d)))
    result = price(model, payoff, cfg.t, cfg.T, cfg.state_vector(), cfg.N, cfg.base, greek_alphas=alphas)
    if cfg.dump_operators:
        for n, op in enumerate(result.context.operators, start=1):
            print(f"# L_{n}\n{op.format()}", file=sys.stderr)
    flags = result.diagnostics["quadrature_unconverged"]
    record = base_record(
        cfg,
        values=result.values,
        cumulative=result.cumulative,
        greeks={greek_name(a): v for a, v in result.greeks.items()},
        k=result.k,
        error_order=float(result.error_order),
        diagnostics=result.diagnostics,
    )
    record["pass"] = not flags
    frame = pd.DataFrame({
        "order": range(len(result.values)),
        "value": result.values,
        "cumulative": result.cumulative,
    })
    emit(cfg, record, frame)
    if flags:
        status("!", f"Quadrature did not converge for {len(flags)} derivatives")
        return EXIT_NUMERICAL
    if result.diagnostics["greeks_outside_regime"]:
        status("i", f"Greeks beyond order {cfg.N}: {result.diagnostics['greeks_outside_regime']}")
    status("+", f"U_{cfg.N} = {result.price:.10g}")
    return EXIT_OK


def _slope_dicts(slopes):
    return [
        {"N": s.N, "slope": s.slope, "expected": s.expected, "points": s.points, "pass": s.passed, "note": s.note or None}
        for s in slopes
    ]


def cmd_converge(cfg):
    cfg.validate("converge")
    model = cfg.build_model()
    factory = cfg.payoff_factory()
    rule = cfg.state_rule_object()
    if cfg.self_consistency:
        table, slopes = self_consistency_table(
            model, factory, cfg.maturities, cfg.orders, rule, cfg.base, cfg.workers
        )
        mode = "self-consistency"
    else:
        table, slopes = convergence_table(model, factory, cfg.maturities, cfg.mc, cfg.orders, rule, cfg.base, cfg.workers)
        mode = "monte-carlo"
    passed = all(s.passed for s in slopes)
    record = base_record(
        cfg,
        N=cfg.orders,
        values=table.to_dict(orient="records"),
        slopes=_slope_dicts(slopes),
        mode=mode,
        maturities=cfg.maturities,
    )
    record["pass"] = passed
    emit(cfg, record, table)
    for s in slopes:
        shown = "n/a" if s.slope is None else f"{s.slope:.3f}"
        status("+" if s.passed else "-", f"N={s.N}: slope {shown}, expected {s.expected:.3f} {s.note}".rstrip())
    return EXIT_OK if passed else EXIT_SLOPE


def cmd_verify(suite):
    results = run_suite(suite)
    for r in results:
        status("+" if r.passed else "-", f"{r.suite}: {r.name}: {r.residual:.3e} (tolerance {r.tolerance:.1e})")
    failed = [r for r in results if not r.passed]
    if failed:
        status("-", f"{len(failed)} of {len(results)} checks failed")
        return EXIT_IDENTITY
    status("+", f"All {len(results)} checks passed")
    return EXIT_OK


def cmd_mc(cfg):
    cfg.validate("mc")
    model = cfg.build_model()
    payoff = cfg.payoff_factory()(cfg.T)
    estimate = simulate_price(model, payoff, cfg.t, cfg.T, cfg.state_vector(), cfg.mc, cfg.workers)
    record = base_record(cfg, values=[estimate.mean], stderr=estimate.stderr, paths=estimate.paths)
    record["pass"] = True
    frame = pd.DataFrame({"mean": [estimate.mean], "stderr": [estimate.stderr], "paths": [estimate.paths]})
    emit(cfg, record, frame)
    status("+", f"MC {estimate.mean:.10g} +- {estimate.stderr:.3g} ({estimate.paths} paths)")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--model", help="bs-asian, bachelier-asian or custom")
    common.add_argument("--sigma", type=float, help="volatility parameter")
    common.add_argument("--payoff", help="fixed-call, fixed-put, float-call, float-put, average, constant")
    common.add_argument("--strike", type=float, help="fixed strike K")
    common.add_argument("--s0", type=float, help="first state coordinate")
    common.add_argument("--a0", type=float, help="last (averaged) state coordinate")
    common.add_argument("--t", type=float, help="evaluation time")
    common.add_argument("--T", type=float, help="maturity")
    common.add_argument("--N", type=int, help="expansion order (0-4)")
    common.add_argument("--base", choices=["start", "end"], help="base point (t,x) or (T,x)")
    common.add_argument("--format", choices=["json", "csv"], help="output format")
    common.add_argument("--output", help="output file; bare names go to $ASIANEXP_OUTPUT_DIR")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--paths", type=int, help="Monte Carlo paths")
    common.add_argument("--seed", type=int, help="Monte Carlo seed")
    common.add_argument("--antithetic", action="store_true", help="antithetic Monte Carlo pairs")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--dump-operators", action="store_true", help="print L_n operators to stderr")

    parser = argparse.ArgumentParser(
        prog="asianexp",
        description="Intrinsic asymptotic expansions for Kolmogorov diffusions and Asian options",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("price", parents=[common], help="expansion price and Greeks")
    converge = sub.add_parser("converge", parents=[common], help="convergence-order study")
    converge.add_argument("--self-consistency", action="store_true", help="fit |U_{N+1}-U_N| instead of MC errors")
    sub.add_parser("mc", parents=[common], help="Monte Carlo reference price")
    verify = sub.add_parser("verify", help="identity suites")
    verify.add_argument("suite", help=f"one of {', '.join(SUITES)}, all")
    verify.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def config_from_args(args):
    data = load_config(args.config) if getattr(args, "config", None) else {}
    cfg = ExperimentConfig.from_mapping(apply_overrides(data, args))
    cfg.dump_operators = bool(getattr(args, "dump_operators", False))
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.suite)
        cfg = config_from_args(args)
        commands = {"price": cmd_price, "converge": cmd_converge, "mc": cmd_mc}
        return commands[args.command](cfg)
    except ConfigError as e:
        status("-", f"Configuration error: {e}")
        return EXIT_CONFIG
    except ExpansionError as e:
        status("-", f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        status("!", "Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
