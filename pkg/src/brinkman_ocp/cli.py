"""Command line interface: ``ocp run`` and ``ocp verify``."""
import argparse
import logging
import sys

from .bench import SweepConfig, SweepError, load_config_file, run_sweep


def _run_parser(sub):
    p = sub.add_parser("run", help="run a convergence sweep and write a CSV")
    p.add_argument("--config", help="JSON file with run-configuration keys")
    p.add_argument("--example", help="layer | lshape | file:<mesh path>")
    p.add_argument("--scheme", choices=["fully", "semi"])
    p.add_argument("--element", choices=["mini", "th"])
    p.add_argument("--refine", choices=["uniform", "adaptive"])
    p.add_argument("--levels", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lower", dest="a", type=float)
    p.add_argument("--upper", dest="b", type=float)
    p.add_argument("--quad-degree", dest="quad_degree", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="maxIter", type=int)
    p.add_argument("--method", choices=["newton", "fixed_point"])
    p.add_argument("--n0", type=int, help="cells per side of the initial unit-square mesh")
    p.add_argument("--ndof-cap", dest="ndof_cap", type=int)
    p.add_argument("--out", default="results.csv")
    return p


def _verify_parser(sub):
    p = sub.add_parser("verify", help="run the acceptance criteria")
    p.add_argument("--only", help="comma separated criterion numbers, e.g. 1,8,9")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="ocp")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _run_parser(sub)
    _verify_parser(sub)
    return parser


_CONFIG_KEYS = ("example", "scheme", "element", "refine", "levels", "theta", "alpha", "a",
                "b", "quad_degree", "tol", "maxIter", "method", "n0", "ndof_cap", "out")


def config_from_args(args):
    values = load_config_file(args.config) if args.config else {}
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return SweepConfig.from_mapping(values).validate()


def cmd_run(args):
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"ocp run: {exc}", file=sys.stderr)
        return 1
    try:
        rows = run_sweep(cfg)
    except SweepError as exc:
        print(f"ocp run: {exc}", file=sys.stderr)
        return 1
    for r in rows:
        print(f"level {r.level:3d}  Ndof {r.Ndof:8d}  estTotal {r.estTotal:.4e}  "
              f"errU_L2 {r.errU_L2:.4e}  iters {r.optimIters}")
    print(f"wrote {cfg.out}")
    return 0


def cmd_verify(args):
    from .acceptance import run_all
    only = None
    if args.only:
        only = [int(s) for s in args.only.split(",") if s.strip()]
    results = run_all(only=only, echo=True)
    return 0 if all(r.passed for r in results) else 2


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args)
    return cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
