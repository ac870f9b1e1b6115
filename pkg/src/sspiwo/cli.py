"""Command-line entry point.

``sspiwo verify``   numeric invariants on fixtures and random tabular models
``sspiwo bounds``   exact bound expectations against k for one model and x
``sspiwo run``      flavor x supervision-rate experiment from a TOML manifest
``sspiwo plot``     SVG figures from a run directory

Exit codes: 0 success, 1 a check or run cell failed, 2 invalid input.
Settings resolve as flag > ``SSPIWO_*`` environment variable > manifest.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

from .exceptions import FixtureError, ManifestError, SSPIWOError

ENV_PREFIX = "SSPIWO_"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _env(name, cast=str):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None or raw == "":
        return None
    try:
        return cast(raw)
    except ValueError:
        raise ManifestError(f"{ENV_PREFIX}{name}={raw!r} is not a valid {cast.__name__}") from None


def _pick(flag, env_name, cast=str):
    return flag if flag is not None else _env(env_name, cast)


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_model(path):
    from .tabular import load_fixture, load_model

    return load_fixture() if path is None else load_model(path)


def cmd_verify(args) -> int:
    from .tabular import load_fixture, load_model
    from .verify import report_json, run_suite

    fixtures = [load_model(p) for p in args.fixture] if args.fixture else [load_fixture()]
    seed = _pick(args.seed, "SEED", int) or 0
    checks = run_suite(args.suite, fixtures=fixtures, n_models=args.models, seed=seed,
                       n_seeds=args.grad_seeds, n_samples=args.grad_samples)
    for c in checks:
        print(c.line())
    if args.out:
        from .training import atomic_write

        atomic_write(args.out, report_json(checks))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bounds(args) -> int:
    from .plots import BOUND_COLUMNS
    from .training import atomic_write
    from .verify import bound_table

    model = _load_model(args.fixture)
    if not 0 <= args.x < model.n_x:
        raise ManifestError(f"x={args.x} outside [0, {model.n_x})")
    t = bound_table(model, args.x, args.k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUND_COLUMNS)
    for i, k in enumerate(t["k"]):
        w.writerow([k] + [f"{t[c][i] if isinstance(t[c], list) else t[c]:.12f}" for c in BOUND_COLUMNS[1:]])
    out_dir = _pick(args.out, "OUT") or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "bounds.csv")
    atomic_write(path, buf.getvalue())
    print(buf.getvalue(), end="")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiments import load_manifest, run_experiment

    manifest = load_manifest(args.manifest, seed=_pick(args.seed, "SEED", int), out=_pick(args.out, "OUT"),
                             preset=_pick(args.preset, "PRESET"))
    jobs = _pick(args.jobs, "JOBS", int) or 1
    result = run_experiment(manifest, jobs=jobs)
    print(result["table"], end="")
    print(f"wrote {os.path.join(result['out'], 'results.csv')}")
    for f, r in result["failed"]:
        print(f"cell {f} @ {r:g} failed; see results.csv", file=sys.stderr)
    return EXIT_FAIL if result["failed"] else EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_run_dir

    for path in plot_run_dir(args.run_dir):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sspiwo", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="check numeric invariants")
    v.add_argument("suite", choices=("identities", "bounds", "gradients", "all"))
    v.add_argument("--fixture", action="append", help="tabular model file (repeatable; default FIX-A)")
    v.add_argument("--models", type=int, default=100, help="random models per suite")
    v.add_argument("--seed", type=int)
    v.add_argument("--grad-seeds", type=int, default=20, help="seeds for the unbiasedness check")
    v.add_argument("--grad-samples", type=int, default=100_000, help="draws per seed")
    v.add_argument("--out", help="write a JSON report here")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bounds", help="exact bound expectations against k")
    b.add_argument("--fixture", help="tabular model file (default FIX-A)")
    b.add_argument("--x", type=int, default=0)
    b.add_argument("--k", type=_int_list, default=(1, 2, 3, 4), help="comma-separated k values")
    b.add_argument("--out", help="directory for bounds.csv")
    b.set_defaults(func=cmd_bounds)

    r = sub.add_parser("run", help="train the flavor x rate grid from a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int)
    r.add_argument("--out")
    r.add_argument("--preset", choices=("desk", "paper"))
    r.set_defaults(func=cmd_run)

    pl = sub.add_parser("plot", help="render SVG figures for a run directory")
    pl.add_argument("run_dir")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except FixtureError as exc:
        print(f"error: fixture violates invariant {exc.invariant!r}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SSPIWOError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
