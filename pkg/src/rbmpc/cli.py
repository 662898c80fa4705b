"""Command-line front end: ``rbmpc <subcommand> [options]``."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("rbmpc")

SUBCOMMANDS = ("offline", "bounds", "mpc", "timing", "suboptimality", "solve")
BUNDLE_SUFFIX = ".rbb"


class CLIError(RuntimeError):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="rbmpc", description="Certified reduced basis MPC")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file or a preset name")
    common.add_argument("--bundle", help="bundle file or directory of bundles")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--scale", type=float, default=None, help="desk-scale factor in (0, 1]")
    common.add_argument("--seed", type=int, default=None, help="seed for sampled choices")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"offline": "build reduced bases by POD/greedy",
             "bounds": "effectivity table over the test grid",
             "mpc": "minimal-horizon table and closed-loop traces",
             "timing": "online time of one feedback plus certificate evaluation",
             "suboptimality": "suboptimality estimates versus horizon",
             "solve": "a single optimal control problem (debugging aid)"}
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "solve":
            p.add_argument("--mu", type=float, nargs="+", help="parameter (overrides the config)")
            p.add_argument("--K", type=int, help="horizon (overrides the config)")
            p.add_argument("--N", type=int, help="basis size used from the bundle")
    return parser


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def run(args):
    # heavy imports after the thread count is fixed
    from .config import ConfigError, PRESET_FILES, load_config, preset_config
    from .problem import Problem

    try:
        if args.config in PRESET_FILES:
            cfg = preset_config(args.config, 1.0 if args.scale is None else args.scale)
        else:
            cfg = load_config(args.config, args.scale)
    except ConfigError as exc:
        raise CLIError(f"config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = Problem(cfg.definition)
    handler = globals()[f"cmd_{args.command}"]
    status = handler(cfg, problem, args, out)
    return 0 if status is None else status


# ------------------------------------------------------------------ bundles on disk

def bundle_paths(path):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob(f"*{BUNDLE_SUFFIX}"))
        if not files:
            raise CLIError(f"no *{BUNDLE_SUFFIX} bundles in {p}")
        return files
    if not p.exists():
        raise CLIError(f"bundle {p} does not exist")
    return [p]


def load_bundles(args, problem, required=True):
    from .rb import load_bundle
    if not args.bundle:
        if required:
            raise CLIError("--bundle is required for this subcommand")
        return {}
    bundles = {}
    for f in bundle_paths(args.bundle):
        b = load_bundle(f)
        if b.n_truth != problem.space.n_dofs:
            raise CLIError(f"{f}: bundle has {b.n_truth} truth unknowns but the configured "
                           f"problem has {problem.space.n_dofs} (check --scale)")
        bundles[b.meta.get("name", f.stem)] = b
    return bundles


def _bundle_for(bundles, mu, N=None):
    from .studies import select_bundle
    name = select_bundle(bundles, mu)
    b = bundles[name]
    if N is not None:
        if N > b.N:
            raise CLIError(f"basis {name!r} has N = {b.N} < requested {N}")
        b = b.truncated(N)
    return name, b


# ------------------------------------------------------------------ subcommands

def cmd_offline(cfg, problem, args, out):
    from .rb import GreedyConfig, pod_greedy, save_bundle
    from .studies import training_box, write_csv
    g = cfg.greedy
    target = Path(args.bundle) if args.bundle else out / "bundles"
    target.mkdir(parents=True, exist_ok=True)
    y0 = problem.initial_condition()
    for name, training in cfg.training_sets():
        gc = GreedyConfig(training=training, N_max=cfg.N_max(), indicator=g["indicator"],
                          tol=float(g["tol"]), K_train=int(g["K_train"]),
                          seed_initial=bool(g.get("seed_initial", False)),
                          first_mu=g.get("first_mu"))
        log.info("greedy for basis %s over %d training parameters", name, len(training))
        bundle = pod_greedy(problem, gc, y0)
        lo, hi = training_box(training)
        bundle.meta.update({"name": name, "training_lower": lo, "training_upper": hi,
                            "training_size": int(len(training)), "scale": cfg.scale})
        save_bundle(bundle, target / f"{name}{BUNDLE_SUFFIX}")
        h = bundle.history
        write_csv(out / f"greedy_{name}.csv", ["iteration", "mu", "indicator", "N"],
                  [[i, " ".join(repr(float(x)) for x in mu), ind, N]
                   for i, (mu, ind, N) in enumerate(zip(h["mu"], h["indicator"], h["N"]))])
        for flag in h.get("flags", []):
            log.warning("basis %s: %s", name, flag)
        print(f"basis {name}: N = {bundle.N}, {bundle.meta['offline_seconds']:.1f} s")


def cmd_bounds(cfg, problem, args, out):
    from .studies import EffectivityRow, effectivity_study, select_bundle, write_csv
    import numpy as np
    bundles = load_bundles(args, problem)
    test = cfg.test_set()
    groups = {}
    for mu in test:
        groups.setdefault(select_bundle(bundles, mu), []).append(mu)
    rows = []
    y0 = problem.initial_condition()
    for name, mus in groups.items():
        b = bundles[name]
        Ns = [N for N in cfg.N_values("test") if N <= b.N] or [b.N]
        rows += effectivity_study(problem, b, np.array(mus), Ns, int(cfg.test["K"]), y0,
                                  bool(cfg.test.get("constrained", False)), basis=name)
    write_csv(out / "effectivities.csv", EffectivityRow.HEADER, [r.as_list() for r in rows])
    bad = sum(r.violations for r in rows)
    print(f"effectivity rows: {len(rows)}, bound violations: {bad}")
    return 3 if bad else 0


def cmd_mpc(cfg, problem, args, out):
    from .studies import HorizonRow, horizon_row, horizon_run, select_bundle, write_csv
    m = cfg.mpc
    bundles = load_bundles(args, problem)
    y0 = problem.initial_condition()
    loops = cfg.loops()
    oms = m["omega_min"] if isinstance(m["omega_min"], list) else [m["omega_min"]]
    cons = m["constrained"] if isinstance(m["constrained"], list) else [m["constrained"]]
    for mu in m["cases"]:
        problem.domain.check(mu)
        select_bundle(bundles, mu)  # refuse untrained parameters before any work
    rows = []
    flagged = 0
    for mu in m["cases"]:
        for con in cons:
            for om in oms:
                _, base = _bundle_for(bundles, mu)
                Ns = sorted({min(N, base.N) for N in cfg.N_values("mpc")})
                runs = [(f"N={N}", base.truncated(N)) for N in Ns]
                if m.get("fe_reference", True):
                    runs.append(("FE", None))
                for label, b in runs:
                    trace, secs = horizon_run(problem, y0, mu, int(m["n"]), int(m["K_max"]), float(om),
                                              loops, bool(con), b, bool(m.get("warm_start", False)))
                    rows.append(horizon_row(mu, label, con, om, trace, secs))
                    flagged += len(trace.flagged)
                    tag = "_".join([f"{x:g}" for x in mu] + [label.replace("=", ""), f"c{int(con)}",
                                                             f"w{om:g}"])
                    trace.write_steps_csv(out / f"trace_{tag}.csv")
                    trace.write_loops_csv(out / f"loops_{tag}.csv")
                    log.info("%s %s K_ave=%.3f", mu, label, trace.K_ave)
    write_csv(out / "horizons.csv", HorizonRow.HEADER, [r.as_list() for r in rows])
    print(f"horizon rows: {len(rows)}, loops exhausting K_max: {flagged}")


def cmd_timing(cfg, problem, args, out):
    from .studies import timing_study, write_csv
    t = cfg.timing
    bundles = load_bundles(args, problem)
    mu = problem.domain.check(t["mu"])
    _, b = _bundle_for(bundles, mu)
    Ns = [N for N in cfg.N_values("timing") if N <= b.N] or [b.N]
    header, rows = timing_study(problem, b, problem.initial_condition(), mu, Ns,
                                [int(k) for k in t["K_values"]], int(t["n"]),
                                bool(t.get("constrained", False)), int(t.get("repeats", 3)))
    write_csv(out / "timing.csv", header, rows)
    for r in rows:
        print(" ".join([f"{r[0]:>6}"] + [f"{x:9.4f}" for x in r[1:]]))


def cmd_suboptimality(cfg, problem, args, out):
    from .studies import closed_loop_state, suboptimality_curve, write_csv
    s = cfg.suboptimality
    bundles = load_bundles(args, problem)
    y_init = problem.initial_condition()
    n = int(s["n"])
    for mu in s["cases"]:
        mu = problem.domain.check(mu)
        _, b = _bundle_for(bundles, mu)
        y0 = closed_loop_state(problem, y_init, mu, n, int(cfg.mpc["K_max"]),
                               int(s.get("closed_loop_loops", 0)))
        Ns = [N for N in cfg.N_values("suboptimality") if N <= b.N] or [b.N]
        header, rows = suboptimality_curve(problem, y0, mu, [int(k) for k in s["K_values"]], n,
                                           [(f"N{N}", b.truncated(N)) for N in Ns])
        tag = "_".join(f"{x:g}" for x in mu)
        write_csv(out / f"suboptimality_{tag}.csv", header, rows)
        print(f"suboptimality curve for mu = {mu.tolist()}: {len(rows)} horizons")


def cmd_solve(cfg, problem, args, out):
    from .studies import single_solve, write_csv
    s = cfg.solve
    mu = problem.domain.check(args.mu if args.mu else s["mu"])
    K = int(args.K or s["K"])
    bundles = load_bundles(args, problem, required=False)
    b = _bundle_for(bundles, mu, args.N)[1] if bundles else None
    info, u = single_solve(problem, mu, K, problem.initial_condition(), bool(s.get("constrained")), b)
    write_csv(out / "solve_controls.csv", ["k"] + [f"u{i + 1}" for i in range(u.shape[1])],
              [[k + 1] + list(row) for k, row in enumerate(u)])
    print(json.dumps({k: float(v) for k, v in info.items()}, indent=2))


if __name__ == "__main__":
    sys.exit(main())
