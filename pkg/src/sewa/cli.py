"""Command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import averagers, bench, stability
from .config import ConfigError, ProbeConfig, load_config, load_probe_config
from .data import gen_dataset
from .masking import final_mask, history_csv, optimize_mask
from .nn import MlpSpec
from .trajectory import CheckpointFormatError, atomic_write, load_window, save_checkpoint, save_window, sgd_train, window_collect

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("sewa")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    fit, _, _ = bench.prepare_data(cfg)
    _, stream = sgd_train(cfg.model.spec(), fit, cfg.train.sgd(seed))
    window = window_collect(stream, cfg.window_k)
    save_window(window, args.out)
    print(f"saved {len(window)} checkpoints (steps {window.steps[0]}..{window.steps[-1]}) to {args.out}")
    return EXIT_OK


def cmd_average(args) -> int:
    window = load_window(args.window)
    k = len(window)
    m = args.method
    if m in ("lawa", "random") and args.K is None:
        raise ConfigError(f"--K is required for method {m}")
    if m == "uniform":
        avg = averagers.uniform_average(window)
    elif m == "swa":
        avg = averagers.swa_average(window.checkpoints, args.start_fraction, args.every)
    elif m == "ema":
        avg = averagers.ema_average(window.checkpoints, args.decay, args.every)
    elif m == "lawa":
        avg = averagers.apply_mask(window, averagers.lawa_select(k, args.K), "lawa")
    else:
        avg = averagers.apply_mask(window, averagers.random_select(k, args.K, args.seed), "random")
    save_checkpoint(args.out, window.steps[-1], avg.weights)
    chosen = f" selected {avg.mask.indices}" if avg.mask is not None and m != "uniform" else ""
    print(f"{m}: wrote {args.out}{chosen}")
    return EXIT_OK


def cmd_sewa(args) -> int:
    cfg = load_config(args.config)
    window = load_window(args.window)
    methods = [m for m in cfg.methods if m.name == "sewa"]
    if not methods:
        raise ConfigError(f"{args.config}: no sewa method configured")
    m = methods[0]
    spec = cfg.model.spec()
    if window.dim != spec.n_params:
        raise ConfigError(f"window dim {window.dim} does not match model ({spec.n_params} parameters)")
    if m.K > len(window):
        raise ConfigError(f"K={m.K} exceeds window length {len(window)}")
    fit, val, _ = bench.prepare_data(cfg)
    objective = val if m.gs.objective == "val" else fit
    seed = cfg.seeds[0] if args.seed is None else args.seed
    gs = m.gs.gs(m.K, seed)
    history, probs = optimize_mask(window, spec, objective, gs)
    mask = final_mask(probs, gs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "history.csv", history_csv(history).encode())
    payload = {"K": m.K, "indices": mask.indices, "steps": [window.steps[i] for i in mask.indices],
               "s": [float(v) for v in probs.s]}
    atomic_write(out / "mask.json", (json.dumps(payload, indent=1) + "\n").encode())
    save_checkpoint(out / "weights.bin", window.steps[-1], averagers.apply_mask(window, mask, "sewa").weights)
    print(f"sewa: selected steps {payload['steps']} after {len(history)} iterations")
    return EXIT_OK


def cmd_bounds(args) -> int:
    try:
        b = stability.BoundInputs(args.alpha, args.L, args.beta, args.c, args.n, args.T, args.k, args.s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.table:
        sys.stdout.write(stability.table_text(stability.bounds_table(b)))
        return EXIT_OK
    print(f"convex_bound,{stability.convex_bound(b)!r}")
    print(f"nonconvex_bound,{stability.nonconvex_bound(b)!r}")
    print(f"optimal_t0,{stability.optimal_t0(b)!r}")
    return EXIT_OK


def _probe_data(cfg: ProbeConfig):
    ds = cfg.dataset
    train, _ = gen_dataset(ds.kind, ds.model_dump(exclude={"kind", "seed"}), ds.seed)
    return train


def run_probes(kind: str, cfg: ProbeConfig) -> list[tuple[int, stability.ProbeResult]]:
    if kind == "divergence" and cfg.k > cfg.steps:
        raise ConfigError(f"k={cfg.k} exceeds steps={cfg.steps}")
    results = []
    for seed in cfg.seeds:
        if kind == "expansive":
            if cfg.problem == "quadratic":
                problem = stability.ConvexQuadratic.random(cfg.beta, cfg.dim, seed)
            elif cfg.problem == "logistic":
                problem = stability.ConvexLogistic(_probe_data(cfg))
            else:
                problem = stability.NonconvexMlp(cfg.model.spec(), _probe_data(cfg))
            alpha = cfg.alpha
            if alpha is None:
                alpha = 1.0 / problem.beta if cfg.problem != "mlp" else 0.1
            results.append((seed, stability.expansiveness_probe(problem, alpha, cfg.steps, seed)))
        else:
            from .trajectory import ConstantLR, SgdConfig

            data = _probe_data(cfg)
            spec = cfg.model.spec() if cfg.model else MlpSpec((data.p, 1), "identity", "logistic_binary")
            alpha = cfg.alpha if cfg.alpha is not None else 1.0 / stability.logistic_constants(data)[1]
            sgd = SgdConfig(cfg.steps, ConstantLR(alpha), cfg.batch_size, seed)
            index = cfg.perturb_index % data.n
            results.append((seed, stability.divergence_probe(spec, data, index, sgd, cfg.k)))
    return results


def cmd_probe(args) -> int:
    cfg = load_probe_config(args.config)
    results = run_probes(args.kind, cfg)
    keys = sorted(results[0][1].summary)
    print(",".join(["seed"] + keys + ["bound_value"]))
    for seed, r in results:
        print(",".join([str(seed)] + [repr(float(r.summary[k])) for k in keys] + [repr(float(r.bound_value))]))
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for seed, r in results:
            atomic_write(out / f"{args.kind}_seed{seed}.csv", r.to_csv().encode())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    outcomes = bench.run_experiment(cfg)
    failed = [o for o in outcomes if o.error]
    table = Path(cfg.output_dir) / "table.txt"
    if table.exists() and len(failed) < len(outcomes):
        sys.stdout.write(table.read_text())
    for o in failed:
        print(f"seed {o.seed} failed: {o.error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sewa", description="Selective weight averaging toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train and persist the checkpoint window")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("average", help="average a persisted window with a baseline method")
    a.add_argument("--window", required=True)
    a.add_argument("--method", required=True, choices=["uniform", "swa", "ema", "lawa", "random"])
    a.add_argument("--K", type=int)
    a.add_argument("--decay", type=float, default=0.9)
    a.add_argument("--every", type=int, default=1)
    a.add_argument("--start-fraction", type=float, default=0.75)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_average)

    s = sub.add_parser("sewa", help="learn a selection mask over a persisted window")
    s.add_argument("--window", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sewa)

    b = sub.add_parser("bounds", help="evaluate the stability bounds")
    b.add_argument("--alpha", type=float, required=True)
    b.add_argument("--L", type=float, required=True)
    b.add_argument("--beta", type=float, required=True)
    b.add_argument("--c", type=float, required=True)
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--T", type=int, required=True)
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--s", type=float, required=True)
    b.add_argument("--table", action="store_true")
    b.set_defaults(func=cmd_bounds)

    pr = sub.add_parser("probe", help="run an expansiveness or divergence probe")
    pr.add_argument("--kind", required=True, choices=["expansive", "divergence"])
    pr.add_argument("--config", required=True)
    pr.set_defaults(func=cmd_probe)

    be = sub.add_parser("bench", help="run a full experiment")
    be.add_argument("--config", required=True)
    be.add_argument("--out", help="override output_dir")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
