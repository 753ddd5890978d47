"""Command line entry point: ``spamtrees {fit,predict,synth,bench,check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .covariance import NotPositiveDefinite, ThetaParams
from .data import ModelData
from .mcmc import MCMCConfig, Sampler
from .predict import PredictionRequest, predict_in_model, predict_new, score
from .synthgen import SynthConfig, Truth, generate, truth_grid
from .treegraph import build_tree, dump_dag, load_dag

log = logging.getLogger("spamtrees")


# ---------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------

def _add_run_flags(ap):
    ap.add_argument("--config", help="flat key = value file")
    for f in fields(io.RunConfig):
        ap.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None)


def _run_config(args) -> io.RunConfig:
    cfg = io.RunConfig()
    if args.config:
        cfg = io.parse_config(Path(args.config).read_text(), cfg)
    overrides = "".join(f"{f.name} = {getattr(args, f.name)}\n" for f in fields(io.RunConfig)
                        if getattr(args, f.name, None) is not None)
    return io.parse_config(overrides, cfg).validate()


def _mcmc_config(cfg: io.RunConfig) -> MCMCConfig:
    fixed = tuple(s.strip() for s in cfg.fixed.split(",") if s.strip())
    return MCMCConfig(iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
                      seed=cfg.seed, mode=cfg.mode, ram_target=cfg.ram_target,
                      ram_init_scale=cfg.ram_init_scale, fixed=fixed, prior_sd=cfg.prior_sd,
                      v_beta=cfg.v_beta, a_tau=cfg.a_tau, b_tau=cfg.b_tau,
                      threads=cfg.threads)


def _tree(cfg: io.RunConfig, data: ModelData, q):
    bw = [float(x) for x in cfg.bias_weights.split(",")] if cfg.bias_weights else None
    return build_tree(data.coords, data.var, data.observed, M=cfg.M,
                      delta=cfg.delta or None, c=cfg.c, n_s=cfg.n_s, bias_weights=bw,
                      root_cells=cfg.root_cells, seed=cfg.tree_seed, q=q)


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def fit(cfg: io.RunConfig) -> int:
    data = io.read_csv(cfg.data, d=cfg.d, q=cfg.q or None)
    q = data.q
    dag = _tree(cfg, data, q)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = Sampler(data, dag, _mcmc_config(cfg))
    samples = sampler.run()
    (out / "dag.txt").write_text(dump_dag(dag))
    (out / "config.txt").write_text(cfg.dump())
    io.write_csv(out / "data.csv", data)
    io.write_samples(out, samples, ThetaParams.names(q))
    io.write_diagnostics(out / "diagnostics.json", {**samples.diagnostics, **dag.diagnostics,
                                                    "q": q, "p": data.p})
    log.info("fit: %d retained draws written to %s", len(samples), out)
    return 0


def _load_bundle(bundle):
    bundle = Path(bundle)
    cfg = io.parse_config((bundle / "config.txt").read_text())
    data = io.read_csv(bundle / "data.csv", d=cfg.d)
    diag = json.loads((bundle / "diagnostics.json").read_text())
    q, p = int(diag["q"]), int(diag["p"])
    data.q = q
    dag = load_dag((bundle / "dag.txt").read_text(), data.coords, data.var)
    samples = io.read_samples(bundle, q, p)
    return cfg, data, dag, samples


def predict_cmd(bundle, out, truth=None, locations=None, seed=0) -> int:
    cfg, data, dag, samples = _load_bundle(bundle)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if len(samples) == 0:
        raise ValueError("bundle has no retained draws")
    if locations:
        req_data = io.read_csv(locations, d=cfg.d, q=data.q)
        pred = predict_new(samples, dag, PredictionRequest(req_data.coords, req_data.var,
                                                           req_data.X), rng=seed)
        coords, observed, truth_y = req_data.coords, req_data.observed, req_data.y
    else:
        pred = predict_in_model(samples, data, rng=seed)
        coords, observed, truth_y = data.coords, data.observed, None
    with (out / "predictions.csv").open("w") as fh:
        d = coords.shape[1]
        fh.write(",".join([f"x{i}" for i in range(d)]
                          + ["var", "mean", "lower95", "upper95", "observed"]) + "\n")
        for i in range(len(pred.mean)):
            fh.write(",".join([repr(float(c)) for c in coords[i]]
                              + [str(int(pred.var[i])), repr(float(pred.mean[i])),
                                 repr(float(pred.lower[i])), repr(float(pred.upper[i])),
                                 str(int(observed[i]))]) + "\n")
    if truth or truth_y is not None:
        if truth:
            t = Truth.from_json(Path(truth).read_text())
            ty = t.y_full
            rows = np.flatnonzero(~observed)
        else:
            ty, rows = truth_y, np.flatnonzero(observed)
        metrics = score(pred, ty, rows=rows, q=data.q)
        (out / "metrics.json").write_text(json.dumps({str(k): v for k, v in metrics.items()},
                                                     indent=1))
        log.info("predict: held-out metrics %s", metrics["all"])
    return 0


def synth_cmd(out, truth_out, grid_side=30, setting=0, tau2=(0.01, 0.1), missing_rate=0.8,
              patch_count=3, patch_radius=0.1, seed=0) -> int:
    theta = truth_grid()[setting]
    data, truth = generate(SynthConfig(grid_side=grid_side, theta=theta, tau2=tau2,
                                       missing_rate=missing_rate, patch_count=patch_count,
                                       patch_radius=patch_radius, seed=seed))
    io.write_csv(out, data)
    Path(truth_out).write_text(truth.to_json())
    log.info("synth: %d rows, %d observed", data.n, int(data.observed.sum()))
    return 0


def bench_scaling(sizes=(1000, 2000, 4000, 8000), n_s=16, delta=None, sweeps=5, warmup=1,
                  seed=0, threads=1):
    """Per-sweep wall time against n at fixed reference-subset size.

    Locations are uniform on the unit square, two variables, 30% observed.
    The tree height grows with n; a cell becomes a node only when it can
    fill a whole subset, so every reference subset holds n_s locations.
    """
    rows = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        coords = rng.uniform(size=(n // 2, 2))
        coords = np.repeat(coords, 2, axis=0)
        var = np.tile([0, 1], n // 2)
        y = np.sin(6 * coords[:, 0]) + np.cos(4 * coords[:, 1]) + 0.3 * rng.standard_normal(n)
        y[rng.uniform(size=n) > 0.3] = np.nan
        data = ModelData(coords, var, y, np.ones((n, 1)))
        M = 10
        dag = build_tree(coords, var, data.observed, M=M, delta=delta, n_s=n_s, seed=seed,
                         min_fill=n_s)
        cfg = MCMCConfig(iterations=sweeps + warmup, seed=seed, keep_w=False,
                         fixed=("alpha", "beta"), threads=threads)
        s = Sampler(data, dag, cfg).run()
        t = s.diagnostics["sweep_seconds"][warmup:]
        rows.append({"n": n, "nodes": len(dag), "levels": dag.M, "delta": dag.delta,
                     "sweep_seconds": float(np.median(t))})
    x = np.log([r["n"] for r in rows])
    y = np.log([r["sweep_seconds"] for r in rows])
    slope = float(np.polyfit(x, y, 1)[0]) if len(rows) > 1 else float("nan")
    return rows, slope


def bench_cmd(out, sizes, n_s, delta, sweeps, threads=1) -> int:
    t0 = time.perf_counter()
    rows, slope = bench_scaling(sizes, n_s=n_s, delta=delta, sweeps=sweeps, threads=threads)
    lines = ["n,nodes,levels,delta,sweep_seconds"]
    lines += [f"{r['n']},{r['nodes']},{r['levels']},{r['delta']},{r['sweep_seconds']!r}"
              for r in rows]
    lines.append(f"# log-log slope {slope:.4f}; total {time.perf_counter() - t0:.1f}s")
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)
    return 0


def check_cmd(seed=0) -> int:
    """Quick oracle suite on small random trees."""
    from .oracle import check_propositions, dense_spamtree_cov, kolmogorov_checks
    from .covariance import compute_factors
    from .mcmc import log_prior_w
    from .precision import assemble_precision, block_ldl, count_nnz

    rng = np.random.default_rng(seed)
    ok = True
    for trial in range(5):
        q = int(rng.integers(1, 4))
        n = int(rng.integers(20, 80))
        coords = rng.uniform(size=(n, 2))
        var = rng.integers(0, q, n)
        theta = random_theta(q, rng)
        for delta in (1, 2, 3):
            dag = build_tree(coords, var, M=3, delta=delta, n_s=4, seed=trial, q=q)
            f = compute_factors(theta, dag)
            Ct = dense_spamtree_cov(dag, f)
            w = rng.standard_normal(n)
            sign, ld = np.linalg.slogdet(Ct)
            dense = -0.5 * (n * np.log(2 * np.pi) + ld + w @ np.linalg.solve(Ct, w))
            e1 = abs(log_prior_w(w, dag, f) - dense)
            P = assemble_precision(f, dag)
            e2 = np.abs(P.to_dense() @ Ct - np.eye(n)).max()
            e3 = count_nnz(P, dag) - P.stored_scalars()
            ldl = block_ldl(P.add_diagonal(np.ones(n)))
            I = np.eye(n)
            L = ldl.L_dense()
            Ld = P.add_diagonal(np.ones(n)).to_dense()
            e4 = np.linalg.norm((I - L).T @ ldl.D_dense() @ (I - L) - Ld) / np.linalg.norm(Ld)
            good = e1 <= 1e-6 and e2 <= 1e-5 and e3 == 0 and e4 <= 1e-8
            ok &= good
            print(f"tree q={q} n={n} delta={dag.delta}: density {e1:.2e} duality {e2:.2e} "
                  f"nnz {e3} ldl {e4:.2e} {'ok' if good else 'FAIL'}")
        small = build_tree(coords[:30], var[:30], M=2, n_s=4, seed=trial, q=q)
        kc = kolmogorov_checks(theta, small, rng=trial)
        ok &= kc["passed"]
        print(f"kolmogorov: {'ok' if kc['passed'] else 'FAIL'}")
    th = random_theta(1, rng)
    pts = rng.uniform(size=(7, 2))
    pr = check_propositions(th, {"coords": pts, "var": np.zeros(7, int), "S0": [0, 1],
                                 "S1": [2, 3], "S2": [4, 5], "star": 6})
    ok &= pr["inequalities_hold"]
    print(f"propositions: {'ok' if pr['inequalities_hold'] else 'FAIL'}")
    return 0 if ok else 1


def random_theta(q, rng):
    d = rng.uniform(0.2, 2.0, (q, q))
    d = np.triu(d, 1)
    return ThetaParams(rng.uniform(0.5, 2, q) * rng.choice([-1, 1], q), rng.uniform(0, 1.5, q),
                       rng.uniform(0.5, 10, q), d + d.T, rng.uniform(0.5, 2), rng.uniform(0.5, 2),
                       rng.uniform(0.5, 10))


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="spamtrees", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("fit", help="run the sampler and write a model bundle")
    _add_run_flags(p)

    p = sub.add_parser("predict", help="predict from a model bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="truth sidecar; scores the unobserved entries")
    p.add_argument("--locations", help="CSV of new locations (y column may hold truth)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic data set")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--grid-side", type=int, default=30)
    p.add_argument("--setting", type=int, default=0,
                   help=f"index into the truth grid (0..{len(truth_grid()) - 1})")
    p.add_argument("--tau2", default="0.01,0.1")
    p.add_argument("--missing-rate", type=float, default=0.8)
    p.add_argument("--patch-count", type=int, default=3)
    p.add_argument("--patch-radius", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="per-sweep time against n")
    p.add_argument("--sizes", default="1000,2000,4000,8000")
    p.add_argument("--n-s", type=int, default=16)
    p.add_argument("--delta", type=int, default=0, help="0: full depth")
    p.add_argument("--sweeps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="")

    p = sub.add_parser("check", help="run the dense oracle suite")
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "fit":
            return fit(_run_config(args))
        if args.cmd == "predict":
            return predict_cmd(args.bundle, args.out, args.truth, args.locations, args.seed)
        if args.cmd == "synth":
            return synth_cmd(args.out, args.truth, args.grid_side, args.setting,
                             tuple(float(x) for x in args.tau2.split(",")), args.missing_rate,
                             args.patch_count, args.patch_radius, args.seed)
        if args.cmd == "bench":
            return bench_cmd(args.out, [int(x) for x in args.sizes.split(",")], args.n_s,
                             args.delta or None, args.sweeps, args.threads)
        if args.cmd == "check":
            return check_cmd(args.seed)
    except (ValueError, OSError, NotPositiveDefinite) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
