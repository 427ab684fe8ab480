"""``phnlab`` command line.

    phnlab <subcommand> --config path [--out dir] [--seed N] [--workers N]

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .em import EMConfig, sample_invariant, simulate_chain
from .errors import BadConfig, NumericalError, PhnlabError, ValidationError
from .io import header_line, write_json, write_rows_csv, write_samples_binary, write_samples_csv
from .lyapunov import audit_report, fit_bounds, make_grid, moment_bound_audit, tune_lyapunov
from .model import model_from_dict
from .occupation import occupation_scaling_check
from .parallel import default_workers
from .queue_sim import QueueConfig, birth_death_chi2, steady_state_compare
from .seeds import seed_derivation
from .stats import (
    clt_experiment,
    exact_1d_invariant,
    mdp_gaussian_surrogate,
    mdp_rate_check,
    w1_convergence_sweep,
)

SUBCOMMANDS = {
    "validate-model": None,
    "sample": "em",
    "converge": "converge",
    "clt": "clt",
    "mdp": "mdp",
    "occupation": "occupation",
    "lyapunov-audit": "lyapunov",
    "queue-compare": "queue",
}


class Context:
    def __init__(self, config: dict, out: Path, seed: int, workers: int):
        self.config = config
        self.out = out
        self.seed = seed
        self.workers = workers
        self.model = model_from_dict(config["model"])

    @property
    def header(self) -> str:
        return header_line(self.config, self.seed)

    def block(self, name: str) -> dict:
        return dict(self.config.get(name) or {})

    def report(self, name: str, payload: dict) -> Path:
        path = self.out / name
        write_json(path, {"header": self.header, "config": self.config, "master_seed": self.seed, **payload})
        return path


def _resolve_config(args) -> dict:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise BadConfig(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise BadConfig(f"config file is not valid JSON: {exc}")
    cfg = copy.deepcopy(raw)
    if "model" not in cfg and "p" in cfg:
        cfg = {"model": cfg}
    if "model" not in cfg:
        if "model_path" not in cfg:
            raise BadConfig("config needs a 'model' block or 'model_path'")
        with open(Path(args.config).parent / cfg["model_path"]) as fh:
            cfg["model"] = json.load(fh)
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    cfg.setdefault("master_seed", 0)
    if args.out is not None:
        cfg["output_dir"] = args.out
    cfg.setdefault("output_dir", "phnlab_out")
    if args.workers is not None:
        cfg["n_workers"] = args.workers
    cfg.setdefault("n_workers", default_workers())
    block = SUBCOMMANDS[args.subcommand]
    if block is not None and block not in cfg:
        raise BadConfig(f"subcommand {args.subcommand!r} needs a {block!r} block in the config")
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate_model(ctx: Context) -> dict:
    m = ctx.model
    info = {
        "d": m.d,
        "R": m.R.tolist(),
        "gamma": m.gamma.tolist(),
        "SigmaSq": m.SigmaSq.tolist(),
        "sigma": m.sigma.tolist(),
        "c_ellip": m.c_ellip,
        "C_op": m.C_op,
        "C_op_tilde": m.C_op_tilde,
    }
    for key in ("R", "gamma", "SigmaSq", "c_ellip"):
        print(f"{key}: {info[key]}")
    ctx.report("model.json", info)
    return info


def cmd_sample(ctx: Context) -> dict:
    b = ctx.block("em")
    eta = float(b["eta"])
    s = sample_invariant(
        ctx.model,
        eta,
        int(b.get("n_samples", 10_000)),
        gap=b.get("gap"),
        burn_in=int(b.get("burn_in", 10_000)),
        seed=ctx.seed,
        n_chains=int(b.get("n_chains", 1)),
        x0=b.get("x0"),
        n_workers=ctx.workers,
    )
    write_samples_csv(ctx.out / "samples.csv", s, [ctx.header])
    if b.get("binary", False):
        write_samples_binary(ctx.out / "samples.bin", s)
    summary = {
        "n_samples": len(s),
        "mean": s.points.mean(axis=0).tolist(),
        "cov": np.atleast_2d(np.cov(s.points.T)).tolist(),
        "provenance": s.provenance,
    }
    ctx.report("sample_summary.json", summary)
    return summary


def _reference_samples(ctx, b):
    ref = dict(b.get("reference") or {})
    eta = float(ref.get("eta", 1e-3))
    return sample_invariant(
        ctx.model,
        eta,
        int(ref.get("n_samples", b.get("n_samples", 100_000))),
        gap=ref.get("gap"),
        burn_in=int(ref.get("burn_in", 10_000)),
        seed=seed_derivation(ctx.seed, "calibration", 1),
        n_chains=int(ref.get("n_chains", 1)),
        n_workers=ctx.workers,
    )


def cmd_converge(ctx: Context) -> dict:
    b = ctx.block("converge")
    eta_list = [float(e) for e in b.get("eta_list", [0.2, 0.1, 0.05, 0.025])]
    if ctx.model.d == 1 and not b.get("reference"):
        oracle = exact_1d_invariant(ctx.model.alpha, ctx.model.beta)
    else:
        oracle = _reference_samples(ctx, b)
    sampler = {k: b[k] for k in ("n_samples", "burn_in", "gap", "n_chains", "x0", "n_directions") if k in b}
    sampler["seed"] = ctx.seed
    table = w1_convergence_sweep(ctx.model, eta_list, sampler, oracle, n_workers=ctx.workers)
    write_rows_csv(ctx.out / "converge.csv", ["eta", "w1", "envelope"],
                   [(r.eta, r.w1, r.envelope) for r in table.rows], [ctx.header])
    out = table.to_dict()
    ctx.report("converge_summary.json", out)
    print(f"{table.distance} slope={table.slope:.4f} C={table.C:.4g}")
    return out


def cmd_clt(ctx: Context) -> dict:
    b = ctx.block("clt")
    rep = clt_experiment(
        ctx.model,
        b.get("h", {"type": "indicator_e", "c": 0.0}),
        float(b["eta"]),
        int(b["n"]),
        int(b.get("replications", 200)),
        seed=ctx.seed,
        x0=b.get("x0"),
        burn_in=b.get("burn_in"),
        calibration_factor=b.get("calibration_factor"),
        n_workers=ctx.workers,
    )
    write_rows_csv(ctx.out / "clt_values.csv", ["replication", "average", "normalized_value"],
                   [(i, a, v) for i, (a, v) in enumerate(zip(rep.averages, rep.normalized_values))], [ctx.header])
    out = rep.summary()
    ctx.report("clt_report.json", out)
    print(f"KS p-value={rep.p_value:.4g} mean={rep.mean_of_averages:.6f} sigma_h2={rep.sigma_h2_hat:.4g}")
    return out


def cmd_mdp(ctx: Context) -> dict:
    b = ctx.block("mdp")
    common = dict(
        n_list=[int(n) for n in b.get("n_list", [100_000])],
        a_exponent=float(b.get("a_exponent", 0.25)),
        thresholds=[float(z) for z in b.get("thresholds", [0.0, 0.5, 1.0])],
        replications=int(b.get("replications", 200)),
        seed=ctx.seed,
        n_workers=ctx.workers,
    )
    reports = {}
    if b.get("surrogate", True):
        reports["surrogate"] = mdp_gaussian_surrogate(**common).to_dict()
    if b.get("model_check", True):
        reports["model"] = mdp_rate_check(ctx.model, b.get("h", {"type": "indicator_e", "c": 0.0}),
                                          float(b.get("eta", 0.01)), x0=b.get("x0"), **common).to_dict()
    rows = []
    for kind, rep in reports.items():
        for r in rep["rows"]:
            rows.append((kind, r["n"], r["z"], r["hits"], r["p_hat"], r["log_rate"], r["theory_rate"], r["ratio"], r["zero_hits"]))
    write_rows_csv(ctx.out / "mdp.csv", ["source", "n", "z", "hits", "p_hat", "log_rate", "theory_rate", "ratio", "zero_hits"],
                   rows, [ctx.header])
    ctx.report("mdp_report.json", reports)
    return reports


def cmd_occupation(ctx: Context) -> dict:
    b = ctx.block("occupation")
    rep = occupation_scaling_check(
        ctx.model,
        b.get("x0"),
        float(b.get("t", 10.0)),
        b.get("eps_list", [0.2, 0.1, 0.05]),
        int(b.get("n_paths", 500)),
        seed=ctx.seed,
        eta=float(b.get("eta", 1e-3)),
        n_workers=ctx.workers,
    )
    rep.write_csv(ctx.out / "occupation.csv", [ctx.header])
    out = rep.to_dict()
    ctx.report("occupation_report.json", out)
    print(f"ratios E L/eps = {[round(r, 4) for r in rep.ratios]} linear={rep.linear}")
    return out


def cmd_lyapunov(ctx: Context) -> dict:
    b = ctx.block("lyapunov")
    grid = make_grid(ctx.model.d, int(b.get("n_points", 10_000)), float(b.get("radius", 20.0)), seed=ctx.seed)
    spec, fit = tune_lyapunov(ctx.model, grid, b.get("kappas"))
    fresh = make_grid(ctx.model.d, int(b.get("n_points", 10_000)), float(b.get("radius", 20.0)),
                      seed=seed_derivation(ctx.seed, "calibration", 2) % (2**32))
    bounds = fit_bounds(ctx.model, spec, fresh)
    out = audit_report(fit)
    out.update(Qtilde=spec.Qtilde.tolist(), bounds=bounds.__dict__)
    n_paths = int(b.get("n_paths", 0))
    if n_paths:
        eta = float(b.get("eta", 0.01))
        steps = int(round(float(b.get("t", 5.0)) / eta))
        x0 = b.get("x0") or [0.0] * ctx.model.d
        trajs = [simulate_chain(ctx.model, EMConfig(eta=eta, n_steps=steps, x0=tuple(x0), seed=ctx.seed), c)
                 for c in range(n_paths)]
        audit = moment_bound_audit(ctx.model, trajs, spec, 1, fit.c1, fit.c1_breve)
        out["moment_audit"] = audit.to_dict()
    ctx.report("lyapunov_audit.json", out)
    print(f"c1={fit.c1:.6g} c1_breve={fit.c1_breve:.6g} violations={len(fit.violations)} kappa={fit.kappa:.4g}")
    return out


def cmd_queue(ctx: Context) -> dict:
    b = ctx.block("queue")
    m = ctx.model
    n_list = [int(n) for n in b.get("n_list", [25, 100])]
    n_samples = int(b.get("n_samples", 50_000))
    burn = float(b.get("burn_in", 50.0))
    spacing = float(b.get("spacing", 1.0))
    oracle = exact_1d_invariant(m.alpha, m.beta) if m.d == 1 else None
    em = None
    if b.get("em_compare", m.d > 1):
        eta = float(b.get("eta", 0.01))
        em = sample_invariant(m, eta, int(b.get("em_samples", n_samples)), seed=seed_derivation(ctx.seed, "calibration", 3),
                              n_workers=ctx.workers)
    rows, reports = [], []
    for i, n in enumerate(n_list):
        cfg = QueueConfig.for_model(m, n, horizon=burn + n_samples * spacing, burn_in=burn, spacing=spacing,
                                    seed=seed_derivation(ctx.seed, "replication", i))
        rep = steady_state_compare(cfg, em, oracle)
        reports.append(rep.to_dict())
        rows.append((n, "" if rep.w1_oracle is None else rep.w1_oracle, "" if rep.w1_em is None else rep.w1_em))
    write_rows_csv(ctx.out / "queue_compare.csv", ["n", "w1_oracle", "w1_em"], rows, [ctx.header])
    out = {"comparisons": reports}
    if m.d == 1 and b.get("chi2", True):
        n5 = int(b.get("chi2_n", 5))
        horizon = float(b.get("chi2_horizon", 2e5))
        chi = birth_death_chi2(QueueConfig.for_model(m, n5, horizon=horizon, seed=ctx.seed))
        out["chi2"] = chi.__dict__
        print(f"birth-death chi2 p={chi.p_value:.4g} (n={n5})")
    ctx.report("queue_report.json", out)
    for r in reports:
        print(f"n={r['n']} w1_oracle={r['w1_oracle']} w1_em={r['w1_em']}")
    return out


DISPATCH = {
    "validate-model": cmd_validate_model,
    "sample": cmd_sample,
    "converge": cmd_converge,
    "clt": cmd_clt,
    "mdp": cmd_mdp,
    "occupation": cmd_occupation,
    "lyapunov-audit": cmd_lyapunov,
    "queue-compare": cmd_queue,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phnlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"phnlab {__version__}")
    ap.add_argument("subcommand", choices=list(DISPATCH))
    ap.add_argument("--config", required=True, help="JSON experiment config (or a bare model JSON)")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="master seed")
    ap.add_argument("--workers", type=int, default=None, help="worker processes (default: $PHNLAB_WORKERS or CPU count)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, int(cfg["master_seed"]), int(cfg["n_workers"]))
        DISPATCH[args.subcommand](ctx)
    except ValidationError as exc:
        print(f"phnlab: validation error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"phnlab: numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    except (KeyError, TypeError, ValueError) as exc:
        print(f"phnlab: bad configuration: {exc!r}", file=sys.stderr)
        return 2
    except PhnlabError as exc:
        print(f"phnlab: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())
