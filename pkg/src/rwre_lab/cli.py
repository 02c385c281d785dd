"""Experiment runner: load a config file (JSON, or TOML as a fallback),
dispatch to the simulation and estimation modules, and persist a
summary.json plus one CSV per result table.

Outputs are deterministic functions of (config, version): worker count and
output location never influence file contents, every float is written via
repr, and no timestamps are recorded, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .coupling import build_couplings, pair_merge_ensemble
from .dist import SparseLatticeDist, dump_json
from .environment import Environment, EnvironmentSpec, validate_spec
from .errors import InsufficientDataError, ResourceLimitError
from .estimators import (
    annealed_distribution,
    box_average_deviation,
    exit_law_box_defect,
    fixed_time_box_defect,
    intermediate_measures_report,
    lclt_defect,
    prefactor_lclt_report,
)
from .lattice import ParallelogramGeom
from .quenched import (
    DEFAULT_SITE_BUDGET,
    cesaro_prefactor,
    prefactor_field,
    quenched_distribution,
)
from .regen import collect_ensemble, regen_diagnostics, velocity_covariance
from .rng import SEED_MAX, env_seed
from .walker import condition_p_probe, condition_t_curve

SUMMARY_SCHEMA = "rwre-lab/summary/1"


class ConfigError(ValueError):
    pass


_REQUIRED_PARAMS = {
    "quenched-dist": ("n",),
    "annealed-dist": ("n", "K"),
    "prefactor": ("n",),
    "tv-partition": ("n_grid", "m_grid", "K"),
    "exit-defect": ("n_grid", "theta", "K"),
    "lclt": ("n_grid", "mu", "sigma"),
    "prefactor-lclt": ("n_grid", "K"),
    "intermediate-measures": ("n", "eps", "delta", "K"),
    "regen-stats": ("ell", "walks", "steps"),
    "coupling": ("n", "M", "K"),
    "pair-merge": ("x", "y", "theta", "M", "rounds", "pairs"),
    "condition-t": ("ell", "l_grid", "samples"),
    "condition-p": ("ell", "n0", "m_exponent", "samples"),
}


@dataclass
class ExperimentConfig:
    """One experiment: kind, environment law, kind-specific parameters,
    and run plumbing. ``threads`` and ``out`` affect execution only, never
    output bytes, and are excluded from the config hash."""

    kind: str
    spec: EnvironmentSpec
    params: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    tau: float = 0.0
    out: str = "rwre-lab-out"

    def validate(self) -> "ExperimentConfig":
        if self.kind not in _REQUIRED_PARAMS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        validate_spec(self.spec)
        if not isinstance(self.seed, int) or not 0 <= self.seed <= SEED_MAX:
            raise ConfigError("seed must be an integer fitting in 128 bits")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.tau >= 0.0:
            raise ConfigError("prune threshold must be >= 0")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be a table/object")
        for key in _REQUIRED_PARAMS[self.kind]:
            if key not in self.params:
                raise ConfigError(f"kind {self.kind!r} requires params.{key}")
        for key, value in sorted(self.params.items()):
            if key.endswith("_grid"):
                if not isinstance(value, (list, tuple)) or len(value) == 0:
                    raise ConfigError(f"params.{key} must be a nonempty list")
        return self

    def canonical(self) -> dict:
        return {
            "kind": self.kind,
            "env": self.spec.canonical(),
            "params": self.params,
            "seed": self.seed,
            "prune": self.tau,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config_data(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is neither valid JSON nor TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object/table")
    return data


def config_from_data(data: dict, kind: str, overrides: dict | None = None) -> ExperimentConfig:
    overrides = overrides or {}
    file_kind = data.get("kind")
    if file_kind is not None and file_kind != kind:
        raise ConfigError(f"config kind {file_kind!r} does not match subcommand {kind!r}")
    env = data.get("env")
    if not isinstance(env, dict):
        raise ConfigError("config requires an env table with d/family/eta/params")
    try:
        spec = EnvironmentSpec(
            d=int(env["d"]),
            family=str(env["family"]),
            eta=float(env["eta"]),
            params=dict(env.get("params", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad env table: {exc}") from exc
    seed = overrides.get("seed", data.get("seed"))
    if seed is None:
        raise ConfigError("seed is required (config key 'seed' or flag --seed)")
    cfg = ExperimentConfig(
        kind=kind,
        spec=spec,
        params=dict(data.get("params", {})),
        seed=int(seed),
        threads=int(overrides.get("threads", data.get("threads", 1))),
        tau=float(overrides.get("prune", data.get("prune", 0.0))),
        out=str(overrides.get("out", data.get("out", "rwre-lab-out"))),
    )
    return cfg.validate()


# ---------------------------------------------------------------------------
# deterministic table writing


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return "/".join(str(int(c)) for c in value)
    return str(value)


def _write_rows(path, cols, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row.get(c)) for c in cols) + "\n")


def _start(cfg: ExperimentConfig):
    return tuple(int(c) for c in cfg.params.get("start", (0,) * cfg.spec.d))


def _site_budget(cfg: ExperimentConfig) -> int:
    return int(cfg.params.get("site_budget", DEFAULT_SITE_BUDGET))


def _probe_env(cfg: ExperimentConfig, index: int) -> Environment:
    return Environment(cfg.spec, env_seed(cfg.seed, index))


def _jackknife_scalar(values) -> float:
    vals = np.asarray(values, dtype=np.float64)
    k = vals.size
    if k < 2:
        return 0.0
    return math.sqrt((k - 1) / k * float(((vals - vals.mean()) ** 2).sum()))


# ---------------------------------------------------------------------------
# per-kind runners; each returns (tables, summary_extra)


def _run_quenched_dist(cfg, outdir):
    p = cfg.params
    n = int(p["n"])
    replica = int(p.get("replica", 0))
    env = _probe_env(cfg, replica)
    dist = quenched_distribution(env, _start(cfg), n, prune=cfg.tau, site_budget=_site_budget(cfg))
    dist.write_csv(outdir / "quenched.csv")
    return ["quenched.csv"], {
        "n": n,
        "replica": replica,
        "total_mass": dist.total_mass(),
        "pruned_mass": dist.pruned_mass,
        "support_sites": len(dist.mass),
    }


def _run_annealed_dist(cfg, outdir):
    p = cfg.params
    n, K = int(p["n"]), int(p["K"])
    ann = annealed_distribution(
        cfg.spec, _start(cfg), n, K, tau=cfg.tau, seed=cfg.seed,
        threads=cfg.threads, site_budget=_site_budget(cfg),
    )
    d = cfg.spec.d
    cols = [f"x{i + 1}" for i in range(d)] + ["mass", "se"]
    rows = [
        {**{f"x{i + 1}": x[i] for i in range(d)},
         "mass": ann.dist.mass[x], "se": ann.se_at(x)}
        for x in ann.dist.sites()
    ]
    _write_rows(outdir / "annealed.csv", cols, rows)
    return ["annealed.csv"], {
        "n": n,
        "environments": K,
        "total_mass": ann.dist.total_mass(),
        "pruned_mass": ann.dist.pruned_mass,
        "support_sites": len(ann.dist.mass),
    }


def _window(cfg) -> tuple[tuple, tuple]:
    p = cfg.params
    d = cfg.spec.d
    if "lo" in p or "hi" in p:
        if not ("lo" in p and "hi" in p):
            raise ConfigError("window needs both params.lo and params.hi")
        lo = tuple(int(c) for c in p["lo"])
        hi = tuple(int(c) for c in p["hi"])
    else:
        w = int(p.get("half_width", 0))
        if w < 0 or ("half_width" not in p):
            raise ConfigError("prefactor window needs params.half_width or lo/hi")
        lo, hi = (-w,) * d, (w,) * d
    if len(lo) != d or len(hi) != d:
        raise ConfigError("window dimension mismatch")
    return lo, hi


def _run_prefactor(cfg, outdir):
    p = cfg.params
    n = int(p["n"])
    mode = str(p.get("mode", "cesaro"))
    lo, hi = _window(cfg)
    env = _probe_env(cfg, int(p.get("replica", 0)))
    if mode == "cesaro":
        fld = cesaro_prefactor(env, n, lo, hi, prune=cfg.tau, site_budget=_site_budget(cfg))
    elif mode == "fixed-horizon":
        fld = prefactor_field(env, n, lo, hi, prune=cfg.tau, site_budget=_site_budget(cfg))
    else:
        raise ConfigError(f"unknown prefactor mode {mode!r}")
    fld.write_csv(outdir / "prefactor.csv")
    tables = ["prefactor.csv"]
    extra = {
        "n": n,
        "mode": mode,
        "window_lo": list(lo),
        "window_hi": list(hi),
        "min_value": float(fld.values.min()),
        "max_value": float(fld.values.max()),
        "mean_value": float(fld.values.mean()),
        "exact": fld.exact,
    }
    if "m_grid" in p:
        report = box_average_deviation(fld, p["m_grid"])
        report.write_csv(outdir / "box_average.csv")
        tables.append("box_average.csv")
        extra["box_average_rows"] = report.rows
    return tables, extra


def _run_tv_partition(cfg, outdir):
    p = cfg.params
    K = int(p["K"])
    env = _probe_env(cfg, K)
    rows_all = []
    note = None
    for n in p["n_grid"]:
        report = fixed_time_box_defect(
            env, cfg.spec, int(n), p.get("theta_grid", []), p["m_grid"], K,
            tau=cfg.tau, seed=cfg.seed, threads=cfg.threads, site_budget=_site_budget(cfg),
        )
        note = report.meta.get("note")
        for row in report.rows:
            rows_all.append({"n": int(n), **row})
    _write_rows(outdir / "defects.csv",
                ["n", "metric", "param", "defect", "err", "samples"], rows_all)
    extra = {"environments": K, "quenched_replica": K, "rows": len(rows_all)}
    if note:
        extra["note"] = note
    return ["defects.csv"], extra


def _run_exit_defect(cfg, outdir):
    p = cfg.params
    K = int(p["K"])
    theta = float(p["theta"])
    env = _probe_env(cfg, K)
    d = cfg.spec.d
    center = tuple(int(c) for c in p.get("center", (0,) * d))
    drift = tuple(float(c) for c in p.get("drift", (1.0,) + (0.0,) * (d - 1)))
    rows_all = []
    censored = {}
    for N in p["n_grid"]:
        N = int(N)
        geom = ParallelogramGeom(center, N, drift, axis=int(p.get("axis", 0)),
                                 width=p.get("width"))
        t_max = int(p.get("t_max", 100 * N * N))
        report = exit_law_box_defect(
            env, cfg.spec, geom, theta, K, t_max,
            tau=cfg.tau, seed=cfg.seed, threads=cfg.threads, site_budget=_site_budget(cfg),
        )
        for row in report.rows:
            rows_all.append({"n": N, **row})
        censored[str(N)] = {
            "quenched_interior": report.meta.get("censored_quenched"),
            "annealed_interior": report.meta.get("censored_annealed_mean"),
            "t_max": t_max,
        }
    _write_rows(outdir / "exit_defect.csv",
                ["n", "metric", "param", "defect", "err", "samples"], rows_all)
    return ["exit_defect.csv"], {"environments": K, "theta": theta, "censored": censored}


def _run_lclt(cfg, outdir):
    p = cfg.params
    d = cfg.spec.d
    mu = np.asarray(p["mu"], dtype=np.float64).reshape(-1)
    if mu.size != d:
        raise ConfigError("params.mu must have one entry per dimension")
    sigma = np.asarray(p["sigma"], dtype=np.float64)
    if sigma.size == 1:
        sigma = sigma.reshape(1, 1)
    if sigma.shape != (d, d):
        raise ConfigError("params.sigma must be a d x d matrix")
    source = str(p.get("source", "annealed"))
    K = int(p.get("K", 30))
    budget = _site_budget(cfg)
    rows = []
    for n in p["n_grid"]:
        n = int(n)
        if source == "quenched":
            env = _probe_env(cfg, int(p.get("replica", 0)))
            dist = quenched_distribution(env, _start(cfg), n, prune=cfg.tau, site_budget=budget)
            defect = lclt_defect(dist, n * mu, sigma, n, site_budget=budget)
            err = 2.0 * dist.pruned_mass
            samples = 1
        elif source == "annealed":
            ann = annealed_distribution(
                cfg.spec, _start(cfg), n, K, tau=cfg.tau, seed=cfg.seed,
                threads=cfg.threads, keep_replicas=True, site_budget=budget,
            )
            defect = lclt_defect(ann.dist, n * mu, sigma, n, site_budget=budget)
            sums: dict = {}
            pruned_total = 0.0
            for r in ann.replicas:
                pruned_total += r.pruned_mass
                for x in r.sites():
                    sums[x] = sums.get(x, 0.0) + r.mass[x]
            loo_vals = []
            for r in ann.replicas if K >= 2 else []:
                mass = {}
                for x in sorted(sums):
                    m = (sums[x] - r.mass.get(x, 0.0)) / (K - 1)
                    if m > 0.0:
                        mass[x] = m
                loo = SparseLatticeDist(n, ann.dist.start, mass,
                                        (pruned_total - r.pruned_mass) / (K - 1))
                loo_vals.append(lclt_defect(loo, n * mu, sigma, n, site_budget=budget))
            err = _jackknife_scalar(loo_vals) + 2.0 * ann.dist.pruned_mass
            samples = K
        else:
            raise ConfigError(f"unknown lclt source {source!r}")
        rows.append({"n": n, "source": source, "defect": defect, "err": err,
                     "samples": samples})
    _write_rows(outdir / "lclt.csv", ["n", "source", "defect", "err", "samples"], rows)
    return ["lclt.csv"], {
        "source": source,
        "mu_per_step": [float(c) for c in mu],
        "sigma_per_step": [[float(c) for c in r] for r in sigma],
    }


def _run_prefactor_lclt(cfg, outdir):
    p = cfg.params
    K = int(p["K"])
    modes = tuple(p.get("modes", ("cesaro", "constant-one")))
    env = _probe_env(cfg, K)
    rows_all = []
    signed = []
    note = None
    for n in p["n_grid"]:
        report = prefactor_lclt_report(
            env, cfg.spec, int(n), K, modes=modes,
            tau=cfg.tau, seed=cfg.seed, threads=cfg.threads, site_budget=_site_budget(cfg),
        )
        note = report.meta.get("note")
        for row in report.rows:
            rows_all.append({"n": int(n), **row})
            if "signed_difference" in row:
                signed.append({"n": int(n), "metric": row["metric"],
                               "signed_difference": row["signed_difference"],
                               "err": row["err"]})
    _write_rows(outdir / "prefactor_lclt.csv",
                ["n", "metric", "param", "defect", "err", "samples"], rows_all)
    extra = {"environments": K, "modes": list(modes), "signed_differences": signed}
    if note:
        extra["note"] = note
    return ["prefactor_lclt.csv"], extra


def _run_intermediate_measures(cfg, outdir):
    p = cfg.params
    K = int(p["K"])
    env = _probe_env(cfg, K)
    rep = intermediate_measures_report(
        env, cfg.spec, int(p["n"]), float(p["eps"]), float(p["delta"]), K,
        tau=cfg.tau, seed=cfg.seed, threads=cfg.threads, site_budget=_site_budget(cfg),
    )
    cols = ["n", "k", "box_side", "d1", "d2", "d3", "direct", "triangle_slack",
            "z_n", "z_nk"]
    _write_rows(outdir / "measures.csv", cols, [rep])
    return ["measures.csv"], {k: v for k, v in rep.items() if k != "schema"}


def _run_regen_stats(cfg, outdir):
    p = cfg.params
    ell = tuple(int(c) for c in p["ell"])
    walks, steps = int(p["walks"]), int(p["steps"])
    ensemble = collect_ensemble(
        cfg.spec, ell, walks, steps, margin=p.get("margin"),
        seed=cfg.seed, threads=cfg.threads,
    )
    ensemble.write_csv(outdir / "ensemble.csv")
    est = velocity_covariance(ensemble)
    N = int(p.get("N", max(2, math.isqrt(steps))))
    R = int(p.get("R", max(int(ensemble.dtau.max()), 1)))
    diag = regen_diagnostics(ensemble, N, R, bootstrap=int(p.get("bootstrap", 1000)),
                             seed=cfg.seed)
    _write_rows(outdir / "tail.csv", ["k", "survival"],
                [{"k": k, "survival": s} for k, s in
                 zip(diag["tail_k"], diag["tail_survival"])])
    return ["ensemble.csv", "tail.csv"], {
        "walks": walks,
        "steps_per_walk": steps,
        "increments": int(ensemble.size),
        "velocity": {
            "vhat": [float(c) for c in est.vhat],
            "theta_hat": [float(c) for c in est.theta_hat],
            "sigma_hat": [[float(c) for c in row] for row in est.sigma_hat],
            "mean_dtau": float(est.mean_dtau),
            "se_vhat": [float(c) for c in np.atleast_1d(est.se_vhat)],
            "degenerate": bool(est.degenerate),
        },
        "lag1": diag["lag1"],
        "bounded_increments": diag["bounded_increments"],
        "N": N,
        "R": R,
    }


def _run_coupling(cfg, outdir):
    p = cfg.params
    n, M, K = int(p["n"]), int(p["M"]), int(p["K"])
    env = _probe_env(cfg, K)
    box, point = build_couplings(
        env, cfg.spec, n, M, K, tau=cfg.tau, seed=cfg.seed,
        pair_budget=int(p.get("pair_budget", 2_000_000)), site_budget=_site_budget(cfg),
    )
    box.write_csv(outdir / "box_coupling.csv")
    tables = ["box_coupling.csv"]
    if point.materialized:
        point.write_csv(outdir / "point_coupling.csv")
        tables.append("point_coupling.csv")
    slack = point.diagonal_bound_slack()
    return tables, {
        "n": n,
        "M": M,
        "environments": K,
        "box_diagonal_mass": box.diagonal_mass,
        "point_diagonal_mass": point.diagonal_mass,
        "diagonal_bound_slack": slack,
        "diagonal_bound_holds": slack >= 0.0,
        "materialized": point.materialized,
        "pruning_loss": point.pruning_loss,
    }


def _run_pair_merge(cfg, outdir):
    p = cfg.params
    rep = pair_merge_ensemble(
        cfg.spec,
        tuple(int(c) for c in p["x"]),
        tuple(int(c) for c in p["y"]),
        float(p["theta"]), int(p["M"]), int(p["rounds"]), int(p["pairs"]),
        seed=cfg.seed, n=p.get("n"), tau=cfg.tau, threads=cfg.threads,
        site_budget=_site_budget(cfg),
    )
    _write_rows(outdir / "merge.csv",
                ["round", "merged", "estimate", "ci_lo", "ci_hi", "bound"], rep["rows"])
    extra = {k: v for k, v in rep.items() if k not in ("rows", "schema")}
    extra["final_estimate"] = rep["rows"][-1]["estimate"]
    return ["merge.csv"], extra


def _run_condition_t(cfg, outdir):
    p = cfg.params
    rep = condition_t_curve(
        cfg.spec, tuple(int(c) for c in p["ell"]), p["l_grid"], int(p["samples"]),
        t_max=p.get("t_max"), seed=cfg.seed,
    )
    _write_rows(outdir / "condition_t.csv",
                ["L", "neg", "pos", "censored", "estimate", "ci_lo", "ci_hi", "excluded"],
                rep["rows"])
    extra = {k: v for k, v in rep.items() if k not in ("rows", "schema")}
    return ["condition_t.csv"], extra


def _run_condition_p(cfg, outdir):
    p = cfg.params
    rep = condition_p_probe(
        cfg.spec, tuple(int(c) for c in p["ell"]), int(p["n0"]),
        float(p["m_exponent"]), int(p["samples"]),
        aspect=p.get("aspect"), t_max=p.get("t_max"), seed=cfg.seed,
        max_starts=int(p.get("max_starts", 32)), site_budget=_site_budget(cfg),
    )
    _write_rows(outdir / "condition_p.csv",
                ["start", "non_right", "censored", "estimate", "ci_lo", "ci_hi"],
                rep["starts"])
    extra = {k: v for k, v in rep.items() if k not in ("starts", "schema")}
    return ["condition_p.csv"], extra


_RUNNERS = {
    "quenched-dist": _run_quenched_dist,
    "annealed-dist": _run_annealed_dist,
    "prefactor": _run_prefactor,
    "tv-partition": _run_tv_partition,
    "exit-defect": _run_exit_defect,
    "lclt": _run_lclt,
    "prefactor-lclt": _run_prefactor_lclt,
    "intermediate-measures": _run_intermediate_measures,
    "regen-stats": _run_regen_stats,
    "coupling": _run_coupling,
    "pair-merge": _run_pair_merge,
    "condition-t": _run_condition_t,
    "condition-p": _run_condition_p,
}


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute one experiment and write summary.json plus CSV tables under
    config.out. Returns the summary dict."""
    config.validate()
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tables, extra = _RUNNERS[config.kind](config, outdir)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "kind": config.kind,
        "version": __version__,
        "config": config.canonical(),
        "config_hash": config.config_hash(),
        "tables": tables,
        "results": extra,
    }
    dump_json(summary, outdir / "summary.json")
    return summary


def _fail(category: str, message: str) -> None:
    line = " ".join(str(message).split())
    print(f"error: {category}: {line}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rwre-lab",
        description="simulation and exact-computation lab for random walks "
                    "in random environments",
    )
    sub = parser.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in sorted(_RUNNERS):
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, help="JSON (or TOML) config file")
        sp.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                        help="master seed, up to 128 bits (overrides config)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (never changes output bytes)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--prune", type=float, default=None,
                        help="mass pruning threshold tau (overrides config)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        key: value
        for key, value in (
            ("seed", args.seed), ("threads", args.threads),
            ("out", args.out), ("prune", args.prune),
        )
        if value is not None
    }
    try:
        data = load_config_data(args.config)
        config = config_from_data(data, args.kind, overrides)
    except ConfigError as exc:
        _fail("config", str(exc))
        return 2
    try:
        summary = run_experiment(config)
    except InsufficientDataError as exc:
        _fail("insufficient-data", str(exc))
        return 1
    except ResourceLimitError as exc:
        _fail("resource", str(exc))
        return 3
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        _fail("config", str(exc))
        return 2
    print(f"wrote {config.out}/summary.json ({summary['config_hash'][:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
