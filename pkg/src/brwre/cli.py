"""Command-line experiment runner.

One experiment kind per invocation::

    brwre <kind> --config exp.yaml --out results/ [--seed S] [--threads K] [--cap N]
    brwre validate --config exp.yaml
    brwre replay --manifest results/manifest.json [--threads K] [--seed S]

Exit codes: 0 success, 2 invalid configuration, 3 particle cap exhausted where
exact counts are required, 4 replay mismatch.
"""

import argparse
from dataclasses import dataclass, field
import datetime
import hashlib
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__, rng
from .config import KINDS, ConfigError, load, from_dict, validate
from .dev import (ANSequence, covariance_C, gamma, lambda_n_functional, ldp_estimate, ldp_oracle_binary,
                  mdp_estimate)
from .env import asymptotic_variance, sample_path
from .model import log_mgf
from .ratefn import (RateFunction, conjugate_at_gradient, empirical_pressure, legendre, region,
                     spectrum_curve, truncated_rate)
from .regions import region_from_dict
from .sim import (SimulationError, counting_measure, envelope_check, mandelbrot_weights, martingale_panel,
                  run_generations, spine_sample)

EXIT_OK, EXIT_INVALID, EXIT_CAP, EXIT_MISMATCH = 0, 2, 3, 4
SEED_ENV = "BRWRE_SEED"
NA = "NA"
MANDELBROT_KEY = 1 << 31  # replicate key outside any replicate range


def fmt(x):
    if x is None:
        return NA
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


class Table:
    """CSV body with ``# key=value`` comment headers and mandatory provenance columns."""

    PROVENANCE = ("seed", "n", "replicate")

    def __init__(self, columns, comments=None):
        self.columns = list(self.PROVENANCE) + [c for c in columns if c not in self.PROVENANCE]
        self.comments = dict(comments or {})
        self.rows = []

    def add(self, **row):
        missing = [c for c in self.PROVENANCE if c not in row]
        if missing:
            raise KeyError(f"row lacks provenance columns {missing}")
        self.rows.append(row)

    def render(self):
        buf = io.StringIO()
        for k in sorted(self.comments):
            v = self.comments[k]
            buf.write(f"# {k}={v!r}\n" if isinstance(v, float) else f"# {k}={fmt(v)}\n")
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(fmt(row.get(c)) for c in self.columns) + "\n")
        return buf.getvalue()


def vec_cols(prefix, d):
    return [f"{prefix}{j + 1}" for j in range(d)]


def vec_vals(prefix, v):
    return {f"{prefix}{j + 1}": float(x) for j, x in enumerate(np.atleast_1d(v))}


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, complex):
        return str(obj)
    return obj


@dataclass
class Outcome:
    tables: dict = field(default_factory=dict)    # file name -> Table
    summary: dict = field(default_factory=dict)
    cap_hits: int = 0
    exact_failed: bool = False                    # cap exhaustion made the requested quantity unavailable


def _region(d):
    return region_from_dict(d)


def _complex_points(grid):
    return np.array([[complex(c) for c in p] for p in grid], dtype=complex)


def run_simulate(cfg, seed, cap, threads):
    p, law = cfg.params, cfg.model
    n = p["n"]
    path = sample_path(cfg.environment, n, rng.derive_seed(seed, rng.PATH))
    run = run_generations(law, path, n, cap, rng.derive_seed(seed, rng.REPLICATE), genealogy=p["genealogy"],
                          threads=threads)
    regions = [_region(r) for r in p["regions"] or []]
    out = Outcome()
    counts = Table(["state", "particles", "cap_hit"] + [f"region{i}" for i in range(len(regions))],
                   {"cap": cap, "horizon_reached": run.horizon})
    for g in range(run.horizon + 1):
        row = {"seed": seed, "n": g, "replicate": 0, "particles": run.frame(g).size,
               "state": int(path[g]) if g < len(path) else None, "cap_hit": False}
        for i, reg in enumerate(regions):
            row[f"region{i}"] = counting_measure(run, g, reg)
        counts.add(**row)
    if run.cap_hit:
        counts.add(seed=seed, n=run.horizon + 1, replicate=0, particles=None, state=int(path[run.horizon]),
                   cap_hit=True)
    out.tables["counts.csv"] = counts
    envt = Table(["state"])
    for i in range(n):
        envt.add(seed=seed, n=i, replicate=0, state=int(path[i]))
    out.tables["environment.csv"] = envt
    if p["dump_frames"]:
        cols = ["particle"] + vec_cols("S", law.dim) + (["parent"] if p["genealogy"] else [])
        frames = Table(cols)
        for g in range(run.horizon + 1):
            fr = run.frame(g)
            for i, row in enumerate(fr.positions):
                rec = {"seed": seed, "n": g, "replicate": 0, "particle": i, **vec_vals("S", row)}
                if p["genealogy"]:
                    rec["parent"] = int(fr.parents[i]) if fr.parents is not None else None
                frames.add(**rec)
        out.tables["frames.csv"] = frames
    out.cap_hits = int(run.cap_hit)
    out.exact_failed = run.cap_hit
    out.summary = {"horizon_requested": n, "horizon_reached": run.horizon, "cap_hit": run.cap_hit,
                   "sizes": [run.frame(g).size for g in range(run.horizon + 1)]}
    return out


def run_martingale(cfg, seed, cap, threads):
    p = cfg.params
    zs = _complex_points(p["z_grid"])
    if zs.shape[1] != cfg.model.dim:
        raise ConfigError(f"params.z_grid: points must have {cfg.model.dim} coordinates")
    panel = martingale_panel(cfg.model, cfg.environment, zs, p["ns"], p["replicates"], seed, cap,
                             quenched=p["quenched"], threads=threads)
    d = cfg.model.dim
    out = Outcome(cap_hits=panel.excluded)
    w = Table(["z_index"] + [c for j in range(d) for c in (f"z{j + 1}_re", f"z{j + 1}_im")] + ["W_re", "W_im"])
    for k, r in enumerate(panel.replicate_ids):
        for i, z in enumerate(zs):
            zc = {}
            for j, c in enumerate(z):
                zc[f"z{j + 1}_re"], zc[f"z{j + 1}_im"] = c.real, c.imag
            for jn, n in enumerate(panel.ns):
                v = panel.W[k, i, jn]
                w.add(seed=seed, n=n, replicate=r, z_index=i, W_re=v.real, W_im=v.imag, **zc)
    inc = Table(["sup_increment"])
    for k, r in enumerate(panel.replicate_ids):
        for jn, n in enumerate(panel.ns):
            inc.add(seed=seed, n=n, replicate=r, sup_increment=panel.sup_increment[k, jn])
    out.tables["martingale.csv"] = w
    out.tables["increments.csv"] = inc
    stats = []
    for row in panel.rows():
        k = row["replicates"]
        se = math.sqrt(row["var"] / k) if k > 1 else math.nan
        row["standard_error"] = se
        row["z_score"] = math.hypot(row["mean_re"] - 1.0, row["mean_im"]) / se if se > 0 else math.nan
        stats.append(row)
    dec = None
    if len(panel.ns) > 1:
        dec = float(np.mean(panel.sup_increment[:, -1] < panel.sup_increment[:, 0]))
    out.summary = {"panel": stats, "excluded_cap_hit": panel.excluded, "replicates_kept": len(panel.replicate_ids),
                   "increment_decrease_fraction": dec, "ns": list(panel.ns), "quenched": p["quenched"]}
    return out


def _ldp_table(rows, seed):
    t = Table(["count", "estimate", "censored", "cap_hit", "method"])
    for r in rows:
        t.add(seed=seed, **r)
    return t


def run_ldp(cfg, seed, cap, threads):
    p, law = cfg.params, cfg.model
    reg = _region(p["region"])
    out = Outcome()
    if law.is_binary():
        from .dev import ldp_theory

        lower, upper = ldp_theory(RateFunction(law, cfg.environment), reg)
        rows, summary = [], []
        for n in sorted(p["ns"]):
            v = ldp_oracle_binary(n, reg)
            rows.append({"n": n, "replicate": 0, "count": None, "estimate": v, "censored": not math.isfinite(v),
                         "cap_hit": False, "method": "exact-binomial"})
            summary.append({"n": n, "estimate": v, "median": v, "target": upper, "tolerance": p["tolerance"],
                            "passed": math.isfinite(v) and abs(v - upper) <= p["tolerance"]})
        out.tables["ldp.csv"] = _ldp_table(rows, seed)
        out.summary = {"experiment": "ldp", "method": "exact-binomial", "target": upper, "lower_bound": lower,
                       "upper_bound": upper, "tolerance": p["tolerance"], "summary": summary,
                       "estimate": summary[-1]["estimate"], "passed": summary[-1]["passed"]}
        return out
    rep = ldp_estimate(law, cfg.environment, reg, p["ns"], p["replicates"], seed, cap, p["tolerance"], threads)
    for r in rep.rows:
        r["method"] = "simulation"
    out.tables["ldp.csv"] = _ldp_table(rep.rows, seed)
    out.cap_hits = sum(r["cap_hit"] for r in rep.rows)
    out.exact_failed = any(s["cap_hit"] == p["replicates"] for s in rep.summary)
    out.summary = {**rep.to_json(), "method": "simulation", "estimate": rep.summary[-1]["median"]}
    return out


def run_mdp(cfg, seed, cap, threads):
    p = cfg.params
    an = ANSequence(p["a_n"]["c"], p["a_n"]["kappa"])
    rep = mdp_estimate(cfg.model, cfg.environment, an, _region(p["region"]), p["n"], p["replicates"], seed, cap,
                       p["tolerance"], threads)
    out = Outcome()
    out.tables["mdp.csv"] = _ldp_table([{**r, "count": None, "method": rep.params["method"]} for r in rep.rows], seed)
    out.cap_hits = sum(r["cap_hit"] for r in rep.rows)
    out.exact_failed = bool(rep.rows) and out.cap_hits == len(rep.rows)
    out.summary = {**rep.to_json(), "estimate": rep.summary[-1]["median"]}
    fn = p["functional"]
    if fn is not None:
        out.tables["functional.csv"], out.summary["functional"] = _functional(cfg, an, fn, seed)
    return out


def _functional(cfg, an, fn, seed):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cov = covariance_C(cfg.model, cfg.environment)
    t = np.asarray(fn["t"], dtype=float)
    target = gamma(cov.C, t)
    ns = sorted(fn["ns"])
    tab = Table(["value", "Gamma", "relative_error"])
    vals = np.empty((fn["paths"], len(ns)))
    for r in range(fn["paths"]):
        path = sample_path(cfg.environment, ns[-1], rng.derive_seed(seed, rng.PATH, r))
        for j, n in enumerate(ns):
            v = lambda_n_functional(cfg.model, path, an, n, t)
            vals[r, j] = v
            tab.add(seed=seed, n=n, replicate=r, value=v, Gamma=target,
                    relative_error=abs(v - target) / target if target else math.nan)
    var = vals.var(axis=0, ddof=1) if fn["paths"] > 1 else np.zeros(len(ns))
    slope = None
    if len(ns) > 1 and np.all(var > 0):
        slope = float(np.polyfit(np.log(ns), np.log(var), 1)[0])
    summary = {"t": t, "Gamma": target, "ns": ns, "median": np.median(vals, axis=0), "variance": var,
               "max_relative_error_last": float(np.max(np.abs(vals[:, -1] - target)) / target) if target else None,
               "variance_slope": slope}
    return tab, summary


def pressure_band(rf, env_spec, t, n, z=3.0, offset=0.0):
    """Declared fluctuation band for ``(1/n) log Z~_n(t) - Lambda(t)``.

    ``z`` long-run standard deviations of the environment average of
    ``log m_xi(t)``, scaled by ``1/sqrt(n)``, plus a fixed ``offset``.
    """
    f = [float(log_mgf(rf.law, e, t)[0].real) for e in range(rf.law.n_states)]
    return z * math.sqrt(asymptotic_variance(env_spec, f) / n) + offset


def run_spectrum(cfg, seed, cap, threads):
    p, law = cfg.params, cfg.model
    rf = RateFunction(law, cfg.environment)
    d = law.dim
    out = Outcome()
    spec = Table(vec_cols("alpha", d) + ["dimension", "in_J_tilde", "converged", "residual"] + vec_cols("t_star", d))
    rows = spectrum_curve(rf, p["alpha_grid"])
    for r in rows:
        spec.add(seed=seed, n=None, replicate=None, dimension=r["dimension"], in_J_tilde=r["in_J_tilde"],
                 converged=r["converged"], residual=r["residual"], **vec_vals("alpha", r["alpha"]),
                 **vec_vals("t_star", r["t_star"]))
    out.tables["spectrum.csv"] = spec
    out.summary["spectrum_points"] = len(rows)
    out.summary["in_J_tilde"] = int(sum(r["in_J_tilde"] for r in rows))
    pr = p["pressure"]
    if pr is not None:
        n = pr["n"]
        ts = np.asarray(pr["t_grid"], dtype=float)
        bands = [pressure_band(rf, cfg.environment, t, n, offset=pr["band"]) for t in ts]
        tab = Table(vec_cols("t", d) + ["pressure", "quenched_normalizer", "Lambda", "band", "excess", "violation"],
                    {"band_offset": pr["band"], "band_z": 3.0})

        def one(r):
            path = sample_path(cfg.environment, n, rng.derive_seed(seed, rng.PATH, r))
            run = run_generations(law, path, n, cap, rng.derive_seed(seed, rng.REPLICATE, r), keep="last")
            return None if run.cap_hit else empirical_pressure(run, ts, rf)

        from .sim import _map

        results = _map(one, list(range(pr["replicates"])), threads)
        total = viol = 0
        for r, res in enumerate(results):
            if res is None:
                out.cap_hits += 1
                continue
            for row, band in zip(res, bands):
                excess = row["pressure"] - row["Lambda"]
                bad = excess > band
                total += 1
                viol += int(bad)
                tab.add(seed=seed, n=n, replicate=r, pressure=row["pressure"], quenched_normalizer=row["quenched"],
                        Lambda=row["Lambda"], band=band, excess=excess, violation=bad, **vec_vals("t", row["t"]))
        out.tables["pressure.csv"] = tab
        frac = viol / total if total else math.nan
        out.exact_failed = total == 0
        out.summary["pressure"] = {"n": n, "points": total, "violations": viol, "violation_fraction": frac,
                                   "max_violation_fraction": pr["max_violation_fraction"],
                                   "passed": total > 0 and frac <= pr["max_violation_fraction"]}
    mb = p["mandelbrot"]
    if mb is not None:
        n, m = mb["n"], mb["lookahead"]
        t = np.asarray(mb["t"], dtype=float)
        path = sample_path(cfg.environment, n + m, rng.derive_seed(seed, rng.PATH, MANDELBROT_KEY))
        run = run_generations(law, path, n + m, cap, rng.derive_seed(seed, rng.REPLICATE, MANDELBROT_KEY),
                              genealogy=True, threads=threads)
        if run.cap_hit:
            out.cap_hits += 1
            out.exact_failed = True
            out.summary["mandelbrot"] = {"cap_hit": True}
        else:
            w = mandelbrot_weights(run, n, t, m)
            target = float(t @ rf.grad(t) - rf(t))
            tab = Table(["particle", "log_weight", "rate", "rate_short", "target"], {"lookahead": m})
            for u in range(w.log_weight.size):
                tab.add(seed=seed, n=n, replicate=0, particle=u, log_weight=w.log_weight[u], rate=w.rate[u],
                        rate_short=w.log_weight_short[u] / n, target=target)
            out.tables["mandelbrot.csv"] = tab
            out.summary["mandelbrot"] = {
                "n": n, "lookahead": m, "target_conjugate": target, "rays": int(w.log_weight.size),
                "rate_min": float(w.rate.min()), "rate_max": float(w.rate.max()),
                "sensitivity_max": float(np.max(np.abs(w.log_weight - w.log_weight_short)) / n),
                "max_abs_deviation": float(np.max(np.abs(w.rate - target)))}
    return out


def run_rate(cfg, seed, cap, threads):
    rf = RateFunction(cfg.model, cfg.environment)
    d = cfg.model.dim
    tab = Table(vec_cols("t", d) + ["Lambda"] + vec_cols("grad", d) + ["conjugate", "legendre", "in_I"])
    for t in np.asarray(cfg.params["t_grid"], dtype=float):
        g = rf.grad(t)
        tab.add(seed=seed, n=None, replicate=None, Lambda=rf(t), conjugate=conjugate_at_gradient(rf, t),
                legendre=legendre(rf, g, t0=t).value, in_I=conjugate_at_gradient(rf, t) < 0,
                **vec_vals("t", t), **vec_vals("grad", g))
    return Outcome({"rate.csv": tab}, {"points": len(tab.rows), "Lambda_at_0": rf(np.zeros(d))})


def run_spine(cfg, seed, cap, threads):
    p, law = cfg.params, cfg.model
    rf = RateFunction(law, cfg.environment)
    t, n, k = np.asarray(p["t"], dtype=float), p["n"], p["spines"]
    d = law.dim
    shared = None if p["fresh_environment"] else sample_path(cfg.environment, n, rng.derive_seed(seed, rng.PATH))

    def one(r):
        path = shared if shared is not None else sample_path(cfg.environment, n, rng.derive_seed(seed, rng.PATH, r))
        return spine_sample(law, path, t, n, rng.derive_seed(seed, rng.SPINE, r)).velocity

    from .sim import _map

    vel = np.array(_map(one, list(range(k)), threads)).reshape(k, d)
    tab = Table(vec_cols("velocity", d))
    for r in range(k):
        tab.add(seed=seed, n=n, replicate=r, **vec_vals("velocity", vel[r]))
    target = rf.grad(t)
    mean = vel.mean(axis=0)
    se = vel.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.full(d, math.nan)
    return Outcome({"spine.csv": tab}, {
        "t": t, "n": n, "spines": k, "mean_velocity": mean, "target": target, "standard_error": se,
        "within_4se": bool(np.all(np.abs(mean - target) <= 4 * se)) if k > 1 else None})


def run_regions(cfg, seed, cap, threads):
    p = cfg.params
    rf = RateFunction(cfg.model, cfg.environment)
    d = cfg.model.dim
    cols = vec_cols("t", d) + ["in_I", "conjugate"]
    for q in p["ps"]:
        cols += [f"omega1_p{q:g}", f"omega1_p{q:g}_se"]
    cols += ["delta", "omega2"] + vec_cols("alpha", d) + ["in_J_image", "legendre"]
    tab = Table(cols)
    for t in np.asarray(p["t_grid"], dtype=float):
        rep = region(rf, t, p["delta"], tuple(p["ps"]), p["samples"], rng.derive_seed(seed, rng.MOMENT), p["res"])
        row = {"seed": seed, "n": None, "replicate": None, "in_I": rep.in_I, "conjugate": rep.conjugate_value,
               "delta": rep.omega2_diag[0], "omega2": rep.omega2_diag[1], "in_J_image": rep.in_J_image,
               "legendre": rep.legendre_value, **vec_vals("t", t), **vec_vals("alpha", rep.alpha)}
        for q, val, se in rep.omega1_diag:
            row[f"omega1_p{q:g}"], row[f"omega1_p{q:g}_se"] = val, se
        tab.add(**row)
    out = Outcome({"regions.csv": tab}, {"points": len(tab.rows), "in_I": int(sum(r["in_I"] for r in tab.rows))})
    ev = p["envelope"]
    if ev is not None:
        z0 = np.array([complex(c) for c in ev["z0"]])
        if z0.size != d:
            raise ConfigError(f"params.envelope.z0: expected {d} coordinates")
        if not 0 <= ev["state"] < cfg.model.n_states:
            raise ConfigError(f"params.envelope.state: no state {ev['state']}")
        rep = envelope_check(cfg.model, ev["state"], z0, ev["eps"], ev["replicates"],
                             rng.derive_seed(seed, rng.ENVELOPE), ev["grid_res"])
        et = Table(["grid_sup", "corner_bound", "violation"], {"alpha0": rep.alpha0, "eps": ev["eps"]})
        for r in range(ev["replicates"]):
            et.add(seed=seed, n=1, replicate=r, grid_sup=rep.lhs[r], corner_bound=rep.rhs[r],
                   violation=bool(rep.lhs[r] > rep.rhs[r]) and not rep.vacuous)
        out.tables["envelope.csv"] = et
        out.summary["envelope"] = {"alpha0": rep.alpha0, "vacuous": rep.vacuous, "violations": rep.violations,
                                   "replicates": ev["replicates"]}
    return out


def run_truncate(cfg, seed, cap, threads):
    p = cfg.params
    rf = RateFunction(cfg.model, cfg.environment)
    d = cfg.model.dim
    levels = list(p["levels"])
    tabs = truncated_rate(rf, levels, p["t_grid"], p["alpha_grid"])
    names = [fmt(a) for a in levels] + ["inf"]
    lam_t = Table(["level"] + vec_cols("t", d) + ["Lambda_a"])
    for i, lv in enumerate(names):
        for j, t in enumerate(tabs.ts):
            lam_t.add(seed=seed, n=None, replicate=None, level=lv, Lambda_a=tabs.lam[i, j], **vec_vals("t", t))
    star_t = Table(["level"] + vec_cols("alpha", d) + ["Lambda_a_star", "converged"])
    for i, lv in enumerate(names):
        for j, a in enumerate(tabs.alphas):
            star_t.add(seed=seed, n=None, replicate=None, level=lv, Lambda_a_star=tabs.lam_star[i, j],
                       converged=tabs.converged[i, j], **vec_vals("alpha", a))
    lam_up = bool(np.all(np.diff(tabs.lam, axis=0) >= -1e-12))
    star_down = bool(np.all(np.diff(tabs.lam_star, axis=0) <= 1e-9))
    gaps = np.abs(tabs.lam_star[-2] - tabs.lam_star[-1]) if levels else np.array([0.0])
    return Outcome({"truncate_lambda.csv": lam_t, "truncate_star.csv": star_t}, {
        "levels": levels, "lambda_monotone_increasing": lam_up, "star_monotone": star_down,
        "final_gap": float(np.max(gaps)), "max_step_norm": _max_step_norm(cfg.model)})


def _max_step_norm(law):
    from .model import CategoricalSteps, EnumeratedSteps

    best = 0.0
    for sl in law.states:
        if isinstance(sl.steps, (CategoricalSteps, EnumeratedSteps)):
            best = max(best, float(np.linalg.norm(np.asarray(sl.steps.vectors), axis=1).max()))
        else:
            return math.inf
    return best


RUNNERS = {"simulate": run_simulate, "martingale": run_martingale, "ldp": run_ldp, "mdp": run_mdp,
           "spectrum": run_spectrum, "rate": run_rate, "spine": run_spine, "regions": run_regions,
           "truncate": run_truncate}


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256(text):
    return hashlib.sha256(text.encode()).hexdigest()


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def resolve_seed(cli_seed, cfg_seed):
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an unsigned integer, got {env!r}") from None
        if not 0 <= value < 2 ** 64:
            raise ConfigError(f"{SEED_ENV}: must be an unsigned 64-bit integer")
        return value
    return cfg_seed


def execute(cfg, out_dir, seed=None, threads=1, cap=None, config_path=None):
    """Run one experiment and write its artifacts; returns ``(exit code, manifest dict)``."""
    seed = resolve_seed(seed, cfg.seed)
    cap = cfg.cap if cap is None else cap
    cfg.seed, cfg.cap = seed, cap
    start = _now()
    outcome = RUNNERS[cfg.kind](cfg, seed, cap, threads)
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name, table in outcome.tables.items():
        text = table.render()
        atomic_write(os.path.join(out_dir, name), text)
        files[name] = sha256(text)
    summary = {"kind": cfg.kind, "seed": seed, "cap": cap, "cap_hits": outcome.cap_hits, **outcome.summary}
    text = json.dumps(jsonable(summary), indent=2, sort_keys=True) + "\n"
    atomic_write(os.path.join(out_dir, "summary.json"), text)
    files["summary.json"] = sha256(text)
    manifest = {"tool": "brwre", "version": __version__, "kind": cfg.kind, "config_hash": cfg.digest(),
                "config_path": os.path.abspath(config_path) if config_path else None, "config": cfg.to_dict(),
                "seed": seed, "cap": cap, "threads": threads, "start": start, "end": _now(),
                "cap_hits": outcome.cap_hits, "outputs": files}
    atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return (EXIT_CAP if outcome.exact_failed else EXIT_OK), manifest


def first_difference(a, b):
    """``(line number, record a, record b)`` of the first differing line, or ``None``."""
    la, lb = a.splitlines(), b.splitlines()
    for i in range(max(len(la), len(lb))):
        x = la[i] if i < len(la) else "<missing>"
        y = lb[i] if i < len(lb) else "<missing>"
        if x != y:
            return i + 1, x, y
    return None


def replay(manifest_path, threads=1, seed=None, out_dir=None):
    """Re-run from a manifest and bit-compare every output; returns ``(exit code, message)``."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    cfg = from_dict(manifest["config"])
    if cfg.digest() != manifest["config_hash"]:
        return EXIT_MISMATCH, "embedded configuration does not match the recorded config hash"
    src = os.path.dirname(os.path.abspath(manifest_path))
    seed = manifest["seed"] if seed is None else seed
    with tempfile.TemporaryDirectory() as tmp:
        target = out_dir or tmp
        _, new = execute(cfg, target, seed=seed, threads=threads, cap=manifest["cap"])
        for name in sorted(manifest["outputs"]):
            try:
                with open(os.path.join(src, name)) as fh:
                    old_text = fh.read()
            except FileNotFoundError:
                return EXIT_MISMATCH, f"{name}: original output is missing"
            with open(os.path.join(target, name)) as fh:
                new_text = fh.read()
            diff = first_difference(old_text, new_text)
            if diff is not None:
                line, x, y = diff
                return EXIT_MISMATCH, f"{name}:{line}: first differing record\n  original: {x}\n  replay:   {y}"
            if old_text != new_text:
                return EXIT_MISMATCH, f"{name}: outputs differ in line endings"
            if sha256(old_text) != manifest["outputs"][name]:
                return EXIT_MISMATCH, f"{name}: stored file does not match the recorded hash"
    return EXIT_OK, f"replay identical ({len(manifest['outputs'])} files)"


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _pos(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="brwre", description="Branching random walks in random environment.")
    ap.add_argument("--version", action="version", version=f"brwre {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=os.path.join("results", kind))
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--threads", type=_pos, default=1)
        sp.add_argument("--cap", type=_pos)
    sp = sub.add_parser("validate", help="check model hypotheses for a configuration")
    sp.add_argument("--config", required=True)
    sp = sub.add_parser("replay", help="re-run a manifest and compare outputs bit for bit")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=_u64)
    sp.add_argument("--threads", type=_pos, default=1)
    sp.add_argument("--out")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load(args.config)
            diags = validate(cfg)
            for d in diags:
                print(f"[{d.status}] {d.check}: {d.message}")
            return EXIT_OK
        if args.command == "replay":
            code, msg = replay(args.manifest, args.threads, args.seed, args.out)
            print(msg, file=sys.stdout if code == EXIT_OK else sys.stderr)
            return code
        cfg = load(args.config, args.command)
        code, manifest = execute(cfg, args.out, args.seed, args.threads, args.cap, args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if code == EXIT_CAP:
        print(f"error: particle cap {manifest['cap']} exhausted; partial artifacts in {args.out}", file=sys.stderr)
    else:
        print(f"wrote {len(manifest['outputs'])} files to {args.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
