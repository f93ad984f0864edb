"""Experiment configuration: YAML text <-> validated :class:`ExperimentConfig`."""

from dataclasses import dataclass, field
import hashlib
import json
import math

import numpy as np
import yaml

from .env import EnvironmentSpec, mixing_bound, stationary_distribution
from .model import ReproductionLaw, step_within_prob
from .regions import region_from_dict

KINDS = ("simulate", "martingale", "ldp", "mdp", "spectrum", "rate", "spine", "regions", "truncate")
REQUIRED = object()


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _int(v, key):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    return int(v)


def _pos_int(v, key):
    v = _int(v, key)
    if v < 1:
        raise ConfigError(f"{key}: must be >= 1, got {v}")
    return v


def _float(v, key):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _pos_float(v, key):
    v = _float(v, key)
    if not v > 0:
        raise ConfigError(f"{key}: must be positive, got {v}")
    return v


def _bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected true/false, got {v!r}")
    return v


def _int_list(v, key):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key}: expected a nonempty list of integers")
    return [_pos_int(x, key) for x in v]


def _float_list(v, key):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key}: expected a nonempty list of numbers")
    return [_float(x, key) for x in v]


def _vector(v, key):
    return _float_list(v if isinstance(v, (list, tuple)) else [v], key)


def _grid(v, key):
    """Real grid: explicit list of points (scalars or vectors) or ``{start, stop, step}`` (1-d)."""
    if isinstance(v, dict):
        extra = set(v) - {"start", "stop", "step"}
        if extra or set(v) != {"start", "stop", "step"}:
            raise ConfigError(f"{key}: range grids need exactly start, stop, step")
        start, stop, step = (_float(v[k], f"{key}.{k}") for k in ("start", "stop", "step"))
        if step <= 0 or stop < start:
            raise ConfigError(f"{key}: need step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [[round(start + i * step, 12)] for i in range(count)]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key}: expected a nonempty list of points or a start/stop/step mapping")
    return [_vector(p, key) for p in v]


def _complex(v, key):
    try:
        return complex(str(v).replace(" ", "")) if isinstance(v, str) else complex(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse complex number {v!r}") from None


def _zgrid(v, key):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key}: expected a nonempty list of complex points")
    out = []
    for p in v:
        coords = p if isinstance(p, (list, tuple)) else [p]
        out.append([str(_complex(c, key)) for c in coords])
    return out


def _zpoint(v, key):
    return _zgrid([v], key)[0]


def _region(v, key):
    try:
        return region_from_dict(v).to_dict()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _an(v, key):
    if not isinstance(v, dict) or set(v) - {"c", "kappa"}:
        raise ConfigError(f"{key}: expected a mapping with keys c and kappa")
    from .dev import ANSequence, DeviationError

    if "kappa" not in v:
        raise ConfigError(f"{key}.kappa: required key missing")
    c = _pos_float(v.get("c", 1.0), f"{key}.c")
    kappa = _float(v["kappa"], f"{key}.kappa")
    try:
        ANSequence(c, kappa)
    except DeviationError as exc:
        raise ConfigError(f"{key}.kappa: {exc}") from None
    return {"c": c, "kappa": kappa}


def _sub(schema):
    def conv(v, key):
        if not isinstance(v, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return _apply(schema, v, key)
    return conv


def _optional(conv):
    def wrapped(v, key):
        return None if v is None else conv(v, key)
    return wrapped


def _apply(schema, values, prefix):
    extra = set(values) - set(schema)
    if extra:
        raise ConfigError(f"{prefix}: unknown keys {sorted(extra)}")
    out = {}
    for k, (conv, default) in schema.items():
        key = f"{prefix}.{k}"
        if k in values:
            out[k] = conv(values[k], key)
        elif default is REQUIRED:
            raise ConfigError(f"{key}: required key missing")
        else:
            out[k] = default
    return out


PRESSURE = {"n": (_pos_int, REQUIRED), "t_grid": (_grid, REQUIRED), "replicates": (_pos_int, 1),
            "band": (_pos_float, 0.15), "max_violation_fraction": (_float, 0.05)}
ENVELOPE = {"z0": (_zpoint, REQUIRED), "eps": (_pos_float, REQUIRED),
            "replicates": (_pos_int, 100), "grid_res": (_pos_int, 9), "state": (_int, 0)}
FUNCTIONAL = {"t": (_vector, REQUIRED), "ns": (_int_list, REQUIRED), "paths": (_pos_int, 20)}
MANDELBROT = {"n": (_pos_int, REQUIRED), "lookahead": (_pos_int, 6), "t": (_vector, REQUIRED)}

SCHEMAS = {
    "simulate": {"n": (_pos_int, REQUIRED), "genealogy": (_bool, False), "dump_frames": (_bool, False),
                 "regions": (_optional(lambda v, k: [_region(x, k) for x in v]), None)},
    "martingale": {"z_grid": (_zgrid, REQUIRED), "ns": (_int_list, REQUIRED),
                   "replicates": (_pos_int, REQUIRED), "quenched": (_bool, False)},
    "ldp": {"region": (_region, REQUIRED), "ns": (_int_list, REQUIRED), "replicates": (_pos_int, 1),
            "tolerance": (_pos_float, 0.1)},
    "mdp": {"a_n": (_an, REQUIRED), "region": (_region, REQUIRED), "n": (_pos_int, REQUIRED),
            "replicates": (_int, 0), "tolerance": (_pos_float, 0.01),
            "functional": (_optional(_sub(FUNCTIONAL)), None)},
    "spectrum": {"alpha_grid": (_grid, REQUIRED), "pressure": (_optional(_sub(PRESSURE)), None),
                 "mandelbrot": (_optional(_sub(MANDELBROT)), None)},
    "rate": {"t_grid": (_grid, REQUIRED)},
    "spine": {"t": (_vector, REQUIRED), "n": (_pos_int, REQUIRED), "spines": (_pos_int, 1),
              "fresh_environment": (_bool, True)},
    "regions": {"t_grid": (_grid, REQUIRED), "delta": (_pos_float, 0.1),
                "ps": (_float_list, [1.1, 1.5, 2.0]), "samples": (_pos_int, 100_000), "res": (_pos_int, 64),
                "envelope": (_optional(_sub(ENVELOPE)), None)},
    "truncate": {"levels": (_float_list, REQUIRED), "t_grid": (_grid, REQUIRED),
                 "alpha_grid": (_grid, REQUIRED)},
}


@dataclass
class ExperimentConfig:
    kind: str
    model: ReproductionLaw
    environment: EnvironmentSpec
    params: dict
    seed: int = 0
    cap: int = 10 ** 7
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "seed": self.seed, "cap": self.cap, "model": self.model.to_dict(),
                "environment": self.environment.to_dict(), "params": self.params}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


def from_dict(data, kind=None):
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    extra = set(data) - {"kind", "seed", "cap", "model", "environment", "params"}
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    k = data.get("kind", kind)
    if kind is not None and k != kind:
        raise ConfigError(f"kind: config says {k!r} but the subcommand is {kind!r}")
    if k not in KINDS:
        raise ConfigError(f"kind: must be one of {KINDS}, got {k!r}")
    for key in ("model", "environment"):
        if key not in data:
            raise ConfigError(f"{key}: required section missing")
    try:
        law = ReproductionLaw.from_dict(data["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        envspec = EnvironmentSpec.from_dict(data["environment"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"environment: {exc}") from None
    if envspec.n_states != law.n_states:
        raise ConfigError(f"environment: {envspec.n_states} states but model.states lists {law.n_states}")
    params = _apply(SCHEMAS[k], data.get("params") or {}, "params")
    seed = _int(data.get("seed", 0), "seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    cap = _pos_int(data.get("cap", 10 ** 7), "cap")
    return ExperimentConfig(k, law, envspec, params, seed, cap)


def parse(text, kind=None):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from None
    return from_dict(data, kind)


def load(path, kind=None):
    with open(path) as fh:
        return parse(fh.read(), kind)


@dataclass
class Diagnostic:
    check: str
    status: str  # "pass" | "warn"
    message: str


def validate(cfg):
    """Check the theorem hypotheses that are decidable for the configured model."""
    law, envspec = cfg.model, cfg.environment
    out = []
    try:
        w = stationary_distribution(envspec)
    except ValueError as exc:
        return [Diagnostic("environment ergodic", "warn", str(exc))]
    out.append(Diagnostic("offspring N >= 1", "pass", "every offspring law puts zero mass on 0"))
    p2 = law.prob_not_single(w)
    out.append(Diagnostic("P(N = 1) < 1", "pass" if p2 > 0 else "warn",
                          f"P(N >= 2) = {p2:.6g} under the stationary environment"))
    lam0 = sum(wi * math.log(law.states[e].offspring.mean()) for e, wi in enumerate(w) if wi > 0)
    out.append(Diagnostic("supercritical", "pass" if lam0 > 0 else "warn", f"E log m_0(0) = {lam0:.6g}"))
    try:
        mp = mixing_bound(envspec)
        if mp.c == 0 or mp.r == 0:
            msg = "phi-mixing with phi(n) = 0 for n >= 1 (independent environment)"
        else:
            msg = f"phi(n) <= {mp.c:.6g} * {mp.r:.6g}^n; sum phi(n)^(1/theta) <= {mp.summed_root():.6g} for theta=2"
        out.append(Diagnostic("mixing", "pass", msg))
    except ValueError as exc:
        out.append(Diagnostic("mixing", "warn", str(exc)))
    const = sum(wi / max(step_within_prob(law, e, 1.0), 1e-300) for e, wi in enumerate(w) if wi > 0)
    out.append(Diagnostic("step mass near origin", "pass" if math.isfinite(const) and const < 1e300 else "warn",
                          f"E[P_xi(|L_1| <= 1)^-1] = {const:.6g}"))
    if cfg.kind == "mdp":
        import warnings
        from .dev import covariance_C

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cov = covariance_C(law, envspec)
        center = np.asarray(cov.centering).tolist()
        out.append(Diagnostic("centering", "pass" if cov.centered else "warn",
                              f"moderate-deviation centering holds: E (1/pi_0) sum S_u = {center}" if cov.centered
                              else f"moderate-deviation centering fails: E (1/pi_0) sum S_u = {center}"))
        out.append(Diagnostic("a_n growth", "pass",
                              f"a_n = {cfg.params['a_n']['c']} n^{cfg.params['a_n']['kappa']} with kappa in (1/2, 1)"))
    return out
