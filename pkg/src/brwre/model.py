"""Reproduction laws: offspring counts plus displacement vectors in R^d.

Each environment state carries one :class:`StateLaw`.  Children of a particle
receive i.i.d. displacements independent of their number, except for the
``enumerated`` family, where a particle always has exactly one child at each
listed vector (this gives the deterministic binary tree used by the exact
oracles).  Every family has a closed-form transform

    m(z) = E sum_{i <= N} exp(<z, L_i>),   z in C^d,

with the real bilinear pairing ``<z, x> = sum_j z_j x_j`` (positions are real,
so no conjugation is involved).
"""

from dataclasses import dataclass, replace
import math

import numpy as np
from scipy import integrate
from scipy.special import logsumexp
from scipy.stats import ncx2


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Offspring:
    """Law of the number of children on ``{1, 2, ...}``."""

    values: tuple
    probs: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        p = np.asarray(self.probs, dtype=float)
        if v.shape != p.shape or v.size == 0:
            raise ModelError("offspring values and probs must be nonempty and of equal length")
        if (v < 1).any():
            raise ModelError("offspring law must put zero mass on 0 children")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ModelError("offspring probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "values", tuple(v.tolist()))
        object.__setattr__(self, "probs", tuple(p.tolist()))

    @classmethod
    def fixed(cls, b):
        return cls((int(b),), (1.0,))

    def mean(self, cap=None):
        v = np.asarray(self.values)
        if cap is not None:
            v = np.minimum(v, cap)
        return float(np.dot(v, self.probs))

    def prob_single(self):
        return float(sum(p for v, p in zip(self.values, self.probs) if v == 1))

    def sample(self, gen, size):
        if len(self.values) == 1:
            return np.full(size, self.values[0], dtype=np.int64)
        idx = np.searchsorted(np.cumsum(self.probs), gen.random(size), side="right")
        return np.asarray(self.values, dtype=np.int64)[np.minimum(idx, len(self.values) - 1)]

    def to_dict(self):
        if len(self.values) == 1:
            return {"fixed": self.values[0]}
        return {"values": list(self.values), "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, d):
        if "fixed" in d:
            if set(d) != {"fixed"}:
                raise ModelError(f"unknown offspring keys: {sorted(set(d) - {'fixed'})}")
            return cls.fixed(d["fixed"])
        extra = set(d) - {"values", "probs"}
        if extra:
            raise ModelError(f"unknown offspring keys: {sorted(extra)}")
        return cls(tuple(d["values"]), tuple(d["probs"]))


@dataclass(frozen=True)
class GaussianSteps:
    """Isotropic gaussian displacement ``N(mean, var * I)``."""

    mean: tuple
    var: float

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(x) for x in np.atleast_1d(self.mean)))
        if not self.var > 0:
            raise ModelError("gaussian variance must be positive")
        object.__setattr__(self, "var", float(self.var))

    family = "gaussian"

    @property
    def dim(self):
        return len(self.mean)


def _as_vectors(vectors):
    try:
        return np.atleast_2d(np.asarray(vectors, dtype=float))
    except (TypeError, ValueError):
        raise ModelError("step vectors must all have the same dimension") from None


@dataclass(frozen=True)
class CategoricalSteps:
    """Displacement drawn from a finite set ``{v_k}`` with masses ``{p_k}``."""

    vectors: tuple
    probs: tuple

    def __post_init__(self):
        v = _as_vectors(self.vectors)
        p = np.asarray(self.probs, dtype=float)
        if v.shape[0] != p.size:
            raise ModelError("categorical steps need one probability per vector")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ModelError("categorical step probabilities must sum to 1")
        if not np.isfinite(v).all():
            raise ModelError("step vectors must be finite")
        object.__setattr__(self, "vectors", tuple(map(tuple, v.tolist())))
        object.__setattr__(self, "probs", tuple(p.tolist()))

    family = "categorical"

    @property
    def dim(self):
        return len(self.vectors[0])


@dataclass(frozen=True)
class EnumeratedSteps:
    """Exactly one child at each listed vector (a deterministic point process)."""

    vectors: tuple

    def __post_init__(self):
        v = _as_vectors(self.vectors)
        if v.size == 0 or not np.isfinite(v).all():
            raise ModelError("enumerated steps need a nonempty finite vector list")
        object.__setattr__(self, "vectors", tuple(map(tuple, v.tolist())))

    family = "enumerated"

    @property
    def dim(self):
        return len(self.vectors[0])

    @property
    def probs(self):
        k = len(self.vectors)
        return (1.0 / k,) * k


@dataclass(frozen=True)
class StateLaw:
    offspring: Offspring
    steps: object

    def __post_init__(self):
        if isinstance(self.steps, EnumeratedSteps):
            k = len(self.steps.vectors)
            if self.offspring.values != (k,):
                raise ModelError(f"enumerated steps fix the offspring number to {k}")

    def to_dict(self):
        s = self.steps
        if isinstance(s, GaussianSteps):
            steps = {"family": "gaussian", "mean": list(s.mean), "var": s.var}
        elif isinstance(s, CategoricalSteps):
            steps = {"family": "categorical", "vectors": [list(v) for v in s.vectors],
                     "probs": list(s.probs)}
        else:
            steps = {"family": "enumerated", "vectors": [list(v) for v in s.vectors]}
        return {"offspring": self.offspring.to_dict(), "steps": steps}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"offspring", "steps"}
        if extra:
            raise ModelError(f"unknown state-law keys: {sorted(extra)}")
        s = dict(d["steps"])
        fam = s.pop("family", None)
        keys = {"gaussian": {"mean", "var"}, "categorical": {"vectors", "probs"},
                "enumerated": {"vectors"}}.get(fam)
        if keys is None:
            raise ModelError(f"steps.family must be gaussian, categorical or enumerated, got {fam!r}")
        if set(s) - keys:
            raise ModelError(f"unknown {fam} step keys: {sorted(set(s) - keys)}")
        if fam == "gaussian":
            steps = GaussianSteps(tuple(np.atleast_1d(s["mean"]).tolist()), s["var"])
        elif fam == "categorical":
            steps = CategoricalSteps(tuple(map(tuple, np.atleast_2d(s["vectors"]).tolist())), tuple(s["probs"]))
        else:
            steps = EnumeratedSteps(tuple(map(tuple, np.atleast_2d(s["vectors"]).tolist())))
        if "offspring" in d:
            off = Offspring.from_dict(d["offspring"])
        elif fam == "enumerated":
            off = Offspring.fixed(len(steps.vectors))
        else:
            raise ModelError("state law needs an offspring entry")
        return cls(off, steps)


@dataclass(frozen=True)
class PointSample:
    n_children: int
    displacements: np.ndarray


@dataclass(frozen=True)
class ReproductionLaw:
    """Per-state reproduction laws, optionally truncated at level ``a``.

    A truncated law keeps at most ``floor(a)`` children and deletes every child
    whose displacement has Euclidean norm above ``a``.  Truncated laws are for
    transform evaluation only; they can go extinct and are never simulated.
    """

    dim: int
    states: tuple
    truncation: float = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if not self.states:
            raise ModelError("a reproduction law needs at least one state")
        for e, s in enumerate(self.states):
            if s.steps.dim != self.dim:
                raise ModelError(f"state {e}: step dimension {s.steps.dim} != model dimension {self.dim}")

    @property
    def n_states(self):
        return len(self.states)

    def to_dict(self):
        d = {"dim": self.dim, "states": [s.to_dict() for s in self.states]}
        if self.truncation is not None:
            d["truncation"] = self.truncation
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"dim", "states", "truncation"}
        if extra:
            raise ModelError(f"unknown model keys: {sorted(extra)}")
        states = tuple(StateLaw.from_dict(s) for s in d["states"])
        law = cls(int(d.get("dim", states[0].steps.dim)), states)
        if d.get("truncation") is not None:
            law = truncate(law, d["truncation"])
        return law

    def supercritical(self, weights):
        """``E log m_0(0) > 0`` under the environment weights."""
        w = np.asarray(weights, dtype=float)
        lam0 = sum(wi * math.log(mean_offspring(self, e)) for e, wi in enumerate(w) if wi > 0)
        return lam0 > 0

    def prob_not_single(self, weights):
        """``P(N >= 2)`` averaged over the environment weights."""
        return float(sum(wi * (1.0 - s.offspring.prob_single()) for wi, s in zip(weights, self.states)))

    def is_binary(self):
        """True for the deterministic binary walk: two children at +1 and -1 in every state."""
        if self.dim != 1 or self.truncation is not None:
            return False
        for s in self.states:
            if not isinstance(s.steps, EnumeratedSteps):
                return False
            if sorted(v[0] for v in s.steps.vectors) != [-1.0, 1.0]:
                return False
        return True


def binary_model(n_states=1):
    s = StateLaw(Offspring.fixed(2), EnumeratedSteps(((1.0,), (-1.0,))))
    return ReproductionLaw(1, (s,) * n_states)


def gaussian_model(b=2, mean=(0.0,), var=1.0):
    """Gaussian law with ``b`` children; ``var`` (and optionally ``mean``) may list one entry per state."""
    m = np.asarray(mean, dtype=float)
    variances = np.atleast_1d(var).astype(float).tolist()
    means = [tuple(np.atleast_1d(m).tolist())] * len(variances) if m.ndim <= 1 else [tuple(r) for r in m.tolist()]
    if len(means) != len(variances):
        raise ModelError("one mean per state is required when several means are given")
    states = tuple(StateLaw(Offspring.fixed(b), GaussianSteps(mu, v)) for mu, v in zip(means, variances))
    return ReproductionLaw(len(means[0]), states)


def categorical_model(vectors, probs, b=2, n_states=1):
    s = StateLaw(Offspring.fixed(b), CategoricalSteps(tuple(map(tuple, np.atleast_2d(vectors).tolist())), tuple(probs)))
    return ReproductionLaw(s.steps.dim, (s,) * n_states)


def _cap(law):
    a = law.truncation
    return None if a is None else int(math.floor(a))


def _kept(law, state):
    """(vectors, probs, mean offspring) of a finite-step state after truncation."""
    sl = law.states[state]
    v = np.asarray(sl.steps.vectors, dtype=float)
    a = law.truncation
    if isinstance(sl.steps, EnumeratedSteps):
        keep = np.ones(len(v), dtype=bool)
        if a is not None:
            keep[_cap(law):] = False
            keep &= np.linalg.norm(v, axis=1) <= a
        return v[keep], np.ones(int(keep.sum())), 1.0
    p = np.asarray(sl.steps.probs, dtype=float)
    en = sl.offspring.mean(_cap(law))
    if a is not None:
        keep = np.linalg.norm(v, axis=1) <= a
        v, p = v[keep], p[keep]
    return v, p, en


def mean_offspring(law, state):
    """``m_e(0)``: expected number of (surviving) children."""
    sl = law.states[state]
    if isinstance(sl.steps, GaussianSteps):
        en = sl.offspring.mean(_cap(law))
        return en * (_ball_prob(sl.steps, law.truncation, np.zeros(law.dim)) if law.truncation else 1.0)
    v, p, en = _kept(law, state)
    return float(en * p.sum())


def _ball_prob(steps, a, t):
    """P(|Y| <= a) for Y ~ N(mean + var t, var I): the truncation factor of m^a(t)."""
    c = np.asarray(steps.mean) + steps.var * np.asarray(t, dtype=float)
    return float(ncx2.cdf(a * a / steps.var, len(steps.mean), float(c @ c) / steps.var))


def _ball_prob_ratio(steps, a, t):
    c = np.asarray(steps.mean) + steps.var * np.asarray(t, dtype=float)
    x, k, nc = a * a / steps.var, len(steps.mean), float(c @ c) / steps.var
    return float(ncx2.cdf(x, k + 2, nc) / ncx2.cdf(x, k, nc))


def _gaussian_truncated_quad(steps, a, z):
    """m^a(z) / E[N ^ a] by adaptive quadrature over the ball (d <= 2)."""
    mu = np.asarray(steps.mean)
    s2 = steps.var
    d = len(mu)
    z = np.asarray(z, dtype=complex)

    def dens(x):
        return math.exp(-float((x - mu) @ (x - mu)) / (2 * s2)) / (2 * math.pi * s2) ** (d / 2)

    opts = dict(epsabs=0.0, epsrel=1e-10, limit=200)
    if d == 1:
        def f(x, part):
            w = np.exp(z[0] * x) * dens(np.array([x]))
            return w.real if part == 0 else w.imag
        re = integrate.quad(f, -a, a, args=(0,), **opts)[0]
        im = integrate.quad(f, -a, a, args=(1,), **opts)[0]
        return re + 1j * im
    if d == 2:
        def g(theta, r, part):
            x = np.array([r * math.cos(theta), r * math.sin(theta)])
            w = np.exp(z @ x) * dens(x) * r
            return w.real if part == 0 else w.imag
        re = integrate.dblquad(g, 0, a, 0, 2 * math.pi, args=(0,), epsabs=0.0, epsrel=1e-10)[0]
        im = integrate.dblquad(g, 0, a, 0, 2 * math.pi, args=(1,), epsabs=0.0, epsrel=1e-10)[0]
        return re + 1j * im
    raise NotImplementedError("quadrature for truncated gaussian transforms is implemented for d <= 2")


def log_mgf(law, state, z):
    """Return ``(log m_e(z), m_e(z))`` for complex ``z`` of shape ``(..., d)``.

    The logarithm is the continuous branch given by the closed form (for the
    gaussian family ``log E N + <z, mu> + var <z, z> / 2``).
    """
    z = np.asarray(z, dtype=complex)
    if z.shape[-1] != law.dim:
        raise ValueError(f"argument has dimension {z.shape[-1]}, model has {law.dim}")
    sl = law.states[state]
    if isinstance(sl.steps, GaussianSteps):
        en = sl.offspring.mean(_cap(law))
        mu = np.asarray(sl.steps.mean)
        logm = math.log(en) + z @ mu + 0.5 * sl.steps.var * np.sum(z * z, axis=-1)
        if law.truncation is not None:
            logm = logm + _log_truncation_factor(sl.steps, law.truncation, z)
        with np.errstate(over="ignore"):
            return logm, np.exp(logm)
    v, p, en = _kept(law, state)
    if v.shape[0] == 0:
        raise ModelError("truncation eliminates the process")
    s = z @ v.T  # (..., K)
    shift = s.real.max(axis=-1, keepdims=True)
    acc = np.sum(p * np.exp(s - shift), axis=-1)
    logm = math.log(en) + shift[..., 0] + np.log(acc)
    with np.errstate(over="ignore"):
        return logm, np.exp(logm)


def _log_truncation_factor(steps, a, z):
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=complex)
    for i, zi in enumerate(flat):
        if np.all(zi.imag == 0):
            out[i] = math.log(_ball_prob(steps, a, zi.real))
        else:
            # m^a(z) = E[N^a] * int_ball e^{<z,x>} phi(x) dx; divide out the untruncated exponent
            mu = np.asarray(steps.mean)
            full = zi @ mu + 0.5 * steps.var * np.sum(zi * zi)
            out[i] = np.log(_gaussian_truncated_quad(steps, a, zi)) - full
    return out.reshape(z.shape[:-1])


def grad_log_mgf(law, state, t):
    """Gradient in real ``t`` of ``log m_e(t)``: the mean of the tilted step law."""
    t = np.asarray(t, dtype=float)
    sl = law.states[state]
    if isinstance(sl.steps, GaussianSteps):
        g = np.asarray(sl.steps.mean) + sl.steps.var * t
        if law.truncation is not None:
            g = g * _ball_prob_ratio(sl.steps, law.truncation, t)
        return g
    v, p = _tilted_masses(law, state, t)
    return p @ v


def _tilted_masses(law, state, t):
    v, p, _ = _kept(law, state)
    if v.shape[0] == 0:
        raise ModelError("truncation eliminates the process")
    logw = np.log(p) + v @ np.asarray(t, dtype=float)
    w = np.exp(logw - logsumexp(logw))
    return v, w


def tilted_probabilities(law, state, t):
    """Exact masses of the exponentially tilted step law (finite-step families)."""
    return _tilted_masses(law, state, t)


def _require_untruncated(law):
    if law.truncation is not None:
        raise ModelError("truncated laws are evaluation-only and cannot be sampled")


def sample_point_process(law, state, gen):
    """Draw one particle's children ``(N, L_1..L_N)``."""
    counts, steps = sample_children(law, state, 1, gen, gen)
    return PointSample(int(counts[0]), steps)


def sample_children(law, state, n_parents, gen_counts, gen_steps):
    """Children of ``n_parents`` particles: per-parent counts and stacked displacements."""
    _require_untruncated(law)
    sl = law.states[state]
    counts = sl.offspring.sample(gen_counts, n_parents)
    total = int(counts.sum())
    return counts, sample_steps(law, state, total, gen_steps, counts=counts)


def sample_steps(law, state, size, gen, counts=None):
    sl = law.states[state]
    d = law.dim
    if isinstance(sl.steps, GaussianSteps):
        return np.asarray(sl.steps.mean) + math.sqrt(sl.steps.var) * gen.standard_normal((size, d))
    v = np.asarray(sl.steps.vectors, dtype=float)
    if isinstance(sl.steps, EnumeratedSteps):
        return np.tile(v, (size // v.shape[0], 1))
    idx = np.searchsorted(np.cumsum(sl.steps.probs), gen.random(size), side="right")
    return v[np.minimum(idx, v.shape[0] - 1)]


def tilted_step_sampler(law, state, t, gen, size=None):
    """Displacement(s) from the law reweighted by ``exp(<t, x>)``."""
    _require_untruncated(law)
    t = np.asarray(t, dtype=float)
    sl = law.states[state]
    n = 1 if size is None else size
    if isinstance(sl.steps, GaussianSteps):
        mean = np.asarray(sl.steps.mean) + sl.steps.var * t
        out = mean + math.sqrt(sl.steps.var) * gen.standard_normal((n, law.dim))
    else:
        v, w = _tilted_masses(law, state, t)
        idx = np.searchsorted(np.cumsum(w), gen.random(n), side="right")
        out = v[np.minimum(idx, v.shape[0] - 1)]
    return out[0] if size is None else out


def first_moments(law, state):
    """``(pi_e, ell_e, Sigma_e)``: mean offspring, mean step, per-child step covariance."""
    _require_untruncated(law)
    sl = law.states[state]
    pi = mean_offspring(law, state)
    if isinstance(sl.steps, GaussianSteps):
        return pi, np.asarray(sl.steps.mean), sl.steps.var * np.eye(law.dim)
    v = np.asarray(sl.steps.vectors, dtype=float)
    p = np.asarray(sl.steps.probs, dtype=float)
    ell = p @ v
    c = v - ell
    return pi, ell, (c * p[:, None]).T @ c


def step_within_prob(law, state, a):
    """``P_xi(|L_1| <= a)`` for the first child's displacement."""
    sl = law.states[state]
    if isinstance(sl.steps, GaussianSteps):
        return _ball_prob(sl.steps, a, np.zeros(law.dim))
    v = np.asarray(sl.steps.vectors, dtype=float)
    inside = np.linalg.norm(v, axis=1) <= a
    if isinstance(sl.steps, EnumeratedSteps):
        return float(inside[0])
    return float(np.dot(sl.steps.probs, inside))


def truncate(law, a):
    """Truncated law: at most ``floor(a)`` children, children with ``|L| > a`` removed."""
    if not a > 0:
        raise ModelError("truncation level must be positive")
    out = replace(law, truncation=float(a))
    for e in range(law.n_states):
        try:
            alive = mean_offspring(out, e) > 0
        except ModelError:
            alive = False
        if not alive:
            raise ModelError("truncation eliminates the process")
    return out
