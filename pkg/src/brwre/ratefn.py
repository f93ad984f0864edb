"""The log-Laplace rate function, its Legendre conjugate, and region diagnostics.

For a finite-state environment with stationary weights ``pi``

    Lambda(t) = sum_e pi_e log m_e(t),
    Lambda*(alpha) = sup_t { <t, alpha> - Lambda(t) }.

``-Lambda*`` is the growth exponent of the number of particles moving at
velocity ``alpha`` and, on its positive part, the dimension of the level sets.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from . import model, rng
from .env import stationary_distribution
from .sim import polydisc_grid

LEGENDRE_TOL = 1e-9
LEGENDRE_MAX_ITER = 200
BOUNDARY_TOL = 1e-8


class RateFunctionError(ValueError):
    pass


class RateFunction:
    """``Lambda`` for a reproduction law under an environment's stationary law."""

    def __init__(self, law, env_spec, require_supercritical=True):
        if env_spec.n_states != law.n_states:
            raise RateFunctionError(
                f"environment has {env_spec.n_states} states but the model defines {law.n_states}")
        self.law = law
        self.env = env_spec
        self.weights = stationary_distribution(env_spec)
        self.support = [e for e, w in enumerate(self.weights) if w > 0]
        self.dim = law.dim
        if require_supercritical and law.truncation is None:
            if law.prob_not_single(self.weights) <= 0:
                raise RateFunctionError("P(N = 1) = 1: the process is not supercritical")
            if not law.supercritical(self.weights):
                raise RateFunctionError("E log m_0(0) <= 0: the process is not supercritical")

    def _t(self, t):
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            t = t.reshape(1)
        if t.shape[-1] != self.dim:
            raise ValueError(f"argument has dimension {t.shape[-1]}, rate function has {self.dim}")
        return t

    def __call__(self, t):
        t = self._t(t)
        out = 0.0
        for e in self.support:
            out = out + self.weights[e] * model.log_mgf(self.law, e, t)[0].real
        return out if np.ndim(out) else float(out)

    def grad(self, t):
        t = self._t(t)
        return sum(self.weights[e] * model.grad_log_mgf(self.law, e, t) for e in self.support)

    def hess(self, t, h=1e-4):
        """Central finite-difference Hessian from exact gradients."""
        t = self._t(t)
        d = self.dim
        out = np.empty((d, d))
        step = h * max(1.0, float(np.abs(t).max()))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            out[:, j] = (self.grad(t + e) - self.grad(t - e)) / (2 * step)
        return 0.5 * (out + out.T)

    def truncated(self, a):
        return RateFunction(model.truncate(self.law, a), self.env, require_supercritical=False)

    def step_constant(self, a):
        """``E[P_xi(|L_1| <= a)^{-1}]``, exact for finite environments (inf if some state never stays within a)."""
        total = 0.0
        for e in self.support:
            p = model.step_within_prob(self.law, e, a)
            if p == 0:
                return math.inf
            total += self.weights[e] / p
        return total


def lam(rf, t):
    return rf(t)


def grad_lambda(rf, t):
    return rf.grad(t)


@dataclass
class LegendreResult:
    alpha: np.ndarray
    t: np.ndarray
    value: float
    converged: bool
    residual: float
    iterations: int = 0

    @property
    def attained(self):
        return self.converged


def _bisect_coordinates(rf, alpha, t, sweeps=60):
    """Solve ``grad Lambda(t) = alpha`` coordinate-wise; each partial derivative is monotone in its coordinate."""
    t = t.copy()
    for _ in range(sweeps):
        for j in range(rf.dim):
            def g(x):
                s = t.copy()
                s[j] = x
                return rf.grad(s)[j] - alpha[j]
            lo, hi = t[j] - 1.0, t[j] + 1.0
            k = 0
            while g(lo) > 0 and k < 60:
                lo -= 2.0 ** k
                k += 1
            k = 0
            while g(hi) < 0 and k < 60:
                hi += 2.0 ** k
                k += 1
            if g(lo) > 0 or g(hi) < 0:
                continue
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if g(mid) < 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15 * max(1.0, abs(mid)):
                    break
            t[j] = 0.5 * (lo + hi)
        if np.linalg.norm(rf.grad(t) - alpha) <= LEGENDRE_TOL:
            break
    return t


def legendre(rf, alpha, t0=None, tol=LEGENDRE_TOL, max_iter=LEGENDRE_MAX_ITER, max_step=10.0):
    """Maximise the concave map ``t -> <t, alpha> - Lambda(t)`` by damped Newton ascent.

    When the supremum is not attained (``alpha`` outside the closure of the
    gradient range) the iterates diverge; the result then carries
    ``converged=False`` and ``value`` is the best lower bound found.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alpha.shape != (rf.dim,):
        raise ValueError(f"alpha must have shape ({rf.dim},)")
    t = np.zeros(rf.dim) if t0 is None else np.atleast_1d(np.asarray(t0, dtype=float)).copy()

    def f(s):
        v = float(s @ alpha) - rf(s)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite conjugate objective at t={s.tolist()}")
        return v

    ft = f(t)
    best_t, best_f = t.copy(), ft
    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = alpha - rf.grad(t)
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient in Legendre ascent")
        res = float(np.linalg.norm(g))
        if res <= tol:
            return LegendreResult(alpha, t, ft, True, res, it)
        w, v = np.linalg.eigh(rf.hess(t))
        floor = 1e-12 * max(1.0, float(np.abs(w).max()))
        singular = w.min() < floor
        delta = v @ ((v.T @ g) / np.maximum(w, floor))
        norm = np.linalg.norm(delta)
        if norm > max_step:
            delta *= max_step / norm
        slope = float(g @ delta)
        if slope < 1e-10 * max(1.0, abs(ft)):
            # predicted gain below rounding of the objective: judge by the gradient residual
            cand = t + delta
            if np.linalg.norm(alpha - rf.grad(cand)) < res:
                t, ft = cand, f(cand)
                if ft > best_f:
                    best_t, best_f = t.copy(), ft
                continue
        step = 1.0
        improved = False
        for _ in range(60):
            cand = t + step * delta
            fc = f(cand)
            if fc >= ft + 1e-4 * step * slope:
                improved = True
                break
            step *= 0.5
        if not improved:
            if singular:
                t = _bisect_coordinates(rf, alpha, t)
                ft = f(t)
                continue
            # objective flat to rounding: accept the Newton point if it lowers the residual
            cand = t + delta
            if np.linalg.norm(alpha - rf.grad(cand)) < res:
                t, ft = cand, f(cand)
                continue
            break
        t, ft = cand, fc
        if ft > best_f:
            best_t, best_f = t.copy(), ft
    g = alpha - rf.grad(t)
    res = float(np.linalg.norm(g))
    if res <= tol:
        return LegendreResult(alpha, t, ft, True, res, it)
    return LegendreResult(alpha, best_t, best_f, False, res, it)


def conjugate_at_gradient(rf, t):
    """``Lambda*(grad Lambda(t)) = <t, grad Lambda(t)> - Lambda(t)``."""
    t = rf._t(t)
    return float(t @ rf.grad(t)) - rf(t)


def in_I(rf, t):
    return conjugate_at_gradient(rf, t) < 0


@dataclass
class Alpha0Result:
    value: float
    argmin: np.ndarray
    spacing: float
    refined_spacing: float
    points: int


_EVAL_CHUNK = 1 << 18


def _min_abs_m(law, state, pts):
    best, arg = math.inf, None
    for lo in range(0, pts.shape[0], _EVAL_CHUNK):
        chunk = pts[lo:lo + _EVAL_CHUNK]
        lm, _ = model.log_mgf(law, state, chunk)
        a = lm.real
        i = int(np.argmin(a))
        if a[i] < best:
            best, arg = float(a[i]), chunk[i].copy()
    return math.exp(best), arg


def alpha0_inf(law, state, z0, eps, res=64, extra_points=None, budget=2_000_000):
    """Grid infimum of ``|m_e|`` over the closed polydisc ``D(z0, eps)``.

    Each complex coordinate is sampled on a ``res x res`` grid clipped to the
    disc, then once more on a grid of the same resolution around the argmin.
    The value is an upper bound on the true infimum.  For ``d >= 2`` the
    resolution is lowered until the product grid fits ``budget`` points.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=complex))
    d = z0.size
    r = res
    # both passes count: the clipped disc grid and the square refinement grid
    while d > 1 and (0.785 * r * r) ** d + (r * r) ** d > budget and r > 5:
        r -= 1
    pts = polydisc_grid(z0, eps, r)
    value, arg = _min_abs_m(law, state, pts)
    spacing = 2 * eps / (r - 1)
    if extra_points is not None:
        v2, a2 = _min_abs_m(law, state, np.asarray(extra_points, dtype=complex).reshape(-1, d))
        if v2 < value:
            value, arg = v2, a2
    # refinement: shrink to +/- 2 spacings around the argmin, stay inside the polydisc
    half = 2 * spacing
    axis = np.linspace(-half, half, r)
    re, im = np.meshgrid(axis, axis, indexing="ij")
    local = (re + 1j * im).ravel()
    per_coord = []
    for j in range(d):
        c = arg[j] + local
        per_coord.append(c[np.abs(c - z0[j]) <= eps * (1 + 1e-12)])
    mesh = np.meshgrid(*per_coord, indexing="ij")
    fine = np.stack([m.ravel() for m in mesh], axis=1)
    v3, a3 = _min_abs_m(law, state, fine)
    if v3 < value:
        value, arg = v3, a3
    return Alpha0Result(value, arg, spacing, 2 * half / (r - 1), pts.shape[0] + fine.shape[0])


def mean_log_minus_alpha0(rf, t, delta, res=64):
    """``E log^- alpha_0(t, delta)`` over the stationary environment law."""
    total = 0.0
    for e in rf.support:
        a0 = alpha0_inf(rf.law, e, np.asarray(t, dtype=complex), delta, res=res).value
        total += rf.weights[e] * max(0.0, -math.log(a0)) if a0 > 0 else math.inf
    return total


def _compositions(n, k):
    for cut in itertools.combinations(range(n + k - 1), k - 1):
        prev, out = -1, []
        for c in cut:
            out.append(c - prev - 1)
            prev = c
        out.append(n + k - 2 - prev)
        yield out


def _exact_moment(law, state, t, p):
    """``E_xi Z~_1(t)^p`` by enumeration for finite-step families."""
    sl = law.states[state]
    v = np.asarray(sl.steps.vectors, dtype=float)
    w = np.exp(v @ t)
    if isinstance(sl.steps, model.EnumeratedSteps):
        return float(w.sum() ** p)
    probs = np.asarray(sl.steps.probs)
    total = 0.0
    for nn, pn in zip(sl.offspring.values, sl.offspring.probs):
        if pn == 0:
            continue
        acc = 0.0
        for comp in _compositions(nn, len(probs)):
            logc = math.lgamma(nn + 1) - sum(math.lgamma(c + 1) for c in comp)
            logc += sum(c * math.log(q) for c, q in zip(comp, probs) if c)
            if any(c and q == 0 for c, q in zip(comp, probs)):
                continue
            acc += math.exp(logc) * float(np.dot(comp, w)) ** p
        total += pn * acc
    return total


def _mc_moment(law, state, t, p, samples, seed):
    g = rng.stream(seed, rng.MOMENT, state)
    sl = law.states[state]
    counts = sl.offspring.sample(g, samples)
    steps = model.sample_steps(law, state, int(counts.sum()), g)
    owner = np.repeat(np.arange(samples), counts)
    z1 = np.bincount(owner, weights=np.exp(steps @ t), minlength=samples)
    x = z1 ** p
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(samples))


@dataclass
class RegionReport:
    t: np.ndarray
    in_I: bool
    conjugate_value: float
    omega1_diag: list = field(default_factory=list)   # (p, E log+ E_xi Z~_1(t)^p, standard error)
    omega2_diag: tuple = None                          # (delta, E log- alpha_0(t, delta))
    alpha: np.ndarray = None
    in_J_image: bool = False
    legendre_value: float = None


def region(rf, t, delta=0.1, ps=(1.1, 1.5, 2.0), samples=100_000, seed=0, res=64):
    """Membership report for the convergence region at ``t``.

    ``in_I`` is exact.  The moment and ``alpha_0`` entries are diagnostics:
    exact sums for the finite-step families, Monte Carlo (with standard
    error) for the gaussian family, grid values for ``alpha_0``.
    """
    t = rf._t(t)
    val = conjugate_at_gradient(rf, t)
    diag = []
    for p in ps:
        acc, se = 0.0, 0.0
        for e in rf.support:
            sl = rf.law.states[e]
            if isinstance(sl.steps, model.GaussianSteps):
                mean, err = _mc_moment(rf.law, e, t, p, samples, seed)
            else:
                mean, err = _exact_moment(rf.law, e, t, p), 0.0
            acc += rf.weights[e] * max(0.0, math.log(mean))
            se += (rf.weights[e] * err / mean) ** 2
        diag.append((p, acc, math.sqrt(se)))
    alpha = rf.grad(t)
    lr = legendre(rf, alpha, t0=t)
    return RegionReport(t, val < 0, val, diag, (delta, mean_log_minus_alpha0(rf, t, delta, res)),
                        alpha, lr.value < 0, lr.value)


def spectrum_curve(rf, alphas):
    """Rows ``(alpha, -Lambda*(alpha), alpha in J~, converged)``.

    Membership ``Lambda*(alpha) < 0`` is decided on the certified lower bound,
    with values within ``BOUNDARY_TOL`` of zero treated as the boundary.
    """
    rows = []
    t0 = None
    for a in np.atleast_2d(np.asarray(alphas, dtype=float).reshape(len(alphas), -1)):
        r = legendre(rf, a, t0=t0)
        if r.converged:
            t0 = r.t
        rows.append({"alpha": a, "dimension": -r.value, "in_J_tilde": r.value < -BOUNDARY_TOL,
                     "converged": r.converged, "t_star": r.t, "residual": r.residual})
    return rows


def empirical_pressure(run, ts, rf=None):
    """``(1/n) log Z~_n(t)`` at the run's last generation, paired with ``Lambda(t)``."""
    from .sim import log_laplace_sum, log_normalizer

    n = run.horizon
    frame = run.frame(n)
    rows = []
    for t in np.atleast_2d(np.asarray(ts, dtype=float).reshape(len(ts), -1)):
        pressure = log_laplace_sum(frame.positions, t).real / n
        row = {"t": t, "n": n, "pressure": pressure,
               "quenched": log_normalizer(run.law, run.path, n, t).real / n, "cap_hit": run.cap_hit}
        if rf is not None:
            row["Lambda"] = rf(t)
        rows.append(row)
    return rows


@dataclass
class TruncationTables:
    levels: tuple
    ts: np.ndarray
    alphas: np.ndarray
    lam: np.ndarray        # (levels + 1, ts); last row untruncated
    lam_star: np.ndarray   # (levels + 1, alphas)
    converged: np.ndarray


def truncated_rate(rf, levels, ts, alphas):
    """``Lambda_a`` and ``Lambda_a*`` for each truncation level, with the untruncated row last."""
    ts = np.asarray(ts, dtype=float).reshape(len(ts), -1)
    alphas = np.asarray(alphas, dtype=float).reshape(len(alphas), -1)
    fns = [rf.truncated(a) for a in levels] + [rf]
    lam_tab = np.array([[f(t) for t in ts] for f in fns])
    star, conv = [], []
    for f in fns:
        rs = [legendre(f, a) for a in alphas]
        star.append([r.value for r in rs])
        conv.append([r.converged for r in rs])
    return TruncationTables(tuple(levels), ts, alphas, lam_tab, np.array(star), np.array(conv))
