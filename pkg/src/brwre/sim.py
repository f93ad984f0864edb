"""Generation-by-generation simulation under the quenched law.

Particles of generation ``n`` are stored as one flat ``(M, d)`` position array.
Randomness for generation ``g`` and parent block ``b`` comes from a stream keyed
on ``(seed, g, b)``, so a run is bit-identical whatever the worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np

from . import model, rng
from .regions import Box

DEFAULT_CAP = 10 ** 7
BLOCK = 1 << 14
VANISH_LOG_RATIO = -30.0  # |m(z)| / m(Re z) < ~1e-13


class SimulationError(RuntimeError):
    pass


@dataclass
class GenerationFrame:
    n: int
    positions: np.ndarray = field(repr=False)
    parents: np.ndarray = field(default=None, repr=False)

    @property
    def size(self):
        return self.positions.shape[0]


@dataclass
class TreeRun:
    law: model.ReproductionLaw
    path: object
    seed: int
    cap: int
    frames: dict = field(repr=False)
    horizon: int = 0
    requested: int = 0
    cap_hit: bool = False
    genealogy: bool = False

    def frame(self, n):
        try:
            return self.frames[n]
        except KeyError:
            raise SimulationError(f"frame {n} is not available (run reached {self.horizon}, "
                                  f"cap_hit={self.cap_hit})") from None

    def sizes(self):
        return {n: f.size for n, f in sorted(self.frames.items())}


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_generations(law, path, n, cap=DEFAULT_CAP, seed=0, genealogy=False, keep="all", threads=1):
    """Simulate generations ``0..n`` along the environment ``path``.

    Stops early with ``cap_hit`` set when a generation would exceed ``cap``
    particles; no particles are ever silently dropped.  ``keep='last'`` retains
    only the final frame (and frame 0).
    """
    if n > len(path):
        raise SimulationError(f"horizon {n} exceeds environment path length {len(path)}")
    if cap < 1:
        raise SimulationError("particle cap must be at least 1")
    if keep not in ("all", "last"):
        raise ValueError("keep must be 'all' or 'last'")
    if genealogy and keep != "all":
        raise ValueError("genealogy mode needs every frame")
    d = law.dim
    pos = np.zeros((1, d))
    frames = {0: GenerationFrame(0, pos)}
    run = TreeRun(law, path, seed, cap, frames, 0, n, False, genealogy)
    for g in range(n):
        state = path[g]
        m = pos.shape[0]
        blocks = [(b, b * BLOCK, min(m, (b + 1) * BLOCK)) for b in range(-(-m // BLOCK))]
        off = law.states[state].offspring
        counts = [off.sample(rng.stream(seed, rng.TREE_COUNTS, g, b), hi - lo) for b, lo, hi in blocks]
        total = int(sum(int(c.sum()) for c in counts))
        if total > cap:
            run.cap_hit = True
            break

        def expand(item, pos=pos, state=state, g=g):
            (b, lo, hi), c = item
            steps = model.sample_steps(law, state, int(c.sum()), rng.stream(seed, rng.TREE_STEPS, g, b), counts=c)
            return np.repeat(pos[lo:hi], c, axis=0) + steps

        children = _map(expand, list(zip(blocks, counts)), threads)
        new = np.concatenate(children, axis=0) if len(children) > 1 else children[0]
        allc = np.concatenate(counts)
        if new.shape[0] != int(allc.sum()):
            raise SimulationError("population identity violated")
        parents = np.repeat(np.arange(m, dtype=np.int64), allc) if genealogy else None
        pos = new
        if keep == "last" and g > 0:
            frames.pop(g, None)
        frames[g + 1] = GenerationFrame(g + 1, pos, parents)
        run.horizon = g + 1
    return run


def counting_measure(run, n, region):
    """``Z_n(A)``: number of generation-``n`` particles in ``region``."""
    return int(np.count_nonzero(region.contains(run.frame(n).positions)))


@dataclass(frozen=True)
class LaplaceValue:
    z: np.ndarray
    log_Z: complex
    log_P: complex

    @property
    def Z(self):
        return complex(np.exp(self.log_Z))

    @property
    def P(self):
        return complex(np.exp(self.log_P))

    @property
    def W(self):
        return complex(np.exp(self.log_Z - self.log_P))


def log_normalizer(law, path, n, z, start=0):
    """``log P_n(z) = sum_{i<n} log m_{xi_{start+i}}(z)``, raising if some factor vanishes."""
    z = np.asarray(z, dtype=complex)
    seg = path.states[start:start + n]
    counts = np.bincount(seg, minlength=law.n_states)
    total = 0.0 + 0.0j
    for e in np.nonzero(counts)[0]:
        lm, _ = model.log_mgf(law, int(e), z)
        # |m(z)| <= m(Re z); cancellation beyond float precision counts as a zero
        scale = model.log_mgf(law, int(e), z.real.astype(complex))[0].real
        if not np.isfinite(lm.real) or lm.real - scale < VANISH_LOG_RATIO:
            raise SimulationError("Laplace normalizer vanished")
        total += counts[e] * complex(lm)
    return total


def log_laplace_sum(positions, z):
    """``log sum_u exp(<z, S_u>)`` with shift by the largest real part."""
    z = np.asarray(z, dtype=complex)
    s = positions @ z
    if not np.iscomplexobj(z) or np.all(z.imag == 0):
        s = s.real
    c = float(np.max(s.real))
    acc = np.sum(np.exp(s - c))
    if acc == 0:
        return -np.inf + 0j
    return c + np.log(complex(acc))


def laplace(run, n, z):
    """``Z~_n(z)``, ``P_n(z)`` and ``W_n(z)`` in log form."""
    z = np.asarray(z, dtype=complex)
    log_z = log_laplace_sum(run.frame(n).positions, z)
    log_p = log_normalizer(run.law, run.path, n, z)
    return LaplaceValue(z, complex(log_z), complex(log_p))


@dataclass
class MartingalePanel:
    zs: np.ndarray
    ns: tuple
    W: np.ndarray          # (replicates, grid, len(ns)) complex
    sup_increment: np.ndarray  # (replicates, len(ns)): sup_z |W_{n+1}(z) - W_n(z)|
    excluded: int
    seed: int
    replicate_ids: tuple = ()

    def rows(self):
        out = []
        for i, z in enumerate(self.zs):
            for j, n in enumerate(self.ns):
                w = self.W[:, i, j]
                k = w.size
                out.append({
                    "z_index": i, "n": n, "replicates": k,
                    "mean_re": float(w.real.mean()), "mean_im": float(w.imag.mean()),
                    "var": float(np.mean(np.abs(w - w.mean()) ** 2) * k / max(k - 1, 1)),
                    "mean_sup_increment": float(self.sup_increment[:, j].mean()),
                })
        return out


def martingale_panel(law, env_spec, zs, ns, replicates, seed, cap=DEFAULT_CAP, quenched=False, threads=1):
    """Replicated ``W_n(z)`` on a grid, plus the Cauchy increment ``sup_z |W_{n+1} - W_n|``.

    With ``quenched=True`` all replicates share one environment path.
    """
    from .env import sample_path

    zs = np.atleast_2d(np.asarray(zs, dtype=complex))
    ns = tuple(int(x) for x in ns)
    horizon = max(ns) + 1
    shared = sample_path(env_spec, horizon, rng.derive_seed(seed, rng.PATH)) if quenched else None

    def one(r):
        path = shared if quenched else sample_path(env_spec, horizon, rng.derive_seed(seed, rng.PATH, r))
        run = run_generations(law, path, horizon, cap, rng.derive_seed(seed, rng.REPLICATE, r))
        if run.cap_hit:
            return None
        w = np.empty((len(zs), len(ns)), dtype=complex)
        inc = np.zeros(len(ns))
        for i, z in enumerate(zs):
            for j, n in enumerate(ns):
                w[i, j] = laplace(run, n, z).W
                inc[j] = max(inc[j], abs(laplace(run, n + 1, z).W - w[i, j]))
        return w, inc

    results = _map(one, list(range(replicates)), threads)
    ids = tuple(r for r, x in enumerate(results) if x is not None)
    kept = [results[r] for r in ids]
    if not kept:
        raise SimulationError("every replicate hit the particle cap")
    return MartingalePanel(zs, ns, np.stack([k[0] for k in kept]), np.stack([k[1] for k in kept]),
                           replicates - len(kept), seed, ids)


def polydisc_offsets(eps, res):
    """Offsets ``w`` with ``|w| <= eps`` on a ``res x res`` grid in the complex plane."""
    axis = np.linspace(-eps, eps, res)
    re, im = np.meshgrid(axis, axis, indexing="ij")
    w = (re + 1j * im).ravel()
    return w[np.abs(w) <= eps * (1 + 1e-12)]


def polydisc_grid(z0, eps, res):
    """Product grid over the closed polydisc ``D(z0, eps)``, shape ``(G, d)``."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=complex))
    w = polydisc_offsets(eps, res)
    mesh = np.meshgrid(*([w] * z0.size), indexing="ij")
    return z0 + np.stack([m.ravel() for m in mesh], axis=1)


def corner_set(z0, eps):
    """The ``2^d`` real corners ``Re z0 +/- eps``."""
    x0 = np.atleast_1d(np.asarray(z0, dtype=complex)).real
    mesh = np.meshgrid(*[[x - eps, x + eps] for x in x0], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class EnvelopeReport:
    z0: np.ndarray
    eps: float
    alpha0: float
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def vacuous(self):
        return not self.alpha0 > 0

    @property
    def violations(self):
        if self.vacuous:
            return 0
        return int(np.count_nonzero(self.lhs > self.rhs))


def envelope_check(law, state, z0, eps, replicates, seed, grid_res=9):
    """Check ``sup_D |W_1| <= alpha_0^{-1} sum_corners Z~_1(s)`` on sampled first generations.

    ``alpha_0`` is a grid infimum over a grid that contains every point where
    ``|W_1|`` is probed, so ``|m(z)| >= alpha_0`` holds at each probe and the
    comparison is sound even though ``alpha_0`` overestimates the true infimum.
    """
    from .ratefn import alpha0_inf

    if not eps > 0:
        raise ValueError("eps must be positive")
    probes = polydisc_grid(z0, eps, grid_res)
    a0 = alpha0_inf(law, state, z0, eps, extra_points=probes).value
    _, m_probe = model.log_mgf(law, state, probes)
    corners = corner_set(z0, eps)
    lhs = np.empty(replicates)
    rhs = np.empty(replicates)
    for r in range(replicates):
        g = rng.stream(seed, rng.ENVELOPE, r)
        ps = model.sample_point_process(law, state, g)
        z1 = np.exp(ps.displacements @ probes.T).sum(axis=0)
        lhs[r] = float(np.max(np.abs(z1 / m_probe)))
        rhs[r] = float(np.exp(ps.displacements @ corners.T).sum()) / a0 if a0 > 0 else np.inf
    return EnvelopeReport(np.atleast_1d(np.asarray(z0, dtype=complex)), eps, a0, lhs, rhs)


@dataclass
class SpineTrajectory:
    t: np.ndarray
    steps: np.ndarray
    partial_sums: np.ndarray

    @property
    def velocity(self):
        n = self.steps.shape[0]
        return self.partial_sums[-1] / n if n else np.zeros_like(self.t)


def spine_sample(law, path, t, n, seed):
    """A ray typical for the Mandelbrot measure: step ``k`` is tilted by ``exp(<t, x>)`` at state ``xi_k``."""
    if n > len(path):
        raise SimulationError(f"horizon {n} exceeds environment path length {len(path)}")
    t = np.asarray(t, dtype=float).reshape(law.dim)
    d = law.dim
    steps = np.empty((n, d))
    states = path.states[:n]
    tilted = {}
    for e in np.unique(states).tolist():
        sl = law.states[e]
        if isinstance(sl.steps, model.GaussianSteps):
            tilted[e] = ("g", np.asarray(sl.steps.mean) + sl.steps.var * t, math.sqrt(sl.steps.var))
        else:
            v, w = model.tilted_probabilities(law, e, t)
            tilted[e] = ("c", v, np.cumsum(w))
    for b in range(-(-n // BLOCK)):
        lo, hi = b * BLOCK, min(n, (b + 1) * BLOCK)
        g = rng.stream(seed, rng.SPINE, b)
        normals = g.standard_normal((hi - lo, d))
        unif = g.random(hi - lo)
        seg = states[lo:hi]
        for e, spec in tilted.items():
            idx = np.nonzero(seg == e)[0]
            if spec[0] == "g":
                steps[lo + idx] = spec[1] + spec[2] * normals[idx]
            else:
                k = np.minimum(np.searchsorted(spec[2], unif[idx], side="right"), spec[1].shape[0] - 1)
                steps[lo + idx] = spec[1][k]
    partial = np.vstack([np.zeros((1, d)), np.cumsum(steps, axis=0)])
    return SpineTrajectory(t, steps, partial)


def ancestors(run, n, m):
    """Index in frame ``n`` of the ancestor of every particle of frame ``n + m``."""
    if not run.genealogy:
        raise SimulationError("ancestry queries need a run with genealogy=True")
    if n + m > run.horizon:
        raise SimulationError(f"lookahead {m} from generation {n} exceeds available frames ({run.horizon})")
    anc = np.arange(run.frame(n + m).size)
    for g in range(n + m, n, -1):
        anc = run.frame(g).parents[anc]
    return anc


@dataclass
class MandelbrotWeights:
    n: int
    lookahead: int
    t: np.ndarray
    log_weight: np.ndarray
    log_weight_short: np.ndarray = None  # lookahead - 1, for sensitivity

    @property
    def weight(self):
        return np.exp(self.log_weight)

    @property
    def rate(self):
        return self.log_weight / self.n


def _log_weights(run, n, t, m):
    t = np.asarray(t, dtype=float)
    anc = ancestors(run, n, m)
    vals = run.frame(n + m).positions @ t
    c = float(vals.max())
    sums = np.bincount(anc, weights=np.exp(vals - c), minlength=run.frame(n).size)
    log_p = log_normalizer(run.law, run.path, n + m, t).real
    with np.errstate(divide="ignore"):
        return c + np.log(sums) - log_p


def mandelbrot_weights(run, n, t, lookahead=6):
    """``X~_u(t) W_m(u, t)`` for every ``u`` in generation ``n`` (finite-horizon Mandelbrot cylinder masses)."""
    lw = _log_weights(run, n, t, lookahead)
    short = _log_weights(run, n, t, lookahead - 1) if lookahead >= 1 else None
    return MandelbrotWeights(n, lookahead, np.asarray(t, dtype=float), lw, short)


def mandelbrot_ray_weight(run, u, n, t, lookahead=6):
    """``(weight, (1/n) log weight)`` for the cylinder of particle ``u`` of generation ``n``."""
    if not 0 <= u < run.frame(n).size:
        raise SimulationError(f"particle {u} not in generation {n}")
    lw = mandelbrot_weights(run, n, t, lookahead).log_weight[u]
    return float(np.exp(lw)), float(lw / n) if n else float("nan")


def subtree_W(run, u, n, t, m):
    """``W_m(u, t)`` computed directly from the subtree of ``u`` (independent of :func:`mandelbrot_weights`)."""
    t = np.asarray(t, dtype=float)
    members = np.array([u])
    for g in range(n + 1, n + m + 1):
        members = np.nonzero(np.isin(run.frame(g).parents, members))[0]
    rel = run.frame(n + m).positions[members] - run.frame(n).positions[u]
    z = np.exp(rel @ t).sum()
    p = math.exp(log_normalizer(run.law, run.path, m, t, start=n).real)
    return float(z / p)


def frame_to_csv(frame, handle):
    d = frame.positions.shape[1]
    handle.write("generation,particle," + ",".join(f"S{j + 1}" for j in range(d)) + "\n")
    for i, row in enumerate(frame.positions.tolist()):
        handle.write(f"{frame.n},{i}," + ",".join(f"{x:.17g}" for x in row) + "\n")


def whole_space(dim):
    return Box.everything(dim)
