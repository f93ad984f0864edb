"""Finite-state stationary environments in time.

An environment is a stationary ergodic sequence of states ``xi_0, xi_1, ...``;
each state selects the reproduction law used by the whole generation living at
that time.  Three kinds are supported: a constant (deterministic) state, i.i.d.
draws from a weight vector, and a stationary Markov chain.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng

KINDS = ("deterministic", "iid", "markov")
_BLOCK = 4096
_TOL = 1e-12


class EnvironmentSpecError(ValueError):
    """Raised for an invalid or non-ergodic environment specification."""


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: str
    n_states: int = 1
    weights: tuple = None
    transition: tuple = None
    fixed_state: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EnvironmentSpecError(f"environment kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "iid":
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or w.size == 0:
                raise EnvironmentSpecError("iid environment needs a nonempty weight vector")
            if (w < 0).any() or abs(w.sum() - 1.0) > _TOL:
                raise EnvironmentSpecError(f"weights must be nonnegative and sum to 1, got {w.tolist()}")
            object.__setattr__(self, "weights", tuple(w.tolist()))
            object.__setattr__(self, "n_states", w.size)
        elif self.kind == "markov":
            try:
                p = np.asarray(self.transition, dtype=float)
            except (TypeError, ValueError):
                raise EnvironmentSpecError("transition matrix must be a square array of numbers") from None
            if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
                raise EnvironmentSpecError("markov environment needs a square transition matrix")
            if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > _TOL:
                raise EnvironmentSpecError("transition rows must be nonnegative and sum to 1")
            object.__setattr__(self, "transition", tuple(tuple(r) for r in p.tolist()))
            object.__setattr__(self, "n_states", p.shape[0])
        else:
            if not 0 <= self.fixed_state < self.n_states:
                raise EnvironmentSpecError(
                    f"fixed_state {self.fixed_state} outside 0..{self.n_states - 1}")

    @classmethod
    def deterministic(cls, n_states=1, state=0):
        return cls("deterministic", n_states=n_states, fixed_state=state)

    @classmethod
    def iid(cls, weights):
        return cls("iid", weights=tuple(weights))

    @classmethod
    def markov(cls, transition):
        return cls("markov", transition=tuple(map(tuple, transition)))

    @property
    def states(self):
        return tuple(range(self.n_states))

    @property
    def transition_matrix(self):
        return np.asarray(self.transition, dtype=float)

    def to_dict(self):
        if self.kind == "iid":
            return {"kind": "iid", "weights": list(self.weights)}
        if self.kind == "markov":
            return {"kind": "markov", "transition": [list(r) for r in self.transition]}
        d = {"kind": "deterministic"}
        if self.n_states != 1 or self.fixed_state != 0:
            d.update(n_states=self.n_states, state=self.fixed_state)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        allowed = {"iid": {"weights"}, "markov": {"transition"},
                   "deterministic": {"n_states", "state"}}.get(kind)
        if allowed is None:
            raise EnvironmentSpecError(f"environment.kind must be one of {KINDS}, got {kind!r}")
        extra = set(d) - allowed
        if extra:
            raise EnvironmentSpecError(f"unknown environment keys: {sorted(extra)}")
        if kind == "iid":
            return cls.iid(d["weights"])
        if kind == "markov":
            return cls.markov(d["transition"])
        return cls.deterministic(d.get("n_states", 1), d.get("state", 0))


@dataclass(frozen=True)
class EnvironmentPath:
    """A realised environment ``xi_offset, xi_offset+1, ...``.

    ``shift(k)`` is the path seen by a subtree rooted at generation ``k``.
    """

    spec: EnvironmentSpec
    states: np.ndarray = field(repr=False)
    offset: int = 0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        s.setflags(write=False)
        if s.size and (s.min() < 0 or s.max() >= self.spec.n_states):
            raise EnvironmentSpecError("path contains a state id outside the spec")
        object.__setattr__(self, "states", s)

    def __len__(self):
        return self.states.size

    def __getitem__(self, i):
        return int(self.states[i])

    def shift(self, k):
        if not 0 <= k <= len(self):
            raise IndexError(f"shift {k} outside path of length {len(self)}")
        return EnvironmentPath(self.spec, self.states[k:], self.offset + k)

    def view(self, k, m):
        if k + m > len(self):
            raise IndexError("view runs past the end of the path")
        return EnvironmentPath(self.spec, self.states[k:k + m], self.offset + k)

    def to_csv(self, handle):
        handle.write("index,state\n")
        for i, s in enumerate(self.states.tolist()):
            handle.write(f"{self.offset + i},{s}\n")


@dataclass(frozen=True)
class MixingProfile:
    """Geometric bound ``phi(n) <= c * r**n`` on the phi-mixing coefficients."""

    c: float
    r: float
    theta: float = 2.0

    def __post_init__(self):
        if self.c < 0 or not 0 <= self.r < 1:
            raise ValueError(f"mixing bound needs c >= 0 and 0 <= r < 1, got c={self.c}, r={self.r}")
        if self.theta <= 1:
            raise ValueError("theta must exceed 1")

    def phi(self, n):
        return min(1.0, self.c * self.r ** n)

    def summed_root(self, theta=None):
        """Upper bound on ``sum_{n>=1} phi(n)**(1/theta)`` (finite for geometric bounds)."""
        th = self.theta if theta is None else theta
        if self.c == 0 or self.r == 0:
            return 0.0
        q = self.r ** (1.0 / th)
        return self.c ** (1.0 / th) * q / (1.0 - q)


def _reachable(p, start):
    seen = {start}
    frontier = [start]
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(p[i] > 0)[0].tolist():
            if j not in seen:
                seen.add(j)
                frontier.append(j)
    return seen


def check_irreducible(spec):
    """Raise if the chain is reducible, naming the states unreachable from some state."""
    p = spec.transition_matrix
    k = p.shape[0]
    for s in range(k):
        missing = sorted(set(range(k)) - _reachable(p, s))
        if missing:
            raise EnvironmentSpecError(
                f"markov chain is not irreducible: states {missing} unreachable from state {s}")


def check_aperiodic(spec):
    """Raise unless some power ``P**j`` with ``j <= K**2`` is strictly positive."""
    p = spec.transition_matrix
    k = p.shape[0]
    q = (p > 0).astype(float)
    acc = q.copy()
    for _ in range(k * k):
        if (acc > 0).all():
            return
        acc = ((acc @ q) > 0).astype(float)
    raise EnvironmentSpecError("markov chain is periodic: no power up to K^2 is strictly positive")


def stationary_distribution(spec):
    if spec.kind == "deterministic":
        pi = np.zeros(spec.n_states)
        pi[spec.fixed_state] = 1.0
        return pi
    if spec.kind == "iid":
        return np.asarray(spec.weights, dtype=float)
    check_irreducible(spec)
    p = spec.transition_matrix
    k = p.shape[0]
    a = np.vstack([p.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _uniforms(seed, start, stop):
    """Uniforms for indices ``start..stop-1``; index i always gets the same value."""
    out = np.empty(stop - start)
    b0, b1 = start // _BLOCK, (stop - 1) // _BLOCK if stop > start else -1
    for b in range(b0, b1 + 1):
        u = rng.stream(seed, rng.ENV, b).random(_BLOCK)
        lo = max(start, b * _BLOCK)
        hi = min(stop, (b + 1) * _BLOCK)
        out[lo - start:hi - start] = u[lo - b * _BLOCK:hi - b * _BLOCK]
    return out


def sample_path(spec, n, seed):
    """Sample ``xi_0..xi_{n-1}``; Markov chains start from the stationary law."""
    if n < 0:
        raise ValueError("path length must be nonnegative")
    if spec.kind == "deterministic":
        return EnvironmentPath(spec, np.full(n, spec.fixed_state, dtype=np.int64))
    u = _uniforms(seed, 0, n)
    if spec.kind == "iid":
        cum = np.cumsum(spec.weights)
        states = np.minimum(np.searchsorted(cum, u, side="right"), spec.n_states - 1)
        return EnvironmentPath(spec, states)
    pi = stationary_distribution(spec)
    cum = np.cumsum(spec.transition_matrix, axis=1)
    states = np.empty(n, dtype=np.int64)
    if n == 0:
        return EnvironmentPath(spec, states)
    # nxt[s][i]: state at index i if the chain sits in s at index i-1
    nxt = [np.minimum(np.searchsorted(cum[s], u, side="right"), spec.n_states - 1).tolist()
           for s in range(spec.n_states)]
    x = min(int(np.searchsorted(np.cumsum(pi), u[0], side="right")), spec.n_states - 1)
    states[0] = x
    out = [x]
    for i in range(1, n):
        x = nxt[x][i]
        out.append(x)
    states[:] = out
    return EnvironmentPath(spec, states)


def mixing_bound(spec, theta=2.0):
    """Geometric phi-mixing bound from the second eigenvalue modulus of P."""
    if spec.kind != "markov":
        return MixingProfile(0.0, 0.0, theta)
    check_irreducible(spec)
    check_aperiodic(spec)
    p = spec.transition_matrix
    k = p.shape[0]
    pi = stationary_distribution(spec)
    moduli = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
    r = float(moduli[1]) if k > 1 else 0.0
    if r < 1e-14:
        return MixingProfile(1.0, 0.0, theta)

    def ratios(rate, horizon):
        acc = np.eye(k)
        out = []
        for j in range(1, horizon + 1):
            acc = acc @ p
            tv = 0.5 * np.abs(acc - pi).sum(axis=1).max()
            if tv < 1e-8:  # below this the ratio is dominated by round-off
                break
            out.append(tv / rate ** j)
        return np.array(out) if out else np.array([1.0])

    horizon = 4 * k + 60
    rr = ratios(r, horizon)
    # a Jordan block makes tv/r^n grow polynomially; inflate r until the ratio is bounded
    half = max(1, rr.size // 2)
    while rr.size > 2 and rr[half:].max() > rr[:half].max() * (1 + 1e-3) and r < 1:
        r = 0.5 * (r + 1.0)
        rr = ratios(r, horizon)
        half = max(1, rr.size // 2)
    # phi(n) is bounded by twice the worst-row total variation; 1% margin absorbs round-off
    c = 2.02 * float(rr.max())
    return MixingProfile(c, r, theta)


def asymptotic_variance(spec, f):
    """Long-run variance ``lim Var(sum_{k<n} f(xi_k)) / n`` of a state function under the stationary chain."""
    f = np.asarray(f, dtype=float)
    pi = stationary_distribution(spec)
    fc = f - pi @ f
    if spec.kind == "deterministic":
        return 0.0
    if spec.kind == "iid":
        return float(pi @ fc ** 2)
    p = spec.transition_matrix
    fundamental = np.linalg.inv(np.eye(p.shape[0]) - p + np.outer(np.ones(p.shape[0]), pi))
    return float(max(0.0, 2.0 * pi @ (fc * (fundamental @ fc)) - pi @ fc ** 2))
