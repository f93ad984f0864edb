"""Subsets of R^d used for counting queries."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box.

    Half-open ``[lower, upper)`` per coordinate by default so that tilings sum
    exactly; ``closed=True`` gives ``[lower, upper]``.  Infinite bounds are allowed.
    """

    lower: tuple
    upper: tuple
    closed: bool = False

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise ValueError("box lower and upper bounds differ in dimension")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box has lower > upper: {lo} vs {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def everything(cls, dim):
        return cls((-np.inf,) * dim, (np.inf,) * dim, closed=True)

    @property
    def dim(self):
        return len(self.lower)

    def contains(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        if self.closed:
            inside = (pts >= lo) & (pts <= hi)
        else:
            inside = (pts >= lo) & (pts < hi)
        return inside.all(axis=1)

    def scaled(self, factor):
        f = float(factor)
        return Box(tuple(f * x for x in self.lower), tuple(f * x for x in self.upper), self.closed)

    def has_interior(self):
        return all(a < b for a, b in zip(self.lower, self.upper))

    def project(self, point):
        return np.clip(np.asarray(point, dtype=float), self.lower, self.upper)

    def corners(self):
        """Finite corners of the box (infinite coordinates are skipped)."""
        axes = []
        for a, b in zip(self.lower, self.upper):
            axes.append([v for v in {a, b} if np.isfinite(v)] or [0.0])
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def to_dict(self):
        return {"box": {"lower": list(self.lower), "upper": list(self.upper), "closed": self.closed}}


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball ``{x : |x - center| <= radius}``."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in np.atleast_1d(self.center)))
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return len(self.center)

    def contains(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) <= self.radius

    def scaled(self, factor):
        f = float(factor)
        return Ball(tuple(f * x for x in self.center), f * self.radius)

    def has_interior(self):
        return self.radius > 0

    def project(self, point):
        p = np.asarray(point, dtype=float)
        c = np.asarray(self.center)
        r = np.linalg.norm(p - c)
        if r <= self.radius:
            return p
        return c + (p - c) * (self.radius / r)

    def to_dict(self):
        return {"ball": {"center": list(self.center), "radius": self.radius}}


@dataclass(frozen=True)
class Union:
    """Finite union of boxes and balls."""

    parts: tuple

    @property
    def dim(self):
        return self.parts[0].dim

    def contains(self, points):
        out = self.parts[0].contains(points)
        for p in self.parts[1:]:
            out = out | p.contains(points)
        return out

    def scaled(self, factor):
        return Union(tuple(p.scaled(factor) for p in self.parts))

    def has_interior(self):
        return any(p.has_interior() for p in self.parts)

    def to_dict(self):
        return {"union": [p.to_dict() for p in self.parts]}


def region_from_dict(spec):
    """Build a region from its config mapping (``box``, ``ball`` or ``union``)."""
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"region must be a mapping with one of box/ball/union, got {spec!r}")
    (kind, body), = spec.items()
    if kind == "box":
        extra = set(body) - {"lower", "upper", "closed"}
        if extra:
            raise ValueError(f"unknown box keys: {sorted(extra)}")
        lo = [(-np.inf if v is None else v) for v in np.atleast_1d(body["lower"]).tolist()]
        hi = [(np.inf if v is None else v) for v in np.atleast_1d(body["upper"]).tolist()]
        return Box(tuple(lo), tuple(hi), bool(body.get("closed", False)))
    if kind == "ball":
        extra = set(body) - {"center", "radius"}
        if extra:
            raise ValueError(f"unknown ball keys: {sorted(extra)}")
        return Ball(tuple(body["center"]), float(body["radius"]))
    if kind == "union":
        return Union(tuple(region_from_dict(p) for p in body))
    raise ValueError(f"unknown region kind {kind!r}")
