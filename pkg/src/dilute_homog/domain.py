"""Computational domain, random inclusion configurations and volume fractions.

The domain is either a ball or an axis-aligned box.  Inclusions are balls of a
common radius ``epsilon`` that may not overlap and may not cross the outer
boundary; configurations are drawn by random sequential addition (RSA).
"""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .expr import ScalarExpr

FOUR_PI_3 = 4.0 * math.pi / 3.0


class PlacementError(RuntimeError):
    """Random sequential addition ran out of attempts."""


class EmptyEnsembleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Region, boundary data ``f`` and host conductivity ``a(x)``.

    ``shape`` is ``"ball"`` (uses ``radius`` and ``center``) or ``"box"``
    (uses ``lower`` and ``upper``).
    """

    shape: str
    boundary_data: ScalarExpr
    conductivity: ScalarExpr
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    lower: tuple = (0.0, 0.0, 0.0)
    upper: tuple = (1.0, 1.0, 1.0)
    lambda_bound: float = 0.1
    Lambda_bound: float = 10.0

    def __post_init__(self):
        if self.shape not in ("ball", "box"):
            raise ValueError(f"unknown domain shape {self.shape!r}")
        for name in ("boundary_data", "conductivity"):
            v = getattr(self, name)
            if not isinstance(v, ScalarExpr):
                object.__setattr__(self, name, ScalarExpr(v))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "lower", tuple(float(c) for c in self.lower))
        object.__setattr__(self, "upper", tuple(float(c) for c in self.upper))
        if self.shape == "ball" and self.radius <= 0:
            raise ValueError("ball radius must be positive")
        if self.shape == "box" and any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError("box upper corner must exceed lower corner")
        if not 0 < self.lambda_bound <= self.Lambda_bound:
            raise ValueError("need 0 < lambda_bound <= Lambda_bound")

    # -- geometry -------------------------------------------------------
    @property
    def volume(self) -> float:
        if self.shape == "ball":
            return FOUR_PI_3 * self.radius**3
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.shape == "ball":
            c = np.array(self.center)
            return c - self.radius, c + self.radius
        return np.array(self.lower), np.array(self.upper)

    @property
    def middle(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (lo + hi)

    def distance_to_boundary(self, points) -> np.ndarray:
        """Signed distance to the boundary, positive inside."""
        p = np.asarray(points, dtype=float)
        if self.shape == "ball":
            return self.radius - np.linalg.norm(p - np.array(self.center), axis=-1)
        lo, hi = self.bounds
        return np.minimum((p - lo).min(axis=-1), (hi - p).min(axis=-1))

    def contains(self, points) -> np.ndarray:
        return self.distance_to_boundary(points) > 0

    def shrunk_volume(self, epsilon: float) -> float:
        """Volume of the set of points farther than ``epsilon`` from the boundary."""
        if self.shape == "ball":
            return FOUR_PI_3 * max(self.radius - epsilon, 0.0) ** 3
        ext = np.subtract(self.upper, self.lower) - 2 * epsilon
        return float(np.prod(np.clip(ext, 0.0, None)))

    def segment_exit(self, p, q) -> np.ndarray:
        """Fraction ``t`` in (0, 1] where ``p + t (q - p)`` meets the boundary.

        ``p`` must be inside and ``q`` outside (row-wise arrays).
        """
        p = np.asarray(p, dtype=float)
        d = np.asarray(q, dtype=float) - p
        if self.shape == "ball":
            c = p - np.array(self.center)
            a = np.einsum("ij,ij->i", d, d)
            b = np.einsum("ij,ij->i", c, d)
            cc = np.einsum("ij,ij->i", c, c) - self.radius**2
            t = (-b + np.sqrt(np.maximum(b * b - a * cc, 0.0))) / a
        else:
            lo, hi = self.bounds
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(d > 0, (hi - p) / d, np.inf)
                t_lo = np.where(d < 0, (lo - p) / d, np.inf)
            t = np.minimum(t_hi, t_lo).min(axis=-1)
        return np.clip(t, 0.0, 1.0)

    # -- serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        out = {"shape": self.shape}
        if self.shape == "ball":
            out.update(radius=self.radius, center=list(self.center))
        else:
            out.update(lower=list(self.lower), upper=list(self.upper))
        out.update(
            boundary_data=self.boundary_data.text,
            conductivity=self.conductivity.text,
            lambda_bound=self.lambda_bound,
            Lambda_bound=self.Lambda_bound,
        )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        allowed = {"shape", "radius", "center", "lower", "upper", "boundary_data",
                   "conductivity", "lambda_bound", "Lambda_bound"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown domain keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("center", "lower", "upper"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def __eq__(self, other) -> bool:
        return isinstance(other, DomainSpec) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(json.dumps(self.to_dict(), sort_keys=True))


def unit_ball(boundary_data="x", conductivity="1", radius=1.0, **kw) -> DomainSpec:
    return DomainSpec("ball", boundary_data, conductivity, radius=radius, **kw)


def unit_box(boundary_data="x", conductivity="1", **kw) -> DomainSpec:
    return DomainSpec("box", boundary_data, conductivity, **kw)


# -- configurations --------------------------------------------------------

@dataclass(eq=False)
class InclusionConfiguration:
    epsilon: float
    centers: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def __len__(self) -> int:
        return len(self.centers)

    def violations(self, domain: DomainSpec) -> list[str]:
        """Human-readable list of broken admissibility constraints."""
        out = []
        eps = self.epsilon
        if len(self):
            d = domain.distance_to_boundary(self.centers)
            for i in np.flatnonzero(d < eps):
                out.append(f"center {i} is {d[i]:.6g} from the boundary (< epsilon)")
            if len(self) > 1:
                tree = cKDTree(self.centers)
                for i, j in sorted(tree.query_pairs(2 * eps * (1 - 1e-12))):
                    dist = np.linalg.norm(self.centers[i] - self.centers[j])
                    if dist < 2 * eps:
                        out.append(f"centers {i},{j} overlap (distance {dist:.6g})")
        return out

    def validate(self, domain: DomainSpec) -> None:
        bad = self.violations(domain)
        if bad:
            raise ValueError("inadmissible configuration: " + "; ".join(bad[:5]))

    def to_json(self) -> str:
        return json.dumps({"epsilon": self.epsilon, "seed": self.seed,
                           "centers": self.centers.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "InclusionConfiguration":
        d = json.loads(text)
        return cls(float(d["epsilon"]), np.array(d["centers"], dtype=float).reshape(-1, 3),
                   d.get("seed"))


def n_for_volume_fraction(domain: DomainSpec, beta_bar: float, epsilon: float) -> int:
    """Number of inclusions whose total volume fraction is closest to ``beta_bar``."""
    return int(round(beta_bar * domain.volume / (FOUR_PI_3 * epsilon**3)))


def _uniform_shrunk(domain: DomainSpec, epsilon: float, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map uniforms in [0,1)^3 to candidate points; returns points and an acceptance mask."""
    lo, hi = domain.bounds
    lo = lo + epsilon
    hi = hi - epsilon
    pts = lo + u * (hi - lo)
    if domain.shape == "ball":
        ok = domain.distance_to_boundary(pts) >= epsilon
    else:
        ok = np.ones(len(pts), dtype=bool)
    return pts, ok


def sample_configuration(domain: DomainSpec, epsilon: float, n: int, seed: int,
                         max_attempts: int = 10**6) -> InclusionConfiguration:
    """Random sequential addition of ``n`` non-overlapping balls of radius ``epsilon``.

    Candidates are uniform on the shrunk domain; the stream is a Philox
    generator keyed by ``seed`` so the k-th candidate depends only on
    ``(seed, k)``.

    Raises
    ------
    PlacementError
        After ``max_attempts`` consecutive rejected candidates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if domain.shrunk_volume(epsilon) <= 0 and n > 0:
        raise ValueError("no admissible region for this epsilon")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    centers = np.empty((n, 3))
    placed = 0
    rejected = 0
    min_d2 = (2 * epsilon) ** 2
    block = 256
    while placed < n:
        pts, ok = _uniform_shrunk(domain, epsilon, rng.random((block, 3)))
        for p, good in zip(pts, ok):
            if good and placed:
                dd = centers[:placed] - p
                good = np.einsum("ij,ij->i", dd, dd).min() >= min_d2
            if good:
                centers[placed] = p
                placed += 1
                rejected = 0
                if placed == n:
                    break
            else:
                rejected += 1
                if rejected >= max_attempts:
                    raise PlacementError(
                        f"{max_attempts} consecutive rejections after placing {placed}/{n} "
                        f"inclusions (epsilon={epsilon}); packing too dense for RSA")
    return InclusionConfiguration(epsilon, centers, seed)


def global_volume_fraction(config: InclusionConfiguration, domain: DomainSpec) -> float:
    return FOUR_PI_3 * len(config) * config.epsilon**3 / domain.volume


# -- local volume fraction ---------------------------------------------------

def _lens_volume(d, a, b):
    """Intersection volume of balls of radii ``a``, ``b`` with center distance ``d``."""
    d = np.asarray(d, dtype=float)
    out = np.zeros_like(d)
    full = d <= abs(b - a)
    out[full] = FOUR_PI_3 * min(a, b) ** 3
    part = (~full) & (d < a + b)
    dp = d[part]
    out[part] = (np.pi * (a + b - dp) ** 2
                 * (dp**2 + 2 * dp * (a + b) - 3 * (a - b) ** 2) / (12 * dp))
    return out


_SUB = 32


def _box_overlap(points, epsilon, lo, hi):
    """|B(x, eps) ∩ [lo, hi]| by midpoint quadrature on a 32^3 subgrid of the ball."""
    s = -epsilon + (np.arange(_SUB) + 0.5) * (2 * epsilon / _SUB)
    ball = (s[:, None, None] ** 2 + s[None, :, None] ** 2 + s[None, None, :] ** 2) <= epsilon**2
    ball = ball.astype(float)
    cell = (2 * epsilon / _SUB) ** 3
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    masks = [((p[:, i, None] + s) >= lo[i]) & ((p[:, i, None] + s) <= hi[i]) for i in range(3)]
    full = np.stack([m.all(axis=1) for m in masks], axis=1)
    out = np.empty(len(p))
    total = ball.sum()
    marg1 = [ball.sum(axis=(1, 2)), ball.sum(axis=(0, 2)), ball.sum(axis=(0, 1))]
    active = ~full
    nact = active.sum(axis=1)
    out[nact == 0] = total
    for i in range(3):
        sel = (nact == 1) & active[:, i]
        out[sel] = masks[i][sel].astype(float) @ marg1[i]
    for i, j, k in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        sel = (nact == 2) & active[:, i] & active[:, j]
        if sel.any():
            marg2 = ball.sum(axis=k)
            out[sel] = np.einsum("na,nb,ab->n", masks[i][sel].astype(float),
                                 masks[j][sel].astype(float), marg2)
    sel = np.flatnonzero(nact == 3)
    for start in range(0, len(sel), 1024):
        idx = sel[start:start + 1024]
        out[idx] = np.einsum("na,nb,nc,abc->n", masks[0][idx].astype(float),
                             masks[1][idx].astype(float), masks[2][idx].astype(float), ball,
                             optimize=True)
    return out * cell


def local_volume_fraction(domain: DomainSpec, epsilon: float, n: int, x,
                          density_model="uniform") -> np.ndarray:
    """Probability that the point(s) ``x`` are covered by some inclusion.

    ``density_model`` is ``"uniform"`` (one-point density ``1/|Omega_eps|``)
    or a sequence of sampled configurations (empirical coverage frequency).
    """
    pts = np.asarray(x, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    if isinstance(density_model, str):
        if density_model != "uniform":
            raise ValueError(f"unknown density model {density_model!r}")
        vol = domain.shrunk_volume(epsilon)
        if n == 0:
            return np.zeros(shape)
        if vol <= 0:
            raise ValueError("empty admissible region")
        if domain.shape == "ball":
            r = np.linalg.norm(pts - np.array(domain.center), axis=-1)
            ov = _lens_volume(r, epsilon, domain.radius - epsilon)
        else:
            lo, hi = domain.bounds
            lo = lo + epsilon
            hi = hi - epsilon
            inner = ((pts - lo).min(axis=1) >= epsilon) & ((hi - pts).min(axis=1) >= epsilon)
            ov = np.full(len(pts), FOUR_PI_3 * epsilon**3)
            rest = ~inner
            if rest.any():
                ov[rest] = _box_overlap(pts[rest], epsilon, lo, hi)
        return (n * ov / vol).reshape(shape)
    configs = list(density_model)
    if not configs:
        raise EmptyEnsembleError("empirical density model needs at least one configuration")
    hits = np.zeros(len(pts))
    for c in configs:
        if len(c) == 0:
            continue
        tree = cKDTree(c.centers)
        d, _ = tree.query(pts)
        hits += d <= c.epsilon
    return (hits / len(configs)).reshape(shape)


# -- dilute regime --------------------------------------------------------------

@dataclass
class DiluteRegime:
    epsilon: float
    n_inclusions: int
    beta_bar: float
    C_regime: float = 100.0

    @classmethod
    def of(cls, config: InclusionConfiguration, domain: DomainSpec, C_regime: float = 100.0):
        return cls(config.epsilon, len(config), global_volume_fraction(config, domain), C_regime)

    def in_window(self) -> bool:
        eps = self.epsilon
        upper = self.C_regime / math.log(1 / eps) ** 4 if eps < 1 else math.inf
        return eps / self.C_regime < self.beta_bar <= upper

    def check(self) -> bool:
        ok = self.in_window()
        if not ok:
            warnings.warn(
                f"volume fraction {self.beta_bar:.4g} at epsilon={self.epsilon:.4g} is outside "
                f"the dilute window (C={self.C_regime})", stacklevel=2)
        return ok


# -- clusters ---------------------------------------------------------------------

@dataclass
class ClusterDecomposition:
    clusters: list[tuple[int, ...]]
    size_histogram: dict[int, int] = field(default_factory=dict)

    def as_sets(self) -> set[frozenset]:
        return {frozenset(c) for c in self.clusters}


def cluster_decomposition(config: InclusionConfiguration) -> ClusterDecomposition:
    """Connected components of the graph joining centers at most 4*epsilon apart."""
    n = len(config)
    if n == 0:
        return ClusterDecomposition([], {})
    tree = cKDTree(config.centers)
    pairs = np.array(sorted(tree.query_pairs(4 * config.epsilon * (1 + 1e-12))), dtype=int).reshape(-1, 2)
    if len(pairs):
        dist = np.linalg.norm(config.centers[pairs[:, 0]] - config.centers[pairs[:, 1]], axis=1)
        pairs = pairs[dist <= 4 * config.epsilon]
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    clusters = sorted((tuple(v) for v in groups.values()), key=lambda c: c[0])
    hist = dict(sorted(Counter(len(c) for c in clusters).items()))
    return ClusterDecomposition(clusters, hist)


def permuted(config: InclusionConfiguration, order: Sequence[int]) -> InclusionConfiguration:
    return InclusionConfiguration(config.epsilon, config.centers[np.asarray(order)], config.seed)
