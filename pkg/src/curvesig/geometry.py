"""Discrete closed planar curves, planar affine maps, resampling and local neighborhoods.

All arrays are float64. Functions never mutate their inputs; randomness is always
drawn from an explicitly passed :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateError

MIN_CURVE_POINTS = 7
_COINCIDENT_TOL = 1e-12


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"expected an (n, 2) array of points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PlanarCurve:
    """A closed discrete planar curve; index arithmetic is cyclic."""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise DataError("curve contains non-finite coordinates")
        if len(pts) < MIN_CURVE_POINTS:
            raise DataError(f"curve needs at least {MIN_CURVE_POINTS} points, got {len(pts)}")
        steps = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        if np.any(steps <= _COINCIDENT_TOL):
            bad = int(np.argmax(steps <= _COINCIDENT_TOL))
            raise DataError(f"consecutive points {bad} and {(bad + 1) % len(pts)} coincide")
        if not self.closed:
            raise DataError("only closed curves are supported")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlanarCurve):
            return NotImplemented
        return self.closed == other.closed and np.array_equal(self.points, other.points)

    def reversed(self) -> "PlanarCurve":
        return PlanarCurve(self.points[::-1].copy())


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``x -> linear @ x + translation`` with cached determinant and condition number."""

    linear: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    det: float = field(init=False)
    cond: float = field(init=False)

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(2, 2)
        t = np.array(self.translation, dtype=np.float64).reshape(2)
        det = float(lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0])
        if abs(det) < 1e-12:
            raise DegenerateError(f"affine map is singular (det={det:.3g})")
        sv = np.linalg.svd(lin, compute_uv=False)
        lin.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "det", det)
        object.__setattr__(self, "cond", float(sv[0] / sv[1]))

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(2))

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.linear)
        return AffineMap(inv, -inv @ self.translation)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.translation


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def apply_affine(curve: PlanarCurve, amap: AffineMap) -> PlanarCurve:
    return PlanarCurve(amap(curve.points))


def singular_values_for(det: float, cond: float) -> tuple[float, float]:
    """Singular values ``(s1, s2)`` with ``s1 * s2 == det`` and ``s1 / s2 == cond``."""
    s2 = math.sqrt(det / cond)
    return cond * s2, s2


def random_affine(det: float, cond: float, rng: np.random.Generator,
                  translation_box: tuple[float, float] = (-1.0, 1.0)) -> AffineMap:
    """Draw ``R(a) diag(s1, s2) R(b) + t`` with exactly the requested det and cond.

    Both rotation angles are uniform on [0, 2pi); the translation is uniform in
    ``translation_box`` squared. Reflections are never produced.
    """
    if not det > 0:
        raise ValueError(f"det must be positive, got {det}")
    if not cond >= 1:
        raise ValueError(f"cond must be >= 1, got {cond}")
    s1, s2 = singular_values_for(det, cond)
    a, b = rng.uniform(0.0, 2 * math.pi, size=2)
    lin = rotation(a) @ np.diag([s1, s2]) @ rotation(b)
    lo, hi = translation_box
    return AffineMap(lin, rng.uniform(lo, hi, size=2))


@dataclass(frozen=True, eq=False)
class SamplingPmf:
    """Strictly positive per-point sampling weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise DataError("pmf weights must be a non-empty vector")
        if not np.all(w > 0):
            raise DataError("pmf weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DataError(f"pmf weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)


def _normalized(w: np.ndarray) -> np.ndarray:
    w = w / w.sum()
    # one corrective pass keeps |sum - 1| at the ulp level
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def random_pmf(n: int, rng: np.random.Generator, concentration: float = 1.0) -> SamplingPmf:
    """Per-point weights from a symmetric Dirichlet(concentration).

    Small concentrations give strongly non-uniform sampling; ``math.inf`` gives the
    uniform pmf exactly.
    """
    if n < MIN_CURVE_POINTS:
        raise DataError(f"pmf needs n >= {MIN_CURVE_POINTS}, got {n}")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    if math.isinf(concentration):
        return SamplingPmf(np.full(n, 1.0 / n))
    # Dirichlet via normalized gammas; clamp avoids exact zeros for tiny concentrations
    g = np.maximum(rng.standard_gamma(concentration, size=n), 1e-300)
    return SamplingPmf(_normalized(g))


def survivor_count(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    # tolerance guards against 0.7 * 10 == 7.000000000000001
    return min(n, math.ceil(ratio * n - 1e-9))


def survivor_masks(weights: np.ndarray, counts: np.ndarray, rng: np.random.Generator,
                   keep: np.ndarray | None = None) -> np.ndarray:
    """Row-wise weighted sampling without replacement, as boolean survivor masks.

    Uses Gumbel top-k: the ``counts[r]`` largest ``log w + Gumbel`` keys of row ``r``
    survive, which has the law of drawing one point at a time with probability
    proportional to its weight among the points not yet drawn. ``keep[r]``, when
    given and non-negative, is forced to survive.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    rows, n = w.shape
    counts = np.broadcast_to(np.asarray(counts), (rows,))
    keys = np.log(w) + rng.gumbel(size=w.shape)
    if keep is not None:
        keep = np.broadcast_to(np.asarray(keep), (rows,))
        forced = keep >= 0
        keys[np.nonzero(forced)[0], keep[forced]] = np.inf
    ordered = -np.sort(-keys, axis=1)
    threshold = ordered[np.arange(rows), counts - 1]
    return keys >= threshold[:, None]


def downsample_indices(n: int, pmf: SamplingPmf, ratio: float, rng: np.random.Generator,
                       keep: int | None = None) -> np.ndarray:
    """Sorted indices of the points surviving a pmf-weighted draw without replacement.

    ``keep`` forces one index into the survivor set; the other survivors are drawn
    from the remaining points according to their weights.
    """
    if len(pmf) != n:
        raise DataError(f"pmf has {len(pmf)} weights for a {n}-point curve")
    k = survivor_count(n, ratio)
    if k < MIN_CURVE_POINTS:
        raise DataError(f"downsampling {n} points by {ratio} leaves {k} < {MIN_CURVE_POINTS}")
    if k == n:
        return np.arange(n)
    mask = survivor_masks(pmf.weights, k, rng, None if keep is None else keep % n)
    return np.nonzero(mask[0])[0]


def downsample(curve: PlanarCurve, pmf: SamplingPmf, ratio: float,
               rng: np.random.Generator) -> PlanarCurve:
    idx = downsample_indices(len(curve), pmf, ratio, rng)
    return PlanarCurve(curve.points[idx])


@dataclass(frozen=True, eq=False)
class NeighborhoodSample:
    """``2N + 1`` consecutive curve points; the middle one is the sampled point."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        if len(pts) % 2 != 1 or len(pts) < 3:
            raise DataError(f"a neighborhood has an odd count >= 3 of points, got {len(pts)}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def half_width(self) -> int:
        return len(self.points) // 2

    @property
    def center_index(self) -> int:
        return self.half_width

    @property
    def center(self) -> np.ndarray:
        return self.points[self.center_index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborhoodSample):
            return NotImplemented
        return np.array_equal(self.points, other.points)


def extract_neighborhood(curve, index: int, half_width: int) -> NeighborhoodSample:
    """Points at cyclic indices ``index - half_width ... index + half_width``.

    ``curve`` may be a :class:`PlanarCurve` or a raw ``(n, 2)`` array.
    """
    pts = curve.points if isinstance(curve, PlanarCurve) else _as_points(curve)
    n = len(pts)
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    if n < 2 * half_width + 1:
        raise DataError(f"{n}-point curve is too small for half-width {half_width}")
    idx = np.arange(index - half_width, index + half_width + 1) % n
    return NeighborhoodSample(pts[idx])


def canonical_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and origin placing ``points[0]`` at 0 and the middle point on +x.

    Works on a single ``(P, 2)`` array or a stack ``(..., P, 2)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    origin = pts[..., 0, :]
    v = pts[..., pts.shape[-2] // 2, :] - origin
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm < _COINCIDENT_TOL):
        raise DegenerateError("first and middle neighborhood points coincide")
    c = v[..., 0] / norm
    s = v[..., 1] / norm
    rot = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)
    return rot, origin


def canonicalize_points(points: np.ndarray) -> np.ndarray:
    rot, origin = canonical_frame(points)
    shifted = np.asarray(points, dtype=np.float64) - origin[..., None, :]
    out = shifted @ np.swapaxes(rot, -1, -2)
    # pin the two defining points to their exact values so placement is idempotent
    mid = out.shape[-2] // 2
    out[..., 0, :] = 0.0
    out[..., mid, 0] = np.linalg.norm(shifted[..., mid, :], axis=-1)
    out[..., mid, 1] = 0.0
    return out


def canonicalize(sample: NeighborhoodSample) -> NeighborhoodSample:
    return NeighborhoodSample(canonicalize_points(sample.points))
