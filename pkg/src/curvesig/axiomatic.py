"""Joint-invariant estimators of curvature and its arc-length derivative.

Euclidean curvature comes from the circle through three consecutive points; the
equiaffine curvature from the conic through five. Derivatives along the invariant
arc-length are central finite differences of neighboring estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateError, NumericalError
from .geometry import PlanarCurve

GROUPS = ("euclidean", "equiaffine")
_RANK_TOL = 1e-10
_DETQ_TOL = 1e-14


@dataclass(frozen=True)
class InvariantEstimate:
    kappa: float
    kappa_s: float
    group: str

    def __post_init__(self):
        if not (math.isfinite(self.kappa) and math.isfinite(self.kappa_s)):
            raise NumericalError(f"non-finite invariant estimate ({self.kappa}, {self.kappa_s})")


@dataclass(frozen=True, eq=False)
class SignatureCurve:
    """Ordered ``(kappa, kappa_s)`` pairs with a per-point validity mask."""

    points: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        valid = np.ones(len(pts), bool) if self.valid is None else np.array(self.valid, bool)
        if valid.shape != (len(pts),):
            raise DataError("validity mask length differs from point count")
        valid &= np.all(np.isfinite(pts), axis=1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def kappa(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def kappa_s(self) -> np.ndarray:
        return self.points[:, 1]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


def _points(curve) -> np.ndarray:
    return curve.points if isinstance(curve, PlanarCurve) else np.asarray(curve, dtype=np.float64)


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


# ---------------------------------------------------------------- Euclidean

def euclidean_curvature_3pt(p1, p2, p3) -> float:
    """Signed reciprocal circumradius; positive for counter-clockwise triples."""
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    a = math.dist(p1, p2)
    b = math.dist(p2, p3)
    c = math.dist(p1, p3)
    if min(a, b, c) == 0.0:
        raise DegenerateError("curvature needs three distinct points")
    # 4 * area = 2 * cross
    return float(2.0 * _cross(p2 - p1, p3 - p1) / (a * b * c))


def euclidean_curvature(curve) -> np.ndarray:
    """Three-point curvature at every point of a closed curve."""
    x = _points(curve)
    prev, nxt = np.roll(x, 1, axis=0), np.roll(x, -1, axis=0)
    a = np.linalg.norm(x - prev, axis=1)
    b = np.linalg.norm(nxt - x, axis=1)
    c = np.linalg.norm(nxt - prev, axis=1)
    if np.any(c == 0):
        raise DegenerateError("curve folds back onto itself (x[i-1] == x[i+1])")
    return 2.0 * _cross(x - prev, nxt - prev) / (a * b * c)


def euclidean_kappa_s_all(curve, kappa: np.ndarray | None = None) -> np.ndarray:
    x = _points(curve)
    k = euclidean_curvature(x) if kappa is None else kappa
    step = np.linalg.norm(np.roll(x, -1, axis=0) - x, axis=1)
    return (np.roll(k, -1) - np.roll(k, 1)) / (step + np.roll(step, 1))


def euclidean_kappa_s(curve, i: int) -> float:
    x = _points(curve)
    n = len(x)
    if n < 5:
        raise DataError("kappa_s needs at least 5 points")
    w = x[np.arange(i - 2, i + 3) % n]
    k_prev = euclidean_curvature_3pt(w[0], w[1], w[2])
    k_next = euclidean_curvature_3pt(w[2], w[3], w[4])
    return float((k_next - k_prev) / (np.linalg.norm(w[3] - w[2]) + np.linalg.norm(w[2] - w[1])))


# ---------------------------------------------------------------- equiaffine

@dataclass(frozen=True)
class ConicCoefficients:
    """Unit-norm ``(a, b, c, d, e, f)`` of ``ax^2 + bxy + cy^2 + dx + ey + f = 0``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @classmethod
    def from_vector(cls, v) -> "ConicCoefficients":
        v = np.asarray(v, dtype=np.float64)
        return cls(*(float(t) for t in v / np.linalg.norm(v)))

    def vector(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    def matrix(self) -> np.ndarray:
        a, b, c, d, e, f = self.vector()
        return np.array([[a, b / 2, d / 2], [b / 2, c, e / 2], [d / 2, e / 2, f]])

    def residual(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x, y = p[:, 0], p[:, 1]
        return np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)]) @ self.vector()


def _design(p: np.ndarray) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    return np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)


def _normalize_windows(p: np.ndarray):
    """Center each window on its bounding box and scale it into [-1, 1]^2."""
    lo, hi = p.min(axis=-2), p.max(axis=-2)
    center = (lo + hi) / 2
    half = (hi - lo).max(axis=-1) / 2
    return (p - center[..., None, :]) / half[..., None, None], center, half


def _null_vectors(u: np.ndarray):
    """Unit null vectors of the 5x6 designs of normalized windows, plus a rank flag."""
    _, s, vt = np.linalg.svd(_design(u), full_matrices=True)
    ok = s[..., 4] > _RANK_TOL * s[..., 0]
    return vt[..., -1, :], ok


def _denormalize(v: np.ndarray, center: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Map conic coefficients in u = (x - center) / h back to x coordinates."""
    A, B, C, D, E, F = np.moveaxis(v, -1, 0)
    cx, cy = center[..., 0], center[..., 1]
    d = -2 * A * cx - B * cy + D * h
    e = -B * cx - 2 * C * cy + E * h
    f = A * cx * cx + B * cx * cy + C * cy * cy - D * h * cx - E * h * cy + F * h * h
    return np.stack([A, B, C, d, e, f], axis=-1)


def fit_conic(points) -> ConicCoefficients:
    """The conic through five points, as the SVD null vector of the design matrix."""
    p = np.asarray(points, dtype=np.float64)
    if p.shape != (5, 2):
        raise DataError(f"fit_conic needs exactly 5 points, got shape {p.shape}")
    u, center, h = _normalize_windows(p)
    if h == 0:
        raise DegenerateError("all five points coincide")
    v, ok = _null_vectors(u)
    if not ok:
        raise DegenerateError("five points do not determine a unique conic")
    return ConicCoefficients.from_vector(_denormalize(v, center, h))


def _conic_mu(v: np.ndarray):
    """Equiaffine curvature ``sign(det A) |det A| / |det Q|^(2/3)`` for coefficient rows."""
    a, b, c, d, e, f = np.moveaxis(v, -1, 0)
    det_a = a * c - b * b / 4
    det_q = a * (c * f - e * e / 4) - b / 2 * (b / 2 * f - e * d / 4) + d / 2 * (b / 2 * e / 2 - c * d / 2)
    norm3 = np.linalg.norm(v, axis=-1) ** 3
    ok = np.abs(det_q) > _DETQ_TOL * norm3
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = det_a / np.abs(det_q) ** (2.0 / 3.0)
    return np.where(ok, mu, np.nan), ok


def equiaffine_curvature_conic(conic: ConicCoefficients) -> float:
    mu, ok = _conic_mu(conic.vector())
    if not ok:
        raise DegenerateError("degenerate conic (det Q = 0) has no equiaffine curvature")
    return float(mu)


def equiaffine_curvature(curve) -> np.ndarray:
    """Conic-based equiaffine curvature at every point; NaN marks degenerate windows."""
    x = _points(curve)
    n = len(x)
    windows = x[(np.arange(n)[:, None] + np.arange(-2, 3)[None, :]) % n]
    u, center, h = _normalize_windows(windows)
    v, rank_ok = _null_vectors(u)
    # curvature is computed in the normalized frame and rescaled: mu ~ length^(-4/3)
    mu, conic_ok = _conic_mu(v)
    mu = mu * h ** (-4.0 / 3.0)
    return np.where(rank_ok & conic_ok, mu, np.nan)


def equiaffine_curvature_at(curve, i: int) -> float:
    x = _points(curve)
    n = len(x)
    if n < 7:
        raise DataError("equiaffine curvature needs at least 7 points")
    return equiaffine_curvature_conic(fit_conic(x[np.arange(i - 2, i + 3) % n]))


def equiaffine_arc_steps(curve) -> np.ndarray:
    """Equiaffine arc-length spanned from x[i-1] to x[i+1]: ``2 (2 area)^(1/3)``.

    For samples ``c(t - h), c(t), c(t + h)`` the triangle area is ``h^3 [c', c''] / 2``
    while the arc element is ``[c', c'']^(1/3) dt``.
    """
    x = _points(curve)
    prev, nxt = np.roll(x, 1, axis=0), np.roll(x, -1, axis=0)
    twice_area = np.abs(_cross(x - prev, nxt - x))
    return 2.0 * np.cbrt(twice_area)


def equiaffine_kappa_s_all(curve, mu: np.ndarray | None = None) -> np.ndarray:
    x = _points(curve)
    m = equiaffine_curvature(x) if mu is None else mu
    ds = equiaffine_arc_steps(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (np.roll(m, -1) - np.roll(m, 1)) / ds
    return np.where(ds > 0, out, np.nan)


def equiaffine_kappa_s(curve, i: int) -> float:
    x = _points(curve)
    n = len(x)
    m_prev = equiaffine_curvature_at(x, i - 1)
    m_next = equiaffine_curvature_at(x, i + 1)
    ds = equiaffine_arc_steps(x[np.arange(i - 1, i + 2) % n])[1]
    if ds == 0:
        raise DegenerateError(f"zero-area triangle at point {i}")
    return float((m_next - m_prev) / ds)


# ---------------------------------------------------------------- signatures

def axiomatic_signature(curve, group: str = "euclidean") -> SignatureCurve:
    """Per-point ``(kappa, kappa_s)``; degenerate points are marked invalid.

    Raises :class:`DegenerateError` when more than half the points are invalid.
    """
    x = _points(curve)
    if group == "euclidean":
        k = euclidean_curvature(x)
        ks = euclidean_kappa_s_all(x, k)
    elif group == "equiaffine":
        k = equiaffine_curvature(x)
        ks = equiaffine_kappa_s_all(x, k)
    else:
        raise ValueError(f"unknown group {group!r}; expected one of {GROUPS}")
    sig = SignatureCurve(np.column_stack([k, ks]))
    if sig.valid.sum() * 2 < len(sig):
        raise DegenerateError(f"{len(sig) - int(sig.valid.sum())} of {len(sig)} signature points are degenerate")
    return sig


# ---------------------------------------------------------------- analytic reference

def _det2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _analytic_kappa(curve_fn, t: float, group: str) -> float:
    d1, d2 = curve_fn(t, 1), curve_fn(t, 2)
    if group == "euclidean":
        speed = math.hypot(d1[0], d1[1])
        if speed < 1e-12:
            raise DegenerateError(f"vanishing speed at t={t}")
        return _det2(d1, d2) / speed ** 3
    d3, d4 = curve_fn(t, 3), curve_fn(t, 4)
    d12 = _det2(d1, d2)
    if abs(d12) < 1e-12:
        raise DegenerateError(f"inflection at t={t}: equiaffine curvature undefined")
    d13, d14, d23 = _det2(d1, d3), _det2(d1, d4), _det2(d2, d3)
    return (3 * d12 * d14 + 12 * d12 * d23 - 5 * d13 * d13) / (9 * np.cbrt(d12) ** 8)


def analytic_oracle(curve_fn, t: float, group: str = "euclidean", step: float = 1e-4) -> InvariantEstimate:
    """Reference invariants of a smooth parametrized curve.

    ``curve_fn(t, der)`` returns the ``der``-th derivative of the parametrization at
    ``t`` (``der`` up to 4). The arc-length derivative is a central difference of the
    analytic curvature in ``t`` with the given step, divided by the invariant speed
    (``|c'|`` or ``[c', c'']^(1/3)``).
    """
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}")
    kappa = _analytic_kappa(curve_fn, t, group)
    dk = (_analytic_kappa(curve_fn, t + step, group) - _analytic_kappa(curve_fn, t - step, group)) / (2 * step)
    d1, d2 = curve_fn(t, 1), curve_fn(t, 2)
    speed = math.hypot(d1[0], d1[1]) if group == "euclidean" else np.cbrt(_det2(d1, d2))
    return InvariantEstimate(float(kappa), float(dk / speed), group)


class EllipseParam:
    """``(alpha cos t, beta sin t)`` with analytic derivatives."""

    def __init__(self, alpha: float, beta: float):
        self.alpha, self.beta = alpha, beta

    def __call__(self, t, der: int = 0) -> np.ndarray:
        c = np.cos(t + der * math.pi / 2)
        s = np.sin(t + der * math.pi / 2)
        return np.array([self.alpha * c, self.beta * s])


class FourierParam:
    """Analytic derivatives of the polar Fourier curve used by the dataset generator."""

    def __init__(self, a, b, scale: float = 1.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.scale = scale

    def radius(self, t, der: int = 0):
        k = np.arange(1, len(self.a) + 1)
        shift = der * math.pi / 2
        val = np.sum(k ** der * (self.a * np.cos(k * t + shift) + self.b * np.sin(k * t + shift)))
        return self.scale * ((1.0 if der == 0 else 0.0) + val)

    def __call__(self, t, der: int = 0) -> np.ndarray:
        out = np.zeros(2)
        for j in range(der + 1):
            e = np.array([math.cos(t + (der - j) * math.pi / 2), math.sin(t + (der - j) * math.pi / 2)])
            out += math.comb(der, j) * self.radius(t, j) * e
        return out
