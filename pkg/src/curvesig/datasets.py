"""Synthetic curves, deformed benchmark collections, and the JSON curve file format.

File format::

    {"version": 1, "split": "train", "curves": [{"points": [[x, y], ...]}, ...]}
    {"version": 1, "name": "blob-3", "curves": [...]}            # a collection

Floats are written with ``repr`` precision, so a save/load round trip is bit exact.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import AffineMap, PlanarCurve, rotation

FORMAT_VERSION = 1
SPLITS = ("train", "validation", "evaluation")
MAX_ATTEMPTS = 100


@dataclass(eq=False)
class CurveDataset:
    curves: list[PlanarCurve]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if not self.curves:
            raise DataError("a dataset must contain at least one curve")

    def __len__(self) -> int:
        return len(self.curves)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CurveDataset):
            return NotImplemented
        return self.split == other.split and self.curves == other.curves


@dataclass(eq=False)
class CurveCollection:
    name: str
    members: list[PlanarCurve]

    def __post_init__(self):
        if len(self.members) < 2:
            raise DataError(f"collection {self.name!r} needs >= 2 members")

    def __len__(self) -> int:
        return len(self.members)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CurveCollection):
            return NotImplemented
        return self.name == other.name and self.members == other.members


# ---------------------------------------------------------------- simplicity

def _segments_cross(p, q, r, s) -> np.ndarray:
    """Proper or touching intersection of segments p-q and r-s (broadcast)."""
    def orient(a, b, c):
        return np.sign((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                       - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    return (o1 * o2 <= 0) & (o3 * o4 <= 0) & ~((o1 == 0) & (o2 == 0) & (o3 == 0) & (o4 == 0))


def is_simple(points: np.ndarray) -> bool:
    """Brute-force O(n^2) check that a closed polygon has no self-intersections."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    a, b = pts, np.roll(pts, -1, axis=0)
    for i in range(n):
        # segments sharing an endpoint with segment i are skipped
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if len(j) == 0:
            continue
        if np.any(_segments_cross(a[i], b[i], a[j], b[j])):
            return False
    return True


# ---------------------------------------------------------------- generators

def fourier_radius_coefficients(harmonics: int, decay: float, rng: np.random.Generator):
    bound = 0.5 * decay ** np.arange(1, harmonics + 1)
    return rng.uniform(-bound, bound), rng.uniform(-bound, bound)


def fourier_curve(a, b, scale: float, samples: int) -> PlanarCurve:
    """Polar curve ``r(t) = scale * (1 + sum a_k cos kt + b_k sin kt)`` at uniform t."""
    t = 2 * math.pi * np.arange(samples) / samples
    k = np.arange(1, len(a) + 1)
    r = scale * (1 + np.cos(np.outer(t, k)) @ np.asarray(a) + np.sin(np.outer(t, k)) @ np.asarray(b))
    return PlanarCurve(np.column_stack([r * np.cos(t), r * np.sin(t)]))


def generate_fourier_curve(harmonics: int, decay: float, scale: float, samples: int,
                           rng: np.random.Generator) -> PlanarCurve:
    """Random smooth star-shaped closed curve with ``|a_k|, |b_k| <= 0.5 decay^k``."""
    if harmonics < 1:
        raise ValueError("harmonics must be >= 1")
    if samples < 64:
        raise ValueError("samples must be >= 64")
    if not (decay > 0 and scale > 0):
        raise ValueError("decay and scale must be positive")
    for _ in range(MAX_ATTEMPTS):
        a, b = fourier_radius_coefficients(harmonics, decay, rng)
        try:
            curve = fourier_curve(a, b, scale, samples)
        except DataError:
            continue
        if is_simple(curve.points):
            return curve
    raise DataError(f"no simple curve after {MAX_ATTEMPTS} attempts (decay={decay})")


def generate_dataset(count: int, rng: np.random.Generator, split: str = "train",
                     harmonics: int = 6, decay: float = 0.5, scale: float = 1.0,
                     samples: int = 256) -> CurveDataset:
    if count < 1:
        raise DataError("count must be >= 1")
    curves = [generate_fourier_curve(harmonics, decay, scale, samples, rng) for _ in range(count)]
    return CurveDataset(curves, split)


def diameter(points: np.ndarray) -> float:
    pts = np.asarray(points)
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1).max()))


def smooth_displacement(points: np.ndarray, magnitude: float, rng: np.random.Generator,
                        terms: int = 2) -> np.ndarray:
    """Low-frequency sinusoidal displacement field with pointwise norm <= magnitude.

    Each coordinate is a sum of ``terms`` plane waves whose wavelengths are at least
    the curve diameter; amplitudes sum to ``magnitude / sqrt(2)`` per coordinate.
    """
    pts = np.asarray(points)
    diam = diameter(pts)
    center = pts.mean(axis=0)
    out = np.zeros_like(pts)
    for axis in range(2):
        amp = rng.dirichlet(np.ones(terms)) * magnitude / math.sqrt(2)
        for j in range(terms):
            theta = rng.uniform(0, 2 * math.pi)
            freq = rng.uniform(0.5, 1.0) * 2 * math.pi / diam
            direction = np.array([math.cos(theta), math.sin(theta)])
            phase = rng.uniform(0, 2 * math.pi)
            out[:, axis] += amp[j] * np.sin(freq * (pts - center) @ direction + phase)
    return out


def random_rigid_motion(rng: np.random.Generator, translation: float = 1.0) -> AffineMap:
    return AffineMap(rotation(rng.uniform(0, 2 * math.pi)),
                     rng.uniform(-translation, translation, size=2))


def build_collection(base: PlanarCurve, members: int, deform_magnitude: float,
                     rng: np.random.Generator, name: str = "collection") -> CurveCollection:
    """Members are smoothly warped copies of ``base`` placed by random rigid motions."""
    if members < 2:
        raise DataError("a collection needs >= 2 members")
    if deform_magnitude < 0:
        raise ValueError("deform_magnitude must be >= 0")
    diam = diameter(base.points)
    out = []
    for _ in range(members):
        for _ in range(MAX_ATTEMPTS):
            warped = base.points + smooth_displacement(base.points, deform_magnitude * diam, rng)
            placed = random_rigid_motion(rng)(warped)
            try:
                curve = PlanarCurve(placed)
            except DataError:
                continue
            if is_simple(curve.points):
                break
        else:
            raise DataError(f"deformation kept self-intersecting after {MAX_ATTEMPTS} attempts")
        out.append(curve)
    return CurveCollection(name, out)


def generate_collections(count: int, members: int, rng: np.random.Generator,
                         deform_magnitude: float = 0.1, harmonics: int = 6, decay: float = 0.5,
                         scale: float = 1.0, samples: int = 256) -> list[CurveCollection]:
    collections = []
    for i in range(count):
        base = generate_fourier_curve(harmonics, decay, scale, samples, rng)
        collections.append(build_collection(base, members, deform_magnitude, rng, name=f"shape-{i:02d}"))
    return collections


# ---------------------------------------------------------------- file format

def _curve_records(curves) -> list[dict]:
    return [{"points": c.points.tolist()} for c in curves]


def _parse_curves(doc, path) -> list[PlanarCurve]:
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be a JSON object")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {doc.get('version')!r} (expected {FORMAT_VERSION})")
    records = doc.get("curves")
    if not isinstance(records, list):
        raise DataError(f"{path}: missing 'curves' list")
    curves = []
    for i, rec in enumerate(records):
        try:
            curves.append(PlanarCurve(np.asarray(rec["points"], dtype=np.float64)))
        except (DataError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: curve {i} is invalid: {exc}") from None
    return curves


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from None
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def write_json_atomic(doc, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_curves(dataset: CurveDataset, path) -> None:
    write_json_atomic({"version": FORMAT_VERSION, "split": dataset.split,
                       "curves": _curve_records(dataset.curves)}, path)


def load_curves(path) -> CurveDataset:
    doc = _read_json(path)
    curves = _parse_curves(doc, path)
    if not curves:
        raise DataError(f"{path}: dataset contains no curves")
    split = doc.get("split", "train")
    return CurveDataset(curves, split)


def save_collections(collections: list[CurveCollection], path) -> None:
    write_json_atomic({"version": FORMAT_VERSION, "collections": [
        {"name": c.name, "curves": _curve_records(c.members)} for c in collections]}, path)


def load_collections(path) -> list[CurveCollection]:
    """Accepts a bundle ``{"collections": [...]}`` or a single ``{"name":..., "curves":...}``."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "collections" in doc:
        if doc.get("version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported version {doc.get('version')!r}")
        items = doc["collections"]
    else:
        items = [doc]
    out = []
    for j, item in enumerate(items):
        item = dict(item)
        item.setdefault("version", FORMAT_VERSION)
        try:
            out.append(CurveCollection(str(item.get("name", f"collection-{j}")), _parse_curves(item, path)))
        except DataError as exc:
            raise DataError(f"collection {j}: {exc}") from None
    if not out:
        raise DataError(f"{path}: no collections")
    return out
