"""Signature distances and the affine shape-matching benchmark."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .axiomatic import SignatureCurve, axiomatic_signature
from .datasets import CurveCollection
from .errors import CurveSigError, DataError
from .geometry import PlanarCurve, apply_affine, downsample, random_affine, random_pmf
from .nn import MlpCheckpoint
from .training import evaluate_model

log = logging.getLogger(__name__)

DEFAULT_FLAVORS = ((2.0, 2.0), (2.0, 3.0), (3.0, 2.0))
DEFAULT_RATES = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)


def avg_hausdorff(s1: SignatureCurve, s2: SignatureCurve) -> float:
    """Symmetric mean of the two directed mean nearest-neighbor distances.

    Only valid points take part. Unlike the classical Hausdorff distance this is not
    a metric: the triangle inequality can fail.
    """
    a, b = s1.valid_points(), s2.valid_points()
    if len(a) == 0 or len(b) == 0:
        raise DataError("average Hausdorff distance needs at least one valid point per signature")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def match_query(query: SignatureCurve, database: Sequence[SignatureCurve]) -> tuple[int, np.ndarray]:
    """Index of the nearest database signature (lowest index on ties) and all distances."""
    if len(database) == 0:
        raise DataError("empty database")
    dists = np.array([avg_hausdorff(query, s) for s in database])
    return int(np.argmin(dists)), dists


Estimator = Callable[[PlanarCurve], SignatureCurve]


def make_estimator(spec) -> Estimator:
    """A checkpoint, ``'euclidean'`` / ``'equiaffine'``, or any curve -> signature callable."""
    if isinstance(spec, MlpCheckpoint):
        return lambda curve: evaluate_model(spec, curve)
    if spec in ("euclidean", "equiaffine"):
        return lambda curve: axiomatic_signature(curve, spec)
    if callable(spec):
        return spec
    raise ValueError(f"unknown estimator {spec!r}")


@dataclass
class QueryResult:
    collection: str
    flavor: tuple[float, float]
    rate: float
    member: int
    best: int
    distance: float

    @property
    def success(self) -> bool:
        return self.best == self.member


@dataclass
class BenchmarkReport:
    flavors: list[tuple[float, float]]
    rates: list[float]
    collections: list[str]
    # (collection, flavor, rate) -> success rate in [0, 1]
    success: dict[tuple[str, tuple[float, float], float], float] = field(default_factory=dict)
    queries: list[QueryResult] = field(default_factory=list)

    def rate_for(self, flavor, rate, collection: str | None = None) -> float:
        """Success rate of one cell; averaged over collections when none is named."""
        flavor = tuple(float(v) for v in flavor)
        if collection is not None:
            return self.success[(collection, flavor, float(rate))]
        return float(np.mean([self.success[(c, flavor, float(rate))] for c in self.collections]))

    def table(self) -> np.ndarray:
        """Collection-averaged success rates, rows = rates, columns = flavors."""
        return np.array([[self.rate_for(f, r) for f in self.flavors] for r in self.rates])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["collection", "flavor_det", "flavor_cond", "sampling_rate", "success_rate"])
        for c in self.collections:
            for (det, cond) in self.flavors:
                for r in self.rates:
                    w.writerow([c, repr(det), repr(cond), repr(r), repr(self.success[(c, (det, cond), r)])])
        return buf.getvalue()

    def format_table(self, title: str = "Success rate") -> str:
        head = ["Sampling rate"] + [f"det={d:g} cond={c:g}" for d, c in self.flavors]
        rows = [[f"{100 * r:.2f}%"] + [f"{100 * v:.2f}%" for v in line] for r, line in zip(self.rates, self.table())]
        widths = [max(len(x) for x in col) for col in zip(head, *rows)]
        fmt = " | ".join(f"{{:>{w}}}" for w in widths)
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([title, fmt.format(*head), sep, *(fmt.format(*r) for r in rows)])


def _safe_signature(estimator: Estimator, curve: PlanarCurve) -> SignatureCurve | None:
    try:
        sig = estimator(curve)
    except CurveSigError as exc:
        log.warning("estimator failed on a curve: %s", exc)
        return None
    return sig if sig.valid.any() else None


def _run_collection(coll: CurveCollection, coll_seed, est: Estimator, flavors, rates, pmf_concentration):
    if len(coll) < 2:
        raise DataError(f"collection {coll.name!r} has fewer than 2 members")
    database = [_safe_signature(est, m) for m in coll.members]
    cell_seeds = coll_seed.spawn(len(flavors) * len(rates))
    success, queries = {}, []
    for fi, flavor in enumerate(flavors):
        for ri, rate in enumerate(rates):
            rng = np.random.default_rng(cell_seeds[fi * len(rates) + ri])
            hits = 0
            for j, member in enumerate(coll.members):
                amap = random_affine(flavor[0], flavor[1], rng)
                pmf = random_pmf(len(member), rng, pmf_concentration)
                query = downsample(apply_affine(member, amap), pmf, rate, rng)
                qsig = _safe_signature(est, query)
                if qsig is None or database[j] is None:
                    queries.append(QueryResult(coll.name, flavor, rate, j, -1, float("inf")))
                    continue
                dists = np.array([avg_hausdorff(qsig, s) if s is not None else np.inf for s in database])
                best = int(np.argmin(dists))
                queries.append(QueryResult(coll.name, flavor, rate, j, best, float(dists[best])))
                hits += best == j
            success[(coll.name, flavor, rate)] = hits / len(coll)
    return success, queries


def run_benchmark(collections: Sequence[CurveCollection], estimator, flavors=DEFAULT_FLAVORS,
                  rates=DEFAULT_RATES, seed: int = 0, pmf_concentration: float = 1.0,
                  workers: int = 1) -> BenchmarkReport:
    """Match every transformed, downsampled member against its own collection.

    One random affine map with the flavor's (det, cond) and one random pmf are drawn
    per query. A query whose signature cannot be computed counts as a failure.
    Collections draw from independent seed streams, so the report does not depend
    on ``workers``.
    """
    est = make_estimator(estimator)
    flavors = [(float(d), float(c)) for d, c in flavors]
    rates = [float(r) for r in rates]
    names = [c.name for c in collections]
    if len(set(names)) != len(names):
        raise DataError("collection names must be unique")
    report = BenchmarkReport(flavors, rates, names)
    seeds = np.random.SeedSequence(seed).spawn(len(collections))
    jobs = [(c, s, est, flavors, rates, pmf_concentration) for c, s in zip(collections, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_collection(*job), jobs))
    else:
        results = [_run_collection(*job) for job in jobs]
    for success, queries in results:
        report.success.update(success)
        report.queries.extend(queries)
    return report
