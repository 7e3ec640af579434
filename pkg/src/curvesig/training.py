"""Self-supervised training of the Siamese invariant network.

A batch holds ``K`` tuplets of ``m + 2`` canonical neighborhoods (anchor, positive,
``m`` negatives). The network runs once on all of them with shared parameters and
per-slot batch statistics; outputs are laid out as an ``(m + 2, K, 2)`` array with
slot 0 the anchors and slot 1 the positives.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .axiomatic import SignatureCurve, axiomatic_signature
from .errors import DataError, DegenerateError, NumericalError
from .geometry import NeighborhoodSample, PlanarCurve, canonicalize_points, survivor_masks
from .nn import (AdamHyper, AdamState, MlpCheckpoint, ModelConfig, backward, forward,
                 init_parameters, adam_step)

log = logging.getLogger(__name__)

TRAIN_GROUPS = ("euclidean", "equiaffine", "affine")
MAX_RETRIES = 20


@dataclass(frozen=True)
class TrainingConfig:
    half_width: int = 8
    negatives: int = 4
    batch_tuplets: int = 32
    group: str = "affine"
    det_range: tuple[float, float] = (0.5, 3.0)
    cond_range: tuple[float, float] = (1.0, 4.0)
    downsample_ratio_range: tuple[float, float] = (0.5, 1.0)
    pmf_concentration: float = 1.0
    epochs: int = 10
    steps_per_epoch: int = 200
    seed: int = 0
    lr: float = 1e-3
    lr_final: float = 1e-3
    validation_batches: int = 8
    first_block_width: int = 128
    layers_per_block: int = 3
    num_blocks: int = 4
    # divide each canonical window by its RMS radius; None means "only for affine"
    scale_normalize: bool | None = None

    def __post_init__(self):
        if self.group not in TRAIN_GROUPS:
            raise ValueError(f"group must be one of {TRAIN_GROUPS}, got {self.group!r}")
        if self.half_width < 1 or self.negatives < 1 or self.batch_tuplets < 2:
            raise ValueError("need half_width >= 1, negatives >= 1, batch_tuplets >= 2")
        lo, hi = self.det_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid det_range {self.det_range}")
        lo, hi = self.cond_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid cond_range {self.cond_range}")
        lo, hi = self.downsample_ratio_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid downsample_ratio_range {self.downsample_ratio_range}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")

    @property
    def slots(self) -> int:
        return self.negatives + 2

    @property
    def scales_inputs(self) -> bool:
        return self.group == "affine" if self.scale_normalize is None else bool(self.scale_normalize)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_dim=2 * (2 * self.half_width + 1),
                           first_block_width=self.first_block_width,
                           layers_per_block=self.layers_per_block,
                           num_blocks=self.num_blocks)

    def transform_ranges(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Effective (det, cond) sampling ranges for the configured group."""
        if self.group == "euclidean":
            return (1.0, 1.0), (1.0, 1.0)
        if self.group == "equiaffine":
            return (1.0, 1.0), self.cond_range
        return self.det_range, self.cond_range


@dataclass
class TrainingTuplet:
    anchor: NeighborhoodSample
    positive: NeighborhoodSample
    negatives: list[NeighborhoodSample]
    # (curve index, point index) each sample was taken around, anchor first
    sources: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.negatives:
            raise DataError("a tuplet needs at least one negative")
        sizes = {len(s.points) for s in self.samples()}
        if len(sizes) != 1:
            raise DataError(f"tuplet samples differ in size: {sorted(sizes)}")

    def samples(self) -> list[NeighborhoodSample]:
        return [self.anchor, self.positive, *self.negatives]


# ---------------------------------------------------------------- sampling

def normalize_window_scale(points: np.ndarray) -> np.ndarray:
    """Rescale canonical windows ``(..., 2N + 1, 2)`` to unit RMS radius about their centroid.

    Uniform scaling belongs to the affine group, so removing it before the network
    leaves only the part of the invariance that has to be learned. The first point
    stays at the origin and the middle point on the positive x-axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=-2, keepdims=True)
    rms = np.sqrt((centered ** 2).sum(axis=-1).mean(axis=-1))
    if np.any(rms <= 1e-12):
        raise DegenerateError("neighborhood collapses to a point")
    return pts / rms[..., None, None]


def _random_linear(config: TrainingConfig, rng: np.random.Generator, rows: int) -> np.ndarray:
    """``R(a) diag(s1, s2) R(b)`` per row with (det, cond) uniform in the group's ranges."""
    (dlo, dhi), (clo, chi) = config.transform_ranges()
    det = rng.uniform(dlo, dhi, size=rows)
    cond = rng.uniform(clo, chi, size=rows)
    s2 = np.sqrt(det / cond)
    s1 = cond * s2
    a, b = rng.uniform(0, 2 * math.pi, size=(2, rows))
    ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
    ra = np.stack([np.stack([ca, -sa], -1), np.stack([sa, ca], -1)], -2)
    rb = np.stack([np.stack([cb, -sb], -1), np.stack([sb, cb], -1)], -2)
    return ra * np.stack([s1, s2], -1)[:, None, :] @ rb


def _neighborhood_windows(curves, curve_idx, point_idx, keep_center, config, rng):
    """Source indices of the ``2N + 1`` window around each requested point after a
    random pmf-weighted downsampling of its curve, shaped ``(rows, 2N + 1)``.

    Rows with ``keep_center`` force the requested point to survive and center on it;
    the others center on the first survivor at or after it.
    """
    N = config.half_width
    rows = len(curve_idx)
    windows = np.empty((rows, 2 * N + 1), dtype=np.int64)
    sizes = np.array([len(curves[c]) for c in curve_idx])
    for n in np.unique(sizes):
        sel = np.nonzero(sizes == n)[0]
        r = len(sel)
        ratio = rng.uniform(*config.downsample_ratio_range, size=r)
        counts = np.minimum(n, np.ceil(ratio * n - 1e-9).astype(np.int64))
        if counts.min() < 2 * N + 1:
            raise DataError(f"a {n}-point curve keeps {counts.min()} < {2 * N + 1} points after downsampling")
        if math.isinf(config.pmf_concentration):
            w = np.full((r, n), 1.0 / n)
        else:
            w = np.maximum(rng.standard_gamma(config.pmf_concentration, size=(r, n)), 1e-300)
        pts = point_idx[sel]
        keep = np.where(keep_center[sel], pts, -1)
        mask = survivor_masks(w, counts, rng, keep)
        # survivors first, in curve order
        order = np.argsort(~mask, axis=1, kind="stable")
        rank = np.cumsum(mask, axis=1)[np.arange(r), pts] - mask[np.arange(r), pts]
        offs = (rank[:, None] + np.arange(-N, N + 1)[None, :]) % counts[:, None]
        windows[sel] = order[np.arange(r)[:, None], offs]
    return windows


def _tuplet_sources(curves, config, rng, K):
    """(curve, point) indices, shaped ``(m + 2, K)``; rows 0 and 1 coincide."""
    n_curves = len(curves)
    if n_curves == 0:
        raise DataError("empty dataset")
    sizes = np.array([len(c) for c in curves])
    ci = rng.integers(n_curves, size=K)
    pi = (rng.random(K) * sizes[ci]).astype(np.int64)
    m = config.negatives
    if n_curves > 1:
        cn = rng.integers(n_curves - 1, size=(m, K))
        cn += cn >= ci[None]
        pn = (rng.random((m, K)) * sizes[cn]).astype(np.int64)
    else:
        cn = np.broadcast_to(ci, (m, K)).copy()
        pn = (rng.random((m, K)) * (sizes[ci] - 1)).astype(np.int64)
        pn += pn >= pi[None]
    return np.vstack([ci, ci, cn]), np.vstack([pi, pi, pn])


def _sample_inputs(curves, config, rng, K):
    cidx, pidx = _tuplet_sources(curves, config, rng, K)
    S = config.slots
    keep = np.zeros((S, K), bool)
    keep[:2] = True
    flat_c, flat_p, flat_k = cidx.ravel(), pidx.ravel(), keep.ravel()
    windows = _neighborhood_windows(curves, flat_c, flat_p, flat_k, config, rng)
    pts = np.empty(windows.shape + (2,))
    for c in np.unique(flat_c):
        sel = flat_c == c
        pts[sel] = curves[c].points[windows[sel]]
    # only the window is needed: canonical placement forgets the rest of the curve
    pts = pts @ np.swapaxes(_random_linear(config, rng, len(pts)), -1, -2)
    for _ in range(MAX_RETRIES):
        try:
            x = canonicalize_points(pts)
            if config.scales_inputs:
                x = normalize_window_scale(x)
            return x.reshape(S, K, -1, 2), cidx, pidx, windows.reshape(S, K, -1)
        except DegenerateError:
            # a window whose first and middle points coincide cannot be placed
            pts = pts @ np.swapaxes(_random_linear(config, rng, len(pts)), -1, -2)
    raise DegenerateError(f"no non-degenerate neighborhoods after {MAX_RETRIES} retries")


def sample_tuplet(curves: list[PlanarCurve], config: TrainingConfig,
                  rng: np.random.Generator) -> TrainingTuplet:
    """Anchor and positive share a curve point; each negative comes from another curve."""
    curves = list(getattr(curves, "curves", curves))
    x, cidx, pidx, _ = _sample_inputs(curves, config, rng, 1)
    samples = [NeighborhoodSample(x[s, 0]) for s in range(config.slots)]
    sources = [(int(cidx[s, 0]), int(pidx[s, 0])) for s in range(config.slots)]
    return TrainingTuplet(samples[0], samples[1], samples[2:], sources)


def sample_batch(curves: list[PlanarCurve], config: TrainingConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Network inputs for ``K`` tuplets, shaped ``(m + 2, K, input_dim)``."""
    curves = list(getattr(curves, "curves", curves))
    x = _sample_inputs(curves, config, rng, config.batch_tuplets)[0]
    return x.reshape(config.slots, config.batch_tuplets, -1)


# ---------------------------------------------------------------- losses

def _logsumexp_with_zero(z: np.ndarray) -> np.ndarray:
    """``log(1 + sum_j exp(z_j))`` over axis 0, shifted by the max for stability.

    When every ``z_j`` is 0 the shift is 0 and the result is exactly ``log(1 + m)``.
    """
    top = np.maximum(z.max(axis=0), 0.0)
    return top + np.log(np.exp(-top) + np.exp(z - top).sum(axis=0))


def tuplet_loss(x_a, x_p, x_n) -> float:
    """``log(1 + sum_j exp(|x_a - x_p| - |x_a - x_nj|))`` evaluated stably."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64).reshape(-1, 2)
    if len(x_n) == 0:
        raise ValueError("need at least one negative")
    z = np.linalg.norm(x_a - np.asarray(x_p)) - np.linalg.norm(x_a - x_n, axis=1)
    return float(_logsumexp_with_zero(z[:, None])[0])


def invariance_loss(tuplet_losses) -> float:
    losses = np.asarray(tuplet_losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("need at least one tuplet loss")
    return float(losses.mean())


_VAR_TOL = 1e-24


def _pearson_terms(x: np.ndarray):
    dx = x[..., 0] - x[..., 0].mean(axis=-1, keepdims=True)
    dy = x[..., 1] - x[..., 1].mean(axis=-1, keepdims=True)
    sxx = (dx * dx).sum(axis=-1)
    syy = (dy * dy).sum(axis=-1)
    sxy = (dx * dy).sum(axis=-1)
    ok = (sxx > _VAR_TOL) & (syy > _VAR_TOL)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(ok, sxy / np.sqrt(sxx * syy), 0.0)
    return rho, ok, dx, dy, sxx, syy


def pearson(outputs) -> float:
    """Sample correlation of the two output components over the rows.

    Degenerate (near-zero) variance in either component yields 0.0; use
    :func:`pearson_degenerate` to detect that case.
    """
    x = np.asarray(outputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2 or len(x) < 2:
        raise ValueError(f"pearson needs a (K >= 2, 2) array, got {x.shape}")
    return float(np.clip(_pearson_terms(x)[0], -1.0, 1.0))


def pearson_degenerate(outputs) -> bool:
    return not bool(_pearson_terms(np.asarray(outputs, dtype=np.float64))[1])


def orthogonality_loss(outputs) -> float:
    """Mean ``|rho|`` over the ``m + 2`` slots of an ``(m + 2, K, 2)`` output array."""
    x = np.asarray(outputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 2:
        raise ValueError(f"expected (m + 2, K >= 2, 2) outputs, got {x.shape}")
    return float(np.abs(_pearson_terms(x)[0]).mean())


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    invariance: float
    orthogonality: float
    grad: np.ndarray  # d total / d outputs, same shape as the outputs


def _safe_unit(v: np.ndarray):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(norm > 0, v / norm, 0.0)
    return norm[..., 0], unit


def total_loss(outputs) -> LossBreakdown:
    """Invariance plus orthogonality loss, with the gradient w.r.t. every output vector."""
    x = np.asarray(outputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 3 or x.shape[2] != 2 or x.shape[1] < 2:
        raise ValueError(f"expected (m + 2 >= 3, K >= 2, 2) outputs, got {x.shape}")
    S, K, _ = x.shape
    xa, xp, xn = x[0], x[1], x[2:]

    d_ap, u_ap = _safe_unit(xa - xp)              # (K,), (K, 2)
    d_an, u_an = _safe_unit(xa[None] - xn)        # (m, K), (m, K, 2)
    z = d_ap[None] - d_an
    lse = _logsumexp_with_zero(z)
    inv = float(lse.mean())
    w = np.exp(z - lse[None]) / K                  # d inv / d z_j, (m, K)

    grad = np.zeros_like(x)
    wsum = w.sum(axis=0)
    grad[0] += wsum[:, None] * u_ap
    grad[1] -= wsum[:, None] * u_ap
    grad[0] -= (w[..., None] * u_an).sum(axis=0)
    grad[2:] += w[..., None] * u_an

    rho, ok, dx, dy, sxx, syy = _pearson_terms(x)
    orth = float(np.abs(rho).mean())
    # d rho / d x_i[0] = dy_i / sqrt(sxx syy) - rho dx_i / sxx, and symmetrically for x_i[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(sxx * syy)
        g0 = dy / root[:, None] - (rho / sxx)[:, None] * dx
        g1 = dx / root[:, None] - (rho / syy)[:, None] * dy
    coef = np.where(ok, np.sign(rho), 0.0)[:, None] / S
    grad[..., 0] += np.where(ok[:, None], coef * g0, 0.0)
    grad[..., 1] += np.where(ok[:, None], coef * g1, 0.0)
    return LossBreakdown(inv + orth, inv, orth, grad)


# ---------------------------------------------------------------- model evaluation

def _run(params, mcfg, x3: np.ndarray, mode: str, update_running: bool = True):
    S, K, D = x3.shape
    out, cache = forward(params, mcfg, x3.reshape(S * K, D), mode, groups=S, update_running=update_running)
    return out.reshape(S, K, 2), cache


def batch_loss(ckpt: MlpCheckpoint, x3: np.ndarray) -> LossBreakdown:
    """Eval-mode loss of a fixed ``(m + 2, K, input_dim)`` batch."""
    out, _ = _run(ckpt.parameters, ckpt.config, x3, "eval")
    return total_loss(out)


def neighborhood_inputs(curve, half_width: int, scale_normalize: bool = False) -> np.ndarray:
    """Flattened canonical neighborhoods of every point, shaped ``(n, 2 (2N + 1))``."""
    pts = curve.points if isinstance(curve, PlanarCurve) else np.asarray(curve, dtype=np.float64)
    n = len(pts)
    if n < 2 * half_width + 1:
        raise DataError(f"{n}-point curve is too small for half-width {half_width}")
    idx = (np.arange(n)[:, None] + np.arange(-half_width, half_width + 1)[None, :]) % n
    x = canonicalize_points(pts[idx])
    if scale_normalize:
        x = normalize_window_scale(x)
    return x.reshape(n, -1)


def evaluate_model(ckpt: MlpCheckpoint, curve, half_width: int | None = None) -> SignatureCurve:
    """Network signature of a curve: one ``(kappa, kappa_s)`` output per point."""
    N = ckpt.metadata.get("half_width", 8) if half_width is None else half_width
    if ckpt.config.input_dim != 2 * (2 * N + 1):
        raise DataError(f"checkpoint expects {ckpt.config.input_dim} inputs, half-width {N} gives {2 * (2 * N + 1)}")
    scaled = bool(ckpt.metadata.get("scale_normalize", False))
    out, _ = forward(ckpt.parameters, ckpt.config, neighborhood_inputs(curve, N, scaled), "eval")
    return SignatureCurve(out)


# ---------------------------------------------------------------- training loop

class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: MlpCheckpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_invariance: float
    val_orthogonality: float

    FIELDS = ("epoch", "train_loss", "val_loss", "val_invariance", "val_orthogonality")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _probe(curves, config, rng, count):
    return [sample_batch(curves, config, rng) for _ in range(count)]


def _probe_loss(ckpt, batches) -> tuple[float, float, float]:
    parts = np.array([[b.total, b.invariance, b.orthogonality] for b in (batch_loss(ckpt, x) for x in batches)])
    return tuple(float(v) for v in parts.mean(axis=0))


def _lr_at(config: TrainingConfig, step: int, total: int) -> float:
    # cosine interpolation from lr to lr_final
    frac = step / max(total - 1, 1)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))


def train(train_curves, val_curves, config: TrainingConfig, progress=None):
    """Train from scratch; returns ``(best_checkpoint, metrics)``.

    ``metrics`` has ``epochs + 1`` rows; row 0 is the untrained network. Losses in
    the log are eval-mode losses on fixed probe batches drawn once per run, so they
    are comparable across epochs. The returned checkpoint is the one with the
    lowest validation loss.
    """
    train_curves = list(getattr(train_curves, "curves", train_curves))
    val_curves = list(getattr(val_curves, "curves", val_curves))
    if not train_curves or not val_curves:
        raise DataError("training and validation sets must be non-empty")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, sample_rng, probe_train_rng, probe_val_rng = (np.random.default_rng(s) for s in seeds)
    mcfg = config.model_config()
    params = init_parameters(mcfg, init_rng)
    opt = AdamState()
    probe_train = _probe(train_curves, config, probe_train_rng, config.validation_batches)
    probe_val = _probe(val_curves, config, probe_val_rng, config.validation_batches)
    meta = {"seed": config.seed, "half_width": config.half_width, "group": config.group,
            "scale_normalize": config.scales_inputs,
            "training": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()}}

    def snapshot(epoch, history):
        return MlpCheckpoint(mcfg, params.copy(), AdamState(opt.step, dict(opt.m), dict(opt.v)),
                             {**meta, "epoch": epoch, "loss_history_tail": history[-20:]})

    def record(epoch):
        cur = snapshot(epoch, [])
        tr = _probe_loss(cur, probe_train)[0]
        vl, vi, vo = _probe_loss(cur, probe_val)
        return EpochMetrics(epoch, tr, vl, vi, vo)

    metrics = [record(0)]
    best = snapshot(0, [])
    best_val = metrics[0].val_loss
    history: list[float] = []
    total_steps = config.epochs * config.steps_per_epoch
    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(config.steps_per_epoch):
            x3 = sample_batch(train_curves, config, sample_rng)
            out, cache = _run(params, mcfg, x3, "train")
            loss = total_loss(out)
            if not math.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best)
            grads = backward(params, mcfg, cache, loss.grad.reshape(-1, 2))
            hyper = AdamHyper(lr=_lr_at(config, step, total_steps))
            try:
                params, opt = adam_step(params, grads, opt, hyper)
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), best) from None
            history.append(loss.total)
            step += 1
        m = record(epoch)
        metrics.append(m)
        if progress is not None:
            progress(m)
        log.info("epoch %d train %.4f val %.4f", epoch, m.train_loss, m.val_loss)
        if m.val_loss < best_val:
            best_val = m.val_loss
            best = snapshot(epoch, history)
    return best, metrics


# ---------------------------------------------------------------- Pearson experiment

def pearson_experiment(signatures: list[SignatureCurve], sample_counts, rng: np.random.Generator,
                       repeats: int = 1):
    """``|rho|`` between kappa and kappa_s over ``M`` random (curve, point) draws.

    ``signatures`` are precomputed per curve (from any estimator); only valid points
    are drawn. With ``repeats > 1`` the reported value is the mean of ``|rho|`` over
    that many independent draws of size ``M``, which estimates the expected ``|rho|``
    instead of a single noisy realization. Returns a list of ``(M, |rho|)`` pairs in
    the order of ``sample_counts``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    pools = [s.valid_points() for s in signatures if s.valid.any()]
    if not pools:
        raise DataError("no valid signature points")
    sizes = np.array([len(p) for p in pools])
    flat = np.concatenate(pools)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = []
    for M in sample_counts:
        if M < 2:
            raise ValueError("each sample count must be >= 2")
        vals = []
        for _ in range(repeats):
            ci = rng.integers(len(pools), size=M)
            pi = (rng.random(M) * sizes[ci]).astype(np.int64)
            vals.append(abs(pearson(flat[offsets[ci] + pi])))
        out.append((int(M), float(np.mean(vals))))
    return out


def estimator_signatures(curves, estimator) -> list[SignatureCurve]:
    """``estimator`` is a checkpoint or one of 'euclidean' / 'equiaffine'."""
    if isinstance(estimator, MlpCheckpoint):
        return [evaluate_model(estimator, c) for c in curves]
    return [axiomatic_signature(c, estimator) for c in curves]
