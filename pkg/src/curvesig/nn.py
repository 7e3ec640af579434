"""Fully-connected sine network with batch normalization, written against numpy.

Hidden layers are ``linear -> batchnorm -> sin``; blocks of ``layers_per_block``
layers share a width that halves from block to block. A plain linear head maps the
last hidden width to the two outputs.

Train-mode forward passes accept ``groups``: the batch rows are split into that many
contiguous, equally sized slots and every slot is normalized with its own statistics.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "curvesig-mlp"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 34
    first_block_width: int = 128
    layers_per_block: int = 3
    num_blocks: int = 4
    output_dim: int = 2
    batchnorm_epsilon: float = 1e-5
    batchnorm_momentum: float = 0.1
    first_omega: float = 1.0
    hidden_omega: float = 1.0

    def __post_init__(self):
        for name in ("input_dim", "first_block_width", "layers_per_block", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.output_dim != 2:
            raise ValueError("output_dim is fixed at 2 (kappa, kappa_s)")
        if self.first_block_width >> (self.num_blocks - 1) < 1:
            raise ValueError("too many blocks: width would halve below 1")

    @property
    def widths(self) -> list[int]:
        return [self.first_block_width >> b for b in range(self.num_blocks) for _ in range(self.layers_per_block)]

    @property
    def num_hidden(self) -> int:
        return self.num_blocks * self.layers_per_block


@dataclass
class MlpParameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray]
    betas: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"], out[f"b{i}"] = w, b
        for i, (g, be) in enumerate(zip(self.gammas, self.betas)):
            out[f"gamma{i}"], out[f"beta{i}"] = g, be
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.running_mean, self.running_var)):
            out[f"mean{i}"], out[f"var{i}"] = m, v
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.trainable(), **self.buffers()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: ModelConfig) -> "MlpParameters":
        L = config.num_hidden
        try:
            return cls(
                weights=[arrays[f"W{i}"] for i in range(L + 1)],
                biases=[arrays[f"b{i}"] for i in range(L + 1)],
                gammas=[arrays[f"gamma{i}"] for i in range(L)],
                betas=[arrays[f"beta{i}"] for i in range(L)],
                running_mean=[arrays[f"mean{i}"] for i in range(L)],
                running_var=[arrays[f"var{i}"] for i in range(L)],
            )
        except KeyError as exc:
            raise DataError(f"missing parameter array {exc}") from None

    def copy(self) -> "MlpParameters":
        return MlpParameters(*([a.copy() for a in group] for group in (
            self.weights, self.biases, self.gammas, self.betas, self.running_mean, self.running_var)))

    def replace(self, trainable: dict[str, np.ndarray]) -> "MlpParameters":
        merged = {**self.arrays(), **trainable}
        L = len(self.gammas)
        return MlpParameters(
            weights=[merged[f"W{i}"] for i in range(L + 1)],
            biases=[merged[f"b{i}"] for i in range(L + 1)],
            gammas=[merged[f"gamma{i}"] for i in range(L)],
            betas=[merged[f"beta{i}"] for i in range(L)],
            running_mean=list(self.running_mean),
            running_var=list(self.running_var),
        )


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> MlpParameters:
    """Uniform ``+-sqrt(6 / fan_in) * omega`` weights, zero biases, identity batchnorm."""
    dims = [config.input_dim, *config.widths]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        omega = config.first_omega if i == 0 else config.hidden_omega
        bound = math.sqrt(6.0 / fan_in) * omega
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    bound = math.sqrt(6.0 / dims[-1])
    weights.append(rng.uniform(-bound, bound, size=(dims[-1], config.output_dim)))
    biases.append(np.zeros(config.output_dim))
    widths = config.widths
    return MlpParameters(
        weights=weights,
        biases=biases,
        gammas=[np.ones(w) for w in widths],
        betas=[np.zeros(w) for w in widths],
        running_mean=[np.zeros(w) for w in widths],
        running_var=[np.ones(w) for w in widths],
    )


@dataclass
class ForwardCache:
    inputs: np.ndarray
    groups: int
    activations: list[np.ndarray] = field(default_factory=list)  # input of each linear layer
    normalized: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    pre_sine: list[np.ndarray] = field(default_factory=list)
    batch_mean: list[np.ndarray] = field(default_factory=list)
    batch_var: list[np.ndarray] = field(default_factory=list)


def forward(params: MlpParameters, config: ModelConfig, batch: np.ndarray, mode: str = "eval",
            groups: int = 1, update_running: bool = True):
    """Run the network on a ``(B, input_dim)`` batch.

    Returns ``(outputs, cache)``; ``cache`` is None in eval mode. In train mode the
    running statistics in ``params`` are updated in place with momentum (the
    average of the per-group statistics), unless ``update_running`` is false.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DataError(f"batch must be (B, {config.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("network input contains NaN or inf")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    B = len(x)
    eps = config.batchnorm_epsilon
    if mode == "eval":
        h = x
        for i in range(config.num_hidden):
            z = h @ params.weights[i] + params.biases[i]
            zhat = (z - params.running_mean[i]) / np.sqrt(params.running_var[i] + eps)
            h = np.sin(params.gammas[i] * zhat + params.betas[i])
        return h @ params.weights[-1] + params.biases[-1], None

    if B % groups or B // groups < 2:
        raise DataError(f"train mode needs >= 2 rows per group (B={B}, groups={groups})")
    k = B // groups
    cache = ForwardCache(inputs=x, groups=groups)
    h = x
    mom = config.batchnorm_momentum
    for i in range(config.num_hidden):
        cache.activations.append(h)
        z = (h @ params.weights[i] + params.biases[i]).reshape(groups, k, -1)
        mean = z.mean(axis=1, keepdims=True)
        var = ((z - mean) ** 2).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        zhat = (z - mean) * inv_std
        y = (params.gammas[i] * zhat + params.betas[i]).reshape(B, -1)
        cache.normalized.append(zhat)
        cache.inv_std.append(inv_std)
        cache.pre_sine.append(y)
        cache.batch_mean.append(mean)
        cache.batch_var.append(var)
        if update_running:
            params.running_mean[i] = (1 - mom) * params.running_mean[i] + mom * mean.mean(axis=(0, 1))
            params.running_var[i] = (1 - mom) * params.running_var[i] + mom * var.mean(axis=(0, 1))
        h = np.sin(y)
    cache.activations.append(h)
    return h @ params.weights[-1] + params.biases[-1], cache


def backward(params: MlpParameters, config: ModelConfig, cache: ForwardCache,
             output_gradients: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(outputs * output_gradients)`` for every trainable array."""
    if cache is None:
        raise ValueError("backward needs the cache of a train-mode forward pass")
    g = np.asarray(output_gradients, dtype=np.float64)
    B = len(cache.inputs)
    if g.shape != (B, config.output_dim):
        raise DataError(f"output gradients must be ({B}, {config.output_dim}), got {g.shape}")
    G, k = cache.groups, B // cache.groups
    L = config.num_hidden
    grads = {}
    h_last = cache.activations[L]
    grads[f"W{L}"] = h_last.T @ g
    grads[f"b{L}"] = g.sum(axis=0)
    dh = g @ params.weights[L].T
    for i in reversed(range(L)):
        dy = dh * np.cos(cache.pre_sine[i])
        zhat = cache.normalized[i]
        dy3 = dy.reshape(G, k, -1)
        grads[f"gamma{i}"] = (dy3 * zhat).sum(axis=(0, 1))
        grads[f"beta{i}"] = dy.sum(axis=0)
        dzhat = dy3 * params.gammas[i]
        dz = cache.inv_std[i] * (dzhat - dzhat.mean(axis=1, keepdims=True)
                                 - zhat * (dzhat * zhat).mean(axis=1, keepdims=True))
        dz = dz.reshape(B, -1)
        grads[f"W{i}"] = cache.activations[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params.weights[i].T
    return grads


# ---------------------------------------------------------------- Adam

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: MlpParameters, grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper = AdamHyper()) -> tuple[MlpParameters, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    current = params.trainable()
    if set(grads) != set(current):
        raise DataError("gradient names do not match trainable parameters")
    for name, g in grads.items():
        if g.shape != current[name].shape:
            raise DataError(f"gradient {name} has shape {g.shape}, expected {current[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    t = state.step + 1
    c1 = 1 - hyper.beta1 ** t
    c2 = 1 - hyper.beta2 ** t
    new_m, new_v, updated = {}, {}, {}
    for name, g in grads.items():
        m = hyper.beta1 * state.m.get(name, 0.0) + (1 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, 0.0) + (1 - hyper.beta2) * g * g
        new_m[name], new_v[name] = m, v
        updated[name] = current[name] - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params.replace(updated), AdamState(t, new_m, new_v)


# ---------------------------------------------------------------- checkpoints

@dataclass
class MlpCheckpoint:
    config: ModelConfig
    parameters: MlpParameters
    optimizer: AdamState = field(default_factory=AdamState)
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpCheckpoint):
            return NotImplemented
        return _payload(self) == _payload(other)


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"], validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).astype(np.float64)


def _payload(ckpt: MlpCheckpoint) -> dict:
    return {
        "config": asdict(ckpt.config),
        "parameters": {k: _encode(v) for k, v in sorted(ckpt.parameters.arrays().items())},
        "optimizer": {
            "step": ckpt.optimizer.step,
            "m": {k: _encode(v) for k, v in sorted(ckpt.optimizer.m.items())},
            "v": {k: _encode(v) for k, v in sorted(ckpt.optimizer.v.items())},
        },
        "metadata": ckpt.metadata,
    }


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(ckpt: MlpCheckpoint, path) -> None:
    from .datasets import write_json_atomic

    payload = _payload(ckpt)
    doc = {"format": CHECKPOINT_FORMAT, "version": ckpt.version,
           "sha256": _digest(payload), "payload": payload}
    write_json_atomic(doc, Path(path))


def load_checkpoint(path) -> MlpCheckpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such checkpoint") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupted checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
    payload = doc.get("payload")
    if not isinstance(payload, dict) or _digest(payload) != doc.get("sha256"):
        raise DataError(f"{path}: checksum mismatch, file was modified or truncated")
    try:
        config = ModelConfig(**payload["config"])
        arrays = {k: _decode(v) for k, v in payload["parameters"].items()}
        opt = payload["optimizer"]
        state = AdamState(int(opt["step"]), {k: _decode(v) for k, v in opt["m"].items()},
                          {k: _decode(v) for k, v in opt["v"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed checkpoint payload ({exc})") from None
    return MlpCheckpoint(config, MlpParameters.from_arrays(arrays, config), state, payload.get("metadata", {}))
