"""Bad-data detectors: residual threshold and a small feed-forward net.

The residual detector flags a measurement vector when ||W z|| exceeds a
threshold zeta.  The learned detector is a fully-connected net with sigmoid
output trained on labeled safe/compromised vectors; a score above 0.5 means
"compromised", at or below 0.5 means "safe", so the decision boundary is
exactly the attacker's feasibility boundary.

Training is plain mini-batch SGD on binary cross-entropy, deterministic for
a given seed.  Raw meter readings sit at the 100 MW scale where sigmoids
saturate, so an optional per-feature min-max rescaling (fit on the training
set, stored with the detector) is applied in front of the first layer; the
detector always consumes raw MW vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDataError,
    DimensionError,
    EmptySetError,
    ParseError,
)
from .grid_model import EstimatorModel, _frozen_array

ACTIVATIONS = ("sigmoid", "relu", "tanh")


def _sigmoid(x):
    # stable in both tails
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name, x):
    if name == "sigmoid":
        return _sigmoid(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    raise ConfigError(f"unknown activation {name!r}")


def _activate_deriv(name, x, fx):
    # derivative in terms of pre-activation x and value fx
    if name == "sigmoid":
        return fx * (1.0 - fx)
    if name == "relu":
        return (x > 0).astype(float)  # subgradient 0 at the kink
    if name == "tanh":
        return 1.0 - fx * fx
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpLayer:
    weights: np.ndarray  # (fan_out, fan_in)
    biases: np.ndarray  # (fan_out,)
    activation: str


@dataclass(frozen=True)
class MlpDetector:
    """Layered net scoring a measurement vector in (0, 1).

    input_offset/input_scale implement the stored feature rescaling
    (z - offset) * scale applied before the first layer; identity when
    training ran on raw features.
    """

    layers: tuple[MlpLayer, ...]
    input_offset: np.ndarray
    input_scale: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("detector needs at least one layer")
        dim = self.layers[0].weights.shape[1]
        if self.input_offset.shape != (dim,) or self.input_scale.shape != (dim,):
            raise DimensionError("input scaling does not match the first layer")
        for lay in self.layers:
            if lay.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {lay.activation!r}")
            if lay.weights.shape[0] != lay.biases.shape[0]:
                raise DimensionError("layer weights and biases disagree")
            if lay.weights.shape[1] != dim:
                raise DimensionError("layer dimensions do not chain")
            dim = lay.weights.shape[0]
        if dim != 1:
            raise DimensionError("output layer must have a single unit")
        if self.layers[-1].activation != "sigmoid":
            raise ConfigError("output activation must be sigmoid")

    @property
    def input_dim(self):
        return self.layers[0].weights.shape[1]

    @property
    def hidden_sizes(self):
        return tuple(l.weights.shape[0] for l in self.layers[:-1])


@dataclass(frozen=True)
class SeDetector:
    """Residual-threshold detector: compromised iff ||W z|| > zeta."""

    model: EstimatorModel
    zeta: float

    def __post_init__(self):
        if self.zeta < 0:
            raise ConfigError("zeta must be nonnegative")


@dataclass(frozen=True)
class LabeledDataset:
    z: np.ndarray  # (n, m) raw MW
    labels: np.ndarray  # (n,) 0 safe / 1 compromised
    seed: int

    def __post_init__(self):
        if self.z.ndim != 2 or self.labels.shape != (self.z.shape[0],):
            raise DimensionError("dataset arrays disagree")


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (16, 8)
    activation: str = "sigmoid"
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    normalize: bool = False


def se_detect(det, z):
    """(compromised?, residual norm).  The boundary ||Wz|| == zeta is safe."""
    z = np.asarray(z, dtype=float)
    if z.shape != (det.model.n_meters,):
        raise DimensionError(f"z has shape {z.shape}, expected ({det.model.n_meters},)")
    norm = float(np.linalg.norm(det.model.W @ z))
    return norm > det.zeta, norm


def _forward_batch(det, Z):
    a = (Z - det.input_offset) * det.input_scale
    for lay in det.layers:
        a = _activate(lay.activation, a @ lay.weights.T + lay.biases)
    return a[:, 0]


def mlp_forward(det, z):
    """Detector score in (0, 1); accepts one vector or a (k, m) batch."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if Z.shape[1] != det.input_dim:
        raise DimensionError(f"z has {Z.shape[1]} features, expected {det.input_dim}")
    scores = _forward_batch(det, Z)
    return float(scores[0]) if single else scores


def mlp_gradient(det, z):
    """Exact gradient of the score with respect to the raw input vector."""
    z = np.asarray(z, dtype=float)
    if z.shape != (det.input_dim,):
        raise DimensionError(f"z has shape {z.shape}, expected ({det.input_dim},)")
    a = (z - det.input_offset) * det.input_scale
    pres, acts = [], [a]
    for lay in det.layers:
        pre = lay.weights @ a + lay.biases
        a = _activate(lay.activation, pre)
        pres.append(pre)
        acts.append(a)
    g = np.ones(1)
    for lay, pre, act in zip(reversed(det.layers), reversed(pres), reversed(acts[1:])):
        g = (g * _activate_deriv(lay.activation, pre, act)) @ lay.weights
    return g * det.input_scale


def _init_layers(sizes, activation, rng):
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = "sigmoid" if k == len(sizes) - 2 else activation
        layers.append([w, b, act])
    return layers


def mlp_train(data, config):
    """Train a detector on a labeled dataset; bitwise deterministic per seed.

    Minimizes binary cross-entropy by mini-batch SGD.  Returns the detector
    with the training configuration and per-epoch losses in `meta`.
    """
    if config.epochs <= 0:
        raise ConfigError("epochs must be positive")
    if config.learning_rate <= 0:
        raise ConfigError("learning rate must be positive")
    if config.batch_size <= 0:
        raise ConfigError("batch size must be positive")
    Z, y = np.asarray(data.z, dtype=float), np.asarray(data.labels, dtype=float)
    if Z.shape[0] == 0:
        raise DegenerateDataError("empty dataset")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("training data contains a single class")

    if config.normalize:
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        span = hi - lo
        scale = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 1.0)
        offset = lo
    else:
        offset = np.zeros(Z.shape[1])
        scale = np.ones(Z.shape[1])
    X = (Z - offset) * scale

    rng = np.random.default_rng(config.seed)
    sizes = [Z.shape[1], *config.hidden, 1]
    layers = _init_layers(sizes, config.activation, rng)

    n = X.shape[0]
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            # forward, caching activations
            acts, pres = [xb], []
            a = xb
            for w, b, act in layers:
                pre = a @ w.T + b
                a = _activate(act, pre)
                pres.append(pre)
                acts.append(a)
            logits = pres[-1][:, 0]
            # BCE via logits, stable for saturated outputs
            epoch_loss += float(
                np.sum(np.maximum(logits, 0) - logits * yb + np.log1p(np.exp(-np.abs(logits))))
            )
            # backward
            delta = (a[:, 0] - yb)[:, None] / len(idx)
            for k in range(len(layers) - 1, -1, -1):
                w, b, act = layers[k]
                if k < len(layers) - 1:
                    delta = delta * _activate_deriv(act, pres[k], acts[k + 1])
                gw = delta.T @ acts[k]
                gb = delta.sum(axis=0)
                delta = delta @ w
                w -= config.learning_rate * gw
                b -= config.learning_rate * gb
        losses.append(epoch_loss / n)

    det = MlpDetector(
        layers=tuple(
            MlpLayer(_frozen_array(w), _frozen_array(b), act) for w, b, act in layers
        ),
        input_offset=_frozen_array(offset),
        input_scale=_frozen_array(scale),
        meta={
            "config": {
                "hidden": list(config.hidden),
                "activation": config.activation,
                "learning_rate": config.learning_rate,
                "epochs": config.epochs,
                "batch_size": config.batch_size,
                "seed": config.seed,
                "normalize": config.normalize,
            },
            "epoch_losses": losses,
        },
    )
    return det


def generate_dataset(model, scenario, seed):
    """Labeled safe/attacked vectors around an operating point.

    `scenario` needs: x0 (state), noise_sigma, attack_generator (callable
    rng -> injection vector) and n_total (even).  The first half is safe
    z = H x0 + e, the second half adds a sampled injection.
    """
    x0 = np.asarray(scenario["x0"], dtype=float)
    sigma = float(scenario["noise_sigma"])
    gen = scenario["attack_generator"]
    n_total = int(scenario["n_total"])
    if n_total <= 0 or n_total % 2:
        raise ConfigError("n_total must be positive and even")
    if sigma < 0:
        raise ConfigError("noise_sigma must be nonnegative")
    z0 = model.H @ x0
    m = model.n_meters
    rng = np.random.default_rng(seed)
    half = n_total // 2
    noise = rng.normal(0.0, sigma, size=(n_total, m)) if sigma > 0 else np.zeros((n_total, m))
    Z = np.tile(z0, (n_total, 1)) + noise
    for i in range(half, n_total):
        Z[i] += gen(rng)
    labels = np.concatenate([np.zeros(half), np.ones(half)])
    return LabeledDataset(z=_frozen_array(Z), labels=_frozen_array(labels), seed=seed)


def _flag_rate(detector, samples):
    Z = np.asarray(samples, dtype=float)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[0] == 0:
        raise EmptySetError("no samples")
    if isinstance(detector, SeDetector):
        norms = np.linalg.norm(Z @ detector.model.W.T, axis=1)
        return float(np.mean(norms > detector.zeta))
    return float(np.mean(mlp_forward(detector, Z) > 0.5))


def false_alarm_rate(detector, safe_samples):
    """Fraction of (genuinely safe) samples flagged compromised."""
    return _flag_rate(detector, safe_samples)


def detection_rate(detector, attacked_samples):
    """Fraction of attacked samples flagged compromised."""
    return _flag_rate(detector, attacked_samples)


def calibrate_threshold(mlp, model, support, safe_samples, n_mc=None, seed=None):
    """Threshold matching the residual detector's false alarms to the net's.

    zeta is the empirical (1 - r)-quantile (linear interpolation) of the
    residual norms over the safe samples, r being the net's false-alarm
    rate on the same samples; r = 0 lands on the maximum observed norm.
    `support` only tags the record (budgets are tracked per compromised
    meter set); `n_mc`/`seed` optionally subsample the provided pool.
    """
    Z = np.asarray(safe_samples, dtype=float)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[0] == 0:
        raise EmptySetError("no safe samples to calibrate on")
    if n_mc is not None and n_mc < Z.shape[0]:
        idx = np.random.default_rng(seed).choice(Z.shape[0], size=n_mc, replace=False)
        Z = Z[idx]
    r = false_alarm_rate(mlp, Z)
    norms = np.linalg.norm(Z @ model.W.T, axis=1)
    return float(np.quantile(norms, 1.0 - r, method="linear"))


def detector_to_json(det):
    """Serialize a detector (dims, row-major weights, scaling, provenance)."""
    return json.dumps(
        {
            "layers": [
                {
                    "shape": list(lay.weights.shape),
                    "weights": [float(v) for v in lay.weights.ravel()],
                    "biases": [float(v) for v in lay.biases],
                    "activation": lay.activation,
                }
                for lay in det.layers
            ],
            "input_offset": [float(v) for v in det.input_offset],
            "input_scale": [float(v) for v in det.input_scale],
            "meta": det.meta,
        },
        sort_keys=True,
    )


def detector_from_json(text):
    try:
        raw = json.loads(text)
        layers = tuple(
            MlpLayer(
                weights=_frozen_array(np.array(l["weights"]).reshape(l["shape"])),
                biases=_frozen_array(l["biases"]),
                activation=l["activation"],
            )
            for l in raw["layers"]
        )
        return MlpDetector(
            layers=layers,
            input_offset=_frozen_array(raw["input_offset"]),
            input_scale=_frozen_array(raw["input_scale"]),
            meta=raw.get("meta", {}),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ParseError(f"bad detector document: {e}")
