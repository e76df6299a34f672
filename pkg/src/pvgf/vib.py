"""Variational information bottleneck classifier in plain numpy.

Encoder: input -> hidden (ReLU) -> mean and log-variance of a 2-d Gaussian.
Decoder: latent -> class logits -> softmax. Loss per example is cross-entropy
plus beta times the KL divergence to a standard normal prior.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, Diverged, EmptyClass, LayoutMismatch

N_INPUT, N_HIDDEN, N_LATENT, N_CLASSES = 50, 12, 2, 3
PARAM_ORDER = ("W1", "b1", "Wmu", "bmu", "Wlv", "blv", "Wd", "bd")
SCHEMA_VERSION = 1


def param_shapes(n_input=N_INPUT, n_hidden=N_HIDDEN, n_latent=N_LATENT, n_classes=N_CLASSES):
    return {"W1": (n_input, n_hidden), "b1": (n_hidden,), "Wmu": (n_hidden, n_latent),
            "bmu": (n_latent,), "Wlv": (n_hidden, n_latent), "blv": (n_latent,),
            "Wd": (n_latent, n_classes), "bd": (n_classes,)}


@dataclass
class VibParameters:
    W1: np.ndarray
    b1: np.ndarray
    Wmu: np.ndarray
    bmu: np.ndarray
    Wlv: np.ndarray
    blv: np.ndarray
    Wd: np.ndarray
    bd: np.ndarray
    beta: float = 0.01
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        n_in, n_h = self.W1.shape
        expected = param_shapes(n_in, n_h, self.Wmu.shape[1], self.Wd.shape[1])
        for name in PARAM_ORDER:
            arr = getattr(self, name)
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_input(self):
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, n_input=N_INPUT, beta=0.01, **dims) -> "VibParameters":
        shapes = param_shapes(n_input, **dims)
        return cls(**{k: np.zeros(s) for k, s in shapes.items()}, beta=beta)

    @classmethod
    def glorot(cls, rng, n_input=N_INPUT, beta=0.01, **dims) -> "VibParameters":
        """Weights uniform in +-sqrt(6/(fan_in+fan_out)); biases zero."""
        shapes = param_shapes(n_input, **dims)
        arrays = {}
        for name in PARAM_ORDER:
            s = shapes[name]
            if len(s) == 2:
                lim = math.sqrt(6.0 / (s[0] + s[1]))
                arrays[name] = rng.uniform(-lim, lim, s)
            else:
                arrays[name] = np.zeros(s)
        return cls(**arrays, beta=beta)

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_ORDER}

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_ORDER])

    def with_flat(self, vec) -> "VibParameters":
        out, pos = {}, 0
        for k in PARAM_ORDER:
            a = getattr(self, k)
            out[k] = np.asarray(vec[pos:pos + a.size], dtype=float).reshape(a.shape)
            pos += a.size
        return VibParameters(**out, beta=self.beta, mean=self.mean, std=self.std)

    def standardize(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_input:
            raise LayoutMismatch(f"model expects {self.n_input} features, got {X.shape[1]}")
        if self.mean is None:
            return X
        return (X - self.mean) / self.std


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 1000
    epochs: int = 4000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Metrics:
    accuracy: float = math.nan
    recall: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    ce_curve: list = field(default_factory=list)
    kl_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "recall": list(self.recall),
                "confusion": None if self.confusion is None else self.confusion.tolist(),
                "ce_curve": list(self.ce_curve), "kl_curve": list(self.kl_curve)}


# ----------------------------------------------------------------- forward


def encode(params: VibParameters, x):
    """Mean and log-variance of the latent Gaussian for (already standardized) inputs."""
    x = np.asarray(x, dtype=float)
    h = np.maximum(x @ params.W1 + params.b1, 0.0)
    return h @ params.Wmu + params.bmu, h @ params.Wlv + params.blv


def reparameterize(mu, logvar, eps):
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


def kl_to_standard_normal(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims (per row for 2-d input)."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    return 0.5 * np.sum(np.expm1(logvar) - logvar + mu * mu, axis=-1)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward(params, X, y, eps, beta):
    pre = X @ params.W1 + params.b1
    h = np.maximum(pre, 0.0)
    mu = h @ params.Wmu + params.bmu
    lv = h @ params.Wlv + params.blv
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * eps
    logits = z @ params.Wd + params.bd
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    logp = shifted - logz[:, None]
    n = X.shape[0]
    ce = -logp[np.arange(n), y]
    kl = kl_to_standard_normal(mu, lv)
    cache = (X, y, pre, h, mu, lv, sigma, eps, z, np.exp(logp))
    return float(np.mean(ce)), float(np.mean(kl)), cache


def loss(params: VibParameters, X, y, beta: float, eps):
    """(total, CE part, KL part) averaged over the batch for fixed latent noise ``eps``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    ce, kl, _ = _forward(params, X, y, np.asarray(eps, dtype=float), beta)
    return ce + beta * kl, ce, kl


def loss_and_grad(params: VibParameters, X, y, beta: float, eps):
    """Loss parts and analytic gradients (dict keyed like ``PARAM_ORDER``)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    ce, kl, (X, y, pre, h, mu, lv, sigma, eps, z, p) = _forward(params, X, y, eps, beta)
    n = X.shape[0]
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    g = {"Wd": z.T @ dlogits, "bd": dlogits.sum(axis=0)}
    dz = dlogits @ params.Wd.T
    dmu = dz + beta * mu / n
    dlv = dz * eps * 0.5 * sigma + beta * 0.5 * np.expm1(lv) / n
    g["Wmu"] = h.T @ dmu
    g["bmu"] = dmu.sum(axis=0)
    g["Wlv"] = h.T @ dlv
    g["blv"] = dlv.sum(axis=0)
    dpre = (dmu @ params.Wmu.T + dlv @ params.Wlv.T) * (pre > 0.0)
    g["W1"] = X.T @ dpre
    g["b1"] = dpre.sum(axis=0)
    return ce + beta * kl, ce, kl, g


# ----------------------------------------------------------------- training


def fit_standardization(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def train(X, y, config: TrainConfig = TrainConfig(), beta: float = 0.01):
    """Minibatch AdamW on the CE + beta*KL objective; returns (params, Metrics)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ValueError("X must be a non-empty 2-d array matching y")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError("labels must lie in {0, 1, 2}")
    rng = np.random.default_rng(config.seed)
    mean, std = fit_standardization(X)
    Xs = (X - mean) / std
    params = VibParameters.glorot(rng, n_input=X.shape[1], beta=beta)
    params.mean, params.std = mean, std
    m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    v = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    b1, b2 = config.beta1, config.beta2
    n = len(X)
    ce_curve, kl_curve = [], []
    t = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        ce_sum = kl_sum = 0.0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            eps = rng.standard_normal((len(idx), params.Wmu.shape[1]))
            _, ce, kl, g = loss_and_grad(params, Xs[idx], y[idx], beta, eps)
            if not (math.isfinite(ce) and math.isfinite(kl)):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            ce_sum += ce * len(idx)
            kl_sum += kl * len(idx)
            t += 1
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for k in PARAM_ORDER:
                p = getattr(params, k)
                p *= 1.0 - config.lr * config.weight_decay
                m[k] = b1 * m[k] + (1.0 - b1) * g[k]
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k]
                p -= config.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.eps)
        ce_curve.append(ce_sum / n)
        kl_curve.append(kl_sum / n)
    return params, Metrics(ce_curve=ce_curve, kl_curve=kl_curve)


# ---------------------------------------------------------------- inference


def predict(params: VibParameters, x):
    """(labels, probabilities, latent means); the latent is taken at its mean."""
    Xs = params.standardize(x)
    mu, _ = encode(params, Xs)
    probs = softmax(mu @ params.Wd + params.bd)
    return np.argmax(probs, axis=1), probs, mu


def evaluate(params: VibParameters, X, y, train_metrics: Metrics | None = None) -> Metrics:
    y = np.asarray(y, dtype=int)
    missing = [c for c in range(N_CLASSES) if not np.any(y == c)]
    if missing:
        raise EmptyClass(f"labels {missing} absent from the test set")
    pred, _, _ = predict(params, X)
    return metrics_from_predictions(y, pred, train_metrics)


def metrics_from_predictions(y, pred, train_metrics: Metrics | None = None) -> Metrics:
    y = np.asarray(y, dtype=int)
    pred = np.asarray(pred, dtype=int)
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    np.add.at(conf, (y, pred), 1)
    recall = [float(conf[c, c] / conf[c].sum()) if conf[c].sum() else math.nan
              for c in range(N_CLASSES)]
    out = Metrics(accuracy=float(np.trace(conf) / conf.sum()), recall=recall, confusion=conf)
    if train_metrics is not None:
        out.ce_curve, out.kl_curve = train_metrics.ce_curve, train_metrics.kl_curve
    return out


# ---------------------------------------------------------------------- io


def _round9(a):
    return [float(f"{x:.9g}") for x in np.ravel(a)]


def model_to_json(params: VibParameters, config: TrainConfig, feature_names=None,
                  layout: str = "", feature_set: str = "full") -> str:
    arrays = params.arrays()
    doc = {"schema_version": SCHEMA_VERSION,
           "shapes": {k: list(a.shape) for k, a in arrays.items()},
           "params": {k: _round9(a) for k, a in arrays.items()},
           "mean": _round9(params.mean) if params.mean is not None else None,
           "std": _round9(params.std) if params.std is not None else None,
           "beta": params.beta, "train_config": asdict(config),
           "train_config_digest": config.digest(), "feature_names": feature_names,
           "layout_digest": layout, "feature_set": feature_set}
    return json.dumps(doc, indent=1, sort_keys=True)


def model_from_json(text: str):
    """(params, metadata dict)."""
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported model schema_version {doc.get('schema_version')}")
    arrays = {k: np.array(doc["params"][k], dtype=float).reshape(doc["shapes"][k])
              for k in PARAM_ORDER}
    mean = None if doc["mean"] is None else np.array(doc["mean"])
    std = None if doc["std"] is None else np.array(doc["std"])
    params = VibParameters(**arrays, beta=doc["beta"], mean=mean, std=std)
    return params, doc
