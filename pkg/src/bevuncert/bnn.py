"""MC-dropout predictive moments, heteroscedastic losses and a small test network.

Everything is plain numpy. The regressor is a small MLP (tanh or ReLU)
whose optional second output parameterizes the aleatoric noise of a
heteroscedastic Gaussian likelihood, either directly as ``s = log sigma^2``
or as ``sigma = softplus(raw)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from ._rng import stream
from .errors import ConfigError, EmptyInputError, TrainingDivergenceError

PLACEMENTS = ("head-only", "all-layers", "second-stage-conv")
# name -> (activation, derivative expressed through the activation output)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda t: 1.0 - t * t),
    "relu": (lambda a: np.maximum(a, 0.0), lambda t: (t > 0).astype(np.float64)),
}
CHECKPOINT_FORMAT = "bevuncert-tinyregressor"
CHECKPOINT_VERSION = 1
STD_LINKS = ("exp", "softplus")
SIGMA_FLOOR = 1e-4
DEFAULT_T = 15


# ---------------------------------------------------------------------------
# Monte-Carlo moments and entropy


@dataclass(frozen=True)
class MCRegressionSamples:
    y_hat: np.ndarray
    sigma_hat_sq: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_hat, dtype=np.float64)
        s = np.asarray(self.sigma_hat_sq, dtype=np.float64)
        if y.shape != s.shape:
            raise ValueError(f"shape mismatch: {y.shape} vs {s.shape}")
        if np.any(s < 0):
            raise ValueError("predicted variances must be >= 0")
        object.__setattr__(self, "y_hat", y)
        object.__setattr__(self, "sigma_hat_sq", s)

    @property
    def T(self) -> int:
        return 0 if self.y_hat.ndim == 0 else self.y_hat.shape[0]


@dataclass(frozen=True)
class MCClassificationSamples:
    """Logits of shape (T, C), or (T, N, C) for a batch."""

    logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64))


def predictive_moments(s: MCRegressionSamples) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Mean and total variance over the T passes (leading axis).

    ``Var = mean(y^2 + sigma^2) - mean(y)^2``, evaluated in the centred form
    ``mean((y - mean(y))^2) + mean(sigma^2)`` so it never goes negative and
    is exactly zero for identical passes without aleatoric noise.
    """
    if s.T == 0:
        raise EmptyInputError("need at least one forward pass")
    y, v = s.y_hat, s.sigma_hat_sq
    mean = y.mean(axis=0)
    # rounding in the mean would otherwise leave a tiny spread for constant passes
    dev = np.where(y.max(axis=0) == y.min(axis=0), 0.0, y - mean)
    var = (dev * dev).mean(axis=0) + v.mean(axis=0)
    if np.ndim(mean) == 0:
        return float(mean), float(var)
    return mean, var


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def shannon_entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


def mc_entropy(s: MCClassificationSamples) -> float | np.ndarray:
    """Entropy (nats) of the softmax scores averaged over the passes."""
    if s.logits.shape[0] == 0:
        raise EmptyInputError("need at least one forward pass")
    mean_scores = softmax(s.logits).mean(axis=0)
    h = shannon_entropy(mean_scores)
    return float(h) if np.ndim(h) == 0 else h


# ---------------------------------------------------------------------------
# Losses


class LossGrad(NamedTuple):
    value: np.ndarray | float
    d_f: np.ndarray | float
    d_s: np.ndarray | float


def heteroscedastic_loss(y, f, s) -> LossGrad:
    """``(y - f)^2 * exp(-s) + s`` elementwise, with gradients in f and s."""
    y, f, s = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (y, f, s)))
    r = y - f
    inv = np.exp(-s)
    value = r * r * inv + s
    d_f = -2.0 * r * inv
    d_s = 1.0 - r * r * inv
    return LossGrad(_scalar(value), _scalar(d_f), _scalar(d_s))


def l1_heteroscedastic_loss(y, f, s) -> LossGrad:
    """``|y - f| * exp(-s) + s``; subgradient 0 in f at a zero residual."""
    y, f, s = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (y, f, s)))
    r = y - f
    inv = np.exp(-s)
    value = np.abs(r) * inv + s
    d_f = -np.sign(r) * inv
    d_s = 1.0 - np.abs(r) * inv
    return LossGrad(_scalar(value), _scalar(d_f), _scalar(d_s))


def _scalar(a: np.ndarray):
    return float(a) if np.ndim(a) == 0 else a


def weight_decay_term(theta, p_drop: float, n: int) -> float:
    """``(1 - p_drop) / (2N) * ||theta||^2``; ``theta`` may be a list of arrays."""
    if n < 1:
        raise ConfigError("N must be >= 1")
    sq = sum(float(np.sum(np.asarray(t, dtype=np.float64) ** 2)) for t in _as_list(theta))
    return (1.0 - p_drop) / (2.0 * n) * sq


def _as_list(theta) -> list:
    if isinstance(theta, (list, tuple)) and theta and isinstance(theta[0], np.ndarray):
        return list(theta)
    return [theta]


def softmax_cross_entropy(target: int, logits: np.ndarray) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[..., target])


def attenuated_classification_loss(
    logits,
    sigma,
    target: int,
    J: int,
    seed: int = 0,
) -> LossGrad:
    """Mean softmax cross-entropy over J Gaussian corruptions of the logits.

    Noise is reparameterised as ``logits + sigma * eps`` with ``eps`` fixed by
    the seed, so the returned gradients are exact for that draw. ``d_f`` is
    the gradient in the logits and ``d_s`` the gradient in sigma.
    """
    if J < 1:
        raise ConfigError("J must be >= 1")
    logits = np.asarray(logits, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ConfigError("sigma must be >= 0")
    eps = stream(seed).standard_normal((J, logits.shape[-1]))
    noisy = logits + sigma * eps
    logp = log_softmax(noisy)
    value = float(-logp[:, target].mean())
    g = np.exp(logp)
    g[:, target] -= 1.0
    d_logits = g.mean(axis=0)
    d_sigma = (g * eps).mean(axis=0)
    return LossGrad(value, d_logits, d_sigma)


# ---------------------------------------------------------------------------
# Dropout


@dataclass(frozen=True)
class DropoutSpec:
    p_drop: float = 0.2
    placement: str = "head-only"

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")


def dropout_mask(shape, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, survivors scaled 1/(1-p)."""
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"p_drop must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p_drop
    return keep / (1.0 - p_drop)


def apply_dropout(activations, p_drop: float, seed: int | np.random.Generator = 0) -> np.ndarray:
    a = np.asarray(activations, dtype=np.float64)
    if p_drop == 0.0:
        return a.copy()
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    return a * dropout_mask(a.shape, p_drop, rng)


# ---------------------------------------------------------------------------
# Tiny regressor


@dataclass
class TinyRegressor:
    """MLP; output column 0 is the mean, column 1 (optional) the noise head (see ``std_link``)."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    heteroscedastic: bool = True
    activation: str = "tanh"
    std_link: str = "exp"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {tuple(ACTIVATIONS)}, got {self.activation!r}")
        if self.std_link not in STD_LINKS:
            raise ConfigError(f"std_link must be one of {STD_LINKS}, got {self.std_link!r}")

    def log_variance(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map the raw second output to ``s = log sigma^2`` and ``ds/draw``.

        ``exp`` uses the raw output as ``s`` directly; ``softplus`` reads it
        as ``sigma = softplus(raw)``, which lets a ReLU network represent a
        piecewise-linear sigma(x) exactly.
        """
        if self.std_link == "exp":
            return raw, np.ones_like(raw)
        sigma = np.logaddexp(0.0, raw) + SIGMA_FLOOR
        sig = 0.5 * (1.0 + np.tanh(0.5 * raw))
        return 2.0 * np.log(sigma), 2.0 * sig / sigma

    @classmethod
    def init(
        cls,
        n_in: int = 1,
        hidden: Sequence[int] = (32, 32),
        dropout: DropoutSpec | None = None,
        heteroscedastic: bool = True,
        seed: int = 0,
        activation: str = "tanh",
        std_link: str = "exp",
    ) -> "TinyRegressor":
        n_out = 2 if heteroscedastic else 1
        widths = (n_in, *hidden, n_out)
        rng = stream(seed)
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, math.sqrt(1.0 / a), (a, b)))
            biases.append(np.zeros(b))
        return cls(widths, weights, biases, dropout or DropoutSpec(), heteroscedastic, activation, std_link)

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def _masks(self, n: int, rng: np.random.Generator | None) -> list[np.ndarray | None]:
        n_hidden = len(self.widths) - 2
        masks: list[np.ndarray | None] = [None] * n_hidden
        if rng is None or self.dropout.p_drop == 0.0:
            return masks
        p = self.dropout.p_drop
        if self.dropout.placement == "head-only":
            targets = [n_hidden - 1]
        elif self.dropout.placement == "all-layers":
            targets = list(range(n_hidden))
        else:
            targets = list(range(1, n_hidden)) or [0]
        for k in targets:
            masks[k] = dropout_mask((n, self.widths[k + 1]), p, rng)
        return masks

    def _forward(self, x: np.ndarray, rng: np.random.Generator | None):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        masks = self._masks(len(x), rng)
        pre_act = self.dropout.placement == "second-stage-conv"
        act = ACTIVATIONS[self.activation][0]
        acts = [x]
        cache = []
        h = x
        for k in range(len(self.weights) - 1):
            a = h @ self.weights[k] + self.biases[k]
            m = masks[k]
            if m is not None and pre_act:
                a = a * m
            t = act(a)
            h = t * m if (m is not None and not pre_act) else t
            cache.append((t, m))
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, acts, cache

    def forward(self, x, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Mean and log-variance per input row; dropout active iff ``rng`` given."""
        out, _, _ = self._forward(x, rng)
        mean = out[:, 0]
        log_var = self.log_variance(out[:, 1])[0] if self.heteroscedastic else np.full_like(mean, -np.inf)
        return mean, log_var

    def predict_sigma(self, x) -> np.ndarray:
        """Aleatoric standard deviation from a deterministic pass."""
        _, s = self.forward(x)
        return np.exp(0.5 * s)

    def gradients(self, x, d_out: np.ndarray, rng: np.random.Generator | None):
        """Backprop ``d_out`` (N, n_out) through one (optionally dropped-out) pass."""
        _, acts, cache = self._forward(x, rng)
        return self._backward(acts, cache, d_out)

    def _backward(self, acts, cache, d_out: np.ndarray):
        pre_act = self.dropout.placement == "second-stage-conv"
        d_act = ACTIVATIONS[self.activation][1]
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        delta = d_out
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = acts[k].T @ delta
            gb[k] = delta.sum(axis=0)
            if k == 0:
                break
            dh = delta @ self.weights[k].T
            t, m = cache[k - 1]
            if m is not None and not pre_act:
                dh = dh * m
            da = dh * d_act(t)
            if m is not None and pre_act:
                da = da * m
            delta = da
        return gw, gb

    # checkpoint -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "widths": list(self.widths),
            "heteroscedastic": self.heteroscedastic,
            "activation": self.activation,
            "std_link": self.std_link,
            "dropout": {"p_drop": self.dropout.p_drop, "placement": self.dropout.placement},
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TinyRegressor":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(
            tuple(d["widths"]),
            [np.asarray(w, dtype=np.float64) for w in d["weights"]],
            [np.asarray(b, dtype=np.float64) for b in d["biases"]],
            DropoutSpec(**d["dropout"]),
            bool(d["heteroscedastic"]),
            d.get("activation", "tanh"),
            d.get("std_link", "exp"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TinyRegressor":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TinyRegressor":
        with open(path) as fh:
            return cls.from_json(fh.read())


class EpochLog(NamedTuple):
    epoch: int
    loss: float
    data_term: float
    decay_term: float


def train_tiny_regressor(
    x,
    y,
    spec: DropoutSpec | None = None,
    epochs: int = 2000,
    lr: float = 1e-2,
    *,
    hidden: Sequence[int] = (32, 32),
    heteroscedastic: bool = True,
    loss: str = "l2",
    activation: str = "relu",
    std_link: str = "softplus",
    lr_final: float | None = 1e-4,
    seed: int = 0,
    callback: Callable[[EpochLog], None] | None = None,
) -> tuple[TinyRegressor, list[EpochLog]]:
    """Full-batch training of mean data loss plus the dropout weight-decay term.

    Updates use Adam on the full batch with a cosine step size from ``lr``
    down to ``lr_final`` (constant when ``None``). A fresh dropout mask is
    drawn each epoch from ``(seed, epoch)``.
    """
    if len(x) == 0:
        raise EmptyInputError("training set is empty")
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if loss not in ("l1", "l2"):
        raise ConfigError(f"loss must be 'l1' or 'l2', got {loss!r}")
    spec = spec or DropoutSpec()
    model = TinyRegressor.init(x.shape[1], hidden, spec, heteroscedastic, seed, activation, std_link)
    model.biases[-1][0] = float(y.mean())
    if heteroscedastic:
        with np.errstate(over="ignore"):
            std0 = max(float(y.std()), 1e-3)
        model.biases[-1][1] = 2.0 * math.log(std0) if std_link == "exp" else math.log(math.expm1(std0))
    n = len(x)
    loss_fn = heteroscedastic_loss if loss == "l2" else l1_heteroscedastic_loss
    params = model.params
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    history: list[EpochLog] = []

    for epoch in range(epochs):
        rng = stream(seed, 1, epoch) if spec.p_drop > 0 else None
        # overflow shows up as a non-finite loss and is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            out, acts, cache = model._forward(x, rng)
            f = out[:, 0]
            s, ds_draw = model.log_variance(out[:, 1]) if heteroscedastic else (np.zeros(n), None)
            lg = loss_fn(y, f, s)
            data = float(np.mean(lg.value))
            decay = weight_decay_term(params, spec.p_drop, n)
        total = data + decay
        if not math.isfinite(total):
            raise TrainingDivergenceError(f"loss became {total} at epoch {epoch}")
        entry = EpochLog(epoch, total, data, decay)
        history.append(entry)
        if callback is not None:
            callback(entry)

        d_out = np.zeros_like(out)
        d_out[:, 0] = lg.d_f / n
        if heteroscedastic:
            d_out[:, 1] = lg.d_s * ds_draw / n
        gw, gb = model._backward(acts, cache, d_out)
        coef = (1.0 - spec.p_drop) / n
        grads = [g + coef * p for g, p in zip([*gw, *gb], params)]
        t = epoch + 1
        step = lr
        if lr_final is not None:
            step = lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * epoch / max(epochs - 1, 1)))
        for p, g, a, b in zip(params, grads, m1, m2):
            a *= b1
            a += (1 - b1) * g
            b *= b2
            b += (1 - b2) * g * g
            p -= step * (a / (1 - b1**t)) / (np.sqrt(b / (1 - b2**t)) + eps)
    return model, history


# ---------------------------------------------------------------------------
# MC prediction


@dataclass(frozen=True)
class MCPrediction:
    mean: np.ndarray
    variance: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    entropy: np.ndarray | None = None


def mc_samples(model: TinyRegressor, x, T: int, seed: int = 0) -> MCRegressionSamples:
    """T dropout-active passes; pass t draws its masks from ``(seed, t)``."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    ys, vs = [], []
    for t in range(T):
        rng = stream(seed, 2, t) if model.dropout.p_drop > 0 else None
        f, s = model.forward(x, rng)
        ys.append(f)
        vs.append(np.exp(s) if model.heteroscedastic else np.zeros_like(f))
    return MCRegressionSamples(np.stack(ys), np.stack(vs))


def mc_predict(model: TinyRegressor, x, T: int = DEFAULT_T, seed: int = 0) -> MCPrediction:
    s = mc_samples(model, x, T, seed)
    mean, var = predictive_moments(s)
    aleatoric = s.sigma_hat_sq.mean(axis=0)
    epistemic = np.maximum(var - aleatoric, 0.0)
    return MCPrediction(np.asarray(mean), np.asarray(var), epistemic, aleatoric)


def mc_classify(forward: Callable[[np.random.Generator], np.ndarray], T: int = DEFAULT_T, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean softmax and MC entropy for any stochastic logit function."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    logits = np.stack([forward(stream(seed, 3, t)) for t in range(T)])
    return softmax(logits).mean(axis=0), np.asarray(mc_entropy(MCClassificationSamples(logits)))


class ConvergenceRow(NamedTuple):
    T: int
    std_dev: float
    total_variance: float
    epistemic_variance: float
    spread: float


def convergence_study(model: TinyRegressor, x, T_max: int = 50, repeats: int = 20, seed: int = 0) -> list[ConvergenceRow]:
    """Predictive std-dev as a function of the number of passes.

    Each repeat draws ``T_max`` passes once and evaluates the running
    estimate on its first T passes. ``std_dev`` is the point-averaged
    sqrt of the predictive variance, averaged over repeats; ``spread`` is
    its standard deviation across repeats.
    """
    if T_max < 1 or repeats < 1:
        raise ConfigError("T_max and repeats must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    std = np.empty((repeats, T_max))
    tv = np.empty((repeats, T_max))
    ep = np.empty((repeats, T_max))
    for r in range(repeats):
        s = mc_samples(model, x, T_max, seed=_repeat_seed(seed, r))
        t = np.arange(1, T_max + 1)[:, None]
        mean = np.cumsum(s.y_hat, axis=0) / t
        sq = np.cumsum(s.y_hat**2 + s.sigma_hat_sq, axis=0) / t
        var = np.maximum(sq - mean**2, 0.0)
        alea = np.cumsum(s.sigma_hat_sq, axis=0) / t
        std[r] = np.sqrt(var).mean(axis=1)
        tv[r] = var.mean(axis=1)
        ep[r] = np.maximum(var - alea, 0.0).mean(axis=1)
    return [
        ConvergenceRow(k + 1, float(std[:, k].mean()), float(tv[:, k].mean()), float(ep[:, k].mean()), float(std[:, k].std()))
        for k in range(T_max)
    ]


def _repeat_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([seed, 4, r]).generate_state(1)[0])


def heteroscedastic_dataset(n: int = 2000, seed: int = 0, lo: float = -3.0, hi: float = 3.0, noise: Callable | None = None):
    """``y = sin(x) + N(0, sigma(x)^2)`` with ``sigma(x) = 0.1 + 0.2|x|`` by default."""
    rng = stream(seed, 5)
    x = rng.uniform(lo, hi, n)
    sigma = noise(x) if noise is not None else 0.1 + 0.2 * np.abs(x)
    y = np.sin(x) + sigma * rng.standard_normal(n)
    return x, y


__all__ = [
    "DEFAULT_T",
    "MCRegressionSamples",
    "MCClassificationSamples",
    "MCPrediction",
    "DropoutSpec",
    "TinyRegressor",
    "LossGrad",
    "EpochLog",
    "ConvergenceRow",
    "predictive_moments",
    "heteroscedastic_loss",
    "l1_heteroscedastic_loss",
    "weight_decay_term",
    "attenuated_classification_loss",
    "softmax_cross_entropy",
    "apply_dropout",
    "mc_entropy",
    "train_tiny_regressor",
    "mc_predict",
    "mc_samples",
    "mc_classify",
    "convergence_study",
    "heteroscedastic_dataset",
    "stream",
]
