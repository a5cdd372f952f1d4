"""Fully connected classifier head with hand-rolled backprop and optimizers.

The model is the trainable head sitting on frozen backbone features: ReLU
hidden layers (default widths 512-256-128-64-32) and a linear output layer.
Training combines softmax cross-entropy with a KL-divergence distillation term
against a frozen teacher:

    total = (1 - alpha) * ce + alpha * kld

Everything runs in float64 so gradient checks and determinism tests are tight.
"""

import copy
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import as_generator, check_fraction, check_labels, check_matrix

DEFAULT_HIDDEN_LAYERS = (512, 256, 128, 64, 32)
KL_DIRECTIONS = ("teacher_to_student", "student_to_teacher")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components for one batch: ``total = (1 - alpha) * ce + alpha * kld``."""

    total: float
    ce: float
    kld: float
    alpha: float


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Multi-layer perceptron classifier trained by mini-batch backprop.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Hidden layer widths between the input features and the class logits.
    activation : str
        Hidden activation; only ``"relu"`` is supported.
    learning_rate, optimizer, epochs, batch_size
        Defaults used by :meth:`fit` for plain supervised training.
    random_state : int
        Seed for He-uniform weight initialization and epoch shuffling.
    """

    def __init__(self, hidden_layer_sizes=DEFAULT_HIDDEN_LAYERS, activation: str = "relu",
                 learning_rate: float = 1e-3, optimizer: str = "adam", epochs: int = 30,
                 batch_size: int = 64, random_state: int = 0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    # -- construction --------------------------------------------------------

    def initialize(self, n_features: int, n_classes: int, random_state=None):
        """He-uniform weights and zero biases; deterministic per seed."""
        if n_features < 1:
            raise ValueError("n_features must be >= 1")
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation '{self.activation}'")
        rng = as_generator(self.random_state if random_state is None else random_state)
        dims = [n_features, *self.hidden_layer_sizes, n_classes]
        self.layer_dims_ = dims
        self.weights_ = []
        self.biases_ = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / fan_in)
            self.weights_.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases_.append(np.zeros(fan_out))
        self.classes_ = np.arange(n_classes)
        return self

    @property
    def is_initialized(self) -> bool:
        return hasattr(self, "weights_")

    @property
    def n_parameters_(self) -> int:
        self._require_initialized()
        return sum(w.size + b.size for w, b in zip(self.weights_, self.biases_))

    @property
    def n_features_in_(self) -> int:
        self._require_initialized()
        return self.layer_dims_[0]

    @property
    def n_classes_(self) -> int:
        self._require_initialized()
        return self.layer_dims_[-1]

    def _require_initialized(self):
        if not self.is_initialized:
            raise ValueError("model parameters not initialized; call initialize() or fit()")

    def copy(self) -> "MlpClassifier":
        """Deep copy used to freeze a teacher snapshot."""
        return copy.deepcopy(self)

    # -- inference ------------------------------------------------------------

    def _forward_cached(self, X):
        pre, acts = [], [X]
        h = X
        for W, b in zip(self.weights_[:-1], self.biases_[:-1]):
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        logits = h @ self.weights_[-1] + self.biases_[-1]
        return logits, pre, acts

    def forward(self, X) -> np.ndarray:
        """Class logits for a batch; affine + ReLU per hidden layer, affine output."""
        self._require_initialized()
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"batch has dim {X.shape[1]}, model expects {self.n_features_in_}")
        logits, _, _ = self._forward_cached(X)
        return logits

    decision_function = forward

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.forward(X))

    def predict(self, X) -> np.ndarray:
        """Argmax labels; ties resolve to the smallest class index."""
        return np.argmax(self.forward(X), axis=1)

    def accuracy(self, X, y) -> float:
        """Percent accuracy in [0, 100]."""
        X = check_matrix(X, min_rows=0)
        if X.shape[0] == 0:
            raise ValueError("cannot score an empty dataset")
        y = check_labels(y, X.shape[0], self.n_classes_)
        return 100.0 * float(np.mean(self.predict(X) == y))

    def score(self, X, y) -> float:
        return self.accuracy(X, y) / 100.0

    # -- loss and gradients ----------------------------------------------------

    def loss_and_grad(self, X, y, teacher_logits=None, alpha: float = 0.0,
                      kl_direction: str = "teacher_to_student"):
        """Loss breakdown and parameter gradients for one batch.

        ``ce`` is mean softmax cross-entropy against ``y``; ``kld`` is the mean
        KL divergence between teacher and student distributions at temperature
        1 (direction configurable). Gradients flow through
        ``(1 - alpha) * ce + alpha * kld`` by reverse-mode accumulation.
        """
        self._require_initialized()
        alpha = check_fraction(alpha, "alpha")
        if kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        X = check_matrix(X)
        n = X.shape[0]
        y = check_labels(y, n, self.n_classes_)
        if alpha > 0.0 and teacher_logits is None:
            raise ValueError("alpha > 0 requires teacher logits")

        logits, pre, acts = self._forward_cached(X)
        log_ps = log_softmax(logits)
        ps = np.exp(log_ps)
        ce = float(-np.mean(log_ps[np.arange(n), y]))

        d_logits = np.zeros_like(logits)
        if alpha < 1.0:
            grad_ce = ps.copy()
            grad_ce[np.arange(n), y] -= 1.0
            d_logits += (1.0 - alpha) / n * grad_ce

        kld = 0.0
        if teacher_logits is not None:
            teacher_logits = check_matrix(teacher_logits, name="teacher_logits")
            if teacher_logits.shape != logits.shape:
                raise ValueError("teacher_logits shape mismatch")
            log_pt = log_softmax(teacher_logits)
            pt = np.exp(log_pt)
            if kl_direction == "teacher_to_student":
                kld = float(np.mean(np.sum(pt * (log_pt - log_ps), axis=1)))
                if alpha > 0.0:
                    d_logits += alpha / n * (ps - pt)
            else:
                gap = log_ps - log_pt
                kld = float(np.mean(np.sum(ps * gap, axis=1)))
                if alpha > 0.0:
                    row_mean = np.sum(ps * gap, axis=1, keepdims=True)
                    d_logits += alpha / n * ps * (gap - row_mean)

        total = (1.0 - alpha) * ce + alpha * kld
        grads = self._backward(d_logits, pre, acts)
        return LossBreakdown(total=total, ce=ce, kld=kld, alpha=alpha), grads

    def _backward(self, d_logits, pre, acts):
        grads = [None] * len(self.weights_)
        g = d_logits
        grads[-1] = (acts[-1].T @ g, g.sum(axis=0))
        g = g @ self.weights_[-1].T
        for layer in range(len(self.weights_) - 2, -1, -1):
            g = g * (pre[layer] > 0.0)
            grads[layer] = (acts[layer].T @ g, g.sum(axis=0))
            if layer > 0:
                g = g @ self.weights_[layer].T
        return grads

    # -- plain supervised training ----------------------------------------------

    def fit(self, X, y):
        """Plain cross-entropy mini-batch training with the constructor settings."""
        X = check_matrix(X)
        y_arr = np.asarray(y)
        if not self.is_initialized:
            n_classes = int(y_arr.max()) + 1 if y_arr.size else 2
            init_ss, shuffle_ss = np.random.SeedSequence(self.random_state).spawn(2)
            self.initialize(X.shape[1], max(n_classes, 2), random_state=np.random.default_rng(init_ss))
            rng = np.random.default_rng(shuffle_ss)
        else:
            rng = as_generator(self.random_state)
        y = check_labels(y_arr, X.shape[0], self.n_classes_)
        optimizer = make_optimizer(self.optimizer, self.learning_rate)
        for _ in range(self.epochs):
            perm = rng.permutation(X.shape[0])
            for start in range(0, X.shape[0], self.batch_size):
                sel = perm[start:start + self.batch_size]
                _, grads = self.loss_and_grad(X[sel], y[sel])
                optimizer.step(self, grads)
        return self

    # -- serialization ------------------------------------------------------------

    CHECKPOINT_VERSION = 1

    def to_json(self) -> dict:
        self._require_initialized()
        return {
            "format_version": self.CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims_),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights_],
            "biases": [b.tolist() for b in self.biases_],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MlpClassifier":
        if payload.get("format_version") != cls.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
        dims = [int(v) for v in payload["layer_dims"]]
        model = cls(hidden_layer_sizes=tuple(dims[1:-1]), activation=payload["activation"])
        model.layer_dims_ = dims
        model.weights_ = [np.asarray(w, dtype=np.float64) for w in payload["weights"]]
        model.biases_ = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
        model.classes_ = np.arange(dims[-1])
        for w, b, fan_in, fan_out in zip(model.weights_, model.biases_, dims[:-1], dims[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("checkpoint parameter shapes do not chain")
        return model


class SgdOptimizer:
    """Plain gradient descent: ``theta <- theta - lr * g``."""

    kind = "sgd"

    def __init__(self, learning_rate: float):
        if not learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        self.learning_rate = learning_rate

    def step(self, model: MlpClassifier, grads) -> None:
        _check_grad_shapes(model, grads)
        for (dW, db), W, b in zip(grads, model.weights_, model.biases_):
            W -= self.learning_rate * dW
            b -= self.learning_rate * db


class AdamOptimizer:
    """Adam with standard bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    kind = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if not learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None

    def step(self, model: MlpClassifier, grads) -> None:
        _check_grad_shapes(model, grads)
        flat = [g for pair in grads for g in pair]
        if self._m is None:
            self._m = [np.zeros_like(g) for g in flat]
            self._v = [np.zeros_like(g) for g in flat]
        self.step_count += 1
        t = self.step_count
        params = [p for pair in zip(model.weights_, model.biases_) for p in pair]
        for p, g, m, v in zip(params, flat, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def _check_grad_shapes(model: MlpClassifier, grads) -> None:
    if len(grads) != len(model.weights_):
        raise ValueError("gradient list does not match layer count")
    for (dW, db), W, b in zip(grads, model.weights_, model.biases_):
        if dW.shape != W.shape or db.shape != b.shape:
            raise ValueError("gradient shape mismatch")


def make_optimizer(kind: str, learning_rate: float):
    if kind == "sgd":
        return SgdOptimizer(learning_rate)
    if kind == "adam":
        return AdamOptimizer(learning_rate)
    raise ValueError(f"unknown optimizer '{kind}'")
