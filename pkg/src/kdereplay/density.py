"""Latent generators: an incremental Gaussian-kernel KDE and a diagonal GMM.

The KDE generator is a mixture of isotropic Gaussian kernels centered on the
cluster centers retained from every domain seen so far, with one shared
bandwidth from Silverman's rule recomputed over the whole support. The GMM is
the parametric baseline generator, fitted per domain by EM.
"""

import copy
import math

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from ._validation import as_generator, check_matrix
from .cluster import kmeans_plus_plus, pairwise_sq_dists

LOG_2PI = math.log(2.0 * math.pi)


def silverman_bandwidth(X) -> float:
    """Silverman's rule-of-thumb bandwidth for an isotropic kernel in d dims.

    ``B = sigma_bar * (4 / ((d + 2) * n)) ** (1 / (d + 4))`` where ``sigma_bar``
    is the mean of per-dimension sample standard deviations (denominator n-1).
    Scale-equivariant: ``B(c * X) == c * B(X)``.
    """
    X = check_matrix(X, min_rows=2)
    n, d = X.shape
    sigma_bar = float(np.mean(np.std(X, axis=0, ddof=1)))
    if sigma_bar <= 0.0:
        raise ValueError("all dimensions have zero variance; add jitter before estimating a bandwidth")
    return sigma_bar * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


class KdeGenerator(BaseEstimator):
    """Incremental KDE over retained cluster centers.

    ``partial_fit`` appends a block of support points (one block per task) and
    recomputes the Silverman bandwidth over the union, so the generator keeps
    representing every past domain without storing raw samples.

    Attributes
    ----------
    support_ : ndarray of shape (n_support, dim)
    bandwidth_ : float
        Shared kernel bandwidth; 0.0 while the support holds fewer than 2 points.
    task_counts_ : list of int
        Number of support points contributed by each task, summing to n_support.
    """

    def __init__(self):
        pass

    def fit(self, X):
        """Reset the generator and install ``X`` as the first support block."""
        self._reset()
        return self.partial_fit(X)

    def partial_fit(self, X):
        """Append support points for one more task and refresh the bandwidth."""
        X = check_matrix(X, name="support block")
        if not self.is_fitted:
            self.support_ = X.copy()
            self.task_counts_ = [X.shape[0]]
        else:
            if X.shape[1] != self.dim:
                raise ValueError(f"support block has dim {X.shape[1]}, generator has {self.dim}")
            self.support_ = np.vstack([self.support_, X])
            self.task_counts_.append(X.shape[0])
        self.bandwidth_ = (
            silverman_bandwidth(self.support_) if self.support_.shape[0] >= 2 else 0.0
        )
        return self

    def _reset(self):
        for attr in ("support_", "bandwidth_", "task_counts_"):
            if hasattr(self, attr):
                delattr(self, attr)

    @property
    def is_fitted(self) -> bool:
        return hasattr(self, "support_")

    @property
    def n_support_(self) -> int:
        return self.support_.shape[0] if self.is_fitted else 0

    @property
    def dim(self) -> int:
        self._require_fitted()
        return self.support_.shape[1]

    def _require_fitted(self):
        if not self.is_fitted:
            raise ValueError("generator is empty; call fit/partial_fit first")

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        """Draw samples: a uniformly chosen support row plus bandwidth-scaled
        standard Gaussian noise. Deterministic per seed."""
        self._require_fitted()
        rng = as_generator(random_state)
        rows = rng.integers(0, self.n_support_, size=n_samples)
        noise = rng.standard_normal((n_samples, self.dim))
        return self.support_[rows] + self.bandwidth_ * noise

    def score_samples(self, X) -> np.ndarray:
        """Log density of each row of ``X`` under the kernel mixture."""
        self._require_fitted()
        X = check_matrix(X)
        if self.bandwidth_ <= 0.0:
            raise ValueError("log density undefined for zero bandwidth")
        d = self.dim
        b2 = self.bandwidth_ ** 2
        log_kernel = (
            -0.5 * pairwise_sq_dists(X, self.support_) / b2
            - 0.5 * d * (LOG_2PI + math.log(b2))
        )
        return logsumexp(log_kernel, axis=1) - math.log(self.n_support_)

    def score(self, X) -> float:
        """Mean log density over the rows of ``X``."""
        return float(np.mean(self.score_samples(X)))

    def copy(self) -> "KdeGenerator":
        return copy.deepcopy(self)

    def to_json(self) -> dict:
        self._require_fitted()
        return {
            "support": self.support_.tolist(),
            "bandwidth": self.bandwidth_,
            "task_counts": list(self.task_counts_),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "KdeGenerator":
        gen = cls()
        gen.support_ = np.asarray(payload["support"], dtype=np.float64)
        gen.bandwidth_ = float(payload["bandwidth"])
        gen.task_counts_ = [int(c) for c in payload["task_counts"]]
        if sum(gen.task_counts_) != gen.support_.shape[0]:
            raise ValueError("task_counts inconsistent with support size")
        return gen


class GaussianMixture(BaseEstimator):
    """Diagonal-covariance Gaussian mixture fitted by EM from k-means++ seeds.

    The per-iteration mean log-likelihood is non-decreasing; iteration stops
    when its change drops below ``tol`` or after ``max_iter`` rounds. Variances
    are floored at ``1e-6`` times the average per-dimension data variance.

    Attributes
    ----------
    weights_ : ndarray of shape (n_components,)
    means_ : ndarray of shape (n_components, dim)
    covariances_ : ndarray of shape (n_components, dim)
        Diagonal covariance entries.
    log_likelihood_history_ : list of float
        Mean log-likelihood at the start of each EM iteration.
    converged_ : bool
    """

    VARIANCE_FLOOR_SCALE = 1e-6

    def __init__(self, n_components: int = 10, max_iter: int = 200, tol: float = 1e-6,
                 random_state=None):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X):
        X = check_matrix(X)
        n, d = X.shape
        m = self.n_components
        if m < 1:
            raise ValueError("n_components must be >= 1")
        if m > n:
            raise ValueError(f"n_components={m} exceeds n_samples={n}")
        rng = as_generator(self.random_state)

        data_var = X.var(axis=0)
        floor = max(self.VARIANCE_FLOOR_SCALE * float(data_var.mean()), np.finfo(np.float64).tiny)

        weights = np.full(m, 1.0 / m)
        means = kmeans_plus_plus(X, m, rng)
        covariances = np.tile(np.maximum(data_var, floor), (m, 1))

        history = []
        prev_ll = -np.inf
        converged = False
        for _ in range(self.max_iter):
            log_joint = np.log(weights)[None, :] + _diag_gaussian_logpdf(X, means, covariances)
            log_norm = logsumexp(log_joint, axis=1)
            ll = float(log_norm.mean())
            history.append(ll)
            if abs(ll - prev_ll) < self.tol:
                converged = True
                break
            prev_ll = ll

            resp = np.exp(log_joint - log_norm[:, None])
            nk = resp.sum(axis=0) + 10.0 * np.finfo(np.float64).eps
            weights = nk / nk.sum()
            means = (resp.T @ X) / nk[:, None]
            second = (resp.T @ (X * X)) / nk[:, None]
            covariances = np.maximum(second - means**2, floor)

        self.weights_ = weights
        self.means_ = means
        self.covariances_ = covariances
        self.variance_floor_ = floor
        self.log_likelihood_history_ = history
        self.converged_ = converged
        self.n_iter_ = len(history)
        return self

    @classmethod
    def from_parameters(cls, weights, means, covariances) -> "GaussianMixture":
        """Build a mixture directly from parameters (no fitting, no flooring)."""
        weights = np.asarray(weights, dtype=np.float64)
        means = np.asarray(means, dtype=np.float64)
        covariances = np.asarray(covariances, dtype=np.float64)
        if weights.ndim != 1 or means.ndim != 2 or covariances.shape != means.shape:
            raise ValueError("inconsistent parameter shapes")
        if weights.shape[0] != means.shape[0]:
            raise ValueError("weights and means disagree on component count")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1 within 1e-9")
        if np.any(weights < 0) or np.any(covariances < 0):
            raise ValueError("weights and covariances must be non-negative")
        gmm = cls(n_components=weights.shape[0])
        gmm.weights_ = weights.copy()
        gmm.means_ = means.copy()
        gmm.covariances_ = covariances.copy()
        gmm.variance_floor_ = 0.0
        gmm.log_likelihood_history_ = []
        gmm.converged_ = True
        gmm.n_iter_ = 0
        return gmm

    @property
    def dim(self) -> int:
        return self.means_.shape[1]

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        """Component chosen by weight, then diagonal Gaussian noise."""
        rng = as_generator(random_state)
        comp = rng.choice(self.weights_.shape[0], size=n_samples, p=self.weights_)
        noise = rng.standard_normal((n_samples, self.dim))
        return self.means_[comp] + np.sqrt(self.covariances_[comp]) * noise

    def score_samples(self, X) -> np.ndarray:
        X = check_matrix(X)
        log_joint = np.log(self.weights_)[None, :] + _diag_gaussian_logpdf(
            X, self.means_, self.covariances_
        )
        return logsumexp(log_joint, axis=1)

    def score(self, X) -> float:
        return float(np.mean(self.score_samples(X)))

    def copy(self) -> "GaussianMixture":
        return copy.deepcopy(self)

    def to_json(self) -> dict:
        return {
            "weights": self.weights_.tolist(),
            "means": self.means_.tolist(),
            "covariances": self.covariances_.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "GaussianMixture":
        return cls.from_parameters(payload["weights"], payload["means"], payload["covariances"])


class GmmBank:
    """One fitted GMM per past domain; sampling picks a domain uniformly, then
    a component by its weights."""

    def __init__(self, models=None):
        self.models = list(models) if models is not None else []

    def append(self, model: GaussianMixture) -> None:
        self.models.append(model)

    @property
    def n_models(self) -> int:
        return len(self.models)

    @property
    def is_fitted(self) -> bool:
        return bool(self.models)

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        if not self.models:
            raise ValueError("GMM bank is empty")
        rng = as_generator(random_state)
        domain = rng.integers(0, len(self.models), size=n_samples)
        out = np.empty((n_samples, self.models[0].dim))
        for i, model in enumerate(self.models):
            rows = np.flatnonzero(domain == i)
            if rows.size:
                out[rows] = model.sample(rows.size, rng)
        return out

    def score_samples(self, X) -> np.ndarray:
        """Log density under the uniform-over-domains mixture of mixtures."""
        if not self.models:
            raise ValueError("GMM bank is empty")
        per_model = np.stack([m.score_samples(X) for m in self.models], axis=1)
        return logsumexp(per_model, axis=1) - math.log(len(self.models))

    def score(self, X) -> float:
        return float(np.mean(self.score_samples(X)))

    def copy(self) -> "GmmBank":
        return GmmBank(m.copy() for m in self.models)


def _diag_gaussian_logpdf(X: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    """Log density of each row of X under each diagonal Gaussian, shape (n, m)."""
    if np.any(covariances <= 0):
        raise ValueError("covariance entries must be positive to evaluate densities")
    d = X.shape[1]
    log_det = np.sum(np.log(covariances), axis=1)
    # (x - mu)^T diag(c)^-1 (x - mu) expanded to avoid a (n, m, d) intermediate
    inv = 1.0 / covariances
    quad = (
        (X * X) @ inv.T
        - 2.0 * X @ (means * inv).T
        + np.sum(means * means * inv, axis=1)[None, :]
    )
    return -0.5 * (d * LOG_2PI + log_det[None, :] + quad)
