"""Continual-learning metrics over the train-test matrix and generator-fidelity
metrics between real and generated latent populations.

The train-test matrix ``P`` holds percent accuracies: entry ``p[i, j]`` is the
accuracy on test set j after training session i. ACC averages the last row,
BWT measures how much past-task accuracy moved relative to its just-trained
value, and ILM averages the whole lower triangle.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import check_matrix
from .cluster import KMeans
from .density import GaussianMixture, GmmBank, KdeGenerator


@dataclass(frozen=True)
class TrainTestMatrix:
    """T x T percent-accuracy matrix with a validity mask.

    ``defined[i, j]`` is False for entries a protocol never filled (e.g. all
    but the final row under joint training). Columns j > i are extra-protocol
    but stored when available.
    """

    values: np.ndarray
    defined: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"matrix must be square, got shape {values.shape}")
        defined = self.defined
        defined = ~np.isnan(values) if defined is None else np.asarray(defined, dtype=bool)
        if defined.shape != values.shape:
            raise ValueError("defined mask shape mismatch")
        valid = values[defined]
        if valid.size and (np.any(valid < 0.0) or np.any(valid > 100.0)):
            raise ValueError("accuracy entries must lie in [0, 100]")
        values.setflags(write=False)
        defined.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "defined", defined)

    @property
    def n_sessions(self) -> int:
        return self.values.shape[0]


def _as_matrix(P) -> TrainTestMatrix:
    if isinstance(P, TrainTestMatrix):
        return P
    return TrainTestMatrix(values=np.asarray(P, dtype=np.float64))


_TRIL_CACHE: dict = {}


def _tril(T: int):
    if T not in _TRIL_CACHE:
        _TRIL_CACHE[T] = np.tril_indices(T, k=0)
    return _TRIL_CACHE[T]


def acc(P) -> float:
    """Mean accuracy over all test sets after the final session."""
    P = _as_matrix(P)
    if not P.defined[-1].all():
        raise ValueError("final row of the train-test matrix has undefined entries")
    return float(np.mean(P.values[-1]))


def bwt(P) -> float | None:
    """Backward transfer: mean change of past-task accuracy vs its just-trained
    value. Returns None (not applicable) for single-session matrices."""
    P = _as_matrix(P)
    T = P.n_sessions
    if T < 2:
        return None
    lower = _tril(T)
    if not P.defined[lower].all():
        raise ValueError("lower triangle of the train-test matrix has undefined entries")
    total = 0.0
    for j in range(T - 1):
        deltas = [P.values[i, j] - P.values[j, j] for i in range(j + 1, T)]
        total += sum(deltas) / len(deltas)
    return total / (T - 1)


def ilm(P) -> float:
    """Incremental learning metric: ``2 / (T (T + 1))`` times the sum of the
    lower triangle (diagonal included)."""
    P = _as_matrix(P)
    T = P.n_sessions
    lower = _tril(T)
    if not P.defined[lower].all():
        raise ValueError("lower triangle of the train-test matrix has undefined entries")
    return float(2.0 * P.values[lower].sum() / (T * (T + 1)))


# ---------------------------------------------------------------------------
# Generator fidelity metrics
# ---------------------------------------------------------------------------

PAIRINGS = ("all_pairs", "index_matched")


def _check_pair(real_set, gen_set, pairing):
    real_set = check_matrix(real_set, name="real_set")
    gen_set = check_matrix(gen_set, name="gen_set")
    if real_set.shape[1] != gen_set.shape[1]:
        raise ValueError("real and generated sets disagree on dim")
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}")
    if pairing == "index_matched" and real_set.shape[0] != gen_set.shape[0]:
        raise ValueError("index_matched pairing needs equally sized sets")
    return real_set, gen_set


def cosine_avg(real_set, gen_set, pairing: str = "all_pairs") -> float:
    """Mean cosine similarity on a percent scale (100 = perfectly aligned)."""
    real_set, gen_set = _check_pair(real_set, gen_set, pairing)
    real_norm = np.linalg.norm(real_set, axis=1)
    gen_norm = np.linalg.norm(gen_set, axis=1)
    if np.any(real_norm == 0.0) or np.any(gen_norm == 0.0):
        raise ValueError("cosine similarity undefined for zero vectors")
    real_unit = real_set / real_norm[:, None]
    gen_unit = gen_set / gen_norm[:, None]
    if pairing == "index_matched":
        return 100.0 * float(np.mean(np.sum(real_unit * gen_unit, axis=1)))
    return 100.0 * float(np.mean(real_unit @ gen_unit.T))


def euclidean_avg(real_set, gen_set, pairing: str = "all_pairs") -> float:
    """Mean Euclidean distance between paired (or all pairs of) samples."""
    real_set, gen_set = _check_pair(real_set, gen_set, pairing)
    if pairing == "index_matched":
        return float(np.mean(np.linalg.norm(real_set - gen_set, axis=1)))
    sq = (
        np.sum(real_set**2, axis=1)[:, None]
        + np.sum(gen_set**2, axis=1)[None, :]
        - 2.0 * real_set @ gen_set.T
    )
    return float(np.mean(np.sqrt(np.maximum(sq, 0.0))))


FID_MODES = ("full", "diagonal")
_FID_RIDGE = 1e-6


def fid(real_set, gen_set, mode: str = "full") -> float:
    """Frechet distance between Gaussian fits of the two populations.

    ``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with the matrix square
    root taken through a symmetric eigendecomposition of
    ``S1^(1/2) S2 S1^(1/2)`` (negative numerical eigenvalues clamped at zero,
    ridge 1e-6 added to both covariances). ``diagonal`` mode uses the
    per-dimension closed form.
    """
    if mode not in FID_MODES:
        raise ValueError(f"mode must be one of {FID_MODES}")
    real_set = check_matrix(real_set, name="real_set", min_rows=2)
    gen_set = check_matrix(gen_set, name="gen_set", min_rows=2)
    if real_set.shape[1] != gen_set.shape[1]:
        raise ValueError("real and generated sets disagree on dim")
    mu1, mu2 = real_set.mean(axis=0), gen_set.mean(axis=0)
    mean_term = float(np.sum((mu1 - mu2) ** 2))

    if mode == "diagonal":
        v1 = real_set.var(axis=0, ddof=1) + _FID_RIDGE
        v2 = gen_set.var(axis=0, ddof=1) + _FID_RIDGE
        return mean_term + float(np.sum(v1 + v2 - 2.0 * np.sqrt(v1 * v2)))

    d = real_set.shape[1]
    s1 = np.atleast_2d(np.cov(real_set, rowvar=False)) + _FID_RIDGE * np.eye(d)
    s2 = np.atleast_2d(np.cov(gen_set, rowvar=False)) + _FID_RIDGE * np.eye(d)
    root_s1 = _psd_sqrt(s1)
    inner = root_s1 @ s2 @ root_s1
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.maximum(eigvals, 0.0))))
    return mean_term + float(np.trace(s1) + np.trace(s2)) - 2.0 * trace_sqrt


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh((S + S.T) / 2.0)
    eigvals = np.maximum(eigvals, 0.0)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def median_heuristic_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise distance over the pooled set; falls back to 1.0 with a
    warning when every pair coincides."""
    n = pooled.shape[0]
    sq = (
        np.sum(pooled**2, axis=1)[:, None]
        + np.sum(pooled**2, axis=1)[None, :]
        - 2.0 * pooled @ pooled.T
    )
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(sq[iu], 0.0))
    gamma = float(np.median(dists)) if dists.size else 0.0
    if gamma <= 0.0:
        warnings.warn("all pooled pairwise distances are zero; using bandwidth 1.0")
        return 1.0
    return gamma


def mmd(real_set, gen_set, bandwidth="median", unbiased: bool = False) -> float:
    """Squared maximum mean discrepancy with an RBF kernel
    ``k(x, y) = exp(-|x - y|^2 / (2 gamma^2))``.

    The default biased V-statistic is non-negative and exactly 0 for equal
    multisets; the unbiased U-statistic is available behind ``unbiased``.
    ``bandwidth`` is either the ``"median"`` heuristic over the pooled set or a
    fixed positive float.
    """
    real_set, gen_set = _check_pair(real_set, gen_set, "all_pairs")
    if bandwidth == "median":
        gamma = median_heuristic_bandwidth(np.vstack([real_set, gen_set]))
    else:
        gamma = float(bandwidth)
        if not gamma > 0:
            raise ValueError("fixed bandwidth must be > 0")

    def kernel(A, B):
        sq = (
            np.sum(A**2, axis=1)[:, None]
            + np.sum(B**2, axis=1)[None, :]
            - 2.0 * A @ B.T
        )
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * gamma**2))

    kxx = kernel(real_set, real_set)
    kyy = kernel(gen_set, gen_set)
    kxy = kernel(real_set, gen_set)
    m, n = real_set.shape[0], gen_set.shape[0]
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased estimator needs at least 2 samples per set")
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        return float(term_x + term_y - 2.0 * kxy.mean())
    value = float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    # V-statistic is a squared RKHS norm; clamp float cancellation noise
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Fidelity report over a sequence run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FidelityConfig:
    """Settings for the generator-fidelity evaluation.

    ``beta`` is the per-domain real sample count; None selects the minimum past
    train-set size automatically. ``pairing`` applies to the cosine and
    Euclidean metrics ("all_pairs" or "index_matched").
    """

    beta: int | None = None
    mmd_bandwidth: object = "median"
    fid_mode: str = "full"
    pairing: str = "all_pairs"

    def validate(self) -> None:
        if self.beta is not None and self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.fid_mode not in FID_MODES:
            raise ValueError(f"fid_mode must be one of {FID_MODES}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}")


@dataclass(frozen=True)
class FidelitySessionRow:
    session: int
    beta: int
    cosine: float
    euclidean: float
    fid: float
    mmd: float


@dataclass(frozen=True)
class FidelityReport:
    rows: tuple
    pairing: str

    def means(self) -> dict:
        return {
            name: float(np.mean([getattr(r, name) for r in self.rows]))
            for name in ("cosine", "euclidean", "fid", "mmd")
        }


def fidelity_report(generator_states, train_sets, cfg: FidelityConfig | None = None,
                    seed=0) -> FidelityReport:
    """Compare generated latents against real past latents at every session.

    At session t (t >= 2), ``beta`` real latents are drawn from each of the
    t - 1 past train sets and concatenated, and ``(t - 1) * beta`` latents are
    generated from the state the generator had entering session t
    (``generator_states[t - 2]``, i.e. the state after episode t - 1). All four
    metrics are computed per session.
    """
    cfg = cfg or FidelityConfig()
    cfg.validate()
    train_sets = list(train_sets)
    states = list(generator_states)
    if len(states) < 2 or len(train_sets) < 2:
        raise ValueError("fidelity needs at least 2 sessions")
    root = np.random.SeedSequence(seed)
    session_seeds = root.spawn(len(train_sets))

    rows = []
    for t in range(2, len(train_sets) + 1):
        past = train_sets[: t - 1]
        sizes = [ds.n_samples for ds in past]
        beta = min(sizes) if cfg.beta is None else cfg.beta
        if beta > min(sizes):
            raise ValueError(
                f"beta={beta} exceeds the smallest past train set ({min(sizes)} samples)"
            )
        rng = np.random.default_rng(session_seeds[t - 2])
        real_blocks = []
        for ds in past:
            idx = rng.choice(ds.n_samples, size=beta, replace=False)
            real_blocks.append(ds.features[np.sort(idx)])
        real = np.vstack(real_blocks)
        state = states[t - 2]
        if state is None or not state.is_fitted:
            raise ValueError(f"generator state entering session {t} is empty")
        gen = state.sample((t - 1) * beta, rng)
        rows.append(FidelitySessionRow(
            session=t,
            beta=beta,
            cosine=cosine_avg(real, gen, cfg.pairing),
            euclidean=euclidean_avg(real, gen, cfg.pairing),
            fid=fid(real, gen, cfg.fid_mode),
            mmd=mmd(real, gen, cfg.mmd_bandwidth),
        ))
    return FidelityReport(rows=tuple(rows), pairing=cfg.pairing)


# ---------------------------------------------------------------------------
# KDE-vs-GMM average log-likelihood over sequence prefixes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoglikRow:
    prefix_length: int
    kde_loglik: float
    gmm_loglik: float


def loglik_table(test_sets, kde_states, bank_states) -> list[LoglikRow]:
    """Mean log density of pooled held-out latents under per-prefix generator
    states. ``kde_states[t-1]`` and ``bank_states[t-1]`` must cover domains
    1..t; the evaluation pool concatenates test sets 1..t."""
    test_sets = list(test_sets)
    if not (len(test_sets) == len(kde_states) == len(bank_states)):
        raise ValueError("test_sets, kde_states, and bank_states must align")
    rows = []
    pool = None
    for t, ds in enumerate(test_sets, start=1):
        pool = ds.features if pool is None else np.vstack([pool, ds.features])
        rows.append(LoglikRow(
            prefix_length=t,
            kde_loglik=kde_states[t - 1].score(pool),
            gmm_loglik=bank_states[t - 1].score(pool),
        ))
    return rows


def loglik_comparison(sequence, centers_per_domain: int = 10, gmm_components: int = 10,
                      kmeans_max_iter: int = 100, kmeans_restarts: int = 8,
                      seed=0) -> list[LoglikRow]:
    """Fit both generator families incrementally along a sequence and tabulate
    their average held-out log-likelihood at every prefix.

    For each task the KDE support gains ``centers_per_domain`` K-means centers
    and the bank gains one ``gmm_components``-component GMM, both fitted on the
    task's train latents; each prefix is scored on the pooled test latents of
    the domains seen so far.
    """
    episodes = list(sequence.episodes) if hasattr(sequence, "episodes") else list(sequence)
    root = np.random.SeedSequence(seed)
    task_seeds = root.spawn(len(episodes))

    kde = KdeGenerator()
    bank = GmmBank()
    kde_states, bank_states, test_sets = [], [], []
    for (train, test), ss in zip(episodes, task_seeds):
        rng = np.random.default_rng(ss)
        km_seed = int(rng.integers(0, 2**63 - 1))
        gmm_seed = int(rng.integers(0, 2**63 - 1))
        k = min(centers_per_domain, train.n_samples)
        centers = KMeans(n_clusters=k, max_iter=kmeans_max_iter, n_init=kmeans_restarts,
                         random_state=km_seed).fit(train.features).cluster_centers_
        kde.partial_fit(centers)
        m = min(gmm_components, train.n_samples)
        bank.append(GaussianMixture(n_components=m, random_state=gmm_seed).fit(train.features))
        kde_states.append(kde.copy())
        bank_states.append(bank.copy())
        test_sets.append(test)
    return loglik_table(test_sets, kde_states, bank_states)
