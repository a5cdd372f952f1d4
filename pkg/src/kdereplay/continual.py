"""Episode loop and strategy implementations for domain-incremental training.

Strategies:

- ``proposed``: hybrid mini-batches (real + KDE-generated latents with teacher
  pseudo-labels) trained under the combined CE + KL-distillation loss.
- ``glrcl_gmm``: same, but the generator is a bank of per-domain GMMs.
- ``latent_buffer``: hybrid batches drawn from a reservoir buffer of raw
  latents with stored true labels, CE only.
- ``glr_only``: hybrid KDE batches, CE only (replay ablation).
- ``dst_only``: current-task batches with the distillation term (loss ablation).
- ``naive``: sequential fine-tuning, CE only.
- ``joint``: one training pass over the union of all train sets (upper bound).

Episode 1 never has a teacher or generator, so every strategy degenerates to
plain supervised training there. The generator is updated after each episode:
training on task t replays from the generator state left by task t-1.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_generator, check_fraction, check_matrix
from .cluster import KMeans, select_k_bic
from .datasets import EpisodeSequence, LatentDataset, concat_datasets
from .density import GaussianMixture, GmmBank, KdeGenerator
from .metrics import TrainTestMatrix
from .mlp import DEFAULT_HIDDEN_LAYERS, MlpClassifier, make_optimizer

STRATEGY_KINDS = (
    "proposed",
    "glrcl_gmm",
    "latent_buffer",
    "naive",
    "joint",
    "dst_only",
    "glr_only",
)
_REPLAY_KINDS = ("proposed", "glrcl_gmm", "latent_buffer", "glr_only")
_DISTILL_KINDS = ("proposed", "glrcl_gmm", "dst_only")


@dataclass(frozen=True)
class StrategyConfig:
    """Hyperparameters for one continual-learning run.

    ``alpha`` weighs the distillation term, ``replay_fraction`` the generated
    share of each mini-batch (0.5 gives the 50/50 hybrid split), and
    ``centers_per_domain`` the number of cluster centers retained per task.
    """

    kind: str = "proposed"
    alpha: float = 0.2
    replay_fraction: float = 0.5
    centers_per_domain: int = 10
    gmm_components: int = 10
    buffer_capacity: int = 40
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    hidden_layer_sizes: tuple = DEFAULT_HIDDEN_LAYERS
    kl_direction: str = "teacher_to_student"
    select_k_by_bic: bool = False
    bic_k_range: tuple = (2, 15)
    kmeans_per_class: bool = False
    balance_classes: bool = False
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind '{self.kind}'")
        check_fraction(self.alpha, "alpha")
        check_fraction(self.replay_fraction, "replay_fraction")
        if self.centers_per_domain < 1:
            raise ValueError("centers_per_domain must be >= 1")
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if self.buffer_capacity < 0:
            raise ValueError("buffer_capacity must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class ReservoirBuffer:
    """Reservoir sampling (Algorithm R) over the stream of past latents.

    Stores (latent, true label) pairs; size never exceeds ``capacity``.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.features: list = []
        self.labels: list = []
        self.n_seen = 0

    def __len__(self) -> int:
        return len(self.features)

    @property
    def is_fitted(self) -> bool:
        return len(self.features) > 0

    def extend(self, X, y, random_state=None) -> None:
        rng = as_generator(random_state)
        X = check_matrix(X)
        for row, label in zip(X, y):
            self.n_seen += 1
            if len(self.features) < self.capacity:
                self.features.append(row.copy())
                self.labels.append(int(label))
            else:
                if self.capacity == 0:
                    continue
                j = int(rng.integers(0, self.n_seen))
                if j < self.capacity:
                    self.features[j] = row.copy()
                    self.labels[j] = int(label)

    def sample(self, n_samples: int, random_state=None):
        """Uniform draw with replacement; returns (features, labels)."""
        if not self.features:
            raise ValueError("buffer is empty")
        rng = as_generator(random_state)
        idx = rng.integers(0, len(self.features), size=n_samples)
        feats = np.stack([self.features[i] for i in idx])
        labels = np.asarray([self.labels[i] for i in idx], dtype=np.int64)
        return feats, labels

    def copy(self) -> "ReservoirBuffer":
        buf = ReservoirBuffer(self.capacity)
        buf.features = [row.copy() for row in self.features]
        buf.labels = list(self.labels)
        buf.n_seen = self.n_seen
        return buf


def pseudo_label(teacher: MlpClassifier, latents) -> np.ndarray:
    """Teacher argmax predictions for generated latents (ties -> class 0)."""
    if teacher is None:
        raise ValueError("pseudo-labeling requires a teacher model")
    return teacher.predict(latents)


@dataclass(frozen=True)
class HybridBatch:
    features: np.ndarray
    labels: np.ndarray
    teacher_logits: np.ndarray | None
    n_generated: int


def assemble_hybrid_batch(real_features, real_labels, generator, teacher,
                          batch_size: int, replay_fraction: float, random_state=None,
                          compute_teacher_logits: bool = True) -> HybridBatch:
    """Compose one mini-batch: ``ceil(replay_fraction * batch_size)`` generated
    samples plus the provided real samples.

    Generated latents get pseudo-labels from the teacher, except for a
    :class:`ReservoirBuffer` generator whose stored true labels are used.
    Teacher logits are computed for the whole assembled batch when requested.
    """
    replay_fraction = check_fraction(replay_fraction, "replay_fraction")
    n_generated = math.ceil(replay_fraction * batch_size)
    n_real_cap = batch_size - n_generated
    real_features = np.asarray(real_features, dtype=np.float64)
    real_labels = np.asarray(real_labels, dtype=np.int64)
    if real_features.shape[0] > n_real_cap:
        raise ValueError(
            f"{real_features.shape[0]} real samples exceed the {n_real_cap}-sample "
            f"real share of a {batch_size}-sample batch at replay_fraction={replay_fraction}"
        )
    rng = as_generator(random_state)

    if n_generated > 0:
        if generator is None or not generator.is_fitted:
            raise ValueError("replay requested but the generator is empty")
        if isinstance(generator, ReservoirBuffer):
            gen_features, gen_labels = generator.sample(n_generated, rng)
        else:
            gen_features = generator.sample(n_generated, rng)
            gen_labels = pseudo_label(teacher, gen_features)
        features = np.vstack([real_features, gen_features]) if real_features.size else gen_features
        labels = np.concatenate([real_labels, gen_labels])
    else:
        features, labels = real_features, real_labels

    teacher_logits = None
    if teacher is not None and compute_teacher_logits:
        teacher_logits = teacher.forward(features)
    return HybridBatch(features, labels, teacher_logits, n_generated)


@dataclass
class EpisodeOutcome:
    """Result of one training session: the trained model, the generator state
    left for the next session, and the accuracy row over the test sets."""

    model: MlpClassifier
    generator_state: object
    accuracy_row: np.ndarray | None
    final_loss: float | None = None


def _balanced_subset(data: LatentDataset, rng) -> LatentDataset:
    counts = data.per_class_counts()
    target = int(counts.min())
    keep = []
    for label in range(data.class_count):
        idx = data.class_indices(label)
        perm = rng.permutation(idx.shape[0])
        keep.append(idx[perm[:target]])
    return data.subset(np.sort(np.concatenate(keep)))


def _fit_domain_centers(latents: np.ndarray, labels: np.ndarray, cfg: StrategyConfig,
                        rng) -> np.ndarray:
    """Cluster centers retained for one domain (exactly centers_per_domain rows
    in the default whole-domain mode)."""
    if cfg.select_k_by_bic:
        k_min, k_max = cfg.bic_k_range
        k_max = min(k_max, latents.shape[0])
        seed = int(rng.integers(0, 2**63 - 1))
        _, entries = select_k_bic(latents, k_min, k_max,
                                  max_iter=cfg.kmeans_max_iter, n_init=cfg.kmeans_restarts,
                                  random_state=seed)
        best = min(entries, key=lambda e: (e.bic, e.n_clusters))
        return best.model.cluster_centers_
    if cfg.kmeans_per_class:
        classes = np.unique(labels)
        base, extra = divmod(cfg.centers_per_domain, classes.size)
        blocks = []
        for rank, label in enumerate(classes):
            k = base + (1 if rank < extra else 0)
            if k == 0:
                continue
            pts = latents[labels == label]
            k = min(k, pts.shape[0])
            seed = int(rng.integers(0, 2**63 - 1))
            blocks.append(KMeans(n_clusters=k, max_iter=cfg.kmeans_max_iter,
                                 n_init=cfg.kmeans_restarts,
                                 random_state=seed).fit(pts).cluster_centers_)
        return np.vstack(blocks)
    k = min(cfg.centers_per_domain, latents.shape[0])
    seed = int(rng.integers(0, 2**63 - 1))
    return KMeans(n_clusters=k, max_iter=cfg.kmeans_max_iter, n_init=cfg.kmeans_restarts,
                  random_state=seed).fit(latents).cluster_centers_


def make_generator_state(cfg: StrategyConfig):
    if cfg.kind in ("proposed", "glr_only"):
        return KdeGenerator()
    if cfg.kind == "glrcl_gmm":
        return GmmBank()
    if cfg.kind == "latent_buffer":
        return ReservoirBuffer(cfg.buffer_capacity)
    return None


def train_episode(student: MlpClassifier, teacher: MlpClassifier | None,
                  train_data: LatentDataset, generator_state, cfg: StrategyConfig,
                  rng=None, episode_index: int = 1, test_sets=None) -> EpisodeOutcome:
    """Run one training session and update the generator state afterwards.

    ``episode_index`` is 1-based; at index 1 there is no teacher or replay and
    the loss degenerates to pure cross-entropy regardless of strategy.
    """
    cfg.validate()
    rng = as_generator(rng if rng is not None else cfg.seed)
    data = _balanced_subset(train_data, rng) if cfg.balance_classes else train_data
    X, y = data.features, data.labels
    n = X.shape[0]

    replay = cfg.kind in _REPLAY_KINDS and episode_index >= 2 and cfg.replay_fraction > 0
    if replay and (generator_state is None or not generator_state.is_fitted):
        raise ValueError(
            "replay requested with an empty generator; episode 1 must run with replay_fraction=0"
        )
    distill = (
        cfg.kind in _DISTILL_KINDS and episode_index >= 2
        and teacher is not None and cfg.alpha > 0
    )
    alpha = cfg.alpha if distill else 0.0
    n_generated = math.ceil(cfg.replay_fraction * cfg.batch_size) if replay else 0
    n_real_cap = cfg.batch_size - n_generated
    # real data paces the epoch in chunks of the real share; each chunk is
    # topped up with freshly generated samples
    chunk = n_real_cap if n_real_cap > 0 else cfg.batch_size

    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    last_loss = None
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, chunk):
            sel = perm[start:start + chunk] if n_real_cap > 0 else perm[:0]
            if replay:
                batch = assemble_hybrid_batch(
                    X[sel], y[sel], generator_state, teacher,
                    cfg.batch_size, cfg.replay_fraction, rng,
                    compute_teacher_logits=distill,
                )
                bx, by, t_logits = batch.features, batch.labels, batch.teacher_logits
            else:
                bx, by = X[sel], y[sel]
                t_logits = teacher.forward(bx) if distill else None
            loss, grads = student.loss_and_grad(bx, by, t_logits, alpha, cfg.kl_direction)
            optimizer.step(student, grads)
            last_loss = loss.total

    generator_state = _update_generator(generator_state, data, cfg, rng)

    accuracy_row = None
    if test_sets is not None:
        accuracy_row = np.array(
            [student.accuracy(ts.features, ts.labels) for ts in test_sets]
        )
    return EpisodeOutcome(model=student, generator_state=generator_state,
                          accuracy_row=accuracy_row, final_loss=last_loss)


def _update_generator(generator_state, data: LatentDataset, cfg: StrategyConfig, rng):
    if cfg.kind in ("proposed", "glr_only"):
        centers = _fit_domain_centers(data.features, data.labels, cfg, rng)
        generator_state.partial_fit(centers)
    elif cfg.kind == "glrcl_gmm":
        seed = int(rng.integers(0, 2**63 - 1))
        m = min(cfg.gmm_components, data.n_samples)
        generator_state.append(GaussianMixture(n_components=m, random_state=seed).fit(data.features))
    elif cfg.kind == "latent_buffer":
        generator_state.extend(data.features, data.labels, rng)
    return generator_state


@dataclass
class RunResult:
    """Everything produced by one sequence run: the train-test accuracy matrix,
    per-episode outcomes, and a snapshot of the generator after each session."""

    matrix: TrainTestMatrix
    outcomes: list
    generator_states: list
    model: MlpClassifier
    config: StrategyConfig


def _snapshot(generator_state):
    return generator_state.copy() if generator_state is not None else None


def run_sequence(sequence: EpisodeSequence, cfg: StrategyConfig) -> RunResult:
    """Train through a sequence and fill the train-test matrix row by row.

    Row i holds the accuracy on every test set after session i (columns j > i
    are extra-protocol but stored). Pure function of (sequence, cfg.seed).
    """
    cfg.validate()
    n_episodes = sequence.n_episodes
    if cfg.kind == "latent_buffer" and cfg.buffer_capacity == 0 and n_episodes > 1:
        raise ValueError("latent_buffer strategy needs buffer_capacity > 0 for multi-episode runs")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, *episode_ss = root.spawn(1 + n_episodes)
    model = MlpClassifier(
        hidden_layer_sizes=tuple(cfg.hidden_layer_sizes),
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        random_state=cfg.seed,
    )
    model.initialize(sequence.dim, sequence.class_count,
                     random_state=np.random.default_rng(init_ss))
    test_sets = sequence.test_sets()

    if cfg.kind == "joint":
        merged = concat_datasets(sequence.train_sets())
        outcome = train_episode(model, None, merged, None, cfg,
                                rng=np.random.default_rng(episode_ss[0]),
                                episode_index=1, test_sets=test_sets)
        values = np.full((n_episodes, n_episodes), np.nan)
        defined = np.zeros((n_episodes, n_episodes), dtype=bool)
        values[-1] = outcome.accuracy_row
        defined[-1] = True
        matrix = TrainTestMatrix(values=values, defined=defined)
        return RunResult(matrix=matrix, outcomes=[outcome],
                         generator_states=[None] * n_episodes, model=model, config=cfg)

    generator = make_generator_state(cfg)
    values = np.zeros((n_episodes, n_episodes))
    outcomes, snapshots = [], []
    teacher = None
    for t, (train, _) in enumerate(sequence.episodes, start=1):
        if t >= 2:
            teacher = model.copy()
        outcome = train_episode(
            model, teacher, train, generator, cfg,
            rng=np.random.default_rng(episode_ss[t - 1]),
            episode_index=t, test_sets=test_sets,
        )
        generator = outcome.generator_state
        values[t - 1] = outcome.accuracy_row
        outcomes.append(outcome)
        snapshots.append(_snapshot(generator))
    matrix = TrainTestMatrix(values=values, defined=np.ones_like(values, dtype=bool))
    return RunResult(matrix=matrix, outcomes=outcomes, generator_states=snapshots,
                     model=model, config=cfg)
