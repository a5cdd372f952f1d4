"""Latent datasets: ingestion, synthetic domain-shift benchmarks, splits, sequences.

A :class:`LatentDataset` holds labeled latent feature vectors for one domain.
Datasets are immutable after construction and safe to share across threads.
Feature files on disk are plain CSV (header ``label,f0,...,f{d-1}``) referenced
by a small JSON manifest, so corpora stay human-inspectable and language-neutral.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import as_generator, check_labels, check_matrix


@dataclass(frozen=True)
class LatentDataset:
    """Labeled latent vectors for a single domain.

    Parameters
    ----------
    domain_id : str
        Identifier of the source domain.
    features : ndarray of shape (n_samples, dim)
        Latent feature vectors; all entries must be finite.
    labels : ndarray of shape (n_samples,)
        Integer class labels in ``[0, class_count)``.
    class_count : int
        Number of classes shared by every domain in an experiment.
    """

    domain_id: str
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = check_matrix(self.features, name="features", min_rows=0)
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        labels = check_labels(self.labels, features.shape[0], self.class_count, name="labels")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices, domain_id: str | None = None) -> "LatentDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LatentDataset(
            domain_id=self.domain_id if domain_id is None else domain_id,
            features=self.features[indices].copy(),
            labels=self.labels[indices].copy(),
            class_count=self.class_count,
        )


def concat_datasets(datasets, domain_id: str = "joint") -> LatentDataset:
    """Concatenate datasets sharing dim and class_count (used by joint training)."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    dims = {ds.dim for ds in datasets}
    counts = {ds.class_count for ds in datasets}
    if len(dims) != 1 or len(counts) != 1:
        raise ValueError("datasets disagree on dim or class_count")
    return LatentDataset(
        domain_id=domain_id,
        features=np.vstack([ds.features for ds in datasets]),
        labels=np.concatenate([ds.labels for ds in datasets]),
        class_count=datasets[0].class_count,
    )


# ---------------------------------------------------------------------------
# On-disk format: JSON manifest + feature CSV
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    # repr() is the shortest decimal that round-trips to the same double
    return repr(float(x))


def load_dataset(manifest_path) -> LatentDataset:
    """Load a dataset from a JSON manifest referencing a feature CSV.

    The manifest is ``{"domain_id": str, "class_count": int, "features_csv": path}``
    with the CSV path relative to the manifest. Rows are kept in on-disk order.
    Malformed rows are reported with their line number (header is line 1).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("domain_id", "class_count", "features_csv"):
        if key not in manifest:
            raise ValueError(f"manifest {manifest_path} is missing key '{key}'")
    class_count = int(manifest["class_count"])
    csv_path = manifest_path.parent / manifest["features_csv"]
    if not csv_path.exists():
        raise FileNotFoundError(f"feature file not found: {csv_path}")

    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{csv_path}: empty feature file") from None
        if not header or header[0] != "label":
            raise ValueError(f"{csv_path} line 1: header must start with 'label'")
        dim = len(header) - 1
        if dim < 1:
            raise ValueError(f"{csv_path} line 1: header declares no feature columns")

        features, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(
                    f"{csv_path} line {lineno}: expected {dim + 1} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
            except ValueError:
                raise ValueError(f"{csv_path} line {lineno}: label '{row[0]}' is not an integer") from None
            if not 0 <= label < class_count:
                raise ValueError(
                    f"{csv_path} line {lineno}: label {label} outside [0, {class_count})"
                )
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise ValueError(f"{csv_path} line {lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"{csv_path} line {lineno}: non-finite feature value")
            labels.append(label)
            features.append(values)

    if not features:
        raise ValueError(f"{csv_path}: no data rows")
    return LatentDataset(
        domain_id=str(manifest["domain_id"]),
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        class_count=class_count,
    )


def save_dataset(dataset: LatentDataset, manifest_path, features_csv: str | None = None) -> None:
    """Write ``dataset`` as manifest + CSV; ``load_dataset`` reads it back bit-exactly."""
    manifest_path = Path(manifest_path)
    if features_csv is None:
        features_csv = manifest_path.stem + "_features.csv"
    csv_path = manifest_path.parent / features_csv
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    header = "label," + ",".join(f"f{j}" for j in range(dataset.dim))
    lines = [header]
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(str(int(label)) + "," + ",".join(_format_float(v) for v in row))
    with open(csv_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    manifest = {
        "domain_id": dataset.domain_id,
        "class_count": dataset.class_count,
        "features_csv": str(features_csv),
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Splits and sequences
# ---------------------------------------------------------------------------

def make_split(dataset: LatentDataset, test_per_class: int, seed) -> tuple[LatentDataset, LatentDataset]:
    """Stratified train/test split with exactly ``test_per_class`` test samples per class.

    Sampling is without replacement and deterministic per seed; each split keeps
    the original row order of the input dataset.
    """
    if test_per_class < 0:
        raise ValueError("test_per_class must be >= 0")
    rng = as_generator(seed)
    counts = dataset.per_class_counts()
    for label in range(dataset.class_count):
        if counts[label] <= test_per_class:
            raise ValueError(
                f"class {label} has {counts[label]} samples, needs more than {test_per_class}"
            )
    test_idx = []
    for label in range(dataset.class_count):
        idx = dataset.class_indices(label)
        perm = rng.permutation(idx.shape[0])
        test_idx.append(idx[perm[:test_per_class]])
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, dtype=np.int64)
    mask = np.ones(dataset.n_samples, dtype=bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask)
    return dataset.subset(train_idx), dataset.subset(test_idx)


@dataclass(frozen=True)
class EpisodeSequence:
    """Ordered train/test episodes over domains sharing one label set."""

    name: str
    episodes: tuple

    def __post_init__(self):
        episodes = tuple((train, test) for train, test in self.episodes)
        if not episodes:
            raise ValueError("a sequence needs at least one episode")
        dims = {ds.dim for pair in episodes for ds in pair}
        counts = {ds.class_count for pair in episodes for ds in pair}
        if len(dims) != 1:
            raise ValueError(f"episodes disagree on dim: {sorted(dims)}")
        if len(counts) != 1:
            raise ValueError(f"episodes disagree on class_count: {sorted(counts)}")
        object.__setattr__(self, "episodes", episodes)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def dim(self) -> int:
        return self.episodes[0][0].dim

    @property
    def class_count(self) -> int:
        return self.episodes[0][0].class_count

    def train_sets(self) -> list:
        return [train for train, _ in self.episodes]

    def test_sets(self) -> list:
        return [test for _, test in self.episodes]


def build_sequence(pairs, order, name: str = "sequence") -> EpisodeSequence:
    """Arrange ``pairs`` of (train, test) datasets into an episode sequence.

    ``order`` must be a permutation of ``range(len(pairs))``; episodes follow it
    exactly.
    """
    pairs = list(pairs)
    order = [int(i) for i in order]
    if sorted(order) != list(range(len(pairs))):
        raise ValueError(f"order {order} is not a permutation of 0..{len(pairs) - 1}")
    return EpisodeSequence(name=name, episodes=tuple(pairs[i] for i in order))


# ---------------------------------------------------------------------------
# Synthetic domain generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain: a class-conditional Gaussian mixture
    pushed through a rotation + shift + scale transform.

    The transform moves the latent distribution while preserving class
    structure, standing in for scanner/stain-style shifts over frozen-backbone
    features. ``rotation_dims`` restricts the rotation to the leading block of
    coordinates, matching feature spaces where class structure concentrates in
    a subspace while the remaining dimensions carry noise.
    """

    class_count: int
    dim: int
    components_per_class: int
    component_means: np.ndarray  # (class_count, components_per_class, dim)
    component_spread: float
    train_per_class: int
    test_per_class: int
    rotation_seed: int | None = None
    rotation_dims: int | None = None
    rotation_kind: str = "qr"  # "qr" dense rotation | "permutation" coordinate remap
    shift: np.ndarray | None = None
    scale: float = 1.0
    component_weights: tuple | None = None  # per-class mixture weights, default equal
    nonnegative: bool = False  # clip features at 0, like post-ReLU backbone activations

    def __post_init__(self):
        means = np.asarray(self.component_means, dtype=np.float64)
        expected = (self.class_count, self.components_per_class, self.dim)
        if means.shape != expected:
            raise ValueError(f"component_means must have shape {expected}, got {means.shape}")
        if not np.all(np.isfinite(means)):
            raise ValueError("component_means contains non-finite values")
        if self.components_per_class < 1:
            raise ValueError("components_per_class must be >= 1")
        if not self.component_spread > 0:
            raise ValueError("component_spread must be > 0")
        if not self.scale > 0:
            raise ValueError("scale factor must be > 0")
        if self.rotation_dims is not None and not 1 <= self.rotation_dims <= self.dim:
            raise ValueError("rotation_dims must lie in [1, dim]")
        if self.rotation_kind not in ("qr", "permutation"):
            raise ValueError("rotation_kind must be 'qr' or 'permutation'")
        if self.component_weights is not None:
            weights = tuple(float(w) for w in self.component_weights)
            if len(weights) != self.components_per_class:
                raise ValueError("component_weights length must match components_per_class")
            if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ValueError("component_weights must be positive and sum to 1")
            object.__setattr__(self, "component_weights", weights)
        shift = self.shift
        shift = np.zeros(self.dim) if shift is None else np.asarray(shift, dtype=np.float64)
        if shift.shape != (self.dim,):
            raise ValueError(f"shift must have shape ({self.dim},), got {shift.shape}")
        means.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "component_means", means)
        object.__setattr__(self, "shift", shift)


def rotation_matrix(dim: int, seed, rotation_dims: int | None = None,
                    kind: str = "qr") -> np.ndarray:
    """Random orthogonal matrix acting on the leading ``rotation_dims``
    coordinates (identity elsewhere).

    ``kind="qr"`` draws a dense rotation from the QR decomposition of a seeded
    Gaussian; ``kind="permutation"`` draws a random coordinate permutation,
    an orthogonal map that also preserves feature non-negativity."""
    r = dim if rotation_dims is None else rotation_dims
    rng = as_generator(seed)
    if kind == "permutation":
        q = np.eye(r)[rng.permutation(r)]
    else:
        gauss = rng.standard_normal((r, r))
        q, upper = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(upper))
    if r == dim:
        return q
    full = np.eye(dim)
    full[:r, :r] = q
    return full


def apply_domain_transform(spec: DomainSpec, points: np.ndarray) -> np.ndarray:
    """Apply the spec's rotation, scale, and shift to rows of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if spec.rotation_seed is not None:
        q = rotation_matrix(spec.dim, spec.rotation_seed, spec.rotation_dims,
                            kind=spec.rotation_kind)
        points = points @ q.T
    return spec.scale * points + spec.shift


def transformed_component_means(spec: DomainSpec) -> np.ndarray:
    """Component means after the domain transform, shape (C, M, dim)."""
    flat = spec.component_means.reshape(-1, spec.dim)
    return apply_domain_transform(spec, flat).reshape(spec.component_means.shape)


def _component_counts(n: int, weights) -> np.ndarray:
    """Apportion n samples to components by largest remainder (deterministic)."""
    raw = np.asarray(weights) * n
    counts = np.floor(raw).astype(np.int64)
    remainder = raw - counts
    for idx in np.argsort(-remainder)[: n - counts.sum()]:
        counts[idx] += 1
    return counts


def synthesize_domain(spec: DomainSpec, seed, domain_id: str = "synthetic") -> LatentDataset:
    """Draw ``train_per_class + test_per_class`` samples per class from the spec.

    Component counts within a class follow ``component_weights`` exactly
    (equal split by default), interleaved deterministically, so per-class
    sample means converge to the weighted mean of the class's transformed
    component means. Deterministic per seed.
    """
    rng = as_generator(seed)
    n_per_class = spec.train_per_class + spec.test_per_class
    m = spec.components_per_class
    weights = spec.component_weights or tuple([1.0 / m] * m)
    counts = _component_counts(n_per_class, weights)
    # spread each component evenly through the class block so any stratified
    # split sees components in proportion
    positions = np.concatenate([(np.arange(c) + 0.5) / c for c in counts if c > 0])
    comp_ids = np.concatenate([np.full(c, j, dtype=np.int64) for j, c in enumerate(counts) if c > 0])
    comp = comp_ids[np.argsort(positions, kind="stable")]
    blocks, labels = [], []
    for label in range(spec.class_count):
        noise = rng.standard_normal((n_per_class, spec.dim))
        blocks.append(spec.component_means[label, comp] + spec.component_spread * noise)
        labels.append(np.full(n_per_class, label, dtype=np.int64))
    features = apply_domain_transform(spec, np.vstack(blocks))
    if spec.nonnegative:
        features = np.maximum(features, 0.0)
    return LatentDataset(
        domain_id=domain_id,
        features=features,
        labels=np.concatenate(labels),
        class_count=spec.class_count,
    )


def default_component_means(
    class_count: int,
    dim: int,
    components_per_class: int,
    class_separation: float,
    component_separation: float,
    seed,
    structure_dims: int | None = None,
    structure_rank: int | None = None,
    orthant: str = "signed",
) -> np.ndarray:
    """Well-separated multimodal layout: class centers on random unit directions
    scaled by ``class_separation``, component offsets by ``component_separation``.

    With ``structure_dims = k`` all separation lives in the leading k
    coordinates (the rest differ only by sampling noise), mimicking feature
    spaces whose class structure concentrates in a subspace. ``structure_rank``
    confines the mode positions to a random low-rank subspace of those
    coordinates. ``orthant="positive"`` folds all directions into the positive
    orthant (non-negative coordinates, like post-activation features);
    ``"signed"`` centers the layout at zero instead."""
    if orthant not in ("signed", "positive"):
        raise ValueError("orthant must be 'signed' or 'positive'")
    rng = as_generator(seed)
    k = dim if structure_dims is None else structure_dims
    if not 1 <= k <= dim:
        raise ValueError("structure_dims must lie in [1, dim]")
    r = k if structure_rank is None else structure_rank
    if not 1 <= r <= k:
        raise ValueError("structure_rank must lie in [1, structure_dims]")
    centers = rng.standard_normal((class_count, r))
    offsets = rng.standard_normal((class_count, components_per_class, r))
    if orthant == "positive":
        centers = np.abs(centers)
        offsets = np.abs(offsets)
    centers *= class_separation / np.linalg.norm(centers, axis=1, keepdims=True)
    offsets *= component_separation / np.linalg.norm(offsets, axis=2, keepdims=True)
    low_rank = centers[:, None, :] + offsets
    means = np.zeros((class_count, components_per_class, dim))
    if orthant == "positive":
        # keep coordinates non-negative; map straight onto the leading dims
        means[:, :, :r] = low_rank
    else:
        # zero-mean layout: domain transforms then move distributions without
        # drifting the overall cloud, keeping the pooled scatter stable
        low_rank = low_rank - low_rank.reshape(-1, r).mean(axis=0)
        basis, _ = np.linalg.qr(rng.standard_normal((k, r)))  # random rank-r frame
        means[:, :, :k] = low_rank @ basis.T
    return means


# Orderings mirror the four benchmark sequences: front-to-back, interleaved,
# reversed, and smallest-first.
STANDARD_SEQUENCE_ORDERS = {
    "seq1": (0, 1, 2, 3),
    "seq2": (2, 0, 3, 1),
    "seq3": (3, 2, 1, 0),
    "seq4": (3, 0, 1, 2),
}


def synthetic_benchmark(
    n_domains: int = 4,
    class_count: int = 3,
    dim: int = 64,
    components_per_class: int = 2,
    train_per_class: int = 200,
    test_per_class: int = 50,
    component_spread: float = 1.0,
    class_separation: float = 29.0,
    component_separation: float = 29.0,
    structure_dims: int | None = 8,
    structure_rank: int | None = None,
    orthant: str = "positive",
    rotation_kind: str = "permutation",
    rotation_dims: int | None = None,
    component_weights: tuple | None = (0.7, 0.3),
    common_offset: float = 8.0,
    noise_offset: float = 2.25,
    nonnegative: bool = True,
    shift_magnitude: float = 1.0,
    scale_range: tuple[float, float] = (0.99, 1.01),
    seed: int = 0,
) -> list[tuple[LatentDataset, LatentDataset]]:
    """Build the standard synthetic domain-shift benchmark.

    All domains share one class-conditional mixture whose class structure is
    concentrated in the leading ``structure_dims`` coordinates (the remaining
    dimensions carry isotropic noise), as in backbone feature spaces with a
    concentrated spectrum. The layout sits in the positive orthant with a cone
    offset (``common_offset`` over structure dims, ``noise_offset`` elsewhere)
    and features clip at zero, mirroring post-activation latents of a frozen
    backbone. Domain 0 is untransformed; each later domain applies its own
    orthogonal remap of the structure coordinates (a seeded permutation by
    default, which preserves non-negativity) plus a shift and a scale, so class
    semantics are identical while latent distributions differ.

    Returns a list of (train, test) pairs, one per domain.
    """
    root = np.random.SeedSequence(seed)
    means_ss, offset_ss, *domain_ss = root.spawn(2 + n_domains)
    means = default_component_means(
        class_count, dim, components_per_class,
        class_separation, component_separation, means_ss,
        structure_dims=structure_dims, structure_rank=structure_rank,
        orthant=orthant,
    )
    k = dim if structure_dims is None else structure_dims
    offset_rng = np.random.default_rng(offset_ss)
    cone = np.full(dim, noise_offset)
    cone[:k] = np.abs(offset_rng.standard_normal(k))
    cone[:k] *= common_offset / np.linalg.norm(cone[:k]) if common_offset > 0 else 0.0
    pairs = []
    for i, ss in enumerate(domain_ss):
        param_rng = np.random.default_rng(ss)
        if i == 0:
            rotation_seed, shift, scale = None, cone.copy(), 1.0
        else:
            rotation_seed = int(param_rng.integers(0, 2**63 - 1))
            direction = np.zeros(dim)
            direction[:k] = param_rng.standard_normal(k)
            shift = cone + shift_magnitude * direction / np.linalg.norm(direction)
            scale = float(param_rng.uniform(*scale_range))
        spec = DomainSpec(
            class_count=class_count,
            dim=dim,
            components_per_class=components_per_class,
            component_means=means,
            component_spread=component_spread,
            train_per_class=train_per_class,
            test_per_class=test_per_class,
            rotation_seed=rotation_seed,
            rotation_dims=structure_dims if rotation_dims is None else rotation_dims,
            rotation_kind=rotation_kind,
            shift=shift,
            scale=scale,
            component_weights=component_weights,
            nonnegative=nonnegative,
        )
        sample_seed = int(param_rng.integers(0, 2**63 - 1))
        split_seed = int(param_rng.integers(0, 2**63 - 1))
        dataset = synthesize_domain(spec, sample_seed, domain_id=f"domain{i}")
        pairs.append(make_split(dataset, test_per_class, split_seed))
    return pairs
