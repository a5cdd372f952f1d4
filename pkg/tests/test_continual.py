import numpy as np
import pytest

from kdereplay.continual import (
    ReservoirBuffer,
    StrategyConfig,
    assemble_hybrid_batch,
    pseudo_label,
    run_sequence,
    train_episode,
)
from kdereplay.datasets import build_sequence, make_split, synthetic_benchmark, synthesize_domain
from kdereplay.datasets import DomainSpec, default_component_means
from kdereplay.density import KdeGenerator
from kdereplay.metrics import acc, bwt, ilm
from kdereplay.mlp import MlpClassifier

SMALL_NET = (32, 16)


def small_cfg(**overrides):
    kwargs = dict(kind="proposed", alpha=0.2, epochs=3,
                  hidden_layer_sizes=SMALL_NET, seed=1)
    kwargs.update(overrides)
    return StrategyConfig(**kwargs)


@pytest.fixture(scope="module")
def small_pairs():
    return synthetic_benchmark(
        n_domains=4, dim=12, structure_dims=4, class_separation=12.0,
        component_separation=12.0, common_offset=4.0,
        train_per_class=40, test_per_class=10, seed=0)


@pytest.fixture(scope="module")
def small_sequence(small_pairs):
    return build_sequence(small_pairs, [0, 1, 2, 3], name="seq1")


def _teacher(dim=12, classes=3, seed=0):
    return MlpClassifier(hidden_layer_sizes=SMALL_NET, random_state=seed).initialize(dim, classes)


# ---------------------------------------------------------------------------
# Pseudo-labeling
# ---------------------------------------------------------------------------

def test_pseudo_label_constant_teacher(small_sequence):
    teacher = _teacher()
    for w in teacher.weights_:
        w[:] = 0.0
    teacher.biases_[-1][:] = np.array([0.0, 5.0, 0.0])
    labels = pseudo_label(teacher, np.random.default_rng(0).normal(size=(6, 12)))
    assert np.array_equal(labels, np.ones(6, dtype=np.int64))


def test_pseudo_label_consistency_with_trained_teacher(small_pairs):
    train, _ = small_pairs[0]
    teacher = MlpClassifier(hidden_layer_sizes=SMALL_NET, epochs=20, random_state=0)
    teacher.fit(train.features, train.labels)
    if teacher.accuracy(train.features, train.labels) == 100.0:
        assert np.array_equal(pseudo_label(teacher, train.features), train.labels)


def test_pseudo_label_tie_break_and_missing_teacher():
    teacher = _teacher()
    for w in teacher.weights_:
        w[:] = 0.0
    labels = pseudo_label(teacher, np.zeros((3, 12)))
    assert np.array_equal(labels, np.zeros(3, dtype=np.int64))
    with pytest.raises(ValueError, match="teacher"):
        pseudo_label(None, np.zeros((3, 12)))


# ---------------------------------------------------------------------------
# Hybrid batches
# ---------------------------------------------------------------------------

def test_hybrid_batch_fifty_fifty(small_pairs):
    train, _ = small_pairs[0]
    gen = KdeGenerator().fit(np.random.default_rng(0).normal(size=(10, 12)))
    teacher = _teacher()
    batch = assemble_hybrid_batch(train.features[:32], train.labels[:32], gen, teacher,
                                  batch_size=64, replay_fraction=0.5, random_state=0)
    assert batch.n_generated == 32
    assert batch.features.shape == (64, 12)
    assert batch.teacher_logits.shape == (64, 3)
    assert np.array_equal(batch.features[:32], train.features[:32])
    assert np.array_equal(batch.labels[:32], train.labels[:32])


def test_hybrid_batch_pure_cases(small_pairs):
    train, _ = small_pairs[0]
    gen = KdeGenerator().fit(np.random.default_rng(0).normal(size=(5, 12)))
    teacher = _teacher()
    pure_real = assemble_hybrid_batch(train.features[:64], train.labels[:64], gen, teacher,
                                      batch_size=64, replay_fraction=0.0, random_state=0)
    assert pure_real.n_generated == 0
    assert pure_real.features.shape == (64, 12)

    pure_gen = assemble_hybrid_batch(train.features[:0], train.labels[:0], gen, teacher,
                                     batch_size=64, replay_fraction=1.0, random_state=0)
    assert pure_gen.n_generated == 64
    assert pure_gen.features.shape == (64, 12)


def test_hybrid_batch_errors(small_pairs):
    train, _ = small_pairs[0]
    with pytest.raises(ValueError, match="empty"):
        assemble_hybrid_batch(train.features[:32], train.labels[:32], KdeGenerator(),
                              _teacher(), 64, 0.5)
    gen = KdeGenerator().fit(np.zeros((2, 12)) + np.arange(2)[:, None])
    with pytest.raises(ValueError, match="exceed"):
        assemble_hybrid_batch(train.features[:64], train.labels[:64], gen, _teacher(), 64, 0.5)


def test_hybrid_batch_buffer_uses_true_labels(small_pairs):
    train, _ = small_pairs[0]
    buffer = ReservoirBuffer(capacity=40)
    buffer.extend(train.features, train.labels, np.random.default_rng(0))
    batch = assemble_hybrid_batch(train.features[:32], train.labels[:32], buffer, None,
                                  batch_size=64, replay_fraction=0.5, random_state=1)
    assert batch.n_generated == 32
    assert batch.teacher_logits is None
    stored = np.stack(buffer.features)
    for row in batch.features[32:]:
        assert np.any(np.all(stored == row, axis=1))


# ---------------------------------------------------------------------------
# Reservoir buffer
# ---------------------------------------------------------------------------

def test_reservoir_never_exceeds_capacity():
    rng = np.random.default_rng(3)
    buffer = ReservoirBuffer(capacity=40)
    stream = rng.normal(size=(500, 4))
    labels = rng.integers(0, 3, 500)
    for start in range(0, 500, 50):
        buffer.extend(stream[start:start + 50], labels[start:start + 50], rng)
        assert len(buffer) <= 40
    assert len(buffer) == 40
    assert buffer.n_seen == 500


def test_reservoir_deterministic_and_content_from_stream():
    stream = np.arange(300, dtype=np.float64).reshape(100, 3)
    labels = np.arange(100) % 3
    a = ReservoirBuffer(10)
    a.extend(stream, labels, np.random.default_rng(5))
    b = ReservoirBuffer(10)
    b.extend(stream, labels, np.random.default_rng(5))
    assert np.array_equal(np.stack(a.features), np.stack(b.features))
    for row in a.features:
        assert np.any(np.all(stream == row, axis=1))


# ---------------------------------------------------------------------------
# Episode training
# ---------------------------------------------------------------------------

def test_teacher_parameters_unchanged_by_episode(small_sequence):
    cfg = small_cfg()
    result = run_sequence(small_sequence, cfg)
    # replicate manually to inspect the teacher mid-run
    student = MlpClassifier(hidden_layer_sizes=SMALL_NET, random_state=7).initialize(12, 3)
    teacher = student.copy()
    frozen = [w.copy() for w in teacher.weights_]
    gen = KdeGenerator().fit(np.random.default_rng(0).normal(size=(10, 12)) + 5.0)
    train_episode(student, teacher, small_sequence.episodes[1][0], gen, cfg,
                  rng=np.random.default_rng(1), episode_index=2)
    for w, ref in zip(teacher.weights_, frozen):
        assert np.array_equal(w, ref)
    assert result.matrix.values.shape == (4, 4)


def test_generator_support_grows_by_centers_per_domain(small_sequence):
    cfg = small_cfg(centers_per_domain=10)
    result = run_sequence(small_sequence, cfg)
    for t, state in enumerate(result.generator_states, start=1):
        assert state.n_support_ == t * 10
    assert result.generator_states[-1].task_counts_ == [10, 10, 10, 10]


def test_gmm_bank_grows_one_model_per_domain(small_sequence):
    cfg = small_cfg(kind="glrcl_gmm", gmm_components=5)
    result = run_sequence(small_sequence, cfg)
    for t, state in enumerate(result.generator_states, start=1):
        assert state.n_models == t


def test_buffer_strategy_respects_capacity(small_sequence):
    cfg = small_cfg(kind="latent_buffer", buffer_capacity=40)
    result = run_sequence(small_sequence, cfg)
    for state in result.generator_states:
        assert len(state) <= 40
    assert len(result.generator_states[-1]) == 40


def test_buffer_strategy_rejects_zero_capacity(small_sequence):
    cfg = small_cfg(kind="latent_buffer", buffer_capacity=0)
    with pytest.raises(ValueError, match="buffer_capacity"):
        run_sequence(small_sequence, cfg)


def test_replay_at_first_episode_requires_empty_fraction(small_pairs):
    train, _ = small_pairs[0]
    student = MlpClassifier(hidden_layer_sizes=SMALL_NET, random_state=0).initialize(12, 3)
    cfg = small_cfg()
    # episode 2 with an empty generator must fail loudly
    with pytest.raises(ValueError, match="empty generator"):
        train_episode(student, student.copy(), train, KdeGenerator(), cfg,
                      rng=np.random.default_rng(0), episode_index=2)


def test_proposed_reduces_to_naive_with_zero_alpha_and_replay(small_sequence):
    naive = run_sequence(small_sequence, small_cfg(kind="naive", alpha=0.0, seed=3))
    reduced = run_sequence(small_sequence,
                           small_cfg(kind="proposed", alpha=0.0, replay_fraction=0.0, seed=3))
    for wa, wb in zip(naive.model.weights_, reduced.model.weights_):
        assert np.array_equal(wa, wb)
    assert np.array_equal(naive.matrix.values, reduced.matrix.values)


def test_single_episode_sequence_equals_plain_training(small_pairs):
    seq = build_sequence(small_pairs[:1], [0], name="solo")
    for kind in ("proposed", "naive", "dst_only", "glr_only"):
        result = run_sequence(seq, small_cfg(kind=kind, seed=9))
        assert result.matrix.values.shape == (1, 1)
    a = run_sequence(seq, small_cfg(kind="proposed", seed=9))
    b = run_sequence(seq, small_cfg(kind="naive", seed=9))
    assert np.array_equal(a.matrix.values, b.matrix.values)


def test_run_sequence_is_deterministic(small_sequence):
    a = run_sequence(small_sequence, small_cfg(seed=11))
    b = run_sequence(small_sequence, small_cfg(seed=11))
    assert np.array_equal(a.matrix.values, b.matrix.values)
    for wa, wb in zip(a.model.weights_, b.model.weights_):
        assert np.array_equal(wa, wb)


def test_student_initialized_from_teacher(small_sequence):
    # the student entering episode t >= 2 is the model that finished t - 1;
    # the teacher is its frozen copy, so both start identical
    cfg = small_cfg(epochs=1)
    student = MlpClassifier(hidden_layer_sizes=SMALL_NET, random_state=5).initialize(12, 3)
    train_episode(student, None, small_sequence.episodes[0][0], KdeGenerator(),
                  small_cfg(kind="naive", epochs=1), rng=np.random.default_rng(0),
                  episode_index=1)
    teacher = student.copy()
    for wa, wb in zip(student.weights_, teacher.weights_):
        assert np.array_equal(wa, wb)


def test_joint_trains_on_union_and_masks_history(small_sequence):
    result = run_sequence(small_sequence, small_cfg(kind="joint", epochs=4, seed=2))
    matrix = result.matrix
    assert matrix.defined[-1].all()
    assert not matrix.defined[:-1].any()
    assert np.isfinite(acc(matrix))
    # ILM/BWT consume the lower triangle, which joint never fills
    with pytest.raises(ValueError, match="undefined"):
        ilm(matrix)
    with pytest.raises(ValueError, match="undefined"):
        bwt(matrix)


def test_duplicated_domain_sequence_shows_no_forgetting():
    # same domain four times: BWT of the proposed strategy stays near zero
    means = default_component_means(3, 8, 2, 10.0, 5.0, seed=0)
    spec = DomainSpec(class_count=3, dim=8, components_per_class=2,
                      component_means=means, component_spread=0.6,
                      train_per_class=60, test_per_class=15)
    dataset = synthesize_domain(spec, seed=1)
    pair = make_split(dataset, 15, seed=2)
    seq = build_sequence([pair, pair, pair, pair], [0, 1, 2, 3], name="dup")
    bwts = []
    for seed in (1, 2, 3):
        result = run_sequence(seq, small_cfg(epochs=6, seed=seed))
        bwts.append(bwt(result.matrix))
    assert np.mean(bwts) >= -2.0


def test_dst_only_and_glr_only_follow_their_losses(small_sequence):
    # dst_only keeps no generator state; glr_only grows the KDE support
    result_dst = run_sequence(small_sequence, small_cfg(kind="dst_only", seed=4))
    assert all(state is None for state in result_dst.generator_states)
    result_glr = run_sequence(small_sequence, small_cfg(kind="glr_only", seed=4))
    assert result_glr.generator_states[-1].n_support_ == 40


def test_config_validation():
    with pytest.raises(ValueError, match="kind"):
        StrategyConfig(kind="ewc").validate()
    with pytest.raises(ValueError, match="alpha"):
        StrategyConfig(alpha=1.5).validate()
    with pytest.raises(ValueError, match="replay_fraction"):
        StrategyConfig(replay_fraction=-0.1).validate()
