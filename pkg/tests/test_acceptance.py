"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4, 5, and 9 share two full runs of the standard benchmark config
(the second run exists for the byte-identical determinism check), so this
module takes several minutes. Run it with ``pytest tests/test_acceptance.py -v -s``.
"""

import itertools
import json
import time

import numpy as np
import pytest

from kdereplay.cluster import KMeans
from kdereplay.datasets import STANDARD_SEQUENCE_ORDERS, build_sequence, synthetic_benchmark
from kdereplay.density import GaussianMixture, GmmBank, KdeGenerator, silverman_bandwidth
from kdereplay.experiment import run_experiment, standard_benchmark_config
from kdereplay.metrics import (
    acc,
    bwt,
    cosine_avg,
    fid,
    fidelity_report,
    ilm,
    loglik_comparison,
    mmd,
)
from kdereplay.mlp import MlpClassifier

JOBS = 2
SEEDS = (1, 2, 3, 4, 5)


def _report(criterion: int, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    """Two complete runs of the standard config: A feeds criteria 4 and 5,
    A vs B is the determinism check of criterion 9."""
    tmp = tmp_path_factory.mktemp("acceptance")
    config_path = tmp / "standard_benchmark.json"
    config_path.write_text(json.dumps(standard_benchmark_config(), indent=2) + "\n",
                           encoding="utf-8")
    out_a, out_b = tmp / "run_a", tmp / "run_b"
    report = run_experiment(config_path, out_dir=out_a, jobs=JOBS)
    run_experiment(config_path, out_dir=out_b, jobs=JOBS)
    return out_a, out_b, report


@pytest.fixture(scope="module")
def benchmark_pairs():
    return synthetic_benchmark(seed=0)


def _strategy_means(report: dict) -> dict:
    return {entry["strategy"]: entry for entry in report["aggregates"]["per_strategy"]}


# ---------------------------------------------------------------------------
# Criterion 1: metric oracles
# ---------------------------------------------------------------------------

def _oracle_acc(P):
    T = len(P)
    return sum(P[T - 1][j] for j in range(T)) / T


def _oracle_bwt(P):
    T = len(P)
    if T < 2:
        return None
    outer = 0.0
    for j in range(T - 1):
        inner = sum(P[i][j] - P[j][j] for i in range(j + 1, T))
        outer += inner / (T - 1 - j)
    return outer / (T - 1)


def _oracle_ilm(P):
    T = len(P)
    total = sum(P[i][j] for i in range(T) for j in range(i + 1))
    return 2.0 * total / (T * (T + 1))


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    example = np.array([[100.0, 0.0], [90.0, 80.0]])
    assert acc(example) == 85.0
    assert bwt(example) == -10.0
    assert ilm(example) == 90.0

    from kdereplay.metrics import TrainTestMatrix

    levels = [0.0, 25.0, 50.0, 75.0, 100.0]
    checked = 0
    for entries in itertools.product(levels, repeat=3):
        P = [[entries[0], 0.0], [entries[1], entries[2]]]
        matrix = TrainTestMatrix(np.asarray(P))
        assert acc(matrix) == _oracle_acc(P)
        assert bwt(matrix) == _oracle_bwt(P)
        assert ilm(matrix) == _oracle_ilm(P)
        checked += 1
    for entries in itertools.product(levels, repeat=6):
        P = [[entries[0], 0.0, 0.0],
             [entries[1], entries[2], 0.0],
             [entries[3], entries[4], entries[5]]]
        matrix = TrainTestMatrix(np.asarray(P))
        assert acc(matrix) == _oracle_acc(P)
        assert bwt(matrix) == _oracle_bwt(P)
        assert ilm(matrix) == _oracle_ilm(P)
        checked += 1
    elapsed = time.perf_counter() - start
    _report(1, True, f"{checked} matrices agree exactly with the brute-force oracle "
                     f"({elapsed:.2f}s)")
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# Criterion 2: gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    step = 1e-4
    for instance in range(20):
        rng = np.random.default_rng(1000 + instance)
        model = MlpClassifier(hidden_layer_sizes=(10, 7),
                              random_state=instance).initialize(8, 3)
        X = rng.normal(size=(4, 8))
        y = rng.integers(0, 3, size=4)
        teacher_logits = rng.normal(size=(4, 3))
        for alpha in (0.0, 0.5, 1.0):
            _, grads = model.loss_and_grad(X, y, teacher_logits, alpha)
            for layer, (dW, db) in enumerate(grads):
                for arr, grad in ((model.weights_[layer], dW),
                                  (model.biases_[layer], db)):
                    it = np.nditer(arr, flags=["multi_index"])
                    for _ in it:
                        idx = it.multi_index
                        original = arr[idx]
                        arr[idx] = original + step
                        up = model.loss_and_grad(X, y, teacher_logits, alpha)[0].total
                        arr[idx] = original - step
                        down = model.loss_and_grad(X, y, teacher_logits, alpha)[0].total
                        arr[idx] = original
                        numeric = (up - down) / (2.0 * step)
                        denom = max(abs(numeric), abs(grad[idx]), 1e-8)
                        worst = max(worst, abs(numeric - grad[idx]) / denom)
    elapsed = time.perf_counter() - start
    passed = worst < 1e-5
    _report(2, passed, f"max relative gradient error {worst:.2e} over 20 instances "
                       f"x alpha in {{0, 0.5, 1}} ({elapsed:.1f}s)")
    assert passed
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# Criterion 3: density-core identities
# ---------------------------------------------------------------------------

def test_criterion_3_density_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(7)

    # KDE <-> GMM equivalence under the matched construction
    support = rng.normal(size=(9, 4))
    kde = KdeGenerator().fit(support)
    matched = GaussianMixture.from_parameters(
        weights=np.full(9, 1.0 / 9.0), means=support,
        covariances=np.full((9, 4), kde.bandwidth_**2))
    points = rng.normal(size=(60, 4))
    equivalence = float(np.max(np.abs(matched.score_samples(points)
                                      - kde.score_samples(points))))

    # Silverman scale equivariance (exact for power-of-two scaling)
    X = rng.normal(size=(50, 3))
    exact_scaling = silverman_bandwidth(2.0 * X) == 2.0 * silverman_bandwidth(X)
    general_scaling = abs(silverman_bandwidth(3.7 * X)
                          - 3.7 * silverman_bandwidth(X)) < 1e-12

    # FID and MMD self-distances
    A = rng.normal(size=(80, 5))
    fid_self = fid(A, A)
    mmd_self = mmd(A, A)

    # 1-D closed-form FID: populations with exact (0, 1) and (1, 1)
    x = rng.normal(size=(300, 1))
    x = (x - x.mean()) / x.std(ddof=1)
    fid_closed = fid(x, x + 1.0)

    elapsed = time.perf_counter() - start
    passed = (equivalence < 1e-10 and exact_scaling and general_scaling
              and fid_self <= 1e-8 and mmd_self == 0.0
              and abs(fid_closed - 1.0) <= 1e-9)
    _report(3, passed,
            f"kde-gmm {equivalence:.1e}, fid(A,A) {fid_self:.1e}, mmd(A,A) {mmd_self}, "
            f"1-D fid {fid_closed:.12f} ({elapsed:.1f}s)")
    assert passed
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# Criterion 4: catastrophic-forgetting reproduction
# ---------------------------------------------------------------------------

def test_criterion_4_forgetting_reproduction(benchmark_runs):
    _, _, report = benchmark_runs
    means = _strategy_means(report)
    acc_gap = means["proposed"]["acc_mean"] - means["naive"]["acc_mean"]
    bwt_gap = means["proposed"]["bwt_mean"] - means["naive"]["bwt_mean"]
    passed = acc_gap >= 10.0 and bwt_gap >= 10.0
    _report(4, passed,
            f"ACC {means['proposed']['acc_mean']:.2f} vs {means['naive']['acc_mean']:.2f} "
            f"(gap {acc_gap:+.1f}), BWT {means['proposed']['bwt_mean']:.2f} vs "
            f"{means['naive']['bwt_mean']:.2f} (gap {bwt_gap:+.1f})")
    assert passed

    # forgetting-curve direction: first dataset accuracy at the final session
    finals = {}
    for row in report["curves"]:
        if row["session"] == 4:
            finals.setdefault(row["strategy"], []).append(row["mean"])
    assert np.mean(finals["naive"]) < np.mean(finals["proposed"])


# ---------------------------------------------------------------------------
# Criterion 5: ablation ordering
# ---------------------------------------------------------------------------

def test_criterion_5_ablation_ordering(benchmark_runs):
    _, _, report = benchmark_runs
    means = {name: entry["acc_mean"] for name, entry in _strategy_means(report).items()}
    chain = ["proposed", "glr_only", "dst_only", "naive"]
    slacks = [means[a] - means[b] for a, b in zip(chain, chain[1:])]
    passed = all(slack >= -1.0 for slack in slacks)
    _report(5, passed,
            " >= ".join(f"{name} {means[name]:.2f}" for name in chain)
            + f" (slacks {[round(s, 2) for s in slacks]})")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 6: KDE-vs-GMM log-likelihood direction
# ---------------------------------------------------------------------------

def test_criterion_6_loglik_direction(benchmark_pairs):
    start = time.perf_counter()
    sequence = build_sequence(benchmark_pairs, STANDARD_SEQUENCE_ORDERS["seq1"],
                              name="seq1")
    wins = 0
    worst = np.inf
    for seed in SEEDS:
        rows = loglik_comparison(sequence, seed=seed)
        margins = [r.kde_loglik - r.gmm_loglik for r in rows]
        worst = min(worst, min(margins))
        wins += all(m > 0 for m in margins)
    elapsed = time.perf_counter() - start
    passed = wins >= 4
    _report(6, passed, f"KDE > GMM at every prefix in {wins}/5 seeds "
                       f"(worst margin {worst:+.3f} nats, {elapsed:.0f}s)")
    assert passed
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# Criterion 7: generator-fidelity direction
# ---------------------------------------------------------------------------

def _fidelity_means_for(sequence, seed, impoverished: bool):
    """Per-session fidelity means for the KDE generator or the deliberately
    impoverished 1-component-per-domain GMM generator."""
    root = np.random.SeedSequence(seed)
    kde = KdeGenerator()
    bank = GmmBank()
    states = []
    for (train, _), ss in zip(sequence.episodes, root.spawn(sequence.n_episodes)):
        rng = np.random.default_rng(ss)
        centers = KMeans(n_clusters=10, n_init=8,
                         random_state=int(rng.integers(2**63))).fit(train.features).cluster_centers_
        kde.partial_fit(centers)
        bank.append(GaussianMixture(n_components=1,
                                    random_state=int(rng.integers(2**63))).fit(train.features))
        states.append(bank.copy() if impoverished else kde.copy())
    return fidelity_report(states, sequence.train_sets(), seed=seed).means()


def test_criterion_7_fidelity_direction(benchmark_pairs):
    start = time.perf_counter()
    sequences = [build_sequence(benchmark_pairs, order, name=name)
                 for name, order in STANDARD_SEQUENCE_ORDERS.items()]
    wins = 0
    lines = []
    for seed in SEEDS:
        kde_means = {m: [] for m in ("cosine", "fid", "mmd")}
        gmm_means = {m: [] for m in ("cosine", "fid", "mmd")}
        for i, sequence in enumerate(sequences):
            for target, impoverished in ((kde_means, False), (gmm_means, True)):
                means = _fidelity_means_for(sequence, seed * 101 + i, impoverished)
                for metric in target:
                    target[metric].append(means[metric])
        kde_agg = {m: float(np.mean(v)) for m, v in kde_means.items()}
        gmm_agg = {m: float(np.mean(v)) for m, v in gmm_means.items()}
        ok = (kde_agg["fid"] < gmm_agg["fid"] and kde_agg["mmd"] < gmm_agg["mmd"]
              and kde_agg["cosine"] > gmm_agg["cosine"])
        wins += ok
        lines.append(
            f"seed {seed}: fid {kde_agg['fid']:.1f}/{gmm_agg['fid']:.1f} "
            f"mmd {kde_agg['mmd']:.4f}/{gmm_agg['mmd']:.4f} "
            f"cos {kde_agg['cosine']:.2f}/{gmm_agg['cosine']:.2f} "
            f"{'ok' if ok else 'FAIL'}")
    elapsed = time.perf_counter() - start
    passed = wins >= 4
    detail = f"KDE beats 1-component GMM on fid+mmd+cosine in {wins}/5 seeds ({elapsed:.0f}s)"
    _report(7, passed, detail + "\n    " + "\n    ".join(lines))
    # Known honest failure: the cosine clause cannot hold for this data family.
    # All-pairs mean cosine factorizes into the two sets' mean unit vectors, so
    # a moment-matched single Gaussian scores at least as high as real held-out
    # data itself (measured: cos(real, blob) > cos(real, real)). FID and MMD
    # directions hold 5/5.
    assert passed
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# Criterion 8: protocol fidelity
# ---------------------------------------------------------------------------

def test_criterion_8_protocol_fidelity():
    start = time.perf_counter()
    from kdereplay.continual import (
        ReservoirBuffer,
        StrategyConfig,
        assemble_hybrid_batch,
        run_sequence,
    )

    pairs = synthetic_benchmark(n_domains=4, dim=12, structure_dims=4,
                                class_separation=12.0, component_separation=12.0,
                                common_offset=4.0, train_per_class=40,
                                test_per_class=10, seed=0)
    sequence = build_sequence(pairs, [0, 1, 2, 3], name="seq1")

    cfg = StrategyConfig(kind="proposed", alpha=0.2, epochs=2,
                         hidden_layer_sizes=(24, 12), centers_per_domain=10, seed=1)
    result = run_sequence(sequence, cfg)
    support_after_four = result.generator_states[-1].n_support_

    gen = KdeGenerator().fit(np.random.default_rng(0).normal(size=(10, 12)))
    teacher = MlpClassifier(hidden_layer_sizes=(24, 12), random_state=0).initialize(12, 3)
    batch = assemble_hybrid_batch(pairs[0][0].features[:32], pairs[0][0].labels[:32],
                                  gen, teacher, batch_size=64, replay_fraction=0.5,
                                  random_state=0)

    buffer_cfg = StrategyConfig(kind="latent_buffer", buffer_capacity=40, epochs=2,
                                hidden_layer_sizes=(24, 12), seed=1)
    buffer_result = run_sequence(sequence, buffer_cfg)
    buffer_sizes = [len(state) for state in buffer_result.generator_states]

    elapsed = time.perf_counter() - start
    passed = (support_after_four == 40 and batch.n_generated == 32
              and batch.features.shape[0] == 64 and all(s <= 40 for s in buffer_sizes))
    _report(8, passed,
            f"support after 4 episodes = {support_after_four}, hybrid batch = "
            f"{batch.features.shape[0] - batch.n_generated}+{batch.n_generated}, "
            f"buffer sizes {buffer_sizes} ({elapsed:.1f}s)")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 9: determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism(benchmark_runs):
    out_a, out_b, _ = benchmark_runs
    a = (out_a / "metrics.csv").read_bytes()
    b = (out_b / "metrics.csv").read_bytes()
    passed = a == b
    _report(9, passed, f"two full benchmark runs produced byte-identical metrics.csv "
                       f"({len(a)} bytes)")
    assert passed
