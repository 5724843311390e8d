"""Acceptance criteria, one test per criterion.

Each test prints one ``PASS``/``FAIL`` line (also collected into the terminal
summary). Criteria 7 and 11 train the desk-scale reference spec and are marked
``slow``; run them with ``pytest -m slow tests/test_acceptance.py``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import central_differences, exhaustive_ranking, random_model, tiny_devices
from fedmem import rng as rngs
from fedmem.accountant import group_privacy, table4
from fedmem.experiment import ExperimentSpec, run_experiment
from fedmem.fedavg import (
    ClientConfig,
    DpConfig,
    ServerOptConfig,
    aggregate_and_noise,
    clip_to_norm,
    local_sgd,
    sample_round_clients,
    train,
)
from fedmem.lm import ModelParams, SequenceBatch, beam_search, loss_and_gradient
from fedmem.population import DEFAULT_GRID, Canary, CanaryConfig, expected_canary_encounters
from fedmem.secret_sharer import random_sampling_rank, read_report_csv
from fedmem.vocab import BOS

REFERENCE_SPEC = Path(__file__).resolve().parent.parent / "specs" / "reference.json"
# largest z in {0.1, 0.2, 0.4, 0.8} whose 300-round loss stays within 5% of z = 0;
# larger values diverge or collapse to predicting end of sentence at this m
DP_NOISE_MULTIPLIER = 0.1

RESULTS: list[str] = []


def criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(line)
    RESULTS.append(line)
    assert passed, line


def test_c01_noise_calibration():
    dp = DpConfig(population_size=2_000_000, round_size=20_000, noise_multiplier=0.8,
                  clip_norm=0.8, rounds=2000)
    criterion(1, "noise calibration", dp.sigma == 3.2e-5, f"sigma = {dp.sigma!r}")


def test_c02_table4():
    published = {2_000_000: 9.86, 3_000_000: 6.73, 4_000_000: 5.36, 5_000_000: 4.54,
             10_000_000: 3.27}
    start = time.perf_counter()
    rows = table4()
    seconds = time.perf_counter() - start
    errors = {r.population: abs(r.epsilon - published[r.population]) / published[r.population]
              for r in rows}
    passed = max(errors.values()) <= 0.10 and seconds < 10
    detail = ", ".join(f"{r.population // 10**6}M {r.epsilon:.3f}" for r in rows)
    criterion(2, "accounting table within 10%", passed,
              f"{detail}; worst {max(errors.values()):.2%}; {seconds:.2f} s")


def test_c03_group_privacy():
    g = group_privacy((1, 1e-8), 16)
    criterion(3, "group privacy", g.epsilon == 16 and 0.50 <= g.delta <= 0.55,
              f"({g.epsilon:g}, {g.delta:.4f})")


def test_c04_clipping():
    rng = np.random.default_rng(4)
    size = ModelParams.count(16, 8, 8)
    worst = 0.0
    for _ in range(10_000):
        v = rng.normal(size=size) * rng.lognormal(0.0, 2.0)
        s = rng.lognormal(0.0, 1.0)
        worst = max(worst, abs(np.linalg.norm(clip_to_norm(v, s)) - min(np.linalg.norm(v), s)))
    zero = clip_to_norm(np.zeros(size), 0.8)
    passed = worst <= 1e-12 and not zero.any()
    criterion(4, "clipping", passed, f"max |norm error| {worst:.2e} over 10^4 vectors; "
              f"zero maps to zero: {not zero.any()}")


def test_c05_gradients():
    start = time.perf_counter()
    good = total = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vocab, d, h = int(rng.integers(5, 17)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        params = random_model(vocab, d, h, seed=seed)
        sentences = [rng.integers(3, vocab, rng.integers(1, 6)).tolist() for _ in range(3)]
        batch = SequenceBatch.from_sentences(sentences)
        _, grad = loss_and_gradient(params, batch, reduction="sum")
        numeric = central_differences(
            lambda flat: loss_and_gradient(params.like(flat), batch, reduction="sum")[0],
            params.flat.copy(), step=1e-2, points=5)
        scale = np.maximum(np.maximum(np.abs(grad.flat), np.abs(numeric)), 1e-8)
        rel = np.abs(grad.flat - numeric) / scale
        good += int((rel <= 1e-4).sum())
        total += rel.size
    seconds = time.perf_counter() - start
    criterion(5, "gradient check", good / total >= 0.99 and seconds < 120,
              f"{good}/{total} coordinates ({good / total:.4%}) within 1e-4 relative, "
              f"20 models, {seconds:.1f} s")


def test_c06_beam_and_rank_oracle():
    start = time.perf_counter()
    beams_ok = ranks_ok = 0
    suffixes = np.array(np.meshgrid(*[np.arange(6)] * 3, indexing="ij")).reshape(3, -1).T
    for seed in range(10):
        params = random_model(6, 4, 4, seed=seed, scale=3.0)
        prefix = [BOS, 3 + seed % 3, 3 + (seed // 3) % 3]
        exhaustive = exhaustive_ranking(params, prefix, 3)
        beams = [s for s, _ in beam_search(params, prefix, 3, 5)]
        beams_ok += beams == [seq for _, seq in exhaustive[:5]]
        canary = Canary(seed, tuple(prefix[1:]) + exhaustive[7][1], CanaryConfig(1, 1))
        rank = random_sampling_rank(params, canary, references=suffixes).rank
        # brute force: the canary ties with its own copy in the enumeration
        target = exhaustive[7][0]
        ranks_ok += rank == 1 + sum(score <= target for score, _ in exhaustive)
    seconds = time.perf_counter() - start
    criterion(6, "beam/rank oracle", beams_ok == 10 and ranks_ok == 10 and seconds < 60,
              f"beam top-5 {beams_ok}/10, rank {ranks_ok}/10, {seconds:.1f} s")


def test_c08_sampling_uniformity():
    n, m, trials = 100, 10, 50_000
    rng = np.random.default_rng(8)
    counts = np.zeros(n)
    for _ in range(trials):
        counts[list(sample_round_clients(range(n), m, rng))] += 1
    p = m / n
    chi2 = float(((counts - trials * p) ** 2).sum() / (trials * p * (1 - p) * n / (n - 1)))
    pvalue = float(stats.chi2.sf(chi2, n - 1))
    criterion(8, "sampling uniformity", pvalue > 0.01,
              f"chi2 = {chi2:.1f} on {n - 1} dof, p = {pvalue:.3f}")


def test_c09_noise_distribution():
    dp = DpConfig(population_size=1000, round_size=50, noise_multiplier=1.3, clip_norm=0.7,
                  rounds=1)
    rng = np.random.default_rng(9)
    zeros = [np.zeros(20)] * dp.round_size
    draws = np.array([aggregate_and_noise(zeros, dp, rng)[0] for _ in range(100_000)])
    stds = draws.std(axis=0)
    worst = float(np.max(np.abs(stds / dp.sigma - 1)))
    criterion(9, "noise distribution", worst <= 0.02,
              f"sigma {dp.sigma:.5f}, worst per-coordinate std error {worst:.3%} "
              f"over 10^5 draws")


def test_c10_encounters():
    expected = {(1, 1): 1_150, (1, 14): 16_100, (1, 200): 230_000,
              (4, 1): 4_600, (4, 14): 64_400, (4, 200): 920_000,
              (16, 1): 18_400, (16, 14): 257_600, (16, 200): 3_680_000}
    got = {(c.n_u, c.n_e): expected_canary_encounters(c, 1150) for c in DEFAULT_GRID}
    criterion(10, "encounter arithmetic", got == expected,
              f"{sum(got[k] == v for k, v in expected.items())}/9 grid cells exact")


def test_c12_degenerate_equivalence():
    devices = tiny_devices(1, 12, 9, seed=12)
    init = random_model(12, 4, 4, seed=12)
    client = ClientConfig(local_epochs=1, batch_size=4, learning_rate=0.5)
    dp = DpConfig(population_size=1, round_size=1, noise_multiplier=0.0, clip_norm=math.inf,
                  rounds=50)
    federated, _ = train(devices, init, dp, client, ServerOptConfig(kind="plain"), seed=12)
    central = init
    for t in range(50):
        central, _ = local_sgd(central, devices[0].sentences, client,
                               rngs.stream(12, rngs.CLIENT, t, 0))
    a, b = federated.flat, central.flat
    ulps = np.abs(a - b) / np.spacing(np.maximum(np.abs(a), np.abs(b)))
    differing = int((a != b).sum())
    criterion(12, "degenerate equivalence (bit-for-bit)", differing == 0,
              f"{differing}/{a.size} coordinates differ after 50 rounds, "
              f"max {ulps.max():.0f} ulp, max |diff| {np.abs(a - b).max():.1e}")


# -- desk-scale reference runs ---------------------------------------------


@pytest.fixture(scope="module")
def reference_spec():
    return ExperimentSpec.load(REFERENCE_SPEC)


@pytest.fixture(scope="module")
def run_clear(reference_spec, tmp_path_factory):
    """Reference spec, noise disabled (z = 0)."""
    return run_experiment(reference_spec, tmp_path_factory.mktemp("reference_a"))


@pytest.fixture(scope="module")
def run_clear_again(reference_spec, tmp_path_factory):
    return run_experiment(reference_spec, tmp_path_factory.mktemp("reference_b"))


@pytest.fixture(scope="module")
def run_dp(reference_spec, tmp_path_factory):
    spec = reference_spec.with_overrides({"training.noise_multiplier": DP_NOISE_MULTIPLIER})
    return run_experiment(spec, tmp_path_factory.mktemp("reference_dp"))


def cells(bundle):
    rows = read_report_csv((bundle.path / "audit.csv").read_text(encoding="utf-8"))
    out = {}
    for r in rows:
        out.setdefault((int(r["n_u"]), int(r["n_e"])), []).append(
            (int(r["rank"]), bool(int(r["found"]))))
    return out, int(rows[0]["reference_size"])


@pytest.mark.slow
def test_c07_memorization_phases(run_clear, run_dp):
    clear, size = cells(run_clear)
    noisy, _ = cells(run_dp)
    heavy = max(clear, key=lambda k: k[0] * k[1])
    light = min(clear, key=lambda k: k[0] * k[1])
    print("cell      z=0 ranks (found)        z=%.1f ranks (found)" % DP_NOISE_MULTIPLIER)
    for key in sorted(clear, key=lambda k: k[0] * k[1]):
        fmt = lambda rs: " ".join(f"{r}{'*' if f else ''}" for r, f in rs)
        print(f"{key!s:<9} {fmt(clear[key]):<24} {fmt(noisy[key])}")

    a = all(r > size / 100 for r, _ in clear[light])
    b = any(r == 1 and found for r, found in clear[heavy])
    clear_min = min(r for r, _ in clear[heavy])
    noisy_min = min(r for r, _ in noisy[heavy])
    clear_found = sum(f for _, f in clear[heavy])
    noisy_found = sum(f for _, f in noisy[heavy])
    c = noisy_min >= 10 * clear_min or noisy_found < clear_found
    minima = [min(r for r, _ in clear[k]) for k in sorted(clear, key=lambda k: k[0] * k[1])]
    monotone = all(x >= y for x, y in zip(minima, minima[1:]))
    detail = (f"(a) {light} ranks {[r for r, _ in clear[light]]} > {size // 100}: {a}; "
              f"(b) {heavy} rank-1 and extracted: {b}; "
              f"(c) min rank {clear_min} -> {noisy_min}, extracted {clear_found} -> "
              f"{noisy_found}: {c}; monotone minima {minima}: {monotone}")
    criterion(7, "memorization phases", a and b and c and monotone, detail)


@pytest.mark.slow
def test_c11_determinism(run_clear, run_clear_again):
    names = ["metrics.csv", "audit.csv", "model.ckpt"]
    same = {n: (run_clear.path / n).read_bytes() == (run_clear_again.path / n).read_bytes()
            for n in names}
    criterion(11, "determinism", all(same.values()),
              ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in same.items()))
