import itertools
import math

import numpy as np
import pytest
from scipy import stats

from fedmem.errors import InputError
from fedmem.fedavg import sample_round_clients
from fedmem.population import (
    DEFAULT_GRID,
    SYNTHETIC,
    CanaryConfig,
    PaceSteeringConfig,
    Population,
    PopulationSpec,
    build_ordinary_devices,
    build_population,
    build_synthetic_devices,
    canary_manifest,
    expected_canary_encounters,
    generate_canaries,
    read_manifest,
    write_manifest,
)
from fedmem.vocab import Vocabulary


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    return [rng.integers(3, 50, rng.integers(3, 9)).tolist() for _ in range(600)]


class TestCanaries:
    def test_default_grid_count(self):
        canaries = generate_canaries(1000, DEFAULT_GRID, np.random.default_rng(0))
        assert len(canaries) == 27
        assert len({c.tokens for c in canaries}) == 27
        assert [c.id for c in canaries] == list(range(27))

    def test_single(self):
        (c,) = generate_canaries(Vocabulary.synthetic(100), [CanaryConfig(1, 1, replicas=1)],
                                 np.random.default_rng(1))
        assert len(c.tokens) == 5
        assert c.prefix + c.suffix == c.tokens
        assert len(c.prefix) == 2 and len(c.suffix) == 3
        assert all(3 <= t < 100 for t in c.tokens)

    def test_token_uniformity(self):
        cfg = CanaryConfig(1, 1, replicas=20_000)
        canaries = generate_canaries(100, [cfg], np.random.default_rng(2))
        tokens = np.array([c.tokens for c in canaries]).ravel()
        assert tokens.size == 100_000
        counts = np.bincount(tokens, minlength=100)[3:]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_avoids_corpus_ngrams(self):
        # a corpus holding all but four 5-grams over 5 ordinary tokens
        free = {(3, 3, 3, 3, 3), (4, 5, 6, 7, 3), (7, 7, 6, 5, 4), (5, 3, 7, 3, 5)}
        grams = [list(g) for g in itertools.product(range(3, 8), repeat=5) if g not in free]
        canaries = generate_canaries(8, [CanaryConfig(1, 1, replicas=4)],
                                     np.random.default_rng(3), corpus=grams)
        assert {c.tokens for c in canaries} == free
        with pytest.raises(InputError):
            generate_canaries(8, [CanaryConfig(1, 1, replicas=5)], np.random.default_rng(3),
                              corpus=grams)

    def test_degenerate_vocab(self):
        with pytest.raises(InputError):
            generate_canaries(7, DEFAULT_GRID, np.random.default_rng(0))

    @pytest.mark.parametrize("kwargs", [dict(n_u=0, n_e=1), dict(n_u=1, n_e=0),
                                        dict(n_u=1, n_e=201), dict(n_u=1, n_e=1, replicas=0)])
    def test_config_bounds(self, kwargs):
        with pytest.raises(InputError):
            CanaryConfig(**kwargs)


class TestDevices:
    def test_default_grid_devices(self, corpus):
        canaries = generate_canaries(50, DEFAULT_GRID, np.random.default_rng(0))
        devices = build_synthetic_devices(canaries, corpus, np.random.default_rng(1))
        assert len(devices) == 189
        for d in devices:
            c = canaries[d.canary_id]
            assert d.kind == SYNTHETIC
            assert len(d.sentences) == 200
            assert sum(tuple(s) == c.tokens for s in d.sentences) == c.config.n_e

    def test_cell_4_14(self, corpus):
        canaries = generate_canaries(50, [CanaryConfig(4, 14, replicas=1)],
                                     np.random.default_rng(0))
        devices = build_synthetic_devices(canaries, corpus, np.random.default_rng(1))
        assert len(devices) == 4
        for d in devices:
            copies = [s for s in d.sentences if tuple(s) == canaries[0].tokens]
            assert len(copies) == 14
            assert len(d.sentences) - len(copies) == 186

    def test_all_canary_device(self, corpus):
        canaries = generate_canaries(50, [CanaryConfig(1, 200, replicas=1)],
                                     np.random.default_rng(0))
        (d,) = build_synthetic_devices(canaries, corpus, np.random.default_rng(1))
        assert all(tuple(s) == canaries[0].tokens for s in d.sentences)

    def test_corpus_too_small(self, corpus):
        canaries = generate_canaries(50, [CanaryConfig(1, 1, replicas=1)],
                                     np.random.default_rng(0))
        with pytest.raises(InputError):
            build_synthetic_devices(canaries, corpus[:199], np.random.default_rng(1))

    def test_ordinary_devices(self, corpus):
        devices = build_ordinary_devices(corpus, 5, 30, np.random.default_rng(0), first_id=10)
        assert [d.id for d in devices] == list(range(10, 15))
        assert all(len(d.sentences) == 30 and d.canary_id is None for d in devices)

    def test_build_population_ids(self, corpus):
        spec = PopulationSpec(ordinary_devices=20, ordinary_dataset_size=10,
                              canary_grid=[{"n_u": 2, "n_e": 3, "replicas": 2}])
        pop = build_population(spec, corpus, 50, np.random.default_rng(0),
                               np.random.default_rng(1))
        assert [d.id for d in pop.devices] == list(range(24))
        assert all(d.kind == SYNTHETIC for d in pop.devices[20:])
        canary_set = {c.tokens for c in pop.canaries}
        for d in pop.devices[:20]:
            assert not canary_set & {tuple(s) for s in d.sentences}

    def test_duplicate_ids_rejected(self, corpus):
        devices = build_ordinary_devices(corpus, 2, 5, np.random.default_rng(0))
        with pytest.raises(InputError):
            Population(devices + devices)


class TestEncounters:
    TABLE3 = {(1, 1): 1_150, (1, 14): 16_100, (1, 200): 230_000,
              (4, 1): 4_600, (4, 14): 64_400, (4, 200): 920_000,
              (16, 1): 18_400, (16, 14): 257_600, (16, 200): 3_680_000}

    def test_table3(self):
        for cfg in DEFAULT_GRID:
            assert expected_canary_encounters(cfg, 1150) == self.TABLE3[(cfg.n_u, cfg.n_e)]

    def test_zero(self):
        assert expected_canary_encounters(CanaryConfig(16, 200), 0) == 0

    def test_negative(self):
        with pytest.raises(ValueError):
            expected_canary_encounters(CanaryConfig(1, 1), -1)

    def test_realized_within_three_sd(self, corpus):
        spec = PopulationSpec(ordinary_devices=400, ordinary_dataset_size=5,
                              canary_grid=[{"n_u": nu, "n_e": ne, "replicas": 2}
                                           for nu in (1, 4) for ne in (1, 14)],
                              pace={"cooldown_rounds": 5, "availability": 0.5})
        pop = build_population(spec, corpus, 50, np.random.default_rng(0),
                               np.random.default_rng(1))
        rng = np.random.default_rng(2)
        rounds, m = 400, 20
        for t in range(rounds):
            chosen = sample_round_clients(pop.eligibility_step(t, rng), m, rng)
            pop.mark_participated(chosen, t)
        p_bar = pop.mean_synthetic_participations()
        p = p_bar / rounds
        realized = pop.realized_encounters()
        for c in pop.canaries:
            expected = expected_canary_encounters(c.config, p_bar)
            sd = c.config.n_e * math.sqrt(c.config.n_u * rounds * p * (1 - p))
            assert abs(realized[c.id] - expected) <= 3 * sd


class TestEligibility:
    @pytest.fixture
    def population(self, corpus):
        spec = PopulationSpec(ordinary_devices=30, ordinary_dataset_size=5,
                              canary_grid=[{"n_u": 1, "n_e": 1, "replicas": 3}])
        return lambda pace: build_population(
            PopulationSpec(**{**spec.__dict__, "pace": pace}), corpus, 50,
            np.random.default_rng(0), np.random.default_rng(1))

    def test_everyone(self, population):
        pop = population({"cooldown_rounds": 0, "availability": 1.0})
        assert pop.eligibility_step(0, np.random.default_rng(0)) == list(range(33))

    def test_only_synthetic(self, population):
        pop = population({"cooldown_rounds": 0, "availability": 0.0})
        assert pop.eligibility_step(0, np.random.default_rng(0)) == [30, 31, 32]

    def test_cooldown(self, population):
        pop = population({"cooldown_rounds": 2, "availability": 1.0})
        pop.mark_participated([0, 31], 5)
        rng = np.random.default_rng(0)
        for t in (6, 7):
            pool = pop.eligibility_step(t, rng)
            assert 0 not in pool and 31 in pool
        assert 0 in pop.eligibility_step(8, rng)

    def test_synthetic_not_exempt(self, population):
        pop = population({"cooldown_rounds": 3, "availability": 1.0, "synthetic_exempt": False})
        pop.mark_participated([31], 0)
        assert 31 not in pop.eligibility_step(1, np.random.default_rng(0))

    def test_invalid_pace(self):
        with pytest.raises(InputError):
            PaceSteeringConfig(cooldown_rounds=-1)
        with pytest.raises(InputError):
            PaceSteeringConfig(availability=1.5)

    def test_participation_asymmetry(self, corpus):
        spec = PopulationSpec(ordinary_devices=2000, ordinary_dataset_size=1,
                              canary_grid=[{"n_u": 1, "n_e": 1, "replicas": 20}],
                              pace={"cooldown_rounds": 20, "availability": 0.1})
        pop = build_population(spec, corpus, 50, np.random.default_rng(0),
                               np.random.default_rng(1))
        rng = np.random.default_rng(3)
        rounds = 500
        for t in range(rounds):
            pop.mark_participated(sample_round_clients(pop.eligibility_step(t, rng), 20, rng), t)
        syn, ordinary = pop.participation_rates(rounds)
        assert 10 <= syn / ordinary <= 100
        pop.reset_schedule()
        assert not any(pop.participation_counts().values())


class TestManifest:
    def test_roundtrip(self, corpus, tmp_path):
        spec = PopulationSpec(ordinary_devices=3, ordinary_dataset_size=5,
                              canary_grid=[{"n_u": 2, "n_e": 3, "replicas": 2}])
        pop = build_population(spec, corpus, 50, np.random.default_rng(0),
                               np.random.default_rng(1))
        rows = canary_manifest(pop, Vocabulary.synthetic(50))
        assert rows[0]["devices"] == [3, 4] and rows[1]["devices"] == [5, 6]
        assert rows[0]["words"] == [f"w{t}" for t in rows[0]["tokens"]]
        write_manifest(rows, tmp_path / "canaries.json")
        back = read_manifest(tmp_path / "canaries.json")
        assert [c.tokens for c in back] == [c.tokens for c in pop.canaries]
        assert [(c.config.n_u, c.config.n_e) for c in back] == [(2, 3), (2, 3)]

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"canaries": [{"id": 0}]}')
        with pytest.raises(InputError):
            read_manifest(tmp_path / "bad.json")
