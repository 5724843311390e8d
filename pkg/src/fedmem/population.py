"""Simulated device population: ordinary devices, canary carriers, pace steering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedmem.errors import InputError
from fedmem.vocab import NUM_SPECIAL, Vocabulary

CANARY_LENGTH = 5
PREFIX_LENGTH = 2
SYNTHETIC_DATASET_SIZE = 200

ORDINARY = "ordinary"
SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class CanaryConfig:
    n_u: int  # devices sharing the canary
    n_e: int  # canary copies per device
    replicas: int = 3

    def __post_init__(self):
        if self.n_u < 1:
            raise InputError("n_u must be >= 1")
        if not 1 <= self.n_e <= SYNTHETIC_DATASET_SIZE:
            raise InputError(f"n_e must be in [1, {SYNTHETIC_DATASET_SIZE}]")
        if self.replicas < 1:
            raise InputError("replicas must be >= 1")


DEFAULT_GRID = tuple(CanaryConfig(nu, ne) for nu in (1, 4, 16) for ne in (1, 14, 200))


@dataclass(frozen=True)
class Canary:
    id: int
    tokens: tuple[int, ...]
    config: CanaryConfig

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.tokens[:PREFIX_LENGTH]

    @property
    def suffix(self) -> tuple[int, ...]:
        return self.tokens[PREFIX_LENGTH:]


@dataclass
class Device:
    id: int
    sentences: list
    kind: str = ORDINARY
    canary_id: int | None = None
    last_round: int = -1
    participations: int = 0


@dataclass(frozen=True)
class PaceSteeringConfig:
    """Ordinary devices are available with probability ``availability`` each
    round and sit out ``cooldown_rounds`` rounds after participating."""

    cooldown_rounds: int = 0
    availability: float = 1.0
    synthetic_exempt: bool = True

    def __post_init__(self):
        if self.cooldown_rounds < 0:
            raise InputError("cooldown must be >= 0")
        if not 0 <= self.availability <= 1:
            raise InputError("availability must be in [0, 1]")


def _ngrams(sentences: Iterable[Sequence[int]], n: int) -> set[tuple[int, ...]]:
    out = set()
    for s in sentences:
        for i in range(len(s) - n + 1):
            out.add(tuple(s[i:i + n]))
    return out


def generate_canaries(vocab: Vocabulary | int, grid: Sequence[CanaryConfig],
                      rng: np.random.Generator,
                      corpus: Sequence[Sequence[int]] = ()) -> list[Canary]:
    """``replicas`` canaries per grid cell, words i.i.d. uniform over ordinary tokens.

    Canaries are pairwise distinct and never occur as a 5-gram of ``corpus``;
    offending draws are resampled.
    """
    size = vocab if isinstance(vocab, int) else vocab.size
    ordinary = np.arange(NUM_SPECIAL, size)
    if ordinary.size < CANARY_LENGTH:
        raise InputError("vocabulary has fewer than 5 ordinary tokens")
    taken = _ngrams(corpus, CANARY_LENGTH)
    space = ordinary.size ** CANARY_LENGTH
    blocked = sum(1 for g in taken if min(g) >= NUM_SPECIAL and max(g) < size)
    needed = sum(c.replicas for c in grid)
    if needed > space - blocked:
        raise InputError(f"only {space - blocked} distinct canaries available, grid needs {needed}")
    canaries = []
    for cfg in grid:
        for _ in range(cfg.replicas):
            while True:
                tokens = tuple(int(t) for t in rng.choice(ordinary, CANARY_LENGTH))
                if tokens not in taken:
                    break
            taken.add(tokens)
            canaries.append(Canary(len(canaries), tokens, cfg))
    return canaries


def build_synthetic_devices(canaries: Sequence[Canary], corpus: Sequence[Sequence[int]],
                            rng: np.random.Generator, first_id: int = 0,
                            dataset_size: int = SYNTHETIC_DATASET_SIZE) -> list[Device]:
    """``n_u`` devices per canary, each with ``n_e`` copies plus corpus filler."""
    if len(corpus) < dataset_size:
        raise InputError(f"corpus has {len(corpus)} sentences, need {dataset_size}")
    devices = []
    for c in canaries:
        if c.config.n_e > dataset_size:
            raise InputError(f"canary {c.id}: n_e={c.config.n_e} exceeds dataset size")
        for _ in range(c.config.n_u):
            filler = rng.choice(len(corpus), dataset_size - c.config.n_e, replace=False)
            sentences = [list(c.tokens) for _ in range(c.config.n_e)]
            sentences += [corpus[i] for i in filler]
            order = rng.permutation(len(sentences))
            devices.append(Device(first_id + len(devices), [sentences[i] for i in order],
                                  SYNTHETIC, canary_id=c.id))
    return devices


def build_ordinary_devices(corpus: Sequence[Sequence[int]], count: int, dataset_size: int,
                           rng: np.random.Generator, first_id: int = 0) -> list[Device]:
    """Each device holds ``dataset_size`` distinct corpus sentences."""
    if len(corpus) < dataset_size:
        raise InputError(f"corpus has {len(corpus)} sentences, need {dataset_size}")
    return [Device(first_id + i,
                   [corpus[j] for j in rng.choice(len(corpus), dataset_size, replace=False)])
            for i in range(count)]


def expected_canary_encounters(cfg: CanaryConfig, mean_participations: float) -> float:
    """Times the model sees one canary: participations x devices x copies."""
    if mean_participations < 0:
        raise ValueError("mean participations must be >= 0")
    return mean_participations * cfg.n_u * cfg.n_e


class Population:
    """Devices plus the pace-steering state that decides round eligibility."""

    def __init__(self, devices: Sequence[Device], pace: PaceSteeringConfig = PaceSteeringConfig(),
                 canaries: Sequence[Canary] = ()):
        self.devices = list(devices)
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise InputError("device ids must be unique")
        self.pace = pace
        self.canaries = list(canaries)
        self._ids = np.array(ids, dtype=np.int64)
        self._pos = {d: i for i, d in enumerate(ids)}
        self._synthetic = np.array([d.kind == SYNTHETIC for d in self.devices], dtype=bool)
        self._last = np.full(len(ids), -1, dtype=np.int64)
        self._count = np.zeros(len(ids), dtype=np.int64)

    def __len__(self):
        return len(self.devices)

    def eligibility_step(self, t: int, rng: np.random.Generator) -> list[int]:
        """Ids eligible in round ``t``, ascending."""
        n = len(self.devices)
        available = rng.random(n) < self.pace.availability
        rested = (self._last < 0) | (t - self._last > self.pace.cooldown_rounds)
        eligible = available & rested
        if self.pace.synthetic_exempt:
            eligible |= self._synthetic
        return sorted(self._ids[eligible].tolist())

    def mark_participated(self, ids: Iterable[int], t: int) -> None:
        for cid in ids:
            i = self._pos[cid]
            self._last[i] = t
            self._count[i] += 1

    def participation_counts(self) -> dict[int, int]:
        return dict(zip(self._ids.tolist(), self._count.tolist()))

    def participation_rates(self, rounds: int) -> tuple[float, float]:
        """Mean participations per round for (synthetic, ordinary) devices."""
        rate = self._count / max(rounds, 1)
        syn = float(rate[self._synthetic].mean()) if self._synthetic.any() else 0.0
        ordn = float(rate[~self._synthetic].mean()) if (~self._synthetic).any() else 0.0
        return syn, ordn

    def mean_synthetic_participations(self) -> float:
        return float(self._count[self._synthetic].mean()) if self._synthetic.any() else 0.0

    def realized_encounters(self) -> dict[int, int]:
        """Per canary: sum over its devices of participations x copies."""
        out = {c.id: 0 for c in self.canaries}
        by_id = {c.id: c for c in self.canaries}
        for d, n in zip(self.devices, self._count):
            if d.canary_id is not None:
                out[d.canary_id] += int(n) * by_id[d.canary_id].config.n_e
        return out

    def reset_schedule(self) -> None:
        self._last[:] = -1
        self._count[:] = 0


def canary_manifest(population: Population, vocab: Vocabulary | None = None) -> list[dict]:
    """One record per canary: id, tokens, optional words, n_u, n_e, device ids."""
    devices_of: dict[int, list[int]] = {c.id: [] for c in population.canaries}
    for d in population.devices:
        if d.canary_id is not None:
            devices_of[d.canary_id].append(d.id)
    rows = []
    for c in population.canaries:
        row = {"id": c.id, "tokens": list(c.tokens), "n_u": c.config.n_u,
               "n_e": c.config.n_e, "devices": devices_of[c.id]}
        if vocab is not None:
            row["words"] = vocab.decode(c.tokens)
        rows.append(row)
    return rows


def write_manifest(rows: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"canaries": rows}, indent=1) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[Canary]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return [Canary(int(r["id"]), tuple(int(t) for t in r["tokens"]),
                       CanaryConfig(int(r["n_u"]), int(r["n_e"]), replicas=1))
                for r in data["canaries"]]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad canary manifest {path}: {exc}") from exc


@dataclass
class PopulationSpec:
    """Serializable recipe for ``build_population``."""

    ordinary_devices: int = 10_000
    ordinary_dataset_size: int = SYNTHETIC_DATASET_SIZE
    synthetic_dataset_size: int = SYNTHETIC_DATASET_SIZE
    canary_grid: list = field(default_factory=lambda: [asdict(c) for c in DEFAULT_GRID])
    pace: dict = field(default_factory=lambda: asdict(PaceSteeringConfig()))

    def grid(self) -> list[CanaryConfig]:
        return [CanaryConfig(**c) for c in self.canary_grid]

    def pace_config(self) -> PaceSteeringConfig:
        return PaceSteeringConfig(**self.pace)


def build_population(spec: PopulationSpec, corpus: Sequence[Sequence[int]], vocab_size: int,
                     canary_rng: np.random.Generator,
                     device_rng: np.random.Generator) -> Population:
    """Canaries get ids first; synthetic devices take device ids after ordinary ones."""
    canaries = generate_canaries(vocab_size, spec.grid(), canary_rng, corpus)
    ordinary = build_ordinary_devices(corpus, spec.ordinary_devices,
                                      spec.ordinary_dataset_size, device_rng)
    synthetic = build_synthetic_devices(canaries, corpus, device_rng, first_id=len(ordinary),
                                        dataset_size=spec.synthetic_dataset_size)
    return Population(ordinary + synthetic, spec.pace_config(), canaries)
