"""DP-FedAvg with fixed-size rounds.

One round: draw exactly ``m`` clients uniformly without replacement from the
eligible pool, run local SGD on each, clip every model delta to L2 norm
``S``, average with divisor ``m``, add N(0, sigma^2 I) with
``sigma = z * S / m``, and hand the noisy average to the server optimizer.
"""

from __future__ import annotations

import csv
import decimal
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedmem import rng as rngs
from fedmem.errors import ConfigError
from fedmem.lm import ModelParams, SequenceBatch, loss_and_gradient

log = logging.getLogger(__name__)

SERVER_OPTIMIZERS = ("plain", "sgd", "momentum", "nesterov", "adam")
METRICS_COLUMNS = ("round", "loss", "fraction_clipped", "update_norm", "sigma")


@dataclass(frozen=True)
class DpConfig:
    """Privacy-relevant training knobs.

    ``round_size`` is ``m = qN``. ``clip_norm=math.inf`` disables clipping
    (only meaningful with ``noise_multiplier=0``).
    """

    population_size: int
    round_size: int
    noise_multiplier: float
    clip_norm: float
    rounds: int

    def __post_init__(self):
        if not 1 <= self.round_size <= self.population_size:
            raise ConfigError(
                f"round size {self.round_size} must be in [1, {self.population_size}]")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip norm must be > 0")
        if not self.noise_multiplier >= 0:
            raise ConfigError("noise multiplier must be >= 0")
        if math.isinf(self.clip_norm) and self.noise_multiplier > 0:
            raise ConfigError("noise requires a finite clip norm")

    @property
    def participation_fraction(self) -> float:
        return self.round_size / self.population_size

    @property
    def sigma(self) -> float:
        """``z * S / m``, evaluated on the decimal config values and rounded once.

        Binary products such as ``0.8 * 0.8`` already carry rounding error, so
        plain float arithmetic can miss the correctly rounded value by an ulp.
        """
        if self.noise_multiplier == 0:
            return 0.0
        with decimal.localcontext() as ctx:
            ctx.prec = 60
            exact = (decimal.Decimal(repr(float(self.noise_multiplier)))
                     * decimal.Decimal(repr(float(self.clip_norm)))
                     / self.round_size)
        return float(exact)


@dataclass(frozen=True)
class ClientConfig:
    local_epochs: int = 1
    batch_size: int = 50
    learning_rate: float = 0.5
    shuffle: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local epochs and batch size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("client learning rate must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown loss reduction {self.reduction!r}")


@dataclass(frozen=True)
class ServerOptConfig:
    """Server optimizer applied to the noisy average delta.

    The delta is a step *direction* (it already points downhill), so every
    kind moves parameters along ``+delta``:

    - ``plain``:    theta += delta
    - ``sgd``:      theta += lr * delta
    - ``momentum``: v = mu * v + delta;  theta += lr * v
    - ``nesterov``: v = mu * v + delta;  theta += lr * (mu * v + delta)
    - ``adam``:     Adam on the pseudo-gradient ``-delta`` with bias correction
    """

    kind: str = "nesterov"
    learning_rate: float = 1.0
    momentum: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in SERVER_OPTIMIZERS:
            raise ConfigError(f"unknown server optimizer {self.kind!r}")


@dataclass
class ServerOptState:
    step: int = 0
    velocity: np.ndarray | None = None
    second_moment: np.ndarray | None = None


@dataclass
class RoundMetrics:
    round: int
    fraction_clipped: float
    update_norm: float
    loss: float
    sigma: float
    clients: tuple[int, ...] = field(default=(), repr=False)
    failed: tuple[int, ...] = ()

    def row(self) -> dict:
        return {"round": self.round, "loss": repr(self.loss),
                "fraction_clipped": repr(self.fraction_clipped),
                "update_norm": repr(self.update_norm), "sigma": repr(self.sigma)}


@dataclass
class ClientUpdate:
    client: int
    delta: np.ndarray
    norm: float
    loss: float


def sample_round_clients(pool: Sequence[int], m: int,
                         rng: np.random.Generator) -> tuple[int, ...]:
    """Exactly ``m`` distinct ids drawn uniformly without replacement, sorted."""
    pool = list(pool)
    if m > len(pool):
        raise ConfigError(f"eligible pool of {len(pool)} cannot fill a round of {m}")
    picks = rng.choice(len(pool), size=m, replace=False)
    return tuple(sorted(pool[i] for i in picks))


def clip_to_norm(v: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``v`` by ``min(1, S / ||v||)``; the zero vector maps to itself."""
    if not clip_norm > 0:
        raise ValueError("clip norm must be > 0")
    norm = float(np.linalg.norm(v))
    if norm <= clip_norm:
        return v.copy()
    return v * (clip_norm / norm)


def local_sgd(params: ModelParams, sentences: Sequence[Sequence[int]],
              cfg: ClientConfig, rng: np.random.Generator) -> tuple[ModelParams, float]:
    """``E`` epochs of minibatch SGD; returns trained params and mean batch loss."""
    theta = params.copy()
    n = len(sentences)
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for lo in range(0, n, cfg.batch_size):
            batch = SequenceBatch.from_sentences([sentences[i] for i in order[lo:lo + cfg.batch_size]])
            loss, grad = loss_and_gradient(theta, batch, cfg.reduction)
            theta.flat -= cfg.learning_rate * grad.flat
            losses.append(loss)
    return theta, float(np.mean(losses))


def user_update(client: int, sentences: Sequence[Sequence[int]], theta: ModelParams,
                cfg: ClientConfig, clip_norm: float,
                rng: np.random.Generator) -> ClientUpdate:
    """Local training followed by clipping of ``theta_local - theta``."""
    if len(sentences) == 0:
        raise ValueError(f"client {client} has no data")
    trained, loss = local_sgd(theta, sentences, cfg, rng)
    delta = trained.flat - theta.flat
    norm = float(np.linalg.norm(delta))
    if math.isinf(clip_norm):
        return ClientUpdate(client, delta, norm, loss)
    return ClientUpdate(client, clip_to_norm(delta, clip_norm), norm, loss)


def aggregate_and_noise(deltas: Sequence[np.ndarray], dp: DpConfig,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sum in the given order, divide by ``m``, add Gaussian noise.

    Returns ``(noisy_average, clean_average)``.
    """
    if len(deltas) != dp.round_size:
        raise RuntimeError(
            f"round aggregated {len(deltas)} updates, expected {dp.round_size}")
    total = np.zeros_like(deltas[0])
    for d in deltas:
        total += d
    avg = total / dp.round_size
    sigma = dp.sigma
    if sigma == 0.0:
        return avg.copy(), avg
    return avg + rng.normal(0.0, sigma, size=avg.shape), avg


def server_step(theta: np.ndarray, update: np.ndarray, opt: ServerOptConfig,
                state: ServerOptState | None = None) -> tuple[np.ndarray, ServerOptState]:
    """Apply one server optimizer step (rules in ``ServerOptConfig``)."""
    if theta.shape != update.shape:
        raise ValueError("update shape does not match parameters")
    state = ServerOptState() if state is None else state
    step = state.step + 1
    lr, mu = opt.learning_rate, opt.momentum
    if opt.kind == "plain":
        return theta + update, ServerOptState(step)
    if opt.kind == "sgd":
        return theta + lr * update, ServerOptState(step)
    if opt.kind in ("momentum", "nesterov"):
        v = update.copy() if state.velocity is None else mu * state.velocity + update
        direction = v if opt.kind == "momentum" else mu * v + update
        return theta + lr * direction, ServerOptState(step, velocity=v)
    if opt.kind == "adam":
        g = -update
        m = (1 - opt.beta1) * g if state.velocity is None else \
            opt.beta1 * state.velocity + (1 - opt.beta1) * g
        v = (1 - opt.beta2) * g * g if state.second_moment is None else \
            opt.beta2 * state.second_moment + (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1 ** step)
        v_hat = v / (1 - opt.beta2 ** step)
        return theta - lr * m_hat / (np.sqrt(v_hat) + opt.epsilon), ServerOptState(step, m, v)
    raise ConfigError(f"unknown server optimizer {opt.kind!r}")


class _StaticPool:
    """Every device always eligible; used when training on a bare device list."""

    def __init__(self, devices):
        self.devices = list(devices)
        self._ids = sorted(d.id for d in self.devices)

    def eligibility_step(self, t, rng):
        return self._ids

    def mark_participated(self, ids, t):
        pass


def train(population, init_params: ModelParams, dp: DpConfig, client_cfg: ClientConfig,
          server_cfg: ServerOptConfig, seed: int,
          on_round: Callable[[int, ModelParams, RoundMetrics], None] | None = None,
          ) -> tuple[ModelParams, list[RoundMetrics]]:
    """Run ``dp.rounds`` rounds of DP-FedAvg.

    ``population`` is either a ``fedmem.population.Population`` (pace-steered
    eligibility) or a plain sequence of devices, all always eligible. Devices
    need ``id`` and ``sentences``. Randomness comes from named streams of
    ``seed`` (see ``fedmem.rng``).
    """
    if not hasattr(population, "eligibility_step"):
        population = _StaticPool(population)
    by_id = {d.id: d for d in population.devices}
    if len(by_id) != dp.population_size:
        raise ConfigError(
            f"population has {len(by_id)} devices, config says {dp.population_size}")
    params = init_params.copy()
    state = None
    history = []
    for t in range(dp.rounds):
        pool = population.eligibility_step(t, rngs.stream(seed, rngs.ELIGIBILITY, t))
        chosen = sample_round_clients(pool, dp.round_size, rngs.stream(seed, rngs.SAMPLING, t))
        population.mark_participated(chosen, t)
        deltas, losses, failed = [], [], []
        n_clipped = 0
        for cid in chosen:
            sentences = by_id[cid].sentences
            if len(sentences) == 0:
                # a missing update counts as zero; the divisor stays m
                log.warning("round %d: client %d has no data, skipped", t, cid)
                failed.append(cid)
                deltas.append(np.zeros_like(params.flat))
                continue
            upd = user_update(cid, sentences, params, client_cfg, dp.clip_norm,
                              rngs.stream(seed, rngs.CLIENT, t, cid))
            n_clipped += upd.norm > dp.clip_norm
            deltas.append(upd.delta)
            losses.append(upd.loss)
        noisy, clean = aggregate_and_noise(deltas, dp, rngs.stream(seed, rngs.NOISE, t))
        new_flat, state = server_step(params.flat, noisy, server_cfg, state)
        params = params.like(new_flat)
        if not np.all(np.isfinite(params.flat)):
            raise FloatingPointError(f"non-finite parameters after round {t}")
        metrics = RoundMetrics(
            round=t,
            fraction_clipped=n_clipped / dp.round_size,
            update_norm=float(np.linalg.norm(clean)),
            loss=float(np.mean(losses)) if losses else float("nan"),
            sigma=dp.sigma,
            clients=chosen,
            failed=tuple(failed),
        )
        history.append(metrics)
        if on_round is not None:
            on_round(t, params, metrics)
    return params, history


def write_metrics_csv(history: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for m in history:
            writer.writerow(m.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "round" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
