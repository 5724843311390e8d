"""Experiment specs and the end-to-end pipeline.

A spec is a JSON document (``schema_version`` 1) whose sections mirror the
module configs. Every random draw comes from a named stream of ``seed``
(see ``fedmem.rng``), so a spec plus the code version fixes every output.

Each stage reads and writes files in one run directory, so stages can be
rerun independently. Bundle layout::

    spec.json         resolved spec
    manifest.json     seed, config hash, wall time, per-stage status
    vocab.txt         model vocabulary
    corpus/           train.txt, eval.txt (one sentence per line)
    population.json   population recipe, seed and corpus sha256
    canaries.json     canary manifest
    model.ckpt        final weights (plus checkpoints/round_XXXXX.ckpt)
    metrics.csv       per-round training metrics
    evaluation.json   top-k recall on held-out sentences
    audit.csv / audit.txt
    accounting.json
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from fedmem import kernels
from fedmem import rng as rngs
from fedmem.accountant import dp_fedavg_guarantee, group_privacy
from fedmem.corpus import (
    CorpusConfig,
    build_vocabulary,
    generate_corpus,
    ingest_corpus,
    read_lines,
    write_corpus,
)
from fedmem.errors import ConfigError, FedmemError, InputError
from fedmem.fedavg import ClientConfig, DpConfig, RoundMetrics, ServerOptConfig, train, write_metrics_csv
from fedmem.lm import ModelParams, load_checkpoint, save_checkpoint, top_k_recall
from fedmem.population import Population, PopulationSpec, build_population, canary_manifest, write_manifest
from fedmem.secret_sharer import AuditReport, AuditSettings, audit_report
from fedmem.vocab import Vocabulary

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_CODES = {
    "config": 2,
    "corpus": 3,
    "population": 4,
    "train": 5,
    "audit": 6,
    "account": 7,
    "sweep": 8,
    "report": 9,
}


class StageError(FedmemError):
    """A pipeline stage failed; ``exit_code`` identifies the stage."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class CorpusSection:
    """``path`` set: ingest that file. Otherwise generate from ``synthetic``."""

    path: str | None = None
    public: bool = True
    vocab_size: int = 1000
    eval_sentences: int = 2000
    synthetic: dict = field(default_factory=lambda: {
        k: v for k, v in asdict(CorpusConfig()).items() if k != "vocab_size"})


@dataclass
class ModelSection:
    embed_dim: int = 96
    hidden_dim: int = 96


@dataclass
class TrainingSection:
    """DP-FedAvg knobs. ``clip_norm: null`` disables clipping (needs z = 0)."""

    round_size: int = 100
    noise_multiplier: float = 0.0
    clip_norm: float | None = 0.8
    rounds: int = 300
    checkpoint_every: int = 0


@dataclass
class AuditSection:
    enabled: bool = True
    reference_size: int = 10_000
    beam_width: int = 5


@dataclass
class AccountingSection:
    """``population`` defaults to the simulated device count; ``delta`` to N^-delta_exponent."""

    enabled: bool = True
    population: int | None = None
    delta: float | None = None
    delta_exponent: float = 1.1


@dataclass
class EvalSection:
    recall_k: list = field(default_factory=lambda: [1, 3])


@dataclass
class ExperimentSpec:
    seed: int = 0
    output_dir: str = "run"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    population: PopulationSpec = field(default_factory=PopulationSpec)
    training: TrainingSection = field(default_factory=TrainingSection)
    client: dict = field(default_factory=lambda: asdict(ClientConfig()))
    server: dict = field(default_factory=lambda: asdict(ServerOptConfig()))
    audit: AuditSection = field(default_factory=AuditSection)
    accounting: AccountingSection = field(default_factory=AccountingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    schema_version: int = SCHEMA_VERSION

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentSpec:
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        spec = _from_dict(cls, data, "spec")
        spec._fill_defaults()
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> ExperimentSpec:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read spec {path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def with_overrides(self, overrides: dict[str, Any]) -> ExperimentSpec:
        return ExperimentSpec.from_dict(apply_overrides(self.to_dict(), overrides))

    def config_hash(self) -> str:
        """SHA-256 of the canonical spec without ``output_dir``."""
        data = self.to_dict()
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _fill_defaults(self) -> None:
        """Complete the free-form sections so every key is present and overridable."""
        defaults = ExperimentSpec()
        for owner, name in ((self, "client"), (self, "server"), (self.corpus, "synthetic"),
                            (self.population, "pace")):
            base = getattr(defaults if owner is self else getattr(defaults, _SECTION[name]), name)
            setattr(owner, name, {**base, **getattr(owner, name)})

    # -- derived configs -------------------------------------------------

    def validate(self) -> None:
        try:
            self.corpus_config()
            self.client_config()
            self.server_config()
            self.population.grid()
            self.population.pace_config()
            self.dp_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.embed_dim < 1 or self.model.hidden_dim < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.training.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if any(int(k) < 1 for k in self.eval.recall_k):
            raise ConfigError("recall k must be >= 1")

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(**{**self.corpus.synthetic, "vocab_size": self.corpus.vocab_size})

    def client_config(self) -> ClientConfig:
        return ClientConfig(**self.client)

    def server_config(self) -> ServerOptConfig:
        return ServerOptConfig(**self.server)

    def population_size(self) -> int:
        return self.population.ordinary_devices + sum(
            c.n_u * c.replicas for c in self.population.grid())

    def dp_config(self) -> DpConfig:
        t = self.training
        return DpConfig(population_size=self.population_size(), round_size=t.round_size,
                        noise_multiplier=t.noise_multiplier,
                        clip_norm=math.inf if t.clip_norm is None else t.clip_norm,
                        rounds=t.rounds)


_SECTION = {"synthetic": "corpus", "pace": "population"}


def _from_dict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, f"{where}.{name}")
        elif isinstance(value, (dict, list)):
            kwargs[name] = copy.deepcopy(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(data: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys (``"training.clip_norm"``) on a copy; keys must already exist."""
    out = copy.deepcopy(data)
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"override key {dotted!r} does not exist in the spec")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"override key {dotted!r} does not exist in the spec")
        node[parts[-1]] = value
    return out


# -- stages ---------------------------------------------------------------


@dataclass
class CorpusData:
    vocab: Vocabulary
    train: list
    eval: list


def make_corpus(spec: ExperimentSpec) -> CorpusData:
    """Training and held-out sentences, generated or ingested."""
    c = spec.corpus
    if c.path is not None:
        lines = read_lines(c.path)
        vocab = build_vocabulary(lines, c.vocab_size)
        sentences = ingest_corpus(c.path, vocab)
        # deterministic held-out split drawn from the corpus stream
        order = rngs.stream(spec.seed, rngs.CORPUS, 1).permutation(len(sentences))
        n_eval = min(c.eval_sentences, len(sentences) // 10)
        held = set(order[:n_eval].tolist())
        train_part = [s for i, s in enumerate(sentences) if i not in held]
        eval_part = [sentences[i] for i in sorted(held)]
        return CorpusData(vocab, train_part, eval_part)
    cfg = spec.corpus_config()
    # one stream for train + held-out text: same Markov table, no shared sentences
    total = dataclasses.replace(cfg, num_sentences=cfg.num_sentences + c.eval_sentences)
    sentences = generate_corpus(total, rngs.stream(spec.seed, rngs.CORPUS, 0))
    n = cfg.num_sentences
    return CorpusData(Vocabulary.synthetic(cfg.vocab_size), sentences[:n], sentences[n:])


def make_population(spec: ExperimentSpec, corpus: CorpusData) -> Population:
    return build_population(spec.population, corpus.train, corpus.vocab.size,
                            rngs.stream(spec.seed, rngs.CANARIES),
                            rngs.stream(spec.seed, rngs.POPULATION))


def init_model(spec: ExperimentSpec, vocab_size: int) -> ModelParams:
    return ModelParams.initialize(vocab_size, spec.model.embed_dim, spec.model.hidden_dim,
                                  rngs.stream(spec.seed, rngs.INIT))


def train_model(spec: ExperimentSpec, population: Population, init: ModelParams,
                out_dir: Path | None = None) -> tuple[ModelParams, list[RoundMetrics]]:
    every = spec.training.checkpoint_every
    ckpt_dir = None
    if out_dir is not None and every > 0:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_round(t, params, metrics):
        log.info("round %d/%d loss %.4f clipped %.2f", t + 1, spec.training.rounds,
                 metrics.loss, metrics.fraction_clipped)
        if ckpt_dir is not None and (t + 1) % every == 0:
            save_checkpoint(params, ckpt_dir / f"round_{t + 1:05d}.ckpt")

    return train(population, init, spec.dp_config(), spec.client_config(),
                 spec.server_config(), spec.seed, on_round=on_round)


def evaluate(spec: ExperimentSpec, params: ModelParams, corpus: CorpusData) -> dict:
    return {f"top{k}_recall": top_k_recall(params, corpus.eval, int(k))
            for k in spec.eval.recall_k}


def audit(spec: ExperimentSpec, params: ModelParams, canaries) -> AuditReport:
    settings = AuditSettings(spec.audit.reference_size, spec.audit.beam_width)
    return audit_report(params, canaries, settings, rngs.stream(spec.seed, rngs.AUDIT))


def accounting(spec: ExperimentSpec, group_size: int | None = None) -> dict:
    """Guarantee for the spec's DP config, plus group privacy for ``group_size``."""
    a, dp = spec.accounting, spec.dp_config()
    n = a.population if a.population is not None else dp.population_size
    if not 1 <= dp.round_size <= n:
        raise ConfigError(f"accounting population {n} smaller than round size")
    delta = a.delta if a.delta is not None else float(n) ** -a.delta_exponent
    out = {"population": n, "round_size": dp.round_size,
           "noise_multiplier": dp.noise_multiplier, "rounds": dp.rounds, "delta": delta}
    if dp.rounds == 0:
        out.update(epsilon=0.0, order=None)
    elif dp.noise_multiplier == 0:
        out.update(epsilon=math.inf, order=None)
    else:
        g = dp_fedavg_guarantee(n, dp.round_size, dp.noise_multiplier, dp.rounds, delta)
        out.update(epsilon=g.epsilon, order=g.order)
        if group_size and group_size > 1:
            gg = group_privacy(g, group_size)
            out["group"] = {"size": group_size, "epsilon": gg.epsilon, "delta": gg.delta}
    return out


# -- bundle files --------------------------------------------------------

MANIFEST = "manifest.json"
ARTIFACTS = {
    "corpus": ("vocab.txt", "corpus/train.txt", "corpus/eval.txt"),
    "population": ("population.json", "canaries.json"),
    "train": ("model.ckpt", "metrics.csv", "evaluation.json"),
    "audit": ("audit.csv", "audit.txt"),
    "account": ("accounting.json",),
}
STAGE_ORDER = ("corpus", "population", "train", "audit", "account")


class MissingArtifactError(FedmemError):
    """A bundle records an artifact that is not on disk."""

    def __init__(self, artifact: str, bundle: Path):
        self.artifact = artifact
        super().__init__(f"artifact {artifact!r} missing from bundle {bundle}")


def json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(json_safe(data), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Bundle:
    path: Path
    manifest: dict

    @property
    def summary(self) -> dict:
        return self.manifest.get("summary", {})

    def status(self, stage: str) -> str:
        return self.manifest.get("stages", {}).get(stage, {}).get("status", "not run")

    def artifact(self, name: str) -> Path:
        """Path of a recorded artifact; raises ``MissingArtifactError`` if absent."""
        path = self.path / name
        if not path.is_file():
            raise MissingArtifactError(name, self.path)
        return path


def _record(out: Path, spec: ExperimentSpec, stage: str, seconds: float,
            summary: dict | None = None) -> dict:
    """Merge one finished stage into the manifest."""
    path = out / MANIFEST
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    if manifest.get("config_hash") not in (None, spec.config_hash()):
        # a different spec reran a stage here: earlier stages no longer apply
        manifest = {}
    manifest.update(schema_version=SCHEMA_VERSION, kind="experiment", seed=spec.seed,
                    config_hash=spec.config_hash(), kernel_backend=kernels.BACKEND)
    stages = manifest.setdefault("stages", {})
    stages[stage] = {"status": "ok", "seconds": seconds, "artifacts": list(ARTIFACTS[stage])}
    manifest["wall_time_seconds"] = sum(s.get("seconds", 0.0) for s in stages.values())
    if summary:
        manifest.setdefault("summary", {}).update(summary)
    write_json(path, manifest)
    return manifest


class _Stage:
    """Times a stage, records it in the manifest and wraps failures in ``StageError``."""

    def __init__(self, name: str, spec: ExperimentSpec, out: Path):
        self.name, self.spec, self.out = name, spec, out
        self.summary: dict = {}

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            _record(self.out, self.spec, self.name, time.perf_counter() - self.start,
                    self.summary)
            return False
        if isinstance(exc, StageError):
            return False
        raise StageError(self.name, exc) from exc


def _prepare(spec: ExperimentSpec, out: str | Path | None) -> Path:
    path = Path(out if out is not None else spec.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    spec.save(path / "spec.json")
    return path


# -- file-backed stages --------------------------------------------------


def corpus_stage(spec: ExperimentSpec, out: str | Path | None = None) -> CorpusData:
    out = _prepare(spec, out)
    with _Stage("corpus", spec, out):
        corpus = make_corpus(spec)
        corpus.vocab.save(out / "vocab.txt")
        (out / "corpus").mkdir(exist_ok=True)
        write_corpus(corpus.train, corpus.vocab, out / "corpus" / "train.txt")
        write_corpus(corpus.eval, corpus.vocab, out / "corpus" / "eval.txt")
    return corpus


def load_corpus(out: str | Path) -> CorpusData:
    out = Path(out)
    try:
        vocab = Vocabulary.load(out / "vocab.txt")
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read vocabulary in {out}: {exc}") from exc
    return CorpusData(vocab, ingest_corpus(out / "corpus" / "train.txt", vocab),
                      ingest_corpus(out / "corpus" / "eval.txt", vocab))


def population_stage(spec: ExperimentSpec, corpus: CorpusData,
                     out: str | Path | None = None) -> Population:
    """Build the population; ``population.json`` pins the recipe and corpus hash."""
    out = _prepare(spec, out)
    with _Stage("population", spec, out):
        population = make_population(spec, corpus)
        write_manifest(canary_manifest(population, corpus.vocab), out / "canaries.json")
        train_file = out / "corpus" / "train.txt"
        write_json(out / "population.json", {
            "seed": spec.seed,
            "population": asdict(spec.population),
            "corpus_path": str(train_file),
            "corpus_sha256": file_sha256(train_file) if train_file.is_file() else None,
            "devices": len(population),
        })
    return population


def load_population(spec: ExperimentSpec, corpus: CorpusData, out: str | Path) -> Population:
    """Rebuild the population recorded in ``population.json`` and check it still matches."""
    out = Path(out)
    recorded = read_json(out / "population.json")
    if recorded.get("seed") != spec.seed or recorded.get("population") != asdict(spec.population):
        raise ConfigError("population.json was built from a different spec; rerun build-population")
    sha = recorded.get("corpus_sha256")
    train_file = out / "corpus" / "train.txt"
    if sha is not None and file_sha256(train_file) != sha:
        raise InputError(f"{train_file} changed since the population was built")
    return make_population(spec, corpus)


def train_stage(spec: ExperimentSpec, population: Population, corpus: CorpusData,
                out: str | Path | None = None) -> tuple[ModelParams, list[RoundMetrics]]:
    out = _prepare(spec, out)
    with _Stage("train", spec, out) as st:
        init = init_model(spec, corpus.vocab.size)
        params, history = train_model(spec, population, init, out)
        save_checkpoint(params, out / "model.ckpt")
        write_metrics_csv(history, out / "metrics.csv")
        metrics = evaluate(spec, params, corpus)
        syn, ordinary = population.participation_rates(max(spec.training.rounds, 1))
        metrics.update(mean_synthetic_participations=population.mean_synthetic_participations(),
                       synthetic_rate=syn, ordinary_rate=ordinary)
        write_json(out / "evaluation.json", metrics)
        clipped = [h.fraction_clipped for h in history]
        st.summary = {
            **{k: v for k, v in metrics.items() if k.endswith("_recall")},
            "final_loss": history[-1].loss if history else None,
            "mean_fraction_clipped": float(np.mean(clipped)) if clipped else None,
        }
    return params, history


def audit_stage(spec: ExperimentSpec, params: ModelParams, canaries,
                out: str | Path | None = None) -> AuditReport:
    out = _prepare(spec, out)
    with _Stage("audit", spec, out):
        report = audit(spec, params, canaries)
        (out / "audit.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "audit.txt").write_text(report.to_text(), encoding="utf-8")
    return report


def account_stage(spec: ExperimentSpec, out: str | Path | None = None,
                  group_size: int | None = None) -> dict:
    """Writes ``accounting.json``; group privacy defaults to the largest canary group."""
    out = _prepare(spec, out)
    with _Stage("account", spec, out):
        if group_size is None:
            group_size = max((c.n_u for c in spec.population.grid()), default=1)
        result = accounting(spec, group_size)
        write_json(out / "accounting.json", result)
    return result


def run_experiment(spec: ExperimentSpec, output_dir: str | Path | None = None) -> Bundle:
    """Run every stage and write the artifact bundle; raises ``StageError``."""
    out = _prepare(spec, output_dir)
    (out / MANIFEST).unlink(missing_ok=True)
    corpus = corpus_stage(spec, out)
    population = population_stage(spec, corpus, out)
    params, _ = train_stage(spec, population, corpus, out)
    if spec.audit.enabled:
        audit_stage(spec, params, population.canaries, out)
    if spec.accounting.enabled:
        account_stage(spec, out)
    return load_bundle(out)


def load_bundle(path: str | Path) -> Bundle:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise MissingArtifactError(MANIFEST, path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"unreadable {MANIFEST} in {path}: {exc}") from exc
    return Bundle(path, manifest)


__all__ = [
    "ARTIFACTS", "AccountingSection", "AuditSection", "Bundle", "CorpusData", "CorpusSection",
    "EXIT_CODES", "EvalSection", "ExperimentSpec", "MissingArtifactError", "ModelSection",
    "SCHEMA_VERSION", "StageError", "TrainingSection", "account_stage", "accounting",
    "apply_overrides", "audit", "audit_stage", "corpus_stage", "evaluate", "init_model", "json_safe",
    "load_bundle", "load_corpus", "load_population", "make_corpus", "make_population",
    "population_stage", "read_json", "run_experiment", "train_model", "train_stage",
    "write_json",
]
