"""Command line interface.

Every stage reads and writes files in a run directory (``--out``), so stages
can be rerun on their own::

    fedmem spec > spec.json
    fedmem gen-corpus --spec spec.json --out run
    fedmem build-population --spec spec.json --out run
    fedmem train --spec spec.json --out run
    fedmem audit --spec spec.json --out run
    fedmem account --spec spec.json --out run
    fedmem report run

``fedmem run`` does all stages at once. Values come from the spec file, then
``--set key=value`` pairs, then the dedicated flags, later ones winning.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from fedmem.accountant import METHODS, table4
from fedmem.errors import ConfigError, FedmemError
from fedmem.experiment import (
    EXIT_CODES,
    ExperimentSpec,
    MissingArtifactError,
    StageError,
    account_stage,
    accounting,
    audit_stage,
    corpus_stage,
    json_safe,
    load_corpus,
    load_population,
    population_stage,
    run_experiment,
    train_stage,
)
from fedmem.lm import load_checkpoint
from fedmem.population import read_manifest
from fedmem.report import emit_report, sweep_table
from fedmem.sweep import SweepSpec, run_sweep

# flag dest -> dotted spec key
FLAG_KEYS = {
    "seed": "seed",
    "out": "output_dir",
    "corpus": "corpus.path",
    "vocab_size": "corpus.vocab_size",
    "devices": "population.ordinary_devices",
    "dataset_size": "population.ordinary_dataset_size",
    "rounds": "training.rounds",
    "round_size": "training.round_size",
    "noise_multiplier": "training.noise_multiplier",
    "clip_norm": "training.clip_norm",
    "checkpoint_every": "training.checkpoint_every",
    "reference_size": "audit.reference_size",
    "beam_width": "audit.beam_width",
    "population": "accounting.population",
    "delta": "accounting.delta",
    "delta_exponent": "accounting.delta_exponent",
}

# stage blamed when a command fails outside a named pipeline stage
COMMAND_STAGE = {
    "spec": "config",
    "gen-corpus": "corpus",
    "build-population": "population",
    "train": "train",
    "audit": "audit",
    "account": "account",
    "sweep": "sweep",
    "report": "report",
    "run": "train",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Spec file, then ``--set`` overrides, then dedicated flags."""
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    overrides = _parse_set(args.set or [])
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return spec.with_overrides(overrides) if overrides else spec


def _spec_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="experiment spec (JSON)")
    p.add_argument("--out", help="run directory (spec key output_dir)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a dotted spec key; VALUE is parsed as JSON when possible")


def _corpus_options(p):
    p.add_argument("--corpus", help="ingest this text file instead of generating a corpus")
    p.add_argument("--vocab-size", type=int)


def _population_options(p):
    p.add_argument("--devices", type=int, help="number of ordinary devices")
    p.add_argument("--dataset-size", type=int, help="sentences per ordinary device")


def _train_options(p):
    p.add_argument("--rounds", type=int)
    p.add_argument("--round-size", type=int, help="clients per round (m)")
    p.add_argument("--noise-multiplier", type=float, help="z")
    p.add_argument("--clip-norm", type=float, help="S")
    p.add_argument("--checkpoint-every", type=int)


def _audit_options(p):
    p.add_argument("--reference-size", type=int, help="|R|")
    p.add_argument("--beam-width", type=int)


def _account_options(p):
    p.add_argument("--population", type=int, help="N (defaults to the simulated device count)")
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-exponent", type=float, help="delta = N ** -exponent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmem", description="DP-FedAvg memorization experiments at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spec", help="print the resolved spec (defaults plus overrides)")
    _spec_options(p)
    for add in (_corpus_options, _population_options, _train_options, _audit_options,
                _account_options):
        add(p)

    p = sub.add_parser("gen-corpus", help="generate or ingest the corpus")
    _spec_options(p)
    _corpus_options(p)

    p = sub.add_parser("build-population", help="build devices and canaries from the corpus")
    _spec_options(p)
    _population_options(p)

    p = sub.add_parser("train", help="run DP-FedAvg on the built population")
    _spec_options(p)
    _train_options(p)

    p = sub.add_parser("audit", help="secret sharer audit of the trained model")
    _spec_options(p)
    _audit_options(p)
    p.add_argument("--checkpoint", help="model to audit (default: <out>/model.ckpt)")

    p = sub.add_parser("account", help="(epsilon, delta) of the DP configuration")
    _spec_options(p)
    _train_options(p)
    _account_options(p)
    p.add_argument("--group", type=int, help="also report group privacy for k users")
    p.add_argument("--table4", action="store_true",
                   help="print the production accounting table as CSV and exit")
    p.add_argument("--method", choices=METHODS, default="without_replacement",
                   help="sampling bound used with --table4")

    p = sub.add_parser("sweep", help="run a hyperparameter sweep")
    p.add_argument("sweep", help="sweep spec (JSON)")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("report", help="render a run or sweep bundle")
    p.add_argument("bundle", help="run or sweep directory")
    p.add_argument("--output", help="write the report here instead of stdout")

    p = sub.add_parser("run", help="all stages end to end")
    _spec_options(p)
    for add in (_corpus_options, _population_options, _train_options, _audit_options,
                _account_options):
        add(p)
    return parser


# -- commands --------------------------------------------------------------


def cmd_spec(args) -> int:
    sys.stdout.write(resolve_spec(args).to_json())
    return 0


def cmd_gen_corpus(args) -> int:
    spec = resolve_spec(args)
    corpus = corpus_stage(spec)
    print(f"corpus: {len(corpus.train)} train / {len(corpus.eval)} eval sentences, "
          f"vocabulary {corpus.vocab.size} -> {spec.output_dir}")
    return 0


def cmd_build_population(args) -> int:
    spec = resolve_spec(args)
    corpus = load_corpus(spec.output_dir)
    population = population_stage(spec, corpus)
    print(f"population: {len(population)} devices, {len(population.canaries)} canaries "
          f"-> {spec.output_dir}")
    return 0


def cmd_train(args) -> int:
    spec = resolve_spec(args)
    corpus = load_corpus(spec.output_dir)
    population = load_population(spec, corpus, spec.output_dir)
    _, history = train_stage(spec, population, corpus)
    loss = history[-1].loss if history else float("nan")
    print(f"trained {len(history)} rounds, final loss {loss:.4f} -> {spec.output_dir}")
    return 0


def cmd_audit(args) -> int:
    spec = resolve_spec(args)
    out = Path(spec.output_dir)
    params = load_checkpoint(args.checkpoint or out / "model.ckpt")
    canaries = read_manifest(out / "canaries.json")
    report = audit_stage(spec, params, canaries)
    sys.stdout.write(report.to_text())
    return 0


def cmd_account(args) -> int:
    if args.table4:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["population", "delta", "epsilon", "order"])
        for row in table4(method=args.method):
            writer.writerow([row.population, repr(row.delta), f"{row.epsilon:.6f}", row.order])
        return 0
    spec = resolve_spec(args)
    if args.spec or args.out:
        result = account_stage(spec, group_size=args.group)
    else:
        result = accounting(spec, args.group)
    print(json.dumps(json_safe(result), sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    sweep = SweepSpec.load(args.sweep)
    if args.workers is not None:
        sweep.workers = args.workers
    rows = run_sweep(sweep, args.out)
    print("\n".join(sweep_table([{k: str(v) if v is not None else "" for k, v in r.record().items()}
                                 for r in rows])))
    failed = sum(r.status != "ok" for r in rows)
    if failed == len(rows):
        raise StageError("sweep", "every sweep point failed")
    return 0


def cmd_report(args) -> int:
    text = emit_report(args.bundle)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    spec = resolve_spec(args)
    bundle = run_experiment(spec)
    sys.stdout.write(emit_report(bundle))
    return 0


COMMANDS = {
    "spec": cmd_spec,
    "gen-corpus": cmd_gen_corpus,
    "build-population": cmd_build_population,
    "train": cmd_train,
    "audit": cmd_audit,
    "account": cmd_account,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fedmem: configuration error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except StageError as exc:
        print(f"fedmem: {exc}", file=sys.stderr)
        return exc.exit_code
    except MissingArtifactError as exc:
        print(f"fedmem: stage 'report' failed: {exc}", file=sys.stderr)
        return EXIT_CODES["report"]
    except (FedmemError, OSError, ValueError) as exc:
        stage = COMMAND_STAGE[args.command]
        print(f"fedmem: stage '{stage}' failed: {exc}", file=sys.stderr)
        return EXIT_CODES[stage]


if __name__ == "__main__":
    sys.exit(main())
