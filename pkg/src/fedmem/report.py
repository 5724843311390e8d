"""Plain-text summary of a run or sweep bundle."""

from __future__ import annotations

import json
from pathlib import Path

from fedmem.experiment import Bundle, load_bundle
from fedmem.secret_sharer import read_report_csv
from fedmem.sweep import SUMMARY_COLUMNS, read_summary_csv

NOT_RUN = "not run"


def _section(title: str, body: list[str]) -> list[str]:
    return [title, "=" * len(title), *body, ""]


def _fmt(value, digits: int = 4) -> str:
    if value is None or value == "":
        return "-"
    if isinstance(value, str):
        for kind in (int, float):
            try:
                value = kind(value)
                break
            except ValueError:
                pass
        else:
            return value
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _recall(bundle: Bundle) -> list[str]:
    if bundle.status("train") != "ok":
        return [NOT_RUN]
    metrics = json.loads(bundle.artifact("evaluation.json").read_text(encoding="utf-8"))
    lines = [f"{k:<32} {_fmt(v)}" for k, v in sorted(metrics.items())]
    summary = bundle.summary
    lines.append(f"{'final_loss':<32} {_fmt(summary.get('final_loss'))}")
    lines.append(f"{'mean_fraction_clipped':<32} {_fmt(summary.get('mean_fraction_clipped'))}")
    return lines


def _audit(bundle: Bundle) -> list[str]:
    if bundle.status("audit") != "ok":
        return [NOT_RUN]
    table = bundle.artifact("audit.txt").read_text(encoding="utf-8").rstrip("\n").splitlines()
    rows = read_report_csv(bundle.artifact("audit.csv").read_text(encoding="utf-8"))
    if rows:
        best = max(float(r["exposure"]) for r in rows)
        found = sum(int(r["found"]) for r in rows)
        table += ["", f"max exposure {best:.2f} bits; beam-extracted {found} / {len(rows)}"]
    return table


def _accounting(bundle: Bundle) -> list[str]:
    if bundle.status("account") != "ok":
        return [NOT_RUN]
    acc = json.loads(bundle.artifact("accounting.json").read_text(encoding="utf-8"))
    lines = [
        f"population N={acc['population']}, round size m={acc['round_size']}, "
        f"z={acc['noise_multiplier']}, T={acc['rounds']}",
        f"({_fmt(acc['epsilon'], 3)}, {acc['delta']:.3g})-DP"
        + (f" at Renyi order {acc['order']}" if acc.get("order") is not None else ""),
    ]
    group = acc.get("group")
    if group:
        lines.append(f"group of {group['size']}: ({_fmt(group['epsilon'], 3)}, "
                     f"{group['delta']:.3g})-DP")
    return lines


def sweep_table(rows: list[dict]) -> list[str]:
    widths = [max(len(c), *(len(_fmt(r.get(c))) for r in rows)) if rows else len(c)
              for c in SUMMARY_COLUMNS]
    line = "  ".join(c.ljust(w) for c, w in zip(SUMMARY_COLUMNS, widths))
    out = [line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(_fmt(r.get(c)).ljust(w)
                             for c, w in zip(SUMMARY_COLUMNS, widths)).rstrip())
    return out


def emit_report(bundle: Bundle | str | Path) -> str:
    """Render the audit table, accounting guarantee and recall of a bundle.

    Sections whose stage did not run say "not run". A stage that is recorded
    as done but whose files are gone raises ``MissingArtifactError``.
    """
    if not isinstance(bundle, Bundle):
        bundle = load_bundle(bundle)
    m = bundle.manifest
    if m.get("kind") == "sweep":
        rows = read_summary_csv(bundle.artifact("sweep.csv").read_text(encoding="utf-8"))
        bundle.artifact("clipped.csv")
        head = [f"bundle: {bundle.path}", f"points: {m.get('points')}  failed: {m.get('failed')}",
                ""]
        return "\n".join(head + _section("Sweep summary", sweep_table(rows))).rstrip() + "\n"
    head = [
        f"bundle: {bundle.path}",
        f"seed: {m.get('seed')}  config hash: {str(m.get('config_hash'))[:16]}  "
        f"kernels: {m.get('kernel_backend')}  wall time: {_fmt(m.get('wall_time_seconds'), 1)} s",
        "",
    ]
    body = (_section("Recall", _recall(bundle))
            + _section("Secret sharer audit", _audit(bundle))
            + _section("Privacy accounting", _accounting(bundle)))
    return "\n".join(head + body).rstrip() + "\n"


__all__ = ["NOT_RUN", "emit_report", "sweep_table"]
