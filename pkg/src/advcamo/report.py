"""Plain-text report and per-table TSV files, with figures alongside.

Every table is built once as (title, header, rows) and rendered both as a
fixed-width block in ``report.txt`` and as its own TSV file, so the two
views cannot drift apart.  Output is deterministic for identical inputs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .face import ContractError

TABLE_SCHEMA = "advcamo.table/1"


@dataclasses.dataclass
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list]
    notes: list[str] = dataclasses.field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return "--"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return f"{v:.3f}"
    return str(v)


def accuracy_table(models: Sequence[str], accuracies: Mapping[str, Mapping[str, float]]) -> Table:
    """``accuracies``: pattern name -> model -> recognition rate."""
    rows = [[m] + [accuracies[p].get(m) for p in accuracies] for m in models]
    return Table("accuracy", "Recognition rate per pattern", ["model", *accuracies], rows)


def baseline_table(models: Sequence[str], stats) -> Table:
    rows = []
    for label in ("baseline", "mean", "std", "min", "max"):
        rows.append([label] + [getattr(stats.rows[m], label) if m in stats.rows else None for m in models])
    return Table(
        "random_baseline",
        f"Random patterns ({len(stats.patterns)} patterns, {len(stats.identities)} identities)",
        ["", *models],
        rows,
    )


def neighborhood_table(models: Sequence[str], results: Mapping[str, Mapping], deltas=None) -> Table:
    """``results``: pattern name -> model -> NeighborhoodResult."""
    rows = []
    for name, per_model in results.items():
        rows.append([name, "|delta| acc"] + [per_model[m].abs_delta if m in per_model else None for m in models])
        rows.append([name, "acc std"] + [per_model[m].std if m in per_model else None for m in models])
    notes = []
    if deltas is not None:
        notes.append(
            f"deltas: color {deltas[0]:g} channel units, period {deltas[1]:g} px, angle {deltas[2]:g} deg "
            "(pixel and degree units are an interpretation)"
        )
    return Table("neighborhood", "Neighborhood check", ["pattern", "", *models], rows, notes)


def transfer_tables(matrix) -> list[Table]:
    minima = matrix.column_minima()
    tables = []
    for mode in sorted({m for _, m in matrix.conditions()}):
        families = [f for f, m in matrix.conditions() if m == mode]
        header = ["optimization"] + [f"{e}/{f}" for f in families for e in matrix.evaluation_models]
        rows = []
        for o in matrix.optimization_models:
            row = [o]
            for f in families:
                for e in matrix.evaluation_models:
                    v = matrix.get(o, e, f, mode)
                    cell = _fmt(v)
                    if v is not None and minima.get((e, f, mode)) == o and len(matrix.optimization_models) > 1:
                        cell += "*"
                    row.append(cell)
            rows.append(row)
        tables.append(
            Table(f"transfer_{mode}", f"Transferability ({mode} mode)", header, rows, ["* lowest accuracy per column"])
        )
    return tables


def external_table(models: Sequence[str], summary_rows: Sequence[dict]) -> Table:
    """``summary_rows`` from :func:`summarize_external` grouped by pattern, model, stage, attributes."""
    keys = sorted({(r["pattern_id"], r["stage"], r["attributes"]) for r in summary_rows})
    lookup = {(r["pattern_id"], r["stage"], r["attributes"], r["model"]): r for r in summary_rows}
    rows = []
    for k in keys:
        cells = [lookup.get((*k, m)) for m in models]
        rows.append([*k] + [c["accuracy"] if c else None for c in cells] + [sum(c["n"] for c in cells if c)])
    return Table("external", "External images", ["pattern", "stage", "attributes", *models, "n"], rows)


def simulated_average_table(simulated: Mapping[str, Mapping[str, float]], average_over: Sequence[str]) -> Table:
    """Per-pattern simulated accuracy averaged over ``average_over`` (the optimization-stage models)."""
    rows = []
    for pid, per_model in simulated.items():
        vals = [per_model[m] for m in average_over if m in per_model]
        rows.append([pid, float(np.mean(vals)) if vals else None, len(vals)])
    return Table(
        "simulated_average",
        "Simulated average accuracy",
        ["pattern", "accuracy", "models"],
        rows,
        [f"averaged over optimization-stage models only ({', '.join(average_over)}); external rows cover every model"],
    )


def similarity_table(models: Sequence[str], sims: Mapping[tuple[str, str], np.ndarray], thresholds) -> Table:
    patterns = list(dict.fromkeys(p for p, _ in sims))
    rows = [[p] + [float(np.median(sims[(p, m)])) if (p, m) in sims and len(sims[(p, m)]) else None for m in models] for p in patterns]
    rows.append(["threshold"] + [thresholds.get(m) for m in models])
    return Table("similarity", "Median mated similarity", ["pattern", *models], rows)


def ttest_table(results: Mapping[str, tuple[float, float]]) -> Table:
    rows = [[name, t, p] for name, (t, p) in results.items()]
    return Table(
        "ttest", "Paired comparison", ["comparison", "t", "p"], rows, ["two-sided paired t-test over per-pattern accuracies"]
    )


def render_table(t: Table) -> str:
    cells = [[_fmt(c) for c in row] for row in t.rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(t.header)]
    line = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    out = [t.title, "-" * len(t.title), line(t.header).rstrip(), *(line(r).rstrip() for r in cells)]
    out += [f"  note: {n}" for n in t.notes]
    return "\n".join(out)


def render_report(tables: Sequence[Table], title: str = "Adversarial camouflage report", footer: Sequence[str] = ()) -> str:
    if not tables:
        raise ContractError("report needs at least one result table")
    parts = [title, "=" * len(title), ""]
    for t in tables:
        parts += [render_table(t), ""]
    parts += list(footer)
    return "\n".join(parts).rstrip() + "\n"


def write_tsv(t: Table, path: str | Path) -> None:
    lines = [f"# schema: {TABLE_SCHEMA}", f"# {t.title}", "\t".join(t.header)]
    lines += ["\t".join(_fmt(c) for c in row) for row in t.rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split("\t")
    return header, [ln.split("\t") for ln in lines[1:]]


def write_report(out_dir: str | Path, tables: Sequence[Table], footer: Sequence[str] = (), title: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in tables:
        write_tsv(t, out / f"{t.name}.tsv")
    path = out / "report.txt"
    kwargs = {"title": title} if title else {}
    path.write_text(render_report(tables, footer=footer, **kwargs))
    return path
