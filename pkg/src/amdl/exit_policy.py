"""Per-domain exit selection under an accuracy-drop threshold.

For each domain the baseline is the best accuracy of any row at the last
exit. Candidates are ordered by parameter cost (ascending), then accuracy
(descending), exit index and configuration name; the first one whose drop
from the baseline is at most ``T`` points wins.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable, Sequence

_TOL = 1e-9
REPORT_COLUMNS = ("domain", "config", "exit", "accuracy", "baseline", "loss", "params", "param_fraction", "difficulty")
TABLE2_DOMAINS = ("ImNet", "Airc", "C100", "DPed", "DTD", "GTSR", "Flwr", "OGlt", "SVHN", "UCF")


@dataclass(frozen=True)
class AccuracyRow:
    config: str
    exit: int
    accuracies: dict[str, float]  # percent
    cost: float
    params: int | None = None


class AccuracyTable:
    """Accuracies (percent) keyed by (configuration, exit)."""

    def __init__(self, rows: Iterable[AccuracyRow], num_exits: int | None = None, order: Sequence[str] = ()):
        self.rows = list(rows)
        self.order = tuple(order)
        if not self.rows:
            raise ValueError("empty accuracy table")
        self.num_exits = num_exits or max(r.exit for r in self.rows)
        for r in self.rows:
            if not 1 <= r.exit <= self.num_exits:
                raise ValueError(f"exit {r.exit} outside 1..{self.num_exits}")
            for d, a in r.accuracies.items():
                if not 0.0 <= a <= 100.0:
                    raise ValueError(f"accuracy {a} for {d} outside [0, 100]")

    def domains(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            for d in r.accuracies:
                seen.setdefault(d)
        ranked = [d for d in self.order if d in seen]
        return ranked + [d for d in seen if d not in ranked]

    def entries(self, domain: str) -> list[tuple[AccuracyRow, float]]:
        return [(r, r.accuracies[domain]) for r in self.rows if domain in r.accuracies]

    @classmethod
    def from_records(cls, records: Iterable[dict], num_exits: int | None = None) -> "AccuracyTable":
        """Build from ``{domain, config, exit, accuracy[, params]}`` records.

        Cost is the parameter count when every record has one, else the exit index.
        """
        records = list(records)
        have_params = all(rec.get("params") not in (None, "") for rec in records)
        grouped: dict[tuple[str, int], dict] = {}
        for rec in records:
            key = (rec["config"], int(rec["exit"]))
            entry = grouped.setdefault(key, {"acc": {}, "params": {}})
            entry["acc"][rec["domain"]] = float(rec["accuracy"])
            if have_params:
                entry["params"][rec["domain"]] = int(rec["params"])
        rows = []
        for (config, ex), entry in grouped.items():
            # one row per (config, exit, domain) when costs differ by domain
            if have_params:
                for d, acc in entry["acc"].items():
                    p = entry["params"][d]
                    rows.append(AccuracyRow(config, ex, {d: acc}, float(p), p))
            else:
                rows.append(AccuracyRow(config, ex, entry["acc"], float(ex)))
        return cls(rows, num_exits)


def load_table2() -> AccuracyTable:
    """The bundled ten-domain per-exit accuracy table; cost is the exit index.

    Reference rows without an exit (fine-tuning and the two reference
    adapter baselines) and the summary row are left out of the pool.
    """
    rows = []
    for rec in table2_records():
        if not rec["exit"]:
            continue
        acc = {d: float(rec[d]) for d in TABLE2_DOMAINS if rec[d] != "-"}
        rows.append(AccuracyRow(rec["method"], int(rec["exit"]), acc, float(rec["exit"])))
    return AccuracyTable(rows, 3, order=TABLE2_DOMAINS)


def table2_records() -> list[dict]:
    text = resources.files("amdl.resources").joinpath("table2.csv").read_text()
    return list(csv.DictReader(io.StringIO(text)))


@dataclass
class SelectionResult:
    domain: str
    config: str
    exit: int
    accuracy: float
    baseline: float
    loss: float
    cost: float
    params: int | None = None
    full_params: int | None = None
    difficulty: str = ""

    @property
    def param_fraction(self) -> float | None:
        if self.params is None or not self.full_params:
            return None
        return self.params / self.full_params


def difficulty_class(result: SelectionResult, num_exits: int = 3) -> str:
    if result.exit == 1:
        return "easy"
    if result.exit >= num_exits:
        return "challenging"
    return "intermediate"


def select_exit(table: AccuracyTable, domain: str, T: float) -> SelectionResult:
    """Cheapest (configuration, exit) within ``T`` points of the domain's baseline."""
    if not 0.0 <= T <= 100.0:
        raise ValueError("T must lie in [0, 100]")
    entries = table.entries(domain)
    if not entries:
        raise KeyError(f"no rows for domain {domain!r}")
    K = table.num_exits
    last = [(r, a) for r, a in entries if r.exit == K]
    if not last:
        raise ValueError(f"domain {domain!r} has no exit-{K} row")
    base_row, baseline = max(last, key=lambda ra: ra[1])
    ordered = sorted(entries, key=lambda ra: (ra[0].cost, -ra[1], ra[0].exit, ra[0].config))
    for row, acc in ordered:
        if baseline - acc <= T + _TOL:
            break
    full = next((r.params for r, _ in last if r.config == row.config), base_row.params)
    res = SelectionResult(
        domain=domain,
        config=row.config,
        exit=row.exit,
        accuracy=acc,
        baseline=baseline,
        loss=max(0.0, round(baseline - acc, 10)),
        cost=row.cost,
        params=row.params,
        full_params=full,
    )
    res.difficulty = difficulty_class(res, K)
    return res


def best_row(
    table: AccuracyTable | None = None,
    T: float = 3.5,
    pinned: dict[str, tuple[str, int]] | None = None,
) -> tuple[list[SelectionResult], float]:
    """Selections for every domain and their mean accuracy.

    ``pinned`` maps a domain to a fixed (configuration, exit); by default
    ImageNet uses the unadapted base network, as in the bundled table.
    """
    if table is None:
        table = load_table2()
        if pinned is None:
            pinned = {"ImNet": ("No-adp", 3)}
    pinned = pinned or {}
    results = []
    for domain in table.domains():
        if domain in pinned:
            config, ex = pinned[domain]
            row, acc = next((r, a) for r, a in table.entries(domain) if (r.config, r.exit) == (config, ex))
            res = SelectionResult(domain, config, ex, acc, acc, 0.0, row.cost, row.params, row.params)
            res.difficulty = difficulty_class(res, table.num_exits)
            results.append(res)
        else:
            results.append(select_exit(table, domain, T))
    mean = sum(r.accuracy for r in results) / len(results)
    return results, mean


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    rows: list[dict]
    totals: dict = field(default_factory=dict)
    threshold: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"threshold": self.threshold, "domains": self.rows, "totals": self.totals}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, csv_path=None, json_path=None) -> None:
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                fh.write(self.to_csv())
        if json_path:
            with open(json_path, "w") as fh:
                fh.write(self.to_json())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report(results: Sequence[SelectionResult], ledger=None, T: float | None = None) -> Report:
    """Tabulate selections with their parameter cost.

    When ``ledger`` (a ParamLedger) is given it supplies parameter counts
    for results that carry none: exit ``k`` costs ``ledger.exit_params[k-1]``.
    """
    rows = []
    for r in results:
        params, full = r.params, r.full_params
        if params is None and ledger is not None:
            params, full = ledger.exit_params[r.exit - 1], ledger.exit_params[-1]
        fraction = params / full if (params is not None and full) else None
        rows.append(
            {
                "domain": r.domain,
                "config": r.config,
                "exit": r.exit,
                "accuracy": float(r.accuracy),
                "baseline": float(r.baseline),
                "loss": float(r.loss),
                "params": params,
                "param_fraction": fraction,
                "difficulty": r.difficulty,
            }
        )
    counts = [row["params"] for row in rows if row["params"] is not None]
    totals = {
        "num_domains": len(rows),
        "mean_accuracy": sum(row["accuracy"] for row in rows) / len(rows) if rows else math.nan,
        "total_params": sum(counts) if len(counts) == len(rows) else None,
    }
    return Report(rows, totals, T)


def parse_report_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = dict(rec)
        row["exit"] = int(row["exit"])
        for k in ("accuracy", "baseline", "loss"):
            row[k] = float(row[k])
        row["params"] = int(row["params"]) if row["params"] else None
        row["param_fraction"] = float(row["param_fraction"]) if row["param_fraction"] else None
        out.append(row)
    return out
