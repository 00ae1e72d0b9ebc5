"""MCWT / MCP / TSF / CFR, run comparison and report serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

from .domain import ChargeOutcome

METRICS = ("mcwt", "mcp", "tsf", "cfr")
LOWER_IS_BETTER = {"mcwt": True, "mcp": True, "tsf": False, "cfr": True}
CSV_HEADER = ["scope", "mcwt", "mcp", "tsf", "cfr", "n_accepted", "n_success"]


@dataclass
class MetricsReport:
    mcwt: float
    mcp: float
    tsf: float
    cfr: float
    n_accepted: int
    n_success: int
    per_day: List[dict] = field(default_factory=list)
    empty: bool = False

    def as_dict(self) -> dict:
        return {"mcwt": self.mcwt, "mcp": self.mcp, "tsf": self.tsf, "cfr": self.cfr,
                "n_accepted": self.n_accepted, "n_success": self.n_success,
                "per_day": [dict(d) for d in self.per_day]}


def compute_metrics(outcomes: Sequence[ChargeOutcome], n_days: int) -> MetricsReport:
    """Metrics over accepted requests; an empty accepted set yields zeros and ``empty=True``.

    MCP is 0.0 when nothing succeeded, so that reports stay NaN-free.
    """
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    accepted = [o for o in outcomes if o.accepted]
    success = [o for o in accepted if o.success]
    na, ns = len(accepted), len(success)
    if na == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0, 0, empty=True)
    # math.fsum keeps the result independent of outcome order
    mcwt = math.fsum(o.cwt for o in accepted) / na
    mcp = math.fsum(o.cp for o in success) / ns if ns else 0.0
    tsf = math.fsum((o.reference_cp - o.cp) * o.energy for o in success) / n_days
    cfr = (na - ns) / na
    return MetricsReport(mcwt, mcp, tsf, cfr, na, ns)


def report_for_days(per_day: Sequence[Sequence[ChargeOutcome]]) -> MetricsReport:
    flat = [o for day in per_day for o in day]
    rep = compute_metrics(flat, max(1, len(per_day)))
    for i, day in enumerate(per_day):
        d = compute_metrics(day, 1)
        row = {"day": i}
        row.update({k: v for k, v in d.as_dict().items() if k != "per_day"})
        rep.per_day.append(row)
    return rep


def compare(reports: Mapping[str, MetricsReport], reference: Optional[str] = None) -> List[dict]:
    """One row per run with values, per-metric rank (1 = best), best flags and % deltas."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    names = list(reports)
    ref = reference or names[0]
    if ref not in reports:
        raise KeyError(f"unknown reference {ref!r}")
    rows = []
    for name in names:
        rows.append({"name": name, **{m: getattr(reports[name], m) for m in METRICS}})
    for m in METRICS:
        sign = 1.0 if LOWER_IS_BETTER[m] else -1.0
        vals = [sign * r[m] for r in rows]
        best = min(vals)
        for r, v in zip(rows, vals):
            r[f"{m}_rank"] = 1 + sum(1 for w in vals if w < v)
            r[f"{m}_best"] = v == best
            base = getattr(reports[ref], m)
            if base == 0:
                r[f"{m}_delta_pct"] = 0.0 if r[m] == 0 else None
            else:
                r[f"{m}_delta_pct"] = (r[m] - base) / abs(base) * 100.0
    return rows


COMPARE_COLUMNS = ["name"] + [c for m in METRICS for c in (m, f"{m}_rank", f"{m}_best", f"{m}_delta_pct")]


def format_table(rows: List[dict]) -> str:
    lines = [f"{'name':<16}" + "".join(f"{m.upper():>22}" for m in METRICS)]
    for r in rows:
        cells = []
        for m in METRICS:
            d = r[f"{m}_delta_pct"]
            delta = "   n/a" if d is None else f"{d:+6.1f}%"
            star = "*" if r[f"{m}_best"] else " "
            cells.append(f"{r[m]:>12.4f}{star} ({delta})")
        lines.append(f"{r['name']:<16}" + "".join(f"{c:>22}" for c in cells))
    return "\n".join(lines)


def _check_finite(report: MetricsReport):
    for m in METRICS:
        v = getattr(report, m)
        if not math.isfinite(v):
            raise ValueError(f"refusing to write non-finite {m}={v}")
    for row in report.per_day:
        for m in METRICS:
            if not math.isfinite(row[m]):
                raise ValueError(f"refusing to write non-finite {m} for day {row.get('day')}")


def emit(report: MetricsReport, path, fmt: str = "json") -> None:
    _check_finite(report)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            w.writerow(["all", repr(report.mcwt), repr(report.mcp), repr(report.tsf), repr(report.cfr),
                        report.n_accepted, report.n_success])
            for row in report.per_day:
                w.writerow([f"day{row['day']}", repr(row["mcwt"]), repr(row["mcp"]), repr(row["tsf"]),
                            repr(row["cfr"]), row["n_accepted"], row["n_success"]])
    else:
        raise ValueError(f"unknown format {fmt!r}; expected json or csv")


def load_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return MetricsReport(doc["mcwt"], doc["mcp"], doc["tsf"], doc["cfr"], doc["n_accepted"],
                         doc["n_success"], list(doc.get("per_day", [])), doc["n_accepted"] == 0)


def write_compare_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in COMPARE_COLUMNS})
