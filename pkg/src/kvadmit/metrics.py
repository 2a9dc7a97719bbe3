"""Trace records, run summaries, and diff-stable text export.

All floats are written with 6 significant digits. Trace records are quantized
to that precision when they are created, so export followed by import gives
back identical records.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

TRACE_HEADER = (
    "time", "usage", "hit_rate", "window", "active", "pending",
    "decoded_cum", "recompute_cum", "transfers",
)


class ExportError(OSError):
    pass


class MissingBaseline(KeyError):
    pass


def sig6(x: float) -> float:
    return float(f"{x:.6g}")


def fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isinf(x) or math.isnan(x):
            return str(x)
        return f"{x:.6g}"
    return str(x)


@dataclass(frozen=True)
class TraceRecord:
    time: float
    usage: float
    hit_rate: float
    window: float
    active: int
    pending: int
    decoded_cum: int
    recompute_cum: int
    transfers: int

    @classmethod
    def make(cls, time, usage, hit_rate, window, active, pending,
             decoded_cum, recompute_cum, transfers) -> "TraceRecord":
        return cls(sig6(time), sig6(usage), sig6(hit_rate), sig6(window),
                   int(active), int(pending), int(decoded_cum),
                   int(recompute_cum), int(transfers))


def _open(path, mode):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise ExportError(f"cannot open {path}: {exc.strerror or exc}") from exc


def export_trace(trace: Sequence[TraceRecord], path) -> None:
    with _open(path, "w") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for rec in trace:
            fh.write(",".join(fmt(getattr(rec, k)) for k in TRACE_HEADER) + "\n")


def import_trace(path) -> list[TraceRecord]:
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {header}")
        out = []
        for row in reader:
            t, u, h, w, *ints = row
            out.append(TraceRecord(float(t), float(u), float(h), float(w),
                                   *(int(v) for v in ints)))
        return out


def export_series(trace: Sequence[TraceRecord], directory) -> list[Path]:
    """One two-column file per plotted series."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("usage", "hit_rate", "window", "active"):
        path = directory / f"{name}.csv"
        with _open(path, "w") as fh:
            fh.write(f"time,{name}\n")
            for rec in trace:
                fh.write(f"{fmt(rec.time)},{fmt(getattr(rec, name))}\n")
        written.append(path)
    return written


@dataclass
class Summary:
    name: str
    policy: str
    seed: int
    agents: int
    makespan: float
    throughput: float
    mean_hit_rate: float
    recompute_fraction: float
    recompute_tokens: int
    evicted_tokens: int
    decoded_tokens: int
    warmup_time: float
    middle_time: float
    cooldown_time: float
    middle_fraction: float
    warmup_hit_rate: float
    middle_hit_rate: float
    cooldown_hit_rate: float
    middle_usage: float
    prefill_fresh: float
    prefill_recompute: float
    decode: float
    transfer: float
    tool_wait: float
    idle: float
    stream_hash: str

    def as_dict(self) -> dict:
        return asdict(self)


_SUMMARY_TYPES = {f.name: f.type for f in fields(Summary)}


def export_summary(summary: Summary, path) -> None:
    with _open(path, "w") as fh:
        for key, value in summary.as_dict().items():
            fh.write(f"{key} = {fmt(value)}\n")


def import_summary(path) -> Summary:
    values = {}
    with _open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition(" = ")
            if key not in _SUMMARY_TYPES:
                raise ValueError(f"{path}: unknown summary key {key!r}")
            kind = _SUMMARY_TYPES[key]
            if kind == "float":
                values[key] = float(raw)
            elif kind == "int":
                values[key] = int(raw)
            else:
                values[key] = raw
    return Summary(**values)


def _phase_mean(trace, phases, name, attr) -> float:
    for ph in phases:
        if ph.phase.value != name:
            continue
        vals = [getattr(r, attr) for r in trace if ph.start <= r.time < ph.end]
        if vals:
            return sum(vals) / len(vals)
    return float("nan")


def _phase_len(phases, name) -> float:
    return sum(ph.end - ph.start for ph in phases if ph.phase.value == name)


def summarize(result, phases, name: Optional[str] = None) -> Summary:
    """Collapse a finished run and its phase labels into one Summary."""
    ledger = result.ledger
    busy = sum(v for k, v in ledger.items() if k != "idle")
    makespan = result.makespan
    prompt = sum(a.stats.prompt_tokens for a in result.agents)
    hits = sum(a.stats.hit_tokens for a in result.agents)
    recompute_frac = ledger["prefill_recompute"] / busy if busy > 0 else 0.0
    middle = _phase_len(phases, "middle")
    return Summary(
        name=name or result.label,
        policy=result.label,
        seed=result.seed,
        agents=len(result.agents),
        makespan=makespan,
        throughput=result.decoded_tokens / makespan if makespan > 0 else 0.0,
        mean_hit_rate=hits / prompt if prompt else 1.0,
        recompute_fraction=min(max(recompute_frac, 0.0), 1.0),
        recompute_tokens=result.recompute_tokens,
        evicted_tokens=result.evicted_tokens,
        decoded_tokens=result.decoded_tokens,
        warmup_time=_phase_len(phases, "warmup"),
        middle_time=middle,
        cooldown_time=_phase_len(phases, "cooldown"),
        middle_fraction=middle / makespan if makespan > 0 else 0.0,
        warmup_hit_rate=_phase_mean(result.trace, phases, "warmup", "hit_rate"),
        middle_hit_rate=_phase_mean(result.trace, phases, "middle", "hit_rate"),
        cooldown_hit_rate=_phase_mean(result.trace, phases, "cooldown", "hit_rate"),
        middle_usage=_phase_mean(result.trace, phases, "middle", "usage"),
        prefill_fresh=ledger["prefill_fresh"],
        prefill_recompute=ledger["prefill_recompute"],
        decode=ledger["decode"],
        transfer=ledger["transfer"],
        tool_wait=ledger["tool_wait"],
        idle=ledger["idle"],
        stream_hash=result.stream_hash,
    )


def speedup(baseline: Summary, run: Summary) -> float:
    if run.makespan == 0:
        return 1.0 if baseline.makespan == 0 else math.inf
    return baseline.makespan / run.makespan


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    makespan: float
    speedup: float
    hit_rate: float
    hit_rate_delta: float
    recompute_fraction: float


def compare(runs: Mapping[str, Summary], baseline_name: str) -> list[ComparisonRow]:
    if baseline_name not in runs:
        raise MissingBaseline(baseline_name)
    # quantize as export does, so a table rebuilt from summary files matches
    runs = {name: _quantized(s) for name, s in runs.items()}
    base = runs[baseline_name]
    return [
        ComparisonRow(
            name=name,
            makespan=s.makespan,
            speedup=speedup(base, s),
            hit_rate=s.mean_hit_rate,
            hit_rate_delta=s.mean_hit_rate - base.mean_hit_rate,
            recompute_fraction=s.recompute_fraction,
        )
        for name, s in runs.items()
    ]


def _quantized(s: Summary) -> Summary:
    values = {k: sig6(v) if isinstance(v, float) and math.isfinite(v) else v
              for k, v in s.as_dict().items()}
    return Summary(**values)


def render_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    rows = [list(map(str, r)) for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w)
                               for i, (c, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"


def render_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Policies as columns, metrics as rows (end-to-end latency table layout)."""
    header = ["metric", *(r.name for r in rows)]
    body = [
        ["makespan_s", *(f"{r.makespan:.2f}" for r in rows)],
        ["speedup", *(f"{r.speedup:.2f}x" for r in rows)],
        ["hit_rate_pct", *(f"{100 * r.hit_rate:.2f}" for r in rows)],
        ["hit_rate_delta_pp", *(f"{100 * r.hit_rate_delta:+.2f}" for r in rows)],
        ["recompute_frac", *(f"{r.recompute_fraction:.3f}" for r in rows)],
    ]
    return render_table(header, body)


PHASES_HEADER = ("phase", "start", "end")
DECISIONS_HEADER = ("tick", "time", "usage", "hit_rate", "window_before", "window_after",
                    "admitted", "paused", "resumed")


def export_phases(labels, path) -> None:
    with _open(path, "w") as fh:
        fh.write(",".join(PHASES_HEADER) + "\n")
        for ph in labels:
            fh.write(f"{ph.phase.value},{fmt(float(ph.start))},{fmt(float(ph.end))}\n")


def export_decisions(decisions, path) -> None:
    """Controller log: one line per control tick."""
    with _open(path, "w") as fh:
        fh.write(",".join(DECISIONS_HEADER) + "\n")
        for d in decisions:
            fh.write(",".join(fmt(getattr(d, k)) for k in DECISIONS_HEADER) + "\n")
