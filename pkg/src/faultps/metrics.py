"""Run measurements: accuracy/loss trajectories, gradient counters, a worker
busy-time proxy for utilization, object-store memory samples, and CSV export.

Utilization is instrumented, not OS-sampled: workers report the spans they
spend inside gradient computation, and busy fraction over a window is
busy-span overlap divided by (num_workers * window length). That keeps the
metric deterministic and reproducible in CI.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

CSV_COLUMNS = [
    "wall_time_s", "sim_step", "strategy", "run_id", "accuracy", "loss",
    "grads_produced", "grads_applied", "worker_busy_fraction",
    "objstore_bytes", "ps_alive",
]


@dataclass(frozen=True)
class MetricRecord:
    wall_time_s: float
    sim_step: int
    strategy: str
    run_id: str
    accuracy: float
    loss: float
    grads_produced: int
    grads_applied: int
    worker_busy_fraction: float
    objstore_bytes: int
    ps_alive: bool


class MetricLog:
    def __init__(self, strategy: str, run_id: str, num_workers: int,
                 clock: Callable[[], float], stored_bytes: Callable[[], int] = lambda: 0):
        self.strategy = strategy
        self.run_id = run_id
        self.num_workers = num_workers
        self.clock = clock
        self.stored_bytes = stored_bytes
        self.records: List[MetricRecord] = []
        self.grads_produced = 0
        self.grads_applied = 0
        self.accuracy = 0.0
        self.loss = float("nan")
        self.sim_step = 0
        self.ps_alive = True
        self._busy: List[Tuple[int, float, float]] = []
        self._open: dict = {}
        self._last_record_t: Optional[float] = None

    # -- feed ---------------------------------------------------------------

    def note_busy(self, worker_id: int, start: float, end: float) -> None:
        if end > start:
            self._busy.append((worker_id, start, end))

    def begin_busy(self, worker_id: int) -> None:
        """Mark the start of a gradient computation (so samples see in-flight work)."""
        self._open[worker_id] = self.clock()

    def end_busy(self, worker_id: int) -> None:
        start = self._open.pop(worker_id, None)
        if start is not None:
            self.note_busy(worker_id, start, self.clock())

    def inc_produced(self, n: int = 1) -> None:
        self.grads_produced += n

    def inc_applied(self, n: int = 1) -> None:
        self.grads_applied += n

    def set_eval(self, accuracy: float, loss: float) -> None:
        self.accuracy = accuracy
        self.loss = loss

    def set_step(self, step: int) -> None:
        self.sim_step = step

    # -- derived ------------------------------------------------------------

    def busy_fraction(self, start: float, end: float) -> float:
        if end <= start:
            raise ValueError("empty window")
        total = 0.0
        for _, s, e in self._busy:
            total += max(0.0, min(e, end) - max(s, start))
        for s in self._open.values():  # computations still in flight count too
            total += max(0.0, end - max(s, start))
        return total / (self.num_workers * (end - start))

    def sample(self) -> MetricRecord:
        """Append one record; the busy column covers the window since the last record."""
        now = self.clock()
        if self._last_record_t is None:
            busy = 0.0
            t = now
        else:
            # keep records strictly ordered even for same-instant events
            t = now if now > self._last_record_t else self._last_record_t + 1e-9
            window = t - self._last_record_t
            busy = self.busy_fraction(self._last_record_t, t) if window > 1e-12 else (
                self.records[-1].worker_busy_fraction if self.records else 0.0)
        rec = MetricRecord(t, self.sim_step, self.strategy, self.run_id,
                           self.accuracy, self.loss, self.grads_produced,
                           self.grads_applied, min(busy, 1.0),
                           self.stored_bytes(), self.ps_alive)
        if self.records:
            prev = self.records[-1]
            assert rec.grads_produced >= prev.grads_produced
            assert rec.grads_applied >= prev.grads_applied
        assert rec.grads_applied <= rec.grads_produced
        self._last_record_t = t
        self.records.append(rec)
        return rec

    def snapshot(self) -> List[MetricRecord]:
        return list(self.records)

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow([
                    repr(r.wall_time_s), r.sim_step, r.strategy, r.run_id,
                    repr(r.accuracy), repr(r.loss), r.grads_produced,
                    r.grads_applied, repr(r.worker_busy_fraction),
                    r.objstore_bytes, int(r.ps_alive),
                ])


def read_csv(path) -> List[dict]:
    """Parse a metrics CSV back into typed rows; raises on missing columns."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in CSV_COLUMNS:
            if col not in header:
                raise ValueError(f"schema mismatch: missing column {col!r}")
        rows = []
        for raw in reader:
            rows.append({
                "wall_time_s": float(raw["wall_time_s"]),
                "sim_step": int(raw["sim_step"]),
                "strategy": raw["strategy"],
                "run_id": raw["run_id"],
                "accuracy": float(raw["accuracy"]),
                "loss": float(raw["loss"]),
                "grads_produced": int(raw["grads_produced"]),
                "grads_applied": int(raw["grads_applied"]),
                "worker_busy_fraction": float(raw["worker_busy_fraction"]),
                "objstore_bytes": int(raw["objstore_bytes"]),
                "ps_alive": raw["ps_alive"] == "1",
            })
        return rows


def down_intervals(rows: List[dict]) -> List[Tuple[float, float]]:
    """PS-down [start, end) wall-time intervals visible in a metric log."""
    intervals = []
    down_since = None
    for r in rows:
        if not r["ps_alive"] and down_since is None:
            down_since = r["wall_time_s"]
        elif r["ps_alive"] and down_since is not None:
            intervals.append((down_since, r["wall_time_s"]))
            down_since = None
    if down_since is not None and rows:
        intervals.append((down_since, rows[-1]["wall_time_s"]))
    return intervals


class RunTrace:
    """Structured event log for failover/bookkeeping checks (not a deliverable metric)."""

    def __init__(self, clock: Callable[[], float]):
        self.clock = clock
        self.events: List[dict] = []
        self._seq = 0

    def emit(self, kind: str, **fields) -> None:
        self._seq += 1
        self.events.append({"seq": self._seq, "t": self.clock(), "kind": kind, **fields})

    def of_kind(self, kind: str) -> List[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def export_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.events:
                f.write(json.dumps(e) + "\n")
