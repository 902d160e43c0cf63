"""4x4 row-column fully-connected chip fabric and its collectives.

Every chip links directly to the other chips of its row and of its column,
so each broadcast/reduce/scatter/gather inside a group is one step.  Values
are computed exactly; the trace only accounts bytes and time.
"""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class ChipCoord:
    row: int
    col: int

    @property
    def id(self) -> int:
        return 4 * self.row + self.col

    @classmethod
    def from_id(cls, i: int, cols: int = 4) -> "ChipCoord":
        return cls(i // cols, i % cols)


@dataclass(frozen=True)
class LinkModel:
    latency_ns: float = 100.0
    bandwidth: float = 128e9  # bytes/s per link
    granularity: int = 1

    def __post_init__(self):
        if self.latency_ns < 0 or not self.bandwidth > 0 or self.granularity < 1:
            raise ValueError("invalid link model")

    def payload_bytes(self, nbytes: int) -> int:
        g = self.granularity
        return -(-int(nbytes) // g) * g

    def time_ns(self, steps: int, nbytes: int) -> float:
        return steps * self.latency_ns + nbytes / self.bandwidth * 1e9


@dataclass(frozen=True)
class CollectiveTrace:
    op: str
    group: str
    bytes: int  # per link, summed over steps
    steps: int
    nanoseconds: float


class FabricError(ValueError):
    pass


Op = Callable[[np.ndarray, np.ndarray], np.ndarray]


def fold(payloads: Sequence[np.ndarray], op: Op = np.add) -> np.ndarray:
    acc = np.array(payloads[0], copy=True)
    for p in payloads[1:]:
        acc = op(acc, p)
    return acc


class Fabric:
    def __init__(self, link: LinkModel | None = None, rows: int = 4, cols: int = 4):
        self.link = link or LinkModel()
        self.rows = rows
        self.cols = cols
        self.traces: list[CollectiveTrace] = []

    @property
    def n_chips(self) -> int:
        return self.rows * self.cols

    def chips(self) -> list[ChipCoord]:
        return [ChipCoord(r, c) for r in range(self.rows) for c in range(self.cols)]

    def _record(self, op: str, group: str, nbytes: int, steps: int) -> CollectiveTrace:
        b = self.link.payload_bytes(nbytes) * steps
        t = CollectiveTrace(op, group, b, steps, self.link.time_ns(steps, b))
        self.traces.append(t)
        return t

    @staticmethod
    def _check(payloads, n: int):
        if len(payloads) != n:
            raise FabricError(f"expected {n} payloads, got {len(payloads)}")
        shapes = {np.shape(p) for p in payloads}
        if len(shapes) != 1:
            raise FabricError(f"payload shapes differ: {sorted(shapes)}")

    def _in_row(self, row: int, chip: ChipCoord):
        if chip.row != row or not 0 <= chip.col < self.cols:
            raise FabricError(f"{chip} is not in row {row}")

    def _in_col(self, col: int, chip: ChipCoord):
        if chip.col != col or not 0 <= chip.row < self.rows:
            raise FabricError(f"{chip} is not in column {col}")

    # -- row group -------------------------------------------------------

    def row_broadcast(self, row: int, src: ChipCoord, payload) -> list:
        self._in_row(row, src)
        payload = np.asarray(payload)
        self._record("row_broadcast", f"row {row}", payload.nbytes, 1)
        return [payload.copy() for _ in range(self.cols)]

    def row_reduce(self, row: int, dst: ChipCoord, payloads, op: Op = np.add) -> np.ndarray:
        self._in_row(row, dst)
        self._check(payloads, self.cols)
        self._record("row_reduce", f"row {row}", np.asarray(payloads[0]).nbytes, 1)
        return fold(payloads, op)

    def row_allreduce(self, row: int, payloads, op: Op = np.add) -> list:
        self._check(payloads, self.cols)
        self._record("row_allreduce", f"row {row}", np.asarray(payloads[0]).nbytes, 2)
        out = fold(payloads, op)
        return [out.copy() for _ in range(self.cols)]

    # -- column group ----------------------------------------------------

    def col_scatter(self, col: int, src: ChipCoord, payload) -> list:
        self._in_col(col, src)
        payload = np.asarray(payload)
        n = payload.shape[-1]
        if n % self.rows:
            raise FabricError(f"cannot scatter length {n} into {self.rows} equal parts")
        parts = np.split(payload, self.rows, axis=-1)
        self._record("col_scatter", f"col {col}", parts[0].nbytes, 1)
        return [p.copy() for p in parts]

    def col_broadcast(self, col: int, src: ChipCoord, payload) -> list:
        self._in_col(col, src)
        payload = np.asarray(payload)
        self._record("col_broadcast", f"col {col}", payload.nbytes, 1)
        return [payload.copy() for _ in range(self.rows)]

    def col_reduce(self, col: int, dst: ChipCoord, payloads, op: Op = np.add) -> np.ndarray:
        self._in_col(col, dst)
        self._check(payloads, self.rows)
        self._record("col_reduce", f"col {col}", np.asarray(payloads[0]).nbytes, 1)
        return fold(payloads, op)

    def col_allreduce(self, col: int, payloads, op: Op = np.add) -> list:
        self._check(payloads, self.rows)
        self._record("col_allreduce", f"col {col}", np.asarray(payloads[0]).nbytes, 2)
        out = fold(payloads, op)
        return [out.copy() for _ in range(self.rows)]

    def col_gather(self, col: int, dst: ChipCoord, parts) -> np.ndarray:
        self._in_col(col, dst)
        self._check(parts, self.rows)
        self._record("col_gather", f"col {col}", np.asarray(parts[0]).nbytes, 1)
        return np.concatenate(parts, axis=-1)

    def col_allgather(self, col: int, parts) -> list:
        self._check(parts, self.rows)
        self._record("col_allgather", f"col {col}", np.asarray(parts[0]).nbytes, 1)
        out = np.concatenate(parts, axis=-1)
        return [out.copy() for _ in range(self.rows)]

    # -- whole grid ------------------------------------------------------

    def all_reduce(self, payloads, op: Op = np.add) -> list:
        """Column reduce to row 0, row all-reduce, column broadcast: 4 steps.

        Payloads are indexed by chip id.  The combination order is fixed
        (rows within each column, then columns), so results are reproducible.
        """
        self._check(payloads, self.n_chips)
        self._record("all_reduce", "all", np.asarray(payloads[0]).nbytes, 4)
        col_sums = [fold([payloads[r * self.cols + c] for r in range(self.rows)], op)
                    for c in range(self.cols)]
        out = fold(col_sums, op)
        return [out.copy() for _ in range(self.n_chips)]


TRACE_FIELDS = [f.name for f in fields(CollectiveTrace)]


def traces_to_csv(traces: Sequence[CollectiveTrace], fh=None) -> str | None:
    """Write traces as CSV (op, group, bytes, steps, nanoseconds)."""
    out = fh or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for t in traces:
        w.writerow(astuple(t))
    return out.getvalue() if fh is None else None


def total_bytes(traces: Sequence[CollectiveTrace]) -> int:
    return sum(t.bytes for t in traces)
