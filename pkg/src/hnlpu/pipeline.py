"""Six-stage-per-layer pipeline with continuous batching.

The pipeline is ``stages_per_layer * layers`` equal-latency stages deep and
accepts one token per stage period.  Prefill tokens of a sequence have no
mutual dependencies; each decode token waits for the previous token of the
same sequence to leave the last stage.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PipelineConfig:
    stages_per_layer: int = 6
    layers: int = 36
    stage_latency: int = 4000  # cycles
    clock: float = 1e9         # Hz
    max_batch: int | None = None  # sequences admitted at once; defaults to slots

    def __post_init__(self):
        if min(self.stages_per_layer, self.layers, self.stage_latency) < 1 or not self.clock > 0:
            raise ValueError("pipeline parameters must be positive")
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("max_batch must be positive")

    @property
    def slots(self) -> int:
        return self.stages_per_layer * self.layers

    @property
    def batch_limit(self) -> int:
        return self.max_batch or self.slots

    @property
    def stage_seconds(self) -> float:
        return self.stage_latency / self.clock

    @property
    def token_latency(self) -> float:
        """Seconds for one token to traverse every stage."""
        return self.slots * self.stage_seconds


def steady_state_throughput(cfg: PipelineConfig, occupancy: int) -> float:
    if not 1 <= occupancy <= cfg.slots:
        raise ValueError(f"occupancy must be in 1..{cfg.slots}")
    return occupancy / cfg.token_latency


@dataclass(frozen=True)
class SequenceSpec:
    prompt_len: int
    gen_len: int
    arrival: float = 0.0  # seconds

    def __post_init__(self):
        if self.prompt_len < 0 or self.gen_len < 0 or self.arrival < 0:
            raise ValueError("sequence lengths and arrival must be >= 0")


@dataclass
class Workload:
    sequences: list

    @classmethod
    def decode_only(cls, n: int, gen_len: int, prompt_len: int = 0) -> "Workload":
        return cls([SequenceSpec(prompt_len, gen_len) for _ in range(n)])


WORKLOAD_FIELDS = ["prompt_len", "gen_len", "arrival"]


def load_workload(path) -> Workload:
    """CSV with header ``prompt_len,gen_len,arrival``; one sequence per row."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    seqs = []
    for i, row in enumerate(rows, start=2):
        if set(row) != set(WORKLOAD_FIELDS):
            raise ValueError(f"line {i}: expected columns {WORKLOAD_FIELDS}")
        seqs.append(SequenceSpec(int(row["prompt_len"]), int(row["gen_len"]), float(row["arrival"])))
    return Workload(seqs)


def save_workload(w: Workload, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(WORKLOAD_FIELDS)
        for s in w.sequences:
            wr.writerow([s.prompt_len, s.gen_len, s.arrival])


@dataclass
class PipelineReport:
    tokens: int
    makespan: float
    throughput: float
    mean_token_latency: float
    p95_token_latency: float
    mean_sequence_latency: float
    max_inflight: int
    stage_utilization: list
    occupancy: list = field(default_factory=list)  # (time s, tokens in flight, active sequences)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("occupancy")
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def occupancy_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["time_s", "inflight", "active_sequences"])
        w.writerows(self.occupancy)
        return out.getvalue()


class _Seq:
    __slots__ = ("spec", "prefill_left", "prefill_pending", "decode_left", "admitted", "finished")

    def __init__(self, spec: SequenceSpec):
        self.spec = spec
        self.prefill_left = spec.prompt_len      # not yet injected
        self.prefill_pending = spec.prompt_len   # not yet completed
        self.decode_left = spec.gen_len
        self.admitted = None
        self.finished = None


def simulate(cfg: PipelineConfig, workload: Workload) -> PipelineReport:
    """Event-driven simulation in units of one stage period ("tick")."""
    S = cfg.slots
    T = cfg.stage_seconds
    seqs = [_Seq(s) for s in workload.sequences]
    arrivals = deque(sorted(range(len(seqs)), key=lambda i: (seqs[i].spec.arrival, i)))
    arrival_tick = [math.ceil(s.spec.arrival / T - 1e-9) for s in seqs]
    total = sum(s.spec.prompt_len + s.spec.gen_len for s in seqs)
    if total == 0:
        return PipelineReport(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, [0.0] * cfg.stages_per_layer, [])

    ready: list = []        # heap of (ready tick, seq id)
    inflight: deque = deque()  # (completion tick, seq id, ready tick)
    active = 0
    latencies = []
    occupancy = []
    done = 0
    t = 0
    first_tick = None
    max_inflight = 0

    def admit(now):
        nonlocal active
        while arrivals and arrival_tick[arrivals[0]] <= now and active < cfg.batch_limit:
            i = arrivals.popleft()
            s = seqs[i]
            s.admitted = now
            if s.spec.prompt_len + s.spec.gen_len == 0:
                s.finished = now
                continue
            active += 1
            heapq.heappush(ready, (now, i))

    last_occ = None
    while done < total:
        while inflight and inflight[0][0] == t:
            _, i, rt = inflight.popleft()
            latencies.append(t - rt)
            done += 1
            s = seqs[i]
            if s.prefill_pending > 0:
                s.prefill_pending -= 1
                if s.prefill_pending == 0 and s.decode_left > 0:
                    heapq.heappush(ready, (t, i))
            else:
                s.decode_left -= 1
                if s.decode_left > 0:
                    heapq.heappush(ready, (t, i))
            if s.prefill_pending == 0 and s.decode_left == 0:
                s.finished = t
                active -= 1
        admit(t)
        if ready:
            rt, i = heapq.heappop(ready)
            s = seqs[i]
            if s.prefill_left > 0:
                s.prefill_left -= 1
                if s.prefill_left > 0:
                    heapq.heappush(ready, (rt, i))
            inflight.append((t + S, i, rt))
            if first_tick is None:
                first_tick = t
        occ = (len(inflight), active)
        if occ != last_occ:
            occupancy.append((t * T, occ[0], occ[1]))
            last_occ = occ
        max_inflight = max(max_inflight, len(inflight))
        if ready:
            t += 1
        else:
            nxt = [inflight[0][0]] if inflight else []
            if arrivals:
                nxt.append(max(arrival_tick[arrivals[0]], t + 1))
            if not nxt:
                break
            t = min(nxt)

    start = min(arrival_tick[i] for i in range(len(seqs)))
    makespan = (t - start) * T
    lat = np.array(latencies, dtype=np.float64) * T
    seq_lat = [(s.finished - arrival_tick[i]) * T for i, s in enumerate(seqs) if s.finished is not None]
    thr = done / makespan if makespan > 0 else 0.0
    util = done / (t - start) if t > start else 0.0
    return PipelineReport(
        tokens=done,
        makespan=makespan,
        throughput=thr,
        mean_token_latency=float(lat.mean()),
        p95_token_latency=float(np.percentile(lat, 95)),
        mean_sequence_latency=float(np.mean(seq_lat)) if seq_lat else 0.0,
        max_inflight=max_inflight,
        stage_utilization=[util] * cfg.stages_per_layer,
        occupancy=occupancy,
    )


def write_report(report: PipelineReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pipeline_report.json").write_text(report.to_json())
    (out / "occupancy.csv").write_text(report.occupancy_csv())
