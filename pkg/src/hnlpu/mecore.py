"""Metal-Embedding hardwired neurons.

A hardwired neuron (HN) groups its inputs into regions by weight value, counts
the set bits of each LSB-first input plane per region with fixed-width POPCNT
slices, and multiplies each count once by the region's constant.  Everything
here is exact integer arithmetic in ``scaled_int`` units (2 x weight value).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .numerics import (
    FP4_FLOAT,
    SCALED_INT,
    ZERO_CODE,
    IntActivationVector,
    canonical_codes,
    plane_matrix,
    plane_weight,
)

SLICE_WIDTH = 32
SLICE_BUDGET = 106
HN_TEXT_FORMAT = "hnlpu-hn/1"


class InfeasibleAllocation(ValueError):
    def __init__(self, needed: int, budget: int):
        self.needed = needed
        self.budget = budget
        self.shortfall = needed - budget
        super().__init__(f"needs {needed} POPCNT slices, budget is {budget} (short by {self.shortfall})")


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RegionPartition:
    n_inputs: int
    regions: dict  # canonical code -> sorted int64 index array, nonempty only

    def sizes(self) -> dict:
        return {c: len(ix) for c, ix in self.regions.items()}


def partition_weights(column) -> RegionPartition:
    codes = canonical_codes(column)
    if codes.ndim != 1 or len(codes) < 1:
        raise ValueError("partition_weights needs a non-empty 1-D code column")
    regions = {}
    for c in np.unique(codes):
        regions[int(c)] = np.flatnonzero(codes == c).astype(np.int64)
    return RegionPartition(len(codes), regions)


@dataclass(frozen=True)
class SliceAssignment:
    slice_width: int
    slice_budget: int
    slices: tuple  # (code, index array) per slice, in slice order

    @property
    def used(self) -> int:
        return len(self.slices)


def slices_needed(sizes, width: int) -> int:
    return sum(-(-int(s) // width) for s in sizes)


def allocate_slices(p: RegionPartition, width: int = SLICE_WIDTH, budget: int = SLICE_BUDGET) -> SliceAssignment:
    """Cut each region into ceil(|r|/width) slices, ascending code then index."""
    if width < 1 or budget < 1:
        raise ValueError("slice width and budget must be >= 1")
    needed = slices_needed(p.sizes().values(), width)
    if needed > budget:
        raise InfeasibleAllocation(needed, budget)
    slices = []
    for code in sorted(p.regions):
        ix = p.regions[code]
        for start in range(0, len(ix), width):
            slices.append((code, ix[start:start + width]))
    return SliceAssignment(width, budget, tuple(slices))


def max_slices_required(n: int, m: int, width: int) -> int:
    """Worst-case slice count over every partition of n inputs into <= m regions.

    With k nonempty regions the bound sum(ceil(s/w)) <= floor((n-k)/w) + k is
    reached by k-1 singletons plus one region holding the rest.
    """
    if n < 1 or not 1 <= m <= n or width < 1:
        raise ValueError("need n >= 1, 1 <= m <= n, width >= 1")
    return max((n - k) // width + k for k in range(1, m + 1))


@dataclass(frozen=True)
class HardwiredNeuron:
    codes: np.ndarray
    partition: RegionPartition
    slices: SliceAssignment
    weight_scale: float = 1.0

    def __post_init__(self):
        for code, ix in self.slices.slices:
            if code not in self.partition.regions or not np.isin(ix, self.partition.regions[code]).all():
                raise ValueError("slice map inconsistent with region partition")

    @property
    def n_inputs(self) -> int:
        return self.partition.n_inputs

    @cached_property
    def _gather(self):
        # zero-region slices occupy fabric but are never counted
        live = [(c, ix) for c, ix in self.slices.slices if c != ZERO_CODE]
        if not live:
            return None
        order = np.concatenate([ix for _, ix in live])
        starts = np.cumsum([0] + [len(ix) for _, ix in live[:-1]])
        consts = np.array([SCALED_INT[c] for c, _ in live], dtype=np.int64)
        return order, starts, consts


def build_neuron(codes, weight_scale: float = 1.0, width: int = SLICE_WIDTH,
                 budget: int = SLICE_BUDGET) -> HardwiredNeuron:
    codes = np.asarray(codes, dtype=np.uint8)
    p = partition_weights(codes)
    return HardwiredNeuron(codes, p, allocate_slices(p, width, budget), float(weight_scale))


def hn_eval_bitserial(hn: HardwiredNeuron, x: IntActivationVector) -> int:
    """Bit-serial evaluation: per plane, POPCNT each slice, scale by the region constant."""
    if len(x) != hn.n_inputs:
        raise DimensionMismatch(f"neuron has {hn.n_inputs} inputs, got {len(x)}")
    g = hn._gather
    if g is None:
        return 0
    order, starts, consts = g
    planes = plane_matrix(x).astype(np.int64)[:, order]
    counts = np.add.reduceat(planes, starts, axis=1)  # (B, slices)
    acc = 0
    for t in range(x.bit_width):
        acc += plane_weight(t, x.bit_width) * int(counts[t] @ consts)
    return acc


def hn_eval_reference(weights, x: IntActivationVector) -> int:
    w = np.asarray(weights, dtype=np.intp)
    if len(w) != len(x):
        raise DimensionMismatch(f"{len(w)} weights vs {len(x)} inputs")
    return sum(int(SCALED_INT[c]) * int(v) for c, v in zip(w, x.values))


def dequantize_result(acc: int, x: IntActivationVector, weight_scale: float) -> float:
    return acc * x.scale * weight_scale / 2


class HNArray:
    """A weight matrix hardwired as one neuron per output column.

    ``eval_int`` evaluates all columns at once with the same region/POPCNT
    arithmetic as :func:`hn_eval_bitserial` (per-plane region counts, then
    constant multiply), vectorized over neurons.
    """

    def __init__(self, codes, scale: float, width: int = SLICE_WIDTH, budget: int = SLICE_BUDGET):
        self.codes = np.ascontiguousarray(np.asarray(codes, dtype=np.uint8))
        if self.codes.ndim != 2:
            raise ValueError("HNArray needs a 2-D (n_in, n_out) code matrix")
        self.scale = float(scale)
        self.width = width
        self.budget = budget
        self.evaluations = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @cached_property
    def neurons(self) -> list[HardwiredNeuron]:
        return [build_neuron(self.codes[:, j], self.scale, self.width, self.budget)
                for j in range(self.shape[1])]

    @cached_property
    def _region_masks(self):
        canon = canonical_codes(self.codes)
        live = [int(c) for c in np.unique(canon) if c != ZERO_CODE]
        masks = np.stack([(canon == c) for c in live]).astype(np.int64) if live else None
        consts = np.array([SCALED_INT[c] for c in live], dtype=np.int64)
        return masks, consts

    def check_budget(self) -> int:
        """Largest slice count over the array's neurons; raises if any is infeasible."""
        worst = 0
        for j in range(self.shape[1]):
            canon = canonical_codes(self.codes[:, j])
            needed = slices_needed(np.bincount(canon, minlength=16), self.width)
            if needed > self.budget:
                raise InfeasibleAllocation(needed, self.budget)
            worst = max(worst, needed)
        return worst

    def eval_int(self, x: IntActivationVector) -> np.ndarray:
        n_in, n_out = self.shape
        if len(x) != n_in:
            raise DimensionMismatch(f"array expects {n_in} inputs, got {len(x)}")
        self.evaluations += n_out
        masks, consts = self._region_masks
        if masks is None:
            return np.zeros(n_out, dtype=np.int64)
        planes = plane_matrix(x).astype(np.int64)  # (B, n_in)
        counts = np.einsum("bi,rio->bro", planes, masks)  # POPCNT per plane, region, neuron
        pw = np.array([plane_weight(t, x.bit_width) for t in range(x.bit_width)], dtype=np.int64)
        return np.einsum("b,r,bro->o", pw, consts, counts)

    def eval(self, x: IntActivationVector) -> np.ndarray:
        return self.eval_int(x).astype(np.float64) * (x.scale * self.scale / 2)

    def dequantized(self) -> np.ndarray:
        return FP4_FLOAT[self.codes.astype(np.intp)] * self.scale


# ---------------------------------------------------------------------------
# Serialization for golden-file tests

def hn_to_text(hn: HardwiredNeuron) -> str:
    doc = {
        "format": HN_TEXT_FORMAT,
        "n_inputs": hn.n_inputs,
        "weight_scale": hn.weight_scale,
        "slice_width": hn.slices.slice_width,
        "slice_budget": hn.slices.slice_budget,
        "codes": [int(c) for c in hn.codes],
        "slices": [{"code": int(c), "inputs": [int(i) for i in ix]} for c, ix in hn.slices.slices],
    }
    return json.dumps(doc, indent=1) + "\n"


def hn_from_text(text: str) -> HardwiredNeuron:
    doc = json.loads(text)
    if doc.get("format") != HN_TEXT_FORMAT:
        raise ValueError(f"unknown neuron format {doc.get('format')!r}")
    codes = np.array(doc["codes"], dtype=np.uint8)
    p = partition_weights(codes)
    slices = tuple((int(s["code"]), np.array(s["inputs"], dtype=np.int64)) for s in doc["slices"])
    sa = SliceAssignment(int(doc["slice_width"]), int(doc["slice_budget"]), slices)
    covered = np.sort(np.concatenate([ix for _, ix in slices])) if slices else np.array([])
    if len(covered) != p.n_inputs or (covered != np.arange(p.n_inputs)).any():
        raise ValueError("slice map does not cover each input exactly once")
    if any(len(ix) > sa.slice_width for _, ix in slices) or sa.used > sa.slice_budget:
        raise ValueError("slice map violates width or budget")
    return HardwiredNeuron(codes, p, sa, float(doc["weight_scale"]))


# ---------------------------------------------------------------------------
# MA / CE / ME methodology comparator

AREA_RATIO = {"CE": 14.3, "MA": 1.0, "ME": 0.95}
_REF_WEIGHTS = 1024 * 128


@dataclass(frozen=True)
class MethodologyCostParams:
    """Abstract per-event costs.

    Adder and counter work is charged in full-adder bit operations
    (``e_add_bit``) for all three designs, so the comparison only depends on
    how much bit-level work each one does.  Valid sweep range: every energy
    within [0.25x, 4x] of its default, ``bits`` in 2..12.
    """
    mac_count: int = 1024
    weight_bits: int = 4
    sram_port_bits: int = 1024
    slice_width: int = SLICE_WIDTH
    regions: int = 16
    e_sram_bit: float = 0.3
    e_add_bit: float = 0.004
    e_leak: float = 1.0  # per unit area per cycle; unit area = the 64 KB SRAM

    def __post_init__(self):
        ints = (self.mac_count, self.weight_bits, self.sram_port_bits, self.slice_width, self.regions)
        if min(ints) < 1 or min(self.e_sram_bit, self.e_add_bit, self.e_leak) < 0:
            raise ValueError("invalid methodology cost params")


@dataclass(frozen=True)
class MethodologyReport:
    methodology: str
    cycles: int
    energy: float
    area: float
    breakdown: dict = field(default_factory=dict)


def _clog2(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def me_tree_depth(active_regions: int, max_slices_per_region: int) -> int:
    return _clog2(active_regions) + _clog2(max_slices_per_region)


def compare_methodologies(n_inputs: int, n_outputs: int, bits: int,
                          params: MethodologyCostParams | None = None) -> dict:
    """Cycles, energy and area of one (1 x n_in) x (n_in x n_out) product under MA, CE and ME.

    ME depth assumes weight values spread evenly over the regions.
    """
    p = params or MethodologyCostParams()
    if n_inputs < 1 or n_outputs < 1 or bits < 1:
        raise ValueError("dimensions and bit width must be positive")
    nw = n_inputs * n_outputs
    wb = p.weight_bits
    acc_bits = bits + wb + _clog2(n_inputs)
    area_scale = nw / _REF_WEIGHTS
    areas = {k: v * area_scale for k, v in AREA_RATIO.items()}

    # MA: SRAM streams the weights to a fixed MAC array
    fetch = -(-nw * wb // p.sram_port_bits)
    ma_cycles = -(-nw // p.mac_count) + fetch
    ma = {
        "sram": nw * wb * p.e_sram_bit,
        "mac": nw * (bits * wb + acc_bits) * p.e_add_bit,
        "leakage": areas["MA"] * ma_cycles * p.e_leak,
    }

    # CE: one multiply-by-constant per weight, full-width adder tree per neuron
    ce_cycles = _clog2(n_inputs)
    ce = {
        "cmul": nw * bits * (wb - 1) * p.e_add_bit,
        "adders": (n_inputs - 1) * n_outputs * acc_bits * p.e_add_bit,
        "leakage": areas["CE"] * ce_cycles * p.e_leak,
    }

    # ME: bit-serial POPCNT per region, one constant multiply per region per plane
    regions = min(p.regions, n_inputs)
    per_region = -(-n_inputs // regions)
    me_cycles = bits + me_tree_depth(regions, -(-per_region // p.slice_width))
    cnt_bits = _clog2(n_inputs + 1)
    me = {
        "popcnt": nw * bits * p.e_add_bit,
        "cmul": regions * n_outputs * bits * cnt_bits * (wb - 1) * p.e_add_bit,
        "adders": (regions - 1) * n_outputs * bits * (cnt_bits + wb) * p.e_add_bit,
        "accumulate": n_outputs * bits * acc_bits * p.e_add_bit,
        "leakage": areas["ME"] * me_cycles * p.e_leak,
    }
    out = {}
    for name, cyc, parts in (("MA", ma_cycles, ma), ("CE", ce_cycles, ce), ("ME", me_cycles, me)):
        out[name] = MethodologyReport(name, int(cyc), float(sum(parts.values())), areas[name], parts)
    return out
