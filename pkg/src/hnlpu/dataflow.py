"""Distributed execution of transformer blocks on the 4x4 chip grid.

Mapping per layer, for chip (r, c):

* W_q, W_k, W_v: input rows block r, output columns block c.  Column c owns
  query/KV head block c; the four partial products meet in a column reduce.
* K/V of position l live on chip (l mod 4, c), so each column's cache is
  sharded along the sequence.
* W_o: rows block c (the column's heads), output columns block r; one row
  all-reduce and one column all-gather rebuild X_o everywhere.
* Router weights replicated; experts dealt out E/16 per chip in id order,
  outputs summed by one all-chip all-reduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fabric import ChipCoord, CollectiveTrace, Fabric
from .golden import (
    BlockWeights,
    ModelConfig,
    ModelWeights,
    QuantTensor,
    TokenState,
    rmsnorm,
    rotary,
    route,
    sample,
    swiglu,
)
from .mecore import HNArray
from .numerics import IntActivationVector, quantize_pow2

N_ROWS = N_COLS = 4


def _block(n: int, parts: int, i: int) -> slice:
    s = n // parts
    return slice(i * s, (i + 1) * s)


def _sub(x: IntActivationVector, sl: slice) -> IntActivationVector:
    return IntActivationVector(x.values[sl], x.bit_width, x.scale)


@dataclass
class ChipExperts:
    ids: list
    up: dict
    gate: dict
    down: dict


@dataclass
class ShardedLayer:
    cfg: ModelConfig
    wq: list   # per chip id, HNArray (H/4, q_width/4)
    wk: list
    wv: list
    wo: list   # (q_width/4, H/4)
    wrout: list
    experts: list  # ChipExperts per chip id
    attn_gain: np.ndarray
    moe_gain: np.ndarray

    def expert_owner(self, e: int) -> int:
        return e // (self.cfg.experts // (N_ROWS * N_COLS))


@dataclass
class ShardedModel:
    cfg: ModelConfig
    layers: list
    embed: QuantTensor      # chip 0 HBM
    final_gain: np.ndarray
    unembed: HNArray        # chip 0


def shard_model(cfg: ModelConfig, w: BlockWeights) -> ShardedLayer:
    cfg.check_grid()
    H, R, C = cfg.hidden, N_ROWS, N_COLS
    per_chip = cfg.experts // (R * C)
    wq, wk, wv, wo, wr, ex = [], [], [], [], [], []
    for chip in range(R * C):
        r, c = divmod(chip, C)
        rows = _block(H, R, r)
        wq.append(HNArray(w.wq.codes[rows, _block(cfg.q_width, C, c)], w.wq.scale))
        wk.append(HNArray(w.wk.codes[rows, _block(cfg.kv_width, C, c)], w.wk.scale))
        wv.append(HNArray(w.wv.codes[rows, _block(cfg.kv_width, C, c)], w.wv.scale))
        wo.append(HNArray(w.wo.codes[_block(cfg.q_width, C, c), _block(H, R, r)], w.wo.scale))
        wr.append(HNArray(w.wrout.codes.copy(), w.wrout.scale))
        ids = list(range(chip * per_chip, (chip + 1) * per_chip))
        ex.append(ChipExperts(
            ids,
            {e: HNArray(w.wup.codes[e], w.wup.scale) for e in ids},
            {e: HNArray(w.wgate.codes[e], w.wgate.scale) for e in ids},
            {e: HNArray(w.wdown.codes[e], w.wdown.scale) for e in ids},
        ))
    return ShardedLayer(cfg, wq, wk, wv, wo, wr, ex, np.array(w.attn_gain), np.array(w.moe_gain))


def shard_full(model: ModelWeights) -> ShardedModel:
    layers = [shard_model(model.cfg, b) for b in model.blocks]
    return ShardedModel(model.cfg, layers, model.embed, np.array(model.final_gain),
                        HNArray(model.unembed.codes, model.unembed.scale))


def reassemble(layer: ShardedLayer) -> dict:
    """Stitch chip slices back into full code matrices (inverse of shard_model)."""
    cfg = layer.cfg
    H, R, C = cfg.hidden, N_ROWS, N_COLS

    def stitch(arrays, n_in, n_out, in_by_col):
        out = np.zeros((n_in, n_out), dtype=np.uint8)
        for chip, a in enumerate(arrays):
            r, c = divmod(chip, C)
            if in_by_col:
                out[_block(n_in, C, c), _block(n_out, R, r)] = a.codes
            else:
                out[_block(n_in, R, r), _block(n_out, C, c)] = a.codes
        return out

    experts = {}
    for ce in layer.experts:
        for e in ce.ids:
            experts[e] = (ce.up[e].codes, ce.gate[e].codes, ce.down[e].codes)
    order = sorted(experts)
    return {
        "wq": stitch(layer.wq, H, cfg.q_width, False),
        "wk": stitch(layer.wk, H, cfg.kv_width, False),
        "wv": stitch(layer.wv, H, cfg.kv_width, False),
        "wo": stitch(layer.wo, cfg.q_width, H, True),
        "wrout": layer.wrout[0].codes,
        "wup": np.stack([experts[e][0] for e in order]),
        "wgate": np.stack([experts[e][1] for e in order]),
        "wdown": np.stack([experts[e][2] for e in order]),
    }


# ---------------------------------------------------------------------------
# KV cache shards

@dataclass
class KVCacheShard:
    owner: ChipCoord
    k: np.ndarray  # (kv_heads/4, head_dim, owned)
    v: np.ndarray  # (kv_heads/4, owned, head_dim)
    positions: list = field(default_factory=list)

    @classmethod
    def empty(cls, owner: ChipCoord, cfg: ModelConfig) -> "KVCacheShard":
        kvpc = cfg.kv_heads // N_COLS
        return cls(owner, np.zeros((kvpc, cfg.head_dim, 0)), np.zeros((kvpc, 0, cfg.head_dim)), [])

    def append(self, position: int, k, v):
        if position % N_ROWS != self.owner.row:
            raise ValueError(f"position {position} belongs to row {position % N_ROWS}, not {self.owner.row}")
        self.k = np.concatenate([self.k, k[:, :, None]], axis=2)
        self.v = np.concatenate([self.v, v[:, None, :]], axis=1)
        self.positions.append(position)


class DistributedKVCache:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.length = 0
        self.shards = [[KVCacheShard.empty(ChipCoord.from_id(i), cfg) for i in range(N_ROWS * N_COLS)]
                       for _ in range(cfg.layers)]

    def gather(self, layer: int):
        """Reassemble the full (kv_heads, positions, head_dim) K and V of a layer."""
        cfg = self.cfg
        k = np.zeros((cfg.kv_heads, self.length, cfg.head_dim))
        v = np.zeros_like(k)
        kvpc = cfg.kv_heads // N_COLS
        for sh in self.shards[layer]:
            heads = slice(sh.owner.col * kvpc, (sh.owner.col + 1) * kvpc)
            for j, pos in enumerate(sh.positions):
                k[heads, pos] = sh.k[:, :, j]
                v[heads, pos] = sh.v[:, j, :]
        return k, v


# ---------------------------------------------------------------------------
# Execution

class Counters:
    def __init__(self, n: int = 16):
        self.hn_evals = [0] * n
        self.vex_ops = [0] * n

    def hn(self, chip: int, arr: HNArray, x: IntActivationVector) -> np.ndarray:
        self.hn_evals[chip] += arr.shape[1]
        return arr.eval(x)

    def as_dict(self) -> dict:
        return {"hn_evals": list(self.hn_evals), "vex_ops": list(self.vex_ops)}


@dataclass
class DistributedBlockResult:
    Y: list  # per chip id
    traces: list
    counts: dict
    state: TokenState


def step_qkv(layer: ShardedLayer, X: list, position: int, cache_shards: list, fabric: Fabric,
             counts: Counters, st: TokenState):
    """Q/K/V projections; returns per-chip column Q of shape (kv/4, group, head_dim)."""
    cfg = layer.cfg
    H, C, R = cfg.hidden, N_COLS, N_ROWS
    kvpc = cfg.kv_heads // C
    xq = []
    for chip in range(R * C):
        xn = rmsnorm(X[chip], layer.attn_gain, cfg.norm_eps)
        counts.vex_ops[chip] += H
        xq.append(quantize_pow2(xn, cfg.act_bits))
    owner_row = position % R
    q_cols, k_new, v_new = {}, {}, {}
    for c in range(C):
        members = [r * C + c for r in range(R)]
        parts_q, parts_k, parts_v = [], [], []
        for chip in members:
            r = chip // C
            xs = _sub(xq[chip], _block(H, R, r))
            parts_q.append(counts.hn(chip, layer.wq[chip], xs))
            parts_k.append(counts.hn(chip, layer.wk[chip], xs))
            parts_v.append(counts.hn(chip, layer.wv[chip], xs))
        qs = fabric.col_allreduce(c, parts_q)
        owner = ChipCoord(owner_row, c)
        k = fabric.col_reduce(c, owner, parts_k).reshape(kvpc, cfg.head_dim)
        v = fabric.col_reduce(c, owner, parts_v).reshape(kvpc, cfg.head_dim)
        q_cols[c] = []
        for chip, q in zip(members, qs):
            q = q.reshape(cfg.kv_heads // C * cfg.group, cfg.head_dim)
            if cfg.rotary:
                q = rotary(q, position, cfg.rope_base)
                counts.vex_ops[chip] += q.size
            q_cols[c].append(q.reshape(kvpc, cfg.group, cfg.head_dim))
        if cfg.rotary:
            k = rotary(k, position, cfg.rope_base)
            counts.vex_ops[owner.id] += k.size
        cache_shards[owner.id].append(position, k, v)
        k_new[c], v_new[c] = k, v
    st.Q = np.concatenate([q_cols[c][0].reshape(-1, cfg.head_dim) for c in range(C)])
    st.K = np.concatenate([k_new[c] for c in range(C)])
    st.V = np.concatenate([v_new[c] for c in range(C)])
    return q_cols


def _merge_stats(a, b):
    """Merge stacked (running max, exp-sum) pairs."""
    m = np.maximum(a[0], b[0])
    with np.errstate(invalid="ignore"):
        sa = np.where(a[1] > 0, a[1] * np.exp(a[0] - m), 0.0)
        sb = np.where(b[1] > 0, b[1] * np.exp(b[0] - m), 0.0)
    return np.stack([m, sa + sb])


def step_attention(layer: ShardedLayer, q_cols: dict, cache_shards: list, fabric: Fabric,
                   counts: Counters) -> dict:
    """Distributed softmax attention; returns per-column list of flattened O (one per row)."""
    cfg = layer.cfg
    C, R = N_COLS, N_ROWS
    kvpc = cfg.kv_heads // C
    inv = 1.0 / math.sqrt(cfg.head_dim)
    out = {}
    for c in range(C):
        members = [r * C + c for r in range(R)]
        logits, stats = [], []
        for i, chip in enumerate(members):
            sh = cache_shards[chip]
            z = np.einsum("kgd,kdn->kgn", q_cols[c][i], sh.k) * inv
            if z.shape[-1]:
                m = z.max(axis=-1)
                s = np.exp(z - m[..., None]).sum(axis=-1)
            else:
                m = np.full((kvpc, cfg.group), -np.inf)
                s = np.zeros((kvpc, cfg.group))
            counts.vex_ops[chip] += 2 * z.size * cfg.head_dim + z.size
            logits.append(z)
            stats.append(np.stack([m, s]))
        merged = fabric.col_allreduce(c, stats, op=_merge_stats)
        partial = []
        for i, chip in enumerate(members):
            M, S = merged[i]
            p = np.exp(logits[i] - M[..., None]) / S[..., None]
            partial.append(np.einsum("kgn,knd->kgd", p, cache_shards[chip].v))
        o = fabric.col_allreduce(c, partial)
        out[c] = [x.reshape(-1) for x in o]
    return out


def step_output_projection(layer: ShardedLayer, X: list, o_cols: dict, fabric: Fabric,
                           counts: Counters) -> list:
    """W_o partials, row all-reduce + column all-gather, residual; returns X_o per chip."""
    cfg = layer.cfg
    H, C, R, hd = cfg.hidden, N_COLS, N_ROWS, cfg.head_dim
    partial = [None] * (R * C)
    for chip in range(R * C):
        r, c = divmod(chip, C)
        o = o_cols[c][r]
        acc = np.zeros(H // R)
        wo = layer.wo[chip]
        for h0 in range(0, len(o), hd):
            xq = quantize_pow2(o[h0:h0 + hd], cfg.act_bits)
            rows = HNArray(wo.codes[h0:h0 + hd], wo.scale)
            acc = acc + rows.eval(xq)
        counts.hn_evals[chip] += wo.shape[1]
        partial[chip] = acc
    row_sums = {}
    for r in range(R):
        row_sums[r] = fabric.row_allreduce(r, [partial[r * C + c] for c in range(C)])
    x_o = [None] * (R * C)
    for c in range(C):
        gathered = fabric.col_allgather(c, [row_sums[r][c] for r in range(R)])
        for r in range(R):
            chip = r * C + c
            x_o[chip] = X[chip] + gathered[r]
            counts.vex_ops[chip] += H
    return x_o


def step_moe(layer: ShardedLayer, X_o: list, fabric: Fabric, counts: Counters, st: TokenState) -> list:
    cfg = layer.cfg
    H = cfg.hidden
    n = N_ROWS * N_COLS
    partial, decisions = [], []
    for chip in range(n):
        xn = rmsnorm(X_o[chip], layer.moe_gain, cfg.norm_eps)
        xq = quantize_pow2(xn, cfg.act_bits)
        rout = counts.hn(chip, layer.wrout[chip], xq)
        sel, gw = route(rout, cfg.top_k)
        assert len(sel) <= cfg.top_k
        counts.vex_ops[chip] += 2 * H + cfg.experts
        decisions.append((sel, gw, rout, xn))
        ce = layer.experts[chip]
        acc = np.zeros(H)
        for e, g in zip(sel, gw):
            e = int(e)
            if e not in ce.up:
                continue
            up = counts.hn(chip, ce.up[e], xq)
            gate = counts.hn(chip, ce.gate[e], xq)
            t = swiglu(gate, up)
            counts.vex_ops[chip] += 2 * t.size
            down = counts.hn(chip, ce.down[e], quantize_pow2(t, cfg.act_bits))
            acc = acc + g * down
        partial.append(acc)
    sel0, gw0, rout0, xn0 = decisions[0]
    for sel, gw, rout, _ in decisions[1:]:
        if not (np.array_equal(sel, sel0) and np.array_equal(gw, gw0) and np.array_equal(rout, rout0)):
            raise AssertionError("router decisions diverged across chips")
    summed = fabric.all_reduce(partial)
    st.X_norm, st.X_rout, st.selected, st.expert_weights = xn0, rout0, sel0, gw0
    st.X_down = summed[0]
    y = []
    for chip in range(n):
        y.append(X_o[chip] + summed[chip])
        counts.vex_ops[chip] += H
    return y


def run_block(layer: ShardedLayer, X: list, position: int, cache_shards: list, fabric: Fabric,
              counts: Counters | None = None) -> DistributedBlockResult:
    counts = counts or Counters()
    n0 = len(fabric.traces)
    st = TokenState(X=X[0], position=position)
    q_cols = step_qkv(layer, X, position, cache_shards, fabric, counts, st)
    o_cols = step_attention(layer, q_cols, cache_shards, fabric, counts)
    st.O = np.concatenate([o_cols[c][0] for c in range(N_COLS)])
    x_o = step_output_projection(layer, X, o_cols, fabric, counts)
    st.X_o = x_o[0]
    y = step_moe(layer, x_o, fabric, counts, st)
    st.Y = y[0]
    return DistributedBlockResult(y, fabric.traces[n0:], counts.as_dict(), st)


@dataclass
class TokenResult:
    logits: np.ndarray
    traces: list
    counts: dict
    states: list


def run_token(model: ShardedModel, token: int, cache: DistributedKVCache, fabric: Fabric) -> TokenResult:
    cfg = model.cfg
    if not 0 <= token < cfg.vocab:
        raise ValueError(f"token id {token} outside vocabulary of {cfg.vocab}")
    n0 = len(fabric.traces)
    counts = Counters()
    position = cache.length
    x0 = model.embed[token].dequantized()
    row0 = fabric.row_broadcast(0, ChipCoord(0, 0), x0)
    X = [None] * 16
    for c in range(N_COLS):
        for r, x in enumerate(fabric.col_broadcast(c, ChipCoord(0, c), row0[c])):
            X[r * N_COLS + c] = x
    states = []
    for li, layer in enumerate(model.layers):
        res = run_block(layer, X, position, cache.shards[li], fabric, counts)
        for y in res.Y[1:]:
            if not np.array_equal(y, res.Y[0]):
                raise AssertionError("block output copies differ across chips")
        X = res.Y
        states.append(res.state)
    cache.length += 1
    xn = rmsnorm(X[0], model.final_gain, cfg.norm_eps)
    logits = counts.hn(0, model.unembed, quantize_pow2(xn, cfg.act_bits))
    counts.vex_ops[0] += cfg.hidden + cfg.vocab
    return TokenResult(logits, fabric.traces[n0:], counts.as_dict(), states)


def generate(model: ShardedModel, prompt, n_new: int, fabric: Fabric | None = None):
    """Greedy generation on the grid; returns (tokens, per-token results)."""
    fabric = fabric or Fabric()
    cache = DistributedKVCache(model.cfg)
    results = []
    res = None
    for t in prompt:
        res = run_token(model, int(t), cache, fabric)
        results.append(res)
    out = []
    for _ in range(n_new):
        tok = sample(res.logits)
        out.append(tok)
        res = run_token(model, tok, cache, fabric)
        results.append(res)
    return out, results


def corrupt_shard(model: ShardedModel, layer: int = 0, chip: int = 0, tensor: str = "wq", index=(0, 0)):
    """Fault-injection hook: change one hardwired weight code in place."""
    arr = getattr(model.layers[layer], tensor)[chip]
    codes = arr.codes.copy()
    codes[index] = (int(codes[index]) + 1) % 16 or 1
    model.layers[layer].__dict__[tensor][chip] = HNArray(codes, arr.scale, arr.width, arr.budget)


# ---------------------------------------------------------------------------
# Analytic communication plan and shape audit (metadata only)

def plan_token(cfg: ModelConfig, dtype_bytes: int = 8) -> list:
    """Collectives one decode token issues, as (op, group, payload_bytes, steps)."""
    H, C, R = cfg.hidden, N_COLS, N_ROWS
    kvpc = cfg.kv_heads // C
    plan = [("row_broadcast", "row 0", H * dtype_bytes, 1)]
    plan += [("col_broadcast", f"col {c}", H * dtype_bytes, 1) for c in range(C)]
    for _ in range(cfg.layers):
        for c in range(C):
            plan.append(("col_allreduce", f"col {c}", cfg.q_width // C * dtype_bytes, 2))
            plan.append(("col_reduce", f"col {c}", cfg.kv_width // C * dtype_bytes, 1))
            plan.append(("col_reduce", f"col {c}", cfg.kv_width // C * dtype_bytes, 1))
        for c in range(C):
            plan.append(("col_allreduce", f"col {c}", 2 * kvpc * cfg.group * dtype_bytes, 2))
            plan.append(("col_allreduce", f"col {c}", kvpc * cfg.group * cfg.head_dim * dtype_bytes, 2))
        plan += [("row_allreduce", f"row {r}", H // R * dtype_bytes, 2) for r in range(R)]
        plan += [("col_allgather", f"col {c}", H // R * dtype_bytes, 1) for c in range(C)]
        plan.append(("all_reduce", "all", H * dtype_bytes, 4))
    return plan


def plan_bytes(cfg: ModelConfig, dtype_bytes: int = 8) -> int:
    return sum(b * s for _, _, b, s in plan_token(cfg, dtype_bytes))


def shape_audit(cfg: ModelConfig, position: int) -> dict:
    """Per-chip tensor shapes of one block at sequence length ``position`` (no numerics)."""
    cfg.check_grid()
    H, C, R = cfg.hidden, N_COLS, N_ROWS
    kvpc = cfg.kv_heads // C
    local = position // R
    per_chip = cfg.experts // (R * C)
    return {
        "x": (1, H),
        "x_slice": (1, H // R),
        "wq_slice": (H // R, cfg.q_width // C),
        "wk_slice": (H // R, cfg.kv_width // C),
        "wv_slice": (H // R, cfg.kv_width // C),
        "q_column": (1, cfg.q_width // C),
        "q_heads": (kvpc, cfg.group, cfg.head_dim),
        "k_partial": (1, cfg.kv_width // C),
        "k_new": (kvpc, cfg.head_dim),
        "k_local": (kvpc, cfg.head_dim, local),
        "z_local": (kvpc, cfg.group, local),
        "v_local": (kvpc, local, cfg.head_dim),
        "o_partial": (kvpc, cfg.group, cfg.head_dim),
        "o_flat": (1, cfg.q_width // C),
        "wo_slice": (cfg.q_width // C, H // R),
        "wo_partial": (1, H // R),
        "x_o": (1, H),
        "x_mask_total": (cfg.experts, 1, H),
        "x_mask_chip": (per_chip, 1, H),
        "wup_chip": (per_chip, H, cfg.expert_inner),
        "x_down_chip": (per_chip, 1, H),
        "y": (1, H),
        "experts_per_chip": per_chip,
    }
