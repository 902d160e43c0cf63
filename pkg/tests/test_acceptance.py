"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) for just the nine lines.
"""

import sys
import time

import numpy as np
import pytest

from hnlpu import costmodel as cm
from hnlpu import dataflow as df
from hnlpu import golden as g
from hnlpu import mecore as me
from hnlpu import pipeline as pl
from hnlpu.fabric import ChipCoord, Fabric, LinkModel
from hnlpu.numerics import SCALED_INT, IntActivationVector, int_range


def close(x, ref, rel):
    return abs(x - ref) <= rel * abs(ref)


def criterion_1():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    trials, bad = 10_000, 0
    for _ in range(trials):
        n = int(rng.integers(1, 4097))
        bits = int(rng.integers(2, 13))
        codes = rng.integers(0, 16, n)
        lo, hi = int_range(bits)
        vals = rng.integers(lo, hi + 1, n)
        # above 2,880 inputs a random column can need more than 106 slices
        hn = me.build_neuron(codes, budget=max(me.SLICE_BUDGET, n))
        if me.hn_eval_bitserial(hn, IntActivationVector(vals, bits, 1.0)) != int(SCALED_INT[codes] @ vals):
            bad += 1
    dt = time.perf_counter() - t0
    return bad == 0 and dt < 60, f"{trials} neurons, {bad} mismatches, {dt:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    n, m, w = 2880, 16, 32
    bound = me.max_slices_required(n, m, w)
    rng = np.random.default_rng(7)
    N = 100_000
    sizes = np.zeros((N, m), dtype=np.int64)
    third = N // 3
    # uniform random cuts
    cuts = np.sort(rng.integers(0, n + 1, (third, m - 1)), axis=1)
    sizes[:third] = np.diff(np.concatenate([np.zeros((third, 1), int), cuts, np.full((third, 1), n)], 1), axis=1)
    # k-1 small regions of size 1 + 32j, remainder in one region
    b = N - 2 * third
    k = rng.integers(1, m + 1, b)
    small = 1 + 32 * rng.integers(0, 3, (b, m - 1))
    small[np.arange(m - 1)[None, :] >= (k - 1)[:, None]] = 0
    sizes[third:third + b, :m - 1] = small
    sizes[third:third + b, m - 1] = n - small.sum(1)
    # sizes just above slice multiples, rebalanced to sum to n
    r = rng.integers(0, 90, (third, m)) * 32 % 200 + 1
    r = np.maximum(1, (r * n // r.sum(1, keepdims=True)))
    r[:, -1] += n - r.sum(1)
    sizes[third + b:] = r
    assert (sizes.sum(1) == n).all() and (sizes >= 0).all()
    needed = (-(-sizes // w)).sum(1)
    worst = int(needed.max())
    dt = time.perf_counter() - t0
    ok = bound == 105 <= me.SLICE_BUDGET and worst <= 105 and dt < 10
    return ok, f"bound {bound}, worst of {N} partitions {worst}, {dt:.2f}s"


def criterion_3():
    t0 = time.perf_counter()
    cfg = g.ModelConfig.toy()
    model = g.random_weights(cfg, 0)
    caches, states, ref_tokens, logits = g.empty_caches(cfg), [], [], None
    prompt, n_new = [1], 16
    for i in range(len(prompt) + n_new):
        tok = prompt[i] if i < len(prompt) else g.sample(logits)
        if i >= len(prompt):
            ref_tokens.append(tok)
        rec = []
        logits, caches = g.forward_token(model, tok, caches, record=rec)
        states.append(rec)
    tokens, results = df.generate(df.shard_full(model), prompt, n_new)
    worst = 0.0
    for ref, res in zip(states, results):
        for a, b in zip(ref, res.states):
            worst = max(worst, float(np.max(np.abs(a.Y - b.Y)) / np.max(np.abs(a.Y))))
    s = df.shape_audit(g.ModelConfig.full_scale(), 4096)
    shapes = (s["wq_slice"] == (720, 1024) and s["q_heads"] == (2, 8, 64)
              and s["k_local"] == (2, 64, 4096 // 4) and s["wo_partial"] == (1, 720))
    dt = time.perf_counter() - t0
    ok = tokens == ref_tokens and worst <= 1e-8 and shapes and dt < 60
    return ok, f"tokens match {tokens == ref_tokens}, max rel err {worst:.1e}, shapes {shapes}, {dt:.1f}s"


def criterion_4():
    t0 = time.perf_counter()
    cfg = pl.PipelineConfig(stage_latency=4000, clock=1e9)
    closed = pl.steady_state_throughput(cfg, cfg.slots)
    sim = pl.simulate(cfg, pl.Workload.decode_only(cfg.slots, 5000)).throughput
    one = pl.simulate(cfg, pl.Workload.decode_only(1, 1)).mean_sequence_latency
    dt = time.perf_counter() - t0
    ok = (cfg.slots == 216 and close(closed, 250_000, 1e-9) and close(closed, 249_960, 2e-4)
          and close(sim, 249_960, 2e-4) and close(one, 0.864e-3, 1e-9) and dt < 10)
    return ok, f"closed {closed:,.0f}, simulated {sim:,.0f}, latency {one * 1e3:.3f} ms, {dt:.1f}s"


def criterion_5():
    t = cm.REFERENCE_SYSTEMS
    ee = t["HNLPU"].energy_efficiency
    vs_h100 = cm.system_comparison(t["HNLPU"], t["H100"])["throughput"]
    vs_wse = cm.system_comparison(t["HNLPU"], t["WSE-3"])["throughput"]
    ok = close(ee, 36_226, 5e-3) and close(vs_h100, 5_555, 0.01) and close(vs_wse, 85, 0.01)
    return ok, f"{ee:,.0f} tokens/kJ, {vs_h100:,.0f}x H100, {vs_wse:.1f}x WSE-3"


def criterion_6():
    a, b = cm.hnlpu_scenario(), cm.h100_scenario()
    ta, tb = cm.tco(a), cm.tco(b)
    e = cm.efficiency_metrics(a, b)
    ca, cb = cm.carbon(a), cm.carbon(b)
    money = [(ta.electricity, 0.19), (tb.electricity, 45.44), (ta.static, 186.2), (tb.static, 530.4),
             (ta.dynamic, 274.8), (e["throughput_per_capex"], 11.58),
             (e["throughput_per_tco_static"], 12.65), (e["throughput_per_tco_dynamic"], 8.57)]
    # the reference electricity figure is rounded to two decimals
    ok_money = all(close(x, ref, 5e-3) or abs(x - ref) <= 0.005 for x, ref in money)
    ok_carbon = all(close(x, ref, 0.05) for x, ref in
                    [(ca.static, 780), (ca.dynamic, 794), (cb.static, 182_321)])
    detail = (f"elec {ta.electricity:.3f}/{tb.electricity:.2f}, static {ta.static:.1f}/{tb.static:.1f}, "
              f"dynamic {ta.dynamic:.1f}, ratios {e['throughput_per_capex']:.2f}/"
              f"{e['throughput_per_tco_static']:.2f}/{e['throughput_per_tco_dynamic']:.2f}, "
              f"tCO2e {ca.static:.0f}/{ca.dynamic:.0f}/{cb.static:,.0f}")
    return ok_money and ok_carbon, detail


def criterion_7():
    p, _ = cm.calibrate_litho()
    het = cm.photomask_cost(p, mode="fully_heterogeneous")
    init = cm.photomask_cost(p, mode="initial")
    respin = cm.photomask_cost(p, mode="respin")
    rng = np.random.default_rng(11)
    sweep_ok, count = True, 0
    while count < 500:
        shared = int(rng.integers(1, 70))
        duv = float(rng.uniform(0.05, 1.0))
        try:
            q = cm.LithoParams(70, shared, 70 - shared, int(rng.integers(0, shared + 1)),
                               duv * float(rng.uniform(5, 8)), duv, int(rng.integers(2, 65)))
        except ValueError:
            continue
        count += 1
        r, i, h = (cm.photomask_cost(q, mode=m) for m in ("respin", "initial", "fully_heterogeneous"))
        sweep_ok &= r < i < h
    ok = close(het, 480, 0.03) and close(init, 64.6, 0.03) and close(respin, 36.9, 0.03) and sweep_ok
    return ok, f"heterogeneous {het:.1f}, initial {init:.1f}, respin {respin:.1f}, ordering over 500 sets {sweep_ok}"


def criterion_8():
    r = me.compare_methodologies(1024, 128, 8)
    areas = {k: v.area for k, v in r.items()}
    area_ok = areas == {"MA": 1.0, "CE": 14.3, "ME": 0.95}
    rng = np.random.default_rng(5)
    cyc_me_ce = cyc_ce_ma = en = 0
    for _ in range(100):
        f = rng.uniform(np.log(0.25), np.log(4.0), 3)
        params = me.MethodologyCostParams(e_sram_bit=0.3 * np.exp(f[0]), e_add_bit=0.004 * np.exp(f[1]),
                                          e_leak=1.0 * np.exp(f[2]))
        bits = int(rng.integers(2, 13))
        x = me.compare_methodologies(1024, 128, bits, params)
        cyc_me_ce += x["ME"].cycles < x["CE"].cycles
        cyc_ce_ma += x["CE"].cycles <= x["MA"].cycles
        en += x["ME"].energy < x["CE"].energy < x["MA"].energy
    ok = area_ok and cyc_me_ce == cyc_ce_ma == en == 100
    return ok, (f"areas exact {area_ok}; of 100 points: cycles ME<CE {cyc_me_ce}, CE<=MA {cyc_ce_ma}; "
                f"energy ME<CE<MA {en}")


def criterion_9():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    ok_scatter = ok_sum = ok_mono = True
    for _ in range(300):
        f = Fabric()
        n = 4 * int(rng.integers(1, 64))
        col = int(rng.integers(0, 4))
        x = rng.standard_normal(n)
        parts = f.col_scatter(col, ChipCoord(int(rng.integers(0, 4)), col), x)
        ok_scatter &= all((y == x).all() for y in f.col_allgather(col, parts))
        xs = [rng.integers(-2**20, 2**20, n).astype(np.float64) for _ in range(16)]
        serial = np.zeros(n)
        for v in xs:
            serial = serial + v
        ok_sum &= all((y == serial).all() for y in f.all_reduce(xs))
        link = LinkModel(float(rng.uniform(0, 500)), float(rng.uniform(1e9, 1e12)))
        a, b = sorted(int(v) for v in rng.integers(1, 1 << 12, 2))
        ok_mono &= link.time_ns(4, a) <= link.time_ns(4, b) and link.time_ns(1, b) <= link.time_ns(2, b)
        # traces: a larger payload never takes less time
        f2 = Fabric(link)
        f2.all_reduce([np.zeros(a)] * 16)
        f2.all_reduce([np.zeros(b)] * 16)
        ok_mono &= f2.traces[0].nanoseconds <= f2.traces[1].nanoseconds
    dt = time.perf_counter() - t0
    ok = ok_scatter and ok_sum and ok_mono and dt < 10
    return ok, f"scatter/allgather {ok_scatter}, allreduce=serial {ok_sum}, monotone {ok_mono}, {dt:.2f}s"


CRITERIA = {
    1: ("bit-serial exactness", criterion_1),
    2: ("slice-budget theorem", criterion_2),
    3: ("distributed equivalence", criterion_3),
    4: ("throughput calibration", criterion_4),
    5: ("system-level efficiency", criterion_5),
    6: ("TCO table", criterion_6),
    7: ("photomask economics", criterion_7),
    8: ("methodology comparator", criterion_8),
    9: ("fabric algebra", criterion_9),
}


def _line(n, name, ok, detail):
    return f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {name}: {detail}"


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    name, fn = CRITERIA[n]
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + _line(n, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for n, (name, fn) in sorted(CRITERIA.items()):
        ok, detail = fn()
        results.append(ok)
        print(_line(n, name, ok, detail))
    sys.exit(0 if all(results) else 1)
