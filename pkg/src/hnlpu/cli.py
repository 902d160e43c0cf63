"""Scenario-driven command line: verify | simulate | cost | compare.

Exit status: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import costmodel, dataflow, golden, mecore, pipeline
from .fabric import CollectiveTrace, Fabric, LinkModel, traces_to_csv
from .numerics import SCALED_INT, IntActivationVector

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
FORMATS = ("table", "csv", "json")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scenario schema

def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _check_keys(d, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _build(cls, d, where: str):
    _check_keys(d, _fields(cls), where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


VERIFY_DEFAULTS = {"prompt": [1], "tokens": 16, "hn_trials": 200, "hn_max_inputs": 4096,
                   "adversarial_partitions": 2000, "rel_tol": 1e-8, "corrupt": None}
CORRUPT_KEYS = {"layer", "chip", "tensor", "index"}
WORKLOAD_KEYS = {"sequences", "prompt_len", "gen_len"}
COST_KEYS = {"scenario", "scenario_file", "baseline", "baseline_file", "litho",
             "photomask_mode", "chip_variants", "naive_mask_sets"}
COMPARE_DEFAULTS = {"n_inputs": 1024, "n_outputs": 128, "bits": 8, "params": {}}
TOP_KEYS = {"model", "fabric", "pipeline", "cost", "compare", "verify", "seeds", "output"}


@dataclass
class ScenarioFile:
    model: golden.ModelConfig
    link: LinkModel
    pipeline: pipeline.PipelineConfig
    workload: pipeline.Workload
    verify: dict
    compare: dict
    cost: costmodel.CostScenario | None
    baseline: costmodel.CostScenario | None
    litho: costmodel.LithoParams
    photomask_mode: str
    chip_variants: int | None
    naive_mask_sets: int
    seeds: list
    out_dir: Path
    resolved: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _builtin(name: str) -> Path | None:
    p = resources.files("hnlpu") / "data" / f"{name}.json"
    return Path(str(p)) if p.is_file() else None


def locate(path: str) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    b = _builtin(path)
    if b is None:
        raise ConfigError(f"scenario {path!r} not found (and is not a shipped scenario name)")
    return b


def _read_json(path: Path, where: str) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"{where}: cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def _cost_scenario(sec: dict, inline: str, ref: str, base: Path, where: str):
    if inline in sec and ref in sec:
        raise ConfigError(f"{where}: give either {inline!r} or {ref!r}, not both")
    if ref in sec:
        p = base / sec[ref]
        d = _read_json(p, f"{where}.{ref}")
        where = str(p)
    elif inline in sec:
        d = sec[inline]
        where = f"{where}.{inline}"
    else:
        return None
    return _build(costmodel.CostScenario, d, where)


def load_scenario_file(path, seed: int | None = None, baseline: str | None = None,
                       out: str | None = None) -> ScenarioFile:
    """Parse and validate every section before anything runs."""
    path = locate(str(path))
    raw = _read_json(path, "scenario")
    _check_keys(raw, TOP_KEYS, str(path))
    base = path.parent

    model = _build(golden.ModelConfig, raw.get("model", {}), "model")
    link = _build(LinkModel, raw.get("fabric", {}), "fabric")

    psec = dict(raw.get("pipeline", {}))
    wsec = psec.pop("workload", None)
    wfile = psec.pop("workload_file", None)
    pcfg = _build(pipeline.PipelineConfig, psec, "pipeline")
    if wsec is not None and wfile is not None:
        raise ConfigError("pipeline: give either 'workload' or 'workload_file', not both")
    if wfile is not None:
        try:
            workload = pipeline.load_workload(base / wfile)
        except (OSError, ValueError) as e:
            raise ConfigError(f"pipeline.workload_file: {e}") from None
        wres = [dataclasses.asdict(s) for s in workload.sequences]
    else:
        wsec = {"sequences": pcfg.slots, "prompt_len": 0, "gen_len": 1} | (wsec or {})
        _check_keys(wsec, WORKLOAD_KEYS, "pipeline.workload")
        try:
            workload = pipeline.Workload.decode_only(int(wsec["sequences"]), int(wsec["gen_len"]),
                                                     int(wsec["prompt_len"]))
        except ValueError as e:
            raise ConfigError(f"pipeline.workload: {e}") from None
        wres = wsec

    verify = VERIFY_DEFAULTS | raw.get("verify", {})
    _check_keys(verify, VERIFY_DEFAULTS, "verify")
    if verify["corrupt"] is not None:
        _check_keys(verify["corrupt"], CORRUPT_KEYS, "verify.corrupt")

    compare = COMPARE_DEFAULTS | raw.get("compare", {})
    _check_keys(compare, COMPARE_DEFAULTS, "compare")
    _build(mecore.MethodologyCostParams, compare["params"], "compare.params")

    csec = raw.get("cost", {})
    _check_keys(csec, COST_KEYS, "cost")
    cost = _cost_scenario(csec, "scenario", "scenario_file", base, "cost")
    if baseline is not None:
        bpath = Path(baseline)
        base_sc = _build(costmodel.CostScenario, _read_json(bpath, "--baseline"), str(bpath))
    else:
        base_sc = _cost_scenario(csec, "baseline", "baseline_file", base, "cost")
    litho = _build(costmodel.LithoParams, csec.get("litho", {}), "cost.litho")
    mode = csec.get("photomask_mode", "initial")
    if mode not in costmodel.MASK_MODES:
        raise ConfigError(f"cost.photomask_mode: expected one of {costmodel.MASK_MODES}, got {mode!r}")
    variants = csec.get("chip_variants")
    naive_sets = csec.get("naive_mask_sets", costmodel.NAIVE_MASK_SETS)
    if not isinstance(naive_sets, int) or naive_sets < 1:
        raise ConfigError("cost.naive_mask_sets: expected a positive integer")

    seeds = [seed] if seed is not None else raw.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a list of non-negative integers")
    osec = raw.get("output", {})
    _check_keys(osec, {"dir"}, "output")
    out_dir = Path(out if out is not None else osec.get("dir", "out"))

    resolved = {
        "model": dataclasses.asdict(model),
        "fabric": dataclasses.asdict(link),
        "pipeline": dataclasses.asdict(pcfg) | {"workload": wres},
        "verify": verify,
        "compare": compare,
        "cost": {
            "scenario": cost and dataclasses.asdict(cost),
            "baseline": base_sc and dataclasses.asdict(base_sc),
            "litho": dataclasses.asdict(litho),
            "photomask_mode": mode,
            "chip_variants": variants,
            "naive_mask_sets": naive_sets,
        },
        "seeds": seeds,
    }
    return ScenarioFile(model, link, pcfg, workload, verify, compare, cost, base_sc, litho, mode,
                        variants, naive_sets, seeds, out_dir, resolved)


# ---------------------------------------------------------------------------
# Reports

@dataclass
class RunReport:
    command: str
    config_hash: str
    metrics: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # (section, name, value...) for table output

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        w.writerow(["run", "command", self.command])
        w.writerow(["run", "config_hash", self.config_hash])
        for k in sorted(self.metrics):
            w.writerow(["metric", k, _fmt(self.metrics[k])])
        for k in sorted(self.verdicts):
            w.writerow(["verdict", k, "pass" if self.verdicts[k] else "FAIL"])
        for row in self.rows:
            w.writerow([row[0], row[1], *[_fmt(v) for v in row[2:]]])
        return out.getvalue()

    def to_table(self, stamp: str | None = None) -> str:
        stamp = stamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        lines = [f"# hnlpu {self.command}  config {self.config_hash}  {stamp}"]
        if self.rows:
            width = max(len(str(r[1])) for r in self.rows)
            section = None
            for row in self.rows:
                if row[0] != section:
                    section = row[0]
                    lines.append(f"[{section}]")
                vals = "  ".join(f"{_fmt(v):>14}" for v in row[2:])
                lines.append(f"  {row[1]:<{width}}  {vals}")
        if self.metrics:
            lines.append("[metrics]")
            width = max(len(k) for k in self.metrics)
            lines += [f"  {k:<{width}}  {_fmt(self.metrics[k])}" for k in sorted(self.metrics)]
        if self.verdicts:
            lines.append("[verdicts]")
            lines += [f"  {'PASS' if v else 'FAIL'}  {k}" for k, v in sorted(self.verdicts.items())]
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        return {"json": self.to_json, "csv": self.to_csv, "table": self.to_table}[fmt]()


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


# ---------------------------------------------------------------------------
# Commands

def _verify_seed(sc: ScenarioFile, seed: int) -> tuple[dict, dict]:
    v = sc.verify
    cfg = sc.model
    cfg.check_grid()
    model = golden.random_weights(cfg, seed)

    # golden reference, recording every block's state
    caches = golden.empty_caches(cfg)
    ref_states, ref_tokens, logits = [], [], None
    feed = list(v["prompt"])
    for i in range(len(feed) + v["tokens"]):
        tok = feed[i] if i < len(feed) else golden.sample(logits)
        if i >= len(feed):
            ref_tokens.append(tok)
        rec = []
        logits, caches = golden.forward_token(model, tok, caches, record=rec)
        ref_states.append(rec)

    sharded = dataflow.shard_full(model)
    if v["corrupt"] is not None:
        c = v["corrupt"]
        dataflow.corrupt_shard(sharded, c.get("layer", 0), c.get("chip", 0), c.get("tensor", "wq"),
                               tuple(c.get("index", (0, 0))))
    fabric = Fabric(sc.link)
    tokens, results = dataflow.generate(sharded, v["prompt"], v["tokens"], fabric)
    worst = 0.0
    for ref, res in zip(ref_states, results):
        for a, b in zip(ref, res.states):
            worst = max(worst, float(np.max(np.abs(a.Y - b.Y)) / max(np.max(np.abs(a.Y)), 1e-300)))

    # bit-serial exactness against a dense integer dot product
    rng = np.random.default_rng(seed)
    bit_ok = True
    for _ in range(v["hn_trials"]):
        n = int(rng.integers(1, v["hn_max_inputs"] + 1))
        bits = int(rng.integers(2, 13))
        codes = rng.integers(0, 16, n)
        lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
        x = IntActivationVector(rng.integers(lo, hi + 1, n), bits, 1.0)
        hn = mecore.build_neuron(codes, budget=max(mecore.SLICE_BUDGET, n))
        if mecore.hn_eval_bitserial(hn, x) != int(np.dot(SCALED_INT[codes], x.values)):
            bit_ok = False
            break

    # slice budget: closed-form worst case and random adversarial partitions
    bound = mecore.max_slices_required(2880, 16, mecore.SLICE_WIDTH)
    worst_seen = 0
    for _ in range(v["adversarial_partitions"]):
        cuts = np.sort(rng.integers(0, 2881, 15))
        sizes = np.diff(np.concatenate([[0], cuts, [2880]]))
        worst_seen = max(worst_seen, mecore.slices_needed(sizes, mecore.SLICE_WIDTH))

    metrics = {
        "tokens": tokens,
        "reference_tokens": ref_tokens,
        "max_relative_error": worst,
        "fabric_bytes": sum(t.bytes for t in fabric.traces),
        "collectives": len(fabric.traces),
        "slice_bound": bound,
        "slice_worst_seen": worst_seen,
    }
    verdicts = {
        "equivalence_tokens": tokens == ref_tokens,
        "equivalence_activations": worst <= v["rel_tol"],
        "bitserial_exact": bit_ok,
        "slice_budget": bound <= mecore.SLICE_BUDGET and worst_seen <= bound,
    }
    return metrics, verdicts


def cmd_verify(sc: ScenarioFile) -> RunReport:
    rep = RunReport("verify", sc.config_hash)
    multi = len(sc.seeds) > 1
    for seed in sc.seeds:
        m, v = _verify_seed(sc, seed)
        tag = f"seed{seed}." if multi else ""
        rep.metrics.update({tag + k: val for k, val in m.items()})
        rep.verdicts.update({tag + k: val for k, val in v.items()})
        for k, val in v.items():
            rep.rows.append((f"seed {seed}", k, "pass" if val else "FAIL"))
    return rep


def plan_traces(cfg: golden.ModelConfig, link: LinkModel) -> list:
    """Collective traces for one decode token, from the analytic plan."""
    out = []
    for op, group, nbytes, steps in dataflow.plan_token(cfg):
        b = link.payload_bytes(nbytes) * steps
        out.append(CollectiveTrace(op, group, b, steps, link.time_ns(steps, b)))
    return out


def cmd_simulate(sc: ScenarioFile) -> RunReport:
    rep = RunReport("simulate", sc.config_hash)
    pc = sc.pipeline
    pr = pipeline.simulate(pc, sc.workload)
    traces = plan_traces(sc.model, sc.link)
    sc.out_dir.mkdir(parents=True, exist_ok=True)
    pipeline.write_report(pr, sc.out_dir)
    (sc.out_dir / "collective_traces.csv").write_text(traces_to_csv(traces))
    rep.metrics.update({
        "closed_form_throughput": pipeline.steady_state_throughput(pc, pc.slots),
        "occupancy1_latency_s": pc.token_latency,
        "token_bytes": sum(t.bytes for t in traces),
        "token_fabric_ns": sum(t.nanoseconds for t in traces),
    })
    rep.metrics.update({f"sim_{k}": v for k, v in pr.summary().items() if k != "stage_utilization"})
    rep.rows = [
        ("headline", "throughput (tokens/s)", pr.throughput),
        ("headline", "closed form (tokens/s)", rep.metrics["closed_form_throughput"]),
        ("headline", "token latency (s)", pc.token_latency),
        ("headline", "mean sequence latency (s)", pr.mean_sequence_latency),
        ("fabric", "bytes per token", rep.metrics["token_bytes"]),
        ("fabric", "collectives per token", len(traces)),
    ]
    return rep


def cmd_cost(sc: ScenarioFile, ratios: bool = False) -> RunReport:
    if sc.cost is None:
        raise ConfigError("cost: no cost scenario given ('scenario' or 'scenario_file')")
    if ratios and sc.baseline is None:
        raise ConfigError("cost: ratios requested but no baseline given (--baseline or cost.baseline)")
    rep = RunReport("cost", sc.config_hash)
    a, b = sc.cost, sc.baseline
    if b is not None:
        rep.rows += [("tco", name, va, vb) for name, va, vb in costmodel.tco_rows(a, b)]
        rep.metrics.update(costmodel.efficiency_metrics(a, b))
    else:
        rep.rows += [("tco", name, va) for name, va in costmodel.scenario_rows(a)]
    for mode in costmodel.MASK_MODES:
        val = costmodel.photomask_cost(sc.litho, sc.chip_variants, mode)
        rep.rows.append(("photomask", f"{mode} ($M)", val))
        if mode == sc.photomask_mode:
            rep.metrics["photomask"] = val
    naive = costmodel.naive_hardwiring_cost(sc.litho, sc.naive_mask_sets)
    rep.rows += [("photomask", f"naive hardwiring, {sc.naive_mask_sets} sets ($M)", naive),
                 ("photomask", "reduction vs naive (x)", costmodel.mask_reduction(sc.litho, sc.naive_mask_sets))]
    for s in (a, b):
        if s is None:
            continue
        cr = costmodel.carbon(s)
        rep.rows += [("carbon", f"{s.name} operational (t)", cr.operational),
                     ("carbon", f"{s.name} embodied (t)", cr.embodied)]
        t = costmodel.tco(s)
        rep.metrics.update({f"{s.name}.static_tco": t.static, f"{s.name}.dynamic_tco": t.dynamic,
                            f"{s.name}.carbon_static": cr.static, f"{s.name}.carbon_dynamic": cr.dynamic})
    return rep


def cmd_compare(sc: ScenarioFile) -> RunReport:
    c = sc.compare
    params = mecore.MethodologyCostParams(**c["params"])
    res = mecore.compare_methodologies(c["n_inputs"], c["n_outputs"], c["bits"], params)
    rep = RunReport("compare", sc.config_hash)
    for name, r in res.items():
        rep.rows.append(("methodology", name, r.cycles, r.energy, r.area))
        rep.metrics.update({f"{name}.cycles": r.cycles, f"{name}.energy": r.energy,
                            f"{name}.area": r.area})
    return rep


# ---------------------------------------------------------------------------
# Entry point

DEFAULT_SCENARIO = {"verify": "toy", "simulate": "full", "cost": "hnlpu_vs_h100", "compare": "toy"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hnlpu", description="Hardwired-neuron LPU simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("verify", "golden-vs-distributed equivalence and ME checks"),
                        ("simulate", "pipeline simulation and collective traces"),
                        ("cost", "TCO, photomask and carbon tables"),
                        ("compare", "MA / CE / ME methodology comparison")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--scenario", default=DEFAULT_SCENARIO[name],
                       help="scenario JSON path or shipped name (toy, full, hnlpu_vs_h100)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario's seed list")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--baseline", default=None, help="baseline cost scenario JSON")
        p.add_argument("--format", choices=FORMATS, default="table")
        if name == "cost":
            p.add_argument("--ratios", action="store_true", help="require baseline-relative ratios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = load_scenario_file(args.scenario, args.seed, args.baseline, args.out)
        if args.command == "verify":
            rep = cmd_verify(sc)
        elif args.command == "simulate":
            rep = cmd_simulate(sc)
        elif args.command == "cost":
            rep = cmd_cost(sc, args.ratios or args.baseline is not None)
        else:
            rep = cmd_compare(sc)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    text = rep.render(args.format)
    sc.out_dir.mkdir(parents=True, exist_ok=True)
    ext = {"table": "txt"}.get(args.format, args.format)
    (sc.out_dir / f"{args.command}_report.{ext}").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
