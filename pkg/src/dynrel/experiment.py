"""Sweep configuration, execution, CSV rows and baseline-normalized summaries.

Config files are YAML. Top-level keys:

    seed: 0                  # run k of every cell uses seed + k
    runs_per_cell: 10
    session:   {duration_s, drain_s, buffer_threshold, mtu_payload}
    workload:  {fps, mean_size_bytes, size_jitter_fraction}
    links:     [wifi, {name: slow-wifi, base: wifi, capacity_mbps: 10}, ...]
    losses:    [{kind: profile}, {kind: random, p: 0.01},
                {kind: burst, target: 0.05},
                {kind: burst, p_gb: 0.01, p_bg: 0.5, loss_good: 0, loss_bad: 0.5}]
    policies:  [vanilla, split20, {name: loss_aware, alpha: 0.8, rt: 0.05}]

Cells are the cross product losses x links x policies, in that nesting order.
Unknown keys anywhere are errors.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .channel import PRESETS, GilbertElliott, LinkProfile, RandomLoss, burst_preset
from .policy import POLICY_NAMES, make_policy
from .scenario import RunResult, ScenarioConfig, run_scenario

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "scenario_id", "policy", "link", "loss_kind", "loss_param", "seed", "duration_s",
    "data_sent", "retx", "acks", "pings", "drops_rel", "drops_unrel", "backlog_events",
    "buffer_discards", "updates_delivered", "updates_incomplete", "peak_aoi_us", "reliable_fraction",
)
BURST_TARGETS = (0.01, 0.03, 0.05, 0.10)
REALTIME_AOI_MS = 10.0
BASELINE_POLICY = "vanilla"
DEFAULT_RUNS = 10


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass
class Cell:
    index: int
    scenario_id: str
    policy: str
    policy_params: dict
    link_name: str
    profile: LinkProfile
    loss: object  # None keeps the link's own random loss


@dataclass
class SweepConfig:
    seed: int = 0
    runs_per_cell: int = DEFAULT_RUNS
    duration_s: float = 10.0
    drain_s: float = 1.0
    buffer_threshold: int = 64
    mtu_payload: int = 1200
    fps: float = 60.0
    mean_size_bytes: int = 16_667
    size_jitter_fraction: float = 0.2
    links: list = field(default_factory=list)      # (name, LinkProfile)
    losses: list = field(default_factory=list)     # LossModel | None
    policies: list = field(default_factory=list)   # (label, name, params)

    def cells(self) -> list[Cell]:
        out = []
        for loss in self.losses:
            for link_name, prof in self.links:
                for label, name, params in self.policies:
                    i = len(out)
                    out.append(Cell(i, f"c{i:03d}", label, {"name": name, **params}, link_name, prof, loss))
        return out

    def scenario(self, cell: Cell, run: int) -> ScenarioConfig:
        params = dict(cell.policy_params)
        name = params.pop("name")
        return ScenarioConfig(
            link=cell.profile, link_name=cell.link_name, loss=cell.loss, policy=name,
            policy_params=params, duration_s=self.duration_s, seed=self.seed + run,
            buffer_threshold=self.buffer_threshold, fps=self.fps, mean_size_bytes=self.mean_size_bytes,
            size_jitter_fraction=self.size_jitter_fraction, mtu_payload=self.mtu_payload,
            drain_s=self.drain_s, scenario_id=cell.scenario_id,
        )


# -- config parsing ---------------------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node, kind, what):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{what}: expected a {kind.__name__}", _line(node))
    value = yaml.safe_load(node.value) if node.tag != "tag:yaml.org,2002:str" else node.value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif kind is float and isinstance(value, str):
        # YAML 1.1 reads 1e-3 (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{what}: expected a {kind.__name__}, got {node.value!r}", _line(node))
    return value


def _mapping(node, allowed, what) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{what}: expected a mapping", _line(node))
    out = {}
    for k, v in node.value:
        key = _scalar(k, str, what)
        if key not in allowed:
            raise ConfigError(f"{what}: unknown key {key!r} (allowed: {', '.join(sorted(allowed))})", _line(k))
        if key in out:
            raise ConfigError(f"{what}: duplicate key {key!r}", _line(k))
        out[key] = v
    return out


def _sequence(node, what) -> list:
    if not isinstance(node, yaml.SequenceNode) or not node.value:
        raise ConfigError(f"{what}: expected a non-empty list", _line(node))
    return node.value


def _number(node, what, lo=None, hi=None, kind=float):
    value = _scalar(node, kind, what)
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ConfigError(f"{what}: {value} outside [{lo}, {hi}]", _line(node))
    return value


def _parse_link(node, i):
    what = f"links[{i}]"
    if isinstance(node, yaml.ScalarNode):
        name = _scalar(node, str, what)
        if name not in PRESETS:
            raise ConfigError(f"{what}: unknown link preset {name!r} (known: {', '.join(PRESETS)})", _line(node))
        return name, PRESETS[name]
    m = _mapping(node, {"name", "base", "capacity_mbps", "delay_ms", "jitter_ms", "loss_p"}, what)
    if "name" not in m:
        raise ConfigError(f"{what}: 'name' is required", _line(node))
    name = _scalar(m["name"], str, what + ".name")
    base_name = _scalar(m["base"], str, what + ".base") if "base" in m else name
    if base_name not in PRESETS:
        if not {"capacity_mbps", "delay_ms", "jitter_ms"} <= m.keys():
            raise ConfigError(f"{what}: custom link needs capacity_mbps, delay_ms and jitter_ms "
                              f"or a known 'base' preset", _line(node))
        base = LinkProfile(1.0, 0, 0)
    else:
        base = PRESETS[base_name]
    changes = {}
    if "capacity_mbps" in m:
        changes["capacity_bps"] = _number(m["capacity_mbps"], what + ".capacity_mbps", lo=1e-6) * 1e6
    if "delay_ms" in m:
        changes["base_delay_us"] = _number(m["delay_ms"], what + ".delay_ms", lo=0) * 1000
    if "jitter_ms" in m:
        changes["jitter_std_us"] = _number(m["jitter_ms"], what + ".jitter_ms", lo=0) * 1000
    if "loss_p" in m:
        changes["loss"] = RandomLoss(_number(m["loss_p"], what + ".loss_p", 0, 1))
    return name, replace(base, **changes)


def _parse_loss(node, i):
    what = f"losses[{i}]"
    m = _mapping(node, {"kind", "p", "target", "p_gb", "p_bg", "loss_good", "loss_bad"}, what)
    if "kind" not in m:
        raise ConfigError(f"{what}: 'kind' is required (profile, random or burst)", _line(node))
    kind = _scalar(m["kind"], str, what + ".kind")
    keys = set(m) - {"kind"}

    def only(allowed):
        extra = keys - allowed
        if extra:
            raise ConfigError(f"{what}: kind {kind!r} does not take {sorted(extra)}", _line(node))

    if kind == "profile":
        only(set())
        return None
    if kind == "random":
        only({"p"})
        if "p" not in m:
            raise ConfigError(f"{what}: random loss needs 'p'", _line(node))
        return RandomLoss(_number(m["p"], what + ".p", 0, 1))
    if kind == "burst":
        if "target" in m:
            only({"target", "p_bg", "loss_good", "loss_bad"})
            kw = {k: _number(m[k], f"{what}.{k}", 0, 1) for k in ("p_bg", "loss_good", "loss_bad") if k in m}
            try:
                return burst_preset(_number(m["target"], what + ".target", 0, 1), **kw)
            except ValueError as e:
                raise ConfigError(f"{what}: {e}", _line(node)) from None
        only({"p_gb", "p_bg", "loss_good", "loss_bad"})
        if not {"p_gb", "p_bg"} <= keys:
            raise ConfigError(f"{what}: burst loss needs 'target' or both 'p_gb' and 'p_bg'", _line(node))
        kw = {k: _number(m[k], f"{what}.{k}", 0, 1) for k in keys}
        try:
            return GilbertElliott(**kw)
        except ValueError as e:
            raise ConfigError(f"{what}: {e}", _line(node)) from None
    raise ConfigError(f"{what}: unknown loss kind {kind!r} (profile, random or burst)", _line(m["kind"]))


def _parse_policy(node, i):
    what = f"policies[{i}]"
    if isinstance(node, yaml.ScalarNode):
        name, params, label = _scalar(node, str, what), {}, None
    else:
        m = _mapping(node, {"name", "label", "p_reliable", "alpha", "rt", "initial_omega"}, what)
        if "name" not in m:
            raise ConfigError(f"{what}: 'name' is required", _line(node))
        name = _scalar(m.pop("name"), str, what + ".name")
        label = _scalar(m.pop("label"), str, what + ".label") if "label" in m else None
        params = {k: _number(v, f"{what}.{k}", 0, 1) for k, v in m.items()}
    try:
        policy = make_policy(name, **params)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{what}: {e}", _line(node)) from None
    return label or policy.name, name, params


def parse_config(text: str) -> SweepConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1 if mark else None) from None
    if root is None:
        raise ConfigError("config is empty")
    top = _mapping(root, {"seed", "runs_per_cell", "session", "workload", "links", "losses", "policies"},
                   "config")
    cfg = SweepConfig()
    if "seed" in top:
        cfg.seed = _number(top["seed"], "seed", lo=0, kind=int)
    if "runs_per_cell" in top:
        cfg.runs_per_cell = _number(top["runs_per_cell"], "runs_per_cell", lo=1, kind=int)
    if "session" in top:
        s = _mapping(top["session"], {"duration_s", "drain_s", "buffer_threshold", "mtu_payload"}, "session")
        if "duration_s" in s:
            cfg.duration_s = _number(s["duration_s"], "session.duration_s", lo=1e-6)
        if "drain_s" in s:
            cfg.drain_s = _number(s["drain_s"], "session.drain_s", lo=0)
        if "buffer_threshold" in s:
            cfg.buffer_threshold = _number(s["buffer_threshold"], "session.buffer_threshold", lo=1, kind=int)
        if "mtu_payload" in s:
            cfg.mtu_payload = _number(s["mtu_payload"], "session.mtu_payload", lo=1, kind=int)
    if "workload" in top:
        w = _mapping(top["workload"], {"fps", "mean_size_bytes", "size_jitter_fraction"}, "workload")
        if "fps" in w:
            cfg.fps = _number(w["fps"], "workload.fps", lo=1e-6)
        if "mean_size_bytes" in w:
            cfg.mean_size_bytes = _number(w["mean_size_bytes"], "workload.mean_size_bytes", lo=1, kind=int)
        if "size_jitter_fraction" in w:
            cfg.size_jitter_fraction = _number(w["size_jitter_fraction"], "workload.size_jitter_fraction", lo=0)
    if "links" in top:
        cfg.links = [_parse_link(n, i) for i, n in enumerate(_sequence(top["links"], "links"))]
    else:
        cfg.links = list(PRESETS.items())
    if "losses" in top:
        cfg.losses = [_parse_loss(n, i) for i, n in enumerate(_sequence(top["losses"], "losses"))]
    else:
        cfg.losses = [None]
    if "policies" in top:
        cfg.policies = [_parse_policy(n, i) for i, n in enumerate(_sequence(top["policies"], "policies"))]
    else:
        cfg.policies = [(name, name, {}) for name in POLICY_NAMES]
    for what, items in (("links", [n for n, _ in cfg.links]), ("policies", [p[0] for p in cfg.policies])):
        dup = {x for x in items if items.count(x) > 1}
        if dup:
            raise ConfigError(f"{what}: duplicate names {sorted(dup)}; give each a distinct name/label")
    return cfg


def load_config(path) -> SweepConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# -- execution --------------------------------------------------------------

def result_row(res: RunResult) -> dict:
    """Flat CSV row; floats carry the CSV's precision so summaries match a re-read file."""
    k = res.kpi
    return {
        "scenario_id": res.scenario_id, "policy": res.policy, "link": res.link,
        "loss_kind": res.loss_kind, "loss_param": res.loss_param, "seed": res.seed,
        "duration_s": res.duration_s, "data_sent": k.data_packets_sent, "retx": k.retransmissions,
        "acks": k.acks_sent, "pings": k.pings_sent, "drops_rel": k.drops_reliable,
        "drops_unrel": k.drops_unreliable, "backlog_events": k.backlogged_events,
        "buffer_discards": k.buffer_discards, "updates_delivered": k.updates_delivered,
        "updates_incomplete": k.updates_incomplete,
        "peak_aoi_us": None if res.peak_aoi_us is None else round(res.peak_aoi_us, 6),
        "reliable_fraction": round(res.reliable_fraction, 6),
    }


def _run_one(args) -> dict:
    scenario, label = args
    res = run_scenario(scenario)
    res.policy = label
    return result_row(res)


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list[dict]:
    """One row per (cell, run), ordered by cell index then run index."""
    work = [(cfg.scenario(cell, k), cell.policy) for cell in cfg.cells() for k in range(cfg.runs_per_cell)]
    if jobs <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work, chunksize=1))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    ints = {"seed", "data_sent", "retx", "acks", "pings", "drops_rel", "drops_unrel", "backlog_events",
            "buffer_discards", "updates_delivered", "updates_incomplete"}
    floats = {"loss_param", "duration_s", "reliable_fraction"}
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for raw in csv.DictReader(f):
            row = dict(raw)
            for c in ints:
                row[c] = int(row[c])
            for c in floats:
                row[c] = float(row[c])
            row["peak_aoi_us"] = float(row["peak_aoi_us"]) if row["peak_aoi_us"] else None
            rows.append(row)
    return rows


# -- summary ----------------------------------------------------------------

def session_volume(row: dict) -> int:
    return row["data_sent"] + row["retx"] + row["acks"] + row["pings"]


METRICS = {
    "volume": session_volume,
    "acks": lambda r: r["acks"],
    "backlog": lambda r: r["backlog_events"],
    "aoi_ms": lambda r: None if r["peak_aoi_us"] is None else r["peak_aoi_us"] / 1000,
    "reliable_fraction": lambda r: r["reliable_fraction"],
}
NORMALIZED = ("volume", "acks", "backlog", "aoi_ms")


def _quartiles(values: list[float]) -> dict | None:
    if not values:
        return None
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"q1": round(float(q1), 6), "median": round(float(med), 6), "q3": round(float(q3), 6),
            "mean": round(float(np.mean(values)), 6)}


def realtime_compliant(median_aoi_ms: float | None) -> bool:
    return median_aoi_ms is not None and median_aoi_ms <= REALTIME_AOI_MS


def summarize(rows: list[dict]) -> dict:
    if not rows:
        raise ValueError("no rows to summarize")
    cells: dict[str, list[dict]] = {}
    for row in rows:
        cells.setdefault(row["scenario_id"], []).append(row)

    def stratum(row):
        return row["link"], row["loss_kind"], row["loss_param"]

    baseline: dict[tuple, dict] = {}
    for row in rows:
        if row["policy"] == BASELINE_POLICY:
            baseline.setdefault(stratum(row), []).append(row)
    base_means = {}
    for key, brows in baseline.items():
        means = {}
        for m in NORMALIZED:
            vals = [v for v in map(METRICS[m], brows) if v is not None]
            means[m] = float(np.mean(vals)) if vals else None
        base_means[key] = means

    warnings = []
    out_cells = []
    for sid, crows in cells.items():
        first = crows[0]
        entry = {"scenario_id": sid, "policy": first["policy"], "link": first["link"],
                 "loss_kind": first["loss_kind"], "loss_param": first["loss_param"], "runs": len(crows)}
        for m, fn in METRICS.items():
            entry[m] = _quartiles([v for v in map(fn, crows) if v is not None])
        means = base_means.get(stratum(first))
        if means is None:
            msg = (f"no {BASELINE_POLICY} cell for link={first['link']} loss={first['loss_kind']}:"
                   f"{first['loss_param']}; normalized columns omitted")
            if msg not in warnings:
                warnings.append(msg)
            entry["normalized"] = None
        else:
            norm = {}
            for m in NORMALIZED:
                base = means[m]
                vals = [v / base for v in map(METRICS[m], crows) if v is not None and base]
                norm[m] = _quartiles(vals)
            entry["normalized"] = norm
        aoi = entry["aoi_ms"]
        entry["realtime"] = realtime_compliant(aoi["median"] if aoi else None)
        out_cells.append(entry)
    for w in warnings:
        log.warning(w)
    return {"realtime_bound_ms": REALTIME_AOI_MS, "baseline": BASELINE_POLICY, "cells": out_cells,
            "warnings": warnings}


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def format_table(summary: dict) -> str:
    head = ("cell", "link", "loss", "policy", "runs", "n.volume", "n.acks", "n.backlog", "aoi_ms", "rel_frac", "rt")
    lines = []
    for c in summary["cells"]:
        norm = c["normalized"]

        def nmed(m):
            if norm is None or norm[m] is None:
                return "-"
            return f"{norm[m]['median']:.3f}"

        aoi = c["aoi_ms"]
        lines.append((
            c["scenario_id"], c["link"], f"{c['loss_kind']}:{c['loss_param']:g}", c["policy"], str(c["runs"]),
            nmed("volume"), nmed("acks"), nmed("backlog"),
            f"{aoi['median']:.2f}" if aoi else "-",
            f"{c['reliable_fraction']['median']:.3f}",
            "yes" if c["realtime"] else "NO",
        ))
    widths = [max(len(h), *(len(r[i]) for r in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    text += [fmt.format(*r) for r in lines]
    text += [f"warning: {w}" for w in summary["warnings"]]
    return "\n".join(text) + "\n"
