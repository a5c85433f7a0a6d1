"""Co-simulation master loop.

Per cyber step ``t_s`` the order is fixed: QKD sessions, frame encoding
(with node-level injection), encryption and delivery, guard (detection,
quarantine, mitigation), secondary integration. The plant then advances
``t_s / dt`` RK4 steps with the secondary corrections held.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comms import KeyBuffer, decode_payload, deliver, encode_frame, otp_encrypt
from .config import ScenarioConfig
from .errors import Diverged, EmptySiftedKey, SingularGain, Stale, Undeliverable
from .guard import Guard, GuardConfig, detection_metrics, edge_residuals
from .plant import (
    DgParams,
    DgState,
    NetworkModel,
    advance_physics,
    droop_outputs,
    ring_network,
)
from .qkd import Mode, baseline_accept, run_session
from .secondary import (
    ControlGains,
    NeighborRecord,
    integrate_secondary,
    secondary_rates,
)
from .topology import AdjacencyMatrix, consensus_gain, is_valid_topology

log = logging.getLogger(__name__)

OUT_ENV = "QKDGRID_OUT"
FINAL_WINDOW = 0.5
OMEGA_TOL = 1e-3
SPREAD_TOL = 0.01


class Streams:
    """Named, independent Philox streams derived from one 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self._cache: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(name.encode()))
            self._cache[name] = np.random.Generator(np.random.Philox(ss))
        return self._cache[name]


def link_name(edge: tuple[int, int]) -> str:
    x, y = edge
    return f"{y + 1}->{x + 1}"


def build_plant(cfg: ScenarioConfig) -> tuple[DgParams, NetworkModel]:
    p = cfg.plant
    params = DgParams.uniform(p.n_dg, p.m_p, p.n_q, omega_n=p.omega_n, v_odn=p.v_odn, omega_c=p.omega_c)
    loads = {bus: (r, x) for bus, r, x in p.loads}
    net = ring_network(p.n_dg, p.line_i, p.line_ii, loads, p.r_c, p.omega_n)
    return params, net


@dataclass
class Trace:
    t: np.ndarray
    omega: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    d_omega: np.ndarray
    d_v: np.ndarray
    dm1: np.ndarray
    dm2: np.ndarray
    matrix_id: np.ndarray
    links: list[tuple[int, int]]
    qber: np.ndarray
    delivered: np.ndarray
    stale: np.ndarray
    rows: int = 0
    events: list[tuple[float, str, int, str]] = field(default_factory=list)
    max_r1: float = 0.0
    max_r2: float = 0.0

    @classmethod
    def empty(cls, steps: int, n: int, links: list[tuple[int, int]]) -> Trace:
        f = lambda: np.full((steps, n), np.nan)
        m = len(links)
        return cls(
            t=np.zeros(steps), omega=f(), v=f(), p=f(), q=f(), d_omega=f(), d_v=f(), dm1=f(), dm2=f(),
            matrix_id=np.zeros(steps, dtype=int), links=links,
            qber=np.full((steps, m), np.nan), delivered=np.zeros((steps, m), dtype=bool),
            stale=np.zeros((steps, m), dtype=bool),
        )

    def trim(self) -> None:
        k = self.rows
        for name in ("t", "omega", "v", "p", "q", "d_omega", "d_v", "dm1", "dm2", "matrix_id",
                     "qber", "delivered", "stale"):
            setattr(self, name, getattr(self, name)[:k])


@dataclass
class RunSummary:
    name: str
    mode: str
    seed: int
    duration: float
    converged: bool
    diverged_at: float | None
    final_max_dev: float
    max_dev_post_onset: float | None
    max_dev_dg1_post_onset: float | None
    p_spread: float
    q_spread: float
    first_trigger: float | None
    triggers: list[tuple[float, int, int]]
    matrices: list[int]
    matrix_switches: list[tuple[float, int]]
    mean_qber: dict[str, float]
    thresholds: tuple[float, float] | None

    def to_kv(self) -> str:
        fmt = lambda v: "none" if v is None else (repr(v) if isinstance(v, float) else str(v))
        lines = [
            f"name={self.name}",
            f"mode={self.mode}",
            f"seed={self.seed}",
            f"duration={fmt(self.duration)}",
            f"converged={str(self.converged).lower()}",
            f"diverged_at={fmt(self.diverged_at)}",
            f"final_max_dev={fmt(self.final_max_dev)}",
            f"max_dev_post_onset={fmt(self.max_dev_post_onset)}",
            f"max_dev_dg1_post_onset={fmt(self.max_dev_dg1_post_onset)}",
            f"p_spread={fmt(self.p_spread)}",
            f"q_spread={fmt(self.q_spread)}",
            f"first_trigger={fmt(self.first_trigger)}",
            "triggers=" + ";".join(f"{t!r}:{x}<-{y}" for t, x, y in self.triggers),
            "matrices=" + ",".join(f"S{i}" for i in self.matrices),
            "matrix_switches=" + ";".join(f"{t!r}:S{i}" for t, i in self.matrix_switches),
            "mean_qber=" + ";".join(f"{k}:{v!r}" for k, v in sorted(self.mean_qber.items())),
            "thresholds=" + ("none" if self.thresholds is None else ",".join(repr(v) for v in self.thresholds)),
        ]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        status = "CONVERGED" if self.converged else "NOT CONVERGED"
        if self.diverged_at is not None:
            status = f"DIVERGED at t={self.diverged_at:.4f} s"
        out = [
            f"scenario {self.name} ({self.mode}, seed {self.seed}, {self.duration:g} s): {status}",
            f"  final 0.5 s max |omega - omega_n| : {self.final_max_dev:.3e} rad/s",
            f"  droop-product spread P / Q       : {self.p_spread:.3e} / {self.q_spread:.3e}",
        ]
        if self.max_dev_post_onset is not None:
            out.append(f"  post-onset max |omega - omega_n| : {self.max_dev_post_onset:.3e} rad/s"
                       f" (DG1 {self.max_dev_dg1_post_onset:.3e})")
        if self.thresholds is not None:
            out.append(f"  thresholds U1 / U2               : {self.thresholds[0]:.3e} / {self.thresholds[1]:.3e}")
        if self.triggers:
            out.append(f"  first trigger                    : t={self.first_trigger:.4f} s")
            for t, x, y in self.triggers:
                out.append(f"    t={t:.4f} DG{x} flags source DG{y}")
        else:
            out.append("  triggers                         : none")
        out.append("  matrices                         : " + " -> ".join(f"S{i}" for i in self.matrices))
        if self.mean_qber:
            q = ", ".join(f"{k} {v:.3f}" for k, v in sorted(self.mean_qber.items()))
            out.append(f"  mean QBER                        : {q}")
        return "\n".join(out)


@dataclass
class RunResult:
    config: ScenarioConfig
    summary: RunSummary
    trace: Trace
    # every matrix that was active during the run, by id
    matrices: dict[int, AdjacencyMatrix] = field(default_factory=dict)
    out_dir: Path | None = None


_calibration_cache: dict[str, tuple[float, float]] = {}


def calibrate_thresholds(cfg: ScenarioConfig) -> tuple[float, float]:
    """Thresholds = factor x the largest clean-run metric after the arm time."""
    clean = cfg.without_attacks()
    key = repr((clean.duration, clean.dt, clean.t_s, clean.plant, clean.topology,
                clean.guard.arm_time, clean.guard.calibration_factor))
    if key not in _calibration_cache:
        probe = GuardConfig(math.inf, math.inf, clean.guard.debounce, clean.guard.recovery_hold,
                            clean.guard.arm_time)
        res = simulate(clean.replace(mode=Mode.FORTIFIED, seed=0), guard_cfg=probe, ideal_channel=True)
        k = clean.guard.calibration_factor
        armed = res.trace.t >= clean.guard.arm_time
        if not armed.any():
            # the guard never arms in this run, so the thresholds are never consulted
            _calibration_cache[key] = (math.inf, math.inf)
        else:
            m1 = max(np.nanmax(res.trace.dm1[armed]), res.trace.max_r1)
            m2 = max(np.nanmax(res.trace.dm2[armed]), res.trace.max_r2)
            _calibration_cache[key] = (float(max(k * m1, 1e-9)), float(max(k * m2, 1e-9)))
    return _calibration_cache[key]


def guard_config(cfg: ScenarioConfig) -> GuardConfig:
    g = cfg.guard
    u1, u2 = g.upsilon1, g.upsilon2
    if u1 is None or u2 is None:
        c1, c2 = calibrate_thresholds(cfg)
        u1 = c1 if u1 is None else u1
        u2 = c2 if u2 is None else u2
    return GuardConfig(u1, u2, g.debounce, g.recovery_hold, g.arm_time)


def simulate(cfg: ScenarioConfig, guard_cfg: GuardConfig | None = None, ideal_channel: bool = False) -> RunResult:
    """Run the loop in memory; see :func:`run` for the file-writing wrapper.

    ``ideal_channel`` skips key distribution and encryption and hands every
    frame over unmodified. Threshold calibration uses it.
    """
    params, net = build_plant(cfg)
    n = cfg.plant.n_dg
    omega_n = params.omega_n
    droops = (params.m_p, params.n_q)
    default = cfg.topology.matrix(n)
    default_pin = cfg.topology.pin(n)
    active, pin = default, default_pin
    gains = ControlGains.equal(cfg.topology.k_gain)
    weights: dict[int, dict[int, float]] = {}
    fortified = cfg.mode is Mode.FORTIFIED
    if fortified and guard_cfg is None:
        guard_cfg = guard_config(cfg)
    guard = Guard(guard_cfg, default, default_pin) if fortified else None

    streams = Streams(cfg.seed)
    links = default.edges()
    buffers = {e: KeyBuffer(capacity=cfg.qkd.key_buffer_bits) for e in links}
    held = {e: NeighborRecord(omega_n, 0.0, 0.0, fresh=False, age=1) for e in links}
    eves = {}
    for e in cfg.eavesdroppers:
        eves.setdefault(e.edge, []).append(e.eve)
    node_attacks = list(cfg.node_attacks)

    steps = cfg.n_steps
    trace = Trace.empty(steps + 1, n, links)
    link_index = {e: i for i, e in enumerate(links)}
    state = DgState.zeros(n)
    next_id = default.id + 1
    matrices = [default.id]
    used = {default.id: default}
    switches: list[tuple[float, int]] = [(0.0, default.id)]
    triggers: list[tuple[float, int, int]] = []
    diverged_at = None
    q_cfg = cfg.qkd

    for k in range(steps + 1):
        t = round(k * cfg.t_s, 12)
        omega, v = droop_outputs(params, state)
        locals_ = [(float(omega[x]), float(state.p_filt[x]), float(state.q_filt[x])) for x in range(n)]

        # QKD -> encode -> encrypt -> deliver, one frame per monitored link
        transmit = set(links) | set(active.edges()) if fortified else set(active.edges())
        raw: dict[tuple[int, int], tuple[float, float, float] | None] = {}
        for e in sorted(transmit):
            x, y = e
            if e not in buffers:
                buffers[e] = KeyBuffer(capacity=q_cfg.key_buffer_bits)
                held[e] = NeighborRecord(omega_n, 0.0, 0.0, fresh=False, age=1)
            if ideal_channel:
                raw[e] = decode_payload(encode_frame(y, *locals_[y], attacks=node_attacks, t=t, seq=k).payload)
                if e in link_index:
                    trace.delivered[k, link_index[e]] = True
                continue
            buf = buffers[e]
            eve = next((ev for ev in eves.get(e, ()) if ev.active_at(t)), None)
            qber = math.nan
            try:
                s = run_session(q_cfg.n_raw, eve, q_cfg.p_noise, cfg.mode, streams.get(f"qkd/link/{link_name(e)}"),
                                q_cfg.sacrifice)
                if fortified or baseline_accept(s, q_cfg.threshold):
                    buf.push(s.sifted_bits_tx, s.sifted_bits_rx)
                if s.qber_estimate is not None:
                    qber = s.qber_estimate
            except EmptySiftedKey:
                pass
            frame = encode_frame(y, *locals_[y], attacks=node_attacks, t=t, seq=k)
            try:
                ct = otp_encrypt(frame.payload, buf)
            except Undeliverable:
                ct = None
            try:
                raw[e] = deliver(ct, buf)
            except Stale:
                raw[e] = None
            if e in link_index:
                i = link_index[e]
                trace.qber[k, i] = qber
                trace.delivered[k, i] = raw[e] is not None

        # guard: detection, quarantine, mitigation
        dm1 = np.zeros(n)
        dm2 = np.zeros(n)
        if guard is not None:
            views = [{} for _ in range(n)]
            for (x, y), vals in raw.items():
                views[x][y] = NeighborRecord(*vals) if vals is not None else held[(x, y)]
            with np.errstate(all="ignore"):
                g = guard.step(t, views, locals_, active, pin, droops, omega_n)
            for (x, y), ok in g.accepted.items():
                vals = raw[(x, y)]
                held[(x, y)] = NeighborRecord(*vals) if (ok and vals is not None) else held[(x, y)].held()
            for r in g.reports:
                dm1[r.dg], dm2[r.dg] = r.dm1, r.dm2
            if t >= guard_cfg.arm_time:
                for x, view in enumerate(views):
                    for r1, r2 in edge_residuals(x, view, locals_[x], droops).values():
                        trace.max_r1 = max(trace.max_r1, abs(r1))
                        trace.max_r2 = max(trace.max_r2, abs(r2))
            for x, y in g.new_edge_flags:
                triggers.append((t, x + 1, y + 1))
                trace.events.append((t, "flag", x + 1, f"source DG{y + 1}"))
            if g.mitigation is not None:
                m = g.mitigation
                active = m.matrix.with_id(next_id)
                used[active.id] = active
                next_id += 1
                pin = m.pinning
                weights = m.weights()
                matrices.append(active.id)
                switches.append((t, active.id))
                trace.events.append((t, "switch", 0, f"S{active.id} {active!r}"))
                try:
                    bound = consensus_gain(active, pin)
                    if bound > gains.k1:
                        log.warning("k_gain %.3g below consensus bound %.3g of S%d", gains.k1, bound, active.id)
                except SingularGain:
                    log.warning("S%d has no positive consensus bound", active.id)
            if g.restored:
                active, pin, weights = default, default_pin, {}
                matrices.append(active.id)
                switches.append((t, active.id))
                trace.events.append((t, "restore", 0, f"S{active.id}"))
            assert is_valid_topology(active, pin)
        else:
            for (x, y), vals in raw.items():
                held[(x, y)] = NeighborRecord(*vals) if vals is not None else held[(x, y)].held()
            with np.errstate(all="ignore"):
                for x in range(n):
                    view = {y: held[(x, y)] for y in active.sources(x)}
                    dm1[x], dm2[x] = detection_metrics(x, view, locals_[x], pin.gains[x], droops, omega_n)
        for e in raw:
            if e in link_index:
                trace.stale[k, link_index[e]] = not held[e].fresh

        # secondary control
        r1 = np.zeros(n)
        r2 = np.zeros(n)
        with np.errstate(all="ignore"):
            for x in range(n):
                view = {y: held[(x, y)] for y in active.sources(x)}
                r1[x], r2[x] = secondary_rates(x, view, locals_[x], pin.gains[x], gains, droops, omega_n,
                                               weights.get(x))

        trace.t[k] = t
        trace.omega[k] = omega
        trace.v[k] = v
        trace.p[k] = state.p_filt
        trace.q[k] = state.q_filt
        trace.d_omega[k] = state.d_omega
        trace.d_v[k] = state.d_v
        trace.dm1[k] = dm1
        trace.dm2[k] = dm2
        trace.matrix_id[k] = active.id
        trace.rows = k + 1
        if k == steps:
            break
        try:
            with np.errstate(all="ignore"):
                state = integrate_secondary(state, (r1, r2), cfg.t_s, t)
                state = advance_physics(state, params, net, cfg.dt, cfg.substeps, t + cfg.t_s)
        except Diverged as exc:
            diverged_at = exc.t if exc.t is not None else t
            trace.events.append((diverged_at, "diverged", 0, str(exc).split(":")[0]))
            break

    trace.trim()
    summary = summarize(cfg, trace, triggers, matrices, switches, diverged_at,
                        None if guard_cfg is None or not fortified else (guard_cfg.upsilon1, guard_cfg.upsilon2))
    return RunResult(cfg, summary, trace, used)


def summarize(cfg, trace, triggers, matrices, switches, diverged_at, thresholds) -> RunSummary:
    omega_n = cfg.plant.omega_n
    dev = np.abs(trace.omega - omega_n)
    final = trace.t >= cfg.duration - FINAL_WINDOW - 1e-12
    if diverged_at is not None or not final.any():
        final_dev, p_spread, q_spread = math.inf, math.inf, math.inf
    else:
        final_dev = float(np.max(dev[final]))
        p_spread = _spread(cfg.plant.m_p * trace.p[final])
        q_spread = _spread(cfg.plant.n_q * trace.q[final])
    onset = cfg.attack_onset
    post = dg1 = None
    if onset is not None:
        after = trace.t >= onset
        if after.any():
            d = np.where(np.isfinite(dev[after]), dev[after], math.inf)
            post = float(np.max(d))
            dg1 = float(np.max(d[:, 0]))
        if diverged_at is not None:
            post = dg1 = math.inf
    converged = (
        diverged_at is None and final_dev < OMEGA_TOL and p_spread < SPREAD_TOL and q_spread < SPREAD_TOL
    )
    mean_qber = {}
    for i, e in enumerate(trace.links):
        col = trace.qber[:, i]
        if np.isfinite(col).any():
            mean_qber[link_name(e)] = float(np.nanmean(col))
    return RunSummary(
        name=cfg.name, mode=cfg.mode.value, seed=cfg.seed, duration=cfg.duration, converged=converged,
        diverged_at=diverged_at, final_max_dev=final_dev, max_dev_post_onset=post,
        max_dev_dg1_post_onset=dg1, p_spread=p_spread, q_spread=q_spread,
        first_trigger=triggers[0][0] if triggers else None, triggers=triggers, matrices=matrices,
        matrix_switches=switches, mean_qber=mean_qber, thresholds=thresholds,
    )


def _spread(products: np.ndarray) -> float:
    """Largest relative spread (max - min) / |mean| over the rows."""
    mean = np.abs(products.mean(axis=1))
    width = products.max(axis=1) - products.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mean > 0, width / mean, np.where(width > 0, np.inf, 0.0))
    return float(np.max(rel))


def resolve_out_dir(cfg: ScenarioConfig, out: str | os.PathLike | None = None) -> Path:
    if out is not None:
        return Path(out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg.out:
        return Path(cfg.out)
    return Path("out") / cfg.name


def run(cfg: ScenarioConfig, out: str | os.PathLike | None = None) -> RunResult:
    """Simulate and write CSV files plus summaries into the output directory."""
    result = simulate(cfg)
    out_dir = resolve_out_dir(cfg, out)
    write_outputs(result, out_dir)
    result.out_dir = out_dir
    return result


DG_COLUMNS = ["t", "omega", "v", "p", "q", "d_omega", "d_v", "dm1", "dm2", "active_matrix_id"]
LINK_COLUMNS = ["t", "qber_estimate", "delivered", "stale"]


def _num(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_outputs(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = result.trace
    n = tr.omega.shape[1]
    for x in range(n):
        with open(out_dir / f"dg_{x + 1}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DG_COLUMNS)
            for k in range(tr.rows):
                w.writerow([_num(tr.t[k]), _num(tr.omega[k, x]), _num(tr.v[k, x]), _num(tr.p[k, x]),
                            _num(tr.q[k, x]), _num(tr.d_omega[k, x]), _num(tr.d_v[k, x]),
                            _num(tr.dm1[k, x]), _num(tr.dm2[k, x]), int(tr.matrix_id[k])])
    for i, e in enumerate(tr.links):
        x, y = e
        with open(out_dir / f"link_{y + 1}-{x + 1}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LINK_COLUMNS)
            for k in range(tr.rows):
                w.writerow([_num(tr.t[k]), _num(tr.qber[k, i]), int(tr.delivered[k, i]), int(tr.stale[k, i])])
    with open(out_dir / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "event", "dg", "detail"])
        for t, ev, dg, detail in tr.events:
            w.writerow([_num(t), ev, dg, detail])
    (out_dir / "summary.txt").write_text(result.summary.to_text() + "\n")
    (out_dir / "summary.kv").write_text(result.summary.to_kv())
