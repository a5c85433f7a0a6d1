"""Scenario configuration: INI-style text parsed into validated dataclasses.

See ``docs/formats.md`` for the full grammar. DG ids and link endpoints in
the text are 1-based; everything stored here is 0-based.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .comms import NodeAttack
from .errors import ConfigError, SingularGain
from .plant import OMEGA_NOMINAL
from .qkd import EveModel, Mode
from .topology import AdjacencyMatrix, PinningVector, consensus_gain

SCENARIO_DIR = Path(__file__).with_name("scenarios")


@dataclass(frozen=True)
class PlantConfig:
    n_dg: int = 4
    m_p: float = 1e-4
    n_q: float = 1e-4
    omega_n: float = OMEGA_NOMINAL
    v_odn: float = 311.0
    omega_c: float = 31.4
    r_c: float = 0.1
    line_i: tuple[float, float] = (0.1, 1.5e-3)
    line_ii: tuple[float, float] = (0.07, 0.5e-3)
    loads: tuple[tuple[int, float, float], ...] = ((0, 25.0, 0.0), (2, 25.0, 0.0))


@dataclass(frozen=True)
class TopologyConfig:
    adjacency: tuple[tuple[int, ...], ...] | None = None  # None: complete graph
    pinning: tuple[float, ...] | None = None  # None: DG 1 pinned with gain 1
    k_gain: float = 12.0
    allow_low_gain: bool = False

    def matrix(self, n: int) -> AdjacencyMatrix:
        if self.adjacency is None:
            return AdjacencyMatrix.complete(n, id=1)
        return AdjacencyMatrix.from_rows(self.adjacency, id=1)

    def pin(self, n: int) -> PinningVector:
        if self.pinning is None:
            return PinningVector.leader(n)
        return PinningVector(list(self.pinning))


@dataclass(frozen=True)
class QkdConfig:
    n_raw: int = 1024
    sacrifice: float = 0.25
    threshold: float = 0.11
    p_noise: float = 0.0
    key_buffer_bits: int = 384


@dataclass(frozen=True)
class GuardSettings:
    upsilon1: float | None = None  # None: calibrate from a clean run
    upsilon2: float | None = None
    debounce: int = 5
    recovery_hold: int = 200
    arm_time: float = 0.5
    calibration_factor: float = 3.0


@dataclass(frozen=True)
class LinkEavesdropper:
    """Eavesdropper on the quantum channel carrying ``source``'s data to ``consumer``."""

    consumer: int
    source: int
    eve: EveModel
    name: str = ""

    @property
    def edge(self) -> tuple[int, int]:
        return (self.consumer, self.source)


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 5.0
    dt: float = 1e-4
    t_s: float = 1e-3
    mode: Mode = Mode.FORTIFIED
    seed: int = 0
    out: str | None = None
    name: str = "scenario"
    plant: PlantConfig = field(default_factory=PlantConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    qkd: QkdConfig = field(default_factory=QkdConfig)
    guard: GuardSettings = field(default_factory=GuardSettings)
    eavesdroppers: tuple[LinkEavesdropper, ...] = ()
    node_attacks: tuple[NodeAttack, ...] = ()

    @property
    def substeps(self) -> int:
        return int(round(self.t_s / self.dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.t_s))

    @property
    def attack_onset(self) -> float | None:
        starts = [e.eve.t_start for e in self.eavesdroppers] + [a.t_start for a in self.node_attacks]
        return min(starts) if starts else None

    def replace(self, **changes) -> ScenarioConfig:
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg

    def without_attacks(self) -> ScenarioConfig:
        return dataclasses.replace(self, eavesdroppers=(), node_attacks=())


# section -> key -> (field path, parser)
def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s: str) -> int:
    return int(s, 0)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _pair(s: str) -> tuple[float, float]:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if len(parts) != 2:
        raise ValueError("expected two numbers: R, L")
    return (_float(parts[0]), _float(parts[1]))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(_float(p) for p in re.split(r"[,\s]+", s.strip()) if p)


def _ids(s: str) -> tuple[int, ...]:
    out = tuple(int(p) - 1 for p in re.split(r"[,\s]+", s.strip()) if p)
    if any(i < 0 for i in out):
        raise ValueError("DG ids start at 1")
    return out


def _loads(s: str) -> tuple[tuple[int, float, float], ...]:
    if s.strip().lower() in ("", "none"):
        return ()
    out = []
    for item in re.split(r"[,\s]+", s.strip()):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"load {item!r} is not bus:R or bus:R:X")
        bus = int(parts[0]) - 1
        r = _float(parts[1])
        x = _float(parts[2]) if len(parts) == 3 else 0.0
        out.append((bus, r, x))
    return tuple(out)


def _adjacency(s: str) -> tuple[tuple[int, ...], ...] | None:
    if s.strip().lower() == "complete":
        return None
    rows = [r for r in re.split(r"[;\s]+", s.strip()) if r]
    return tuple(tuple(int(c) for c in row) for row in rows)


def _links(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in re.split(r"[,\s]+", s.strip()):
        if not item:
            continue
        m = re.fullmatch(r"(\d+)->(\d+)", item)
        if not m:
            raise ValueError(f"link {item!r} is not of the form SRC->DST")
        src, dst = int(m.group(1)) - 1, int(m.group(2)) - 1
        out.append((dst, src))
    return tuple(out)


def _optional_float(s: str) -> float | None:
    return None if s.strip().lower() in ("auto", "none", "") else _float(s)


def _optional_end(s: str) -> float | None:
    return None if s.strip().lower() in ("none", "open", "end", "") else _float(s)


_SECTIONS = {
    "run": {
        "duration": _float,
        "dt": _float,
        "t_s": _float,
        "mode": lambda s: Mode(s.strip().lower()),
        "seed": _int,
        "out": str.strip,
        "name": str.strip,
    },
    "plant": {
        "n_dg": _int,
        "m_p": _float,
        "n_q": _float,
        "omega_n": _float,
        "v_odn": _float,
        "omega_c": _float,
        "r_c": _float,
        "line_i": _pair,
        "line_ii": _pair,
        "loads": _loads,
    },
    "topology": {
        "adjacency": _adjacency,
        "pinning": _floats,
        "k_gain": _float,
        "allow_low_gain": _bool,
    },
    "qkd": {
        "n_raw": _int,
        "sacrifice": _float,
        "threshold": _float,
        "p_noise": _float,
        "key_buffer_bits": _int,
    },
    "guard": {
        "upsilon1": _optional_float,
        "upsilon2": _optional_float,
        "debounce": _int,
        "recovery_hold": _int,
        "arm_time": _float,
        "calibration_factor": _float,
    },
}

_ATTACK_KEYS = {
    "kind": str.strip,
    "links": _links,
    "p_intercept": _float,
    "targets": _ids,
    "bias": _floats,
    "start": _float,
    "end": _optional_end,
}


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line number for diagnostics."""
    where: dict[tuple[str, str], int] = {}
    section = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = i
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = i
    return where


def parse_config(text: str) -> ScenarioConfig:
    """Parse scenario text, apply defaults and validate.

    Keys before the first section header belong to ``[run]``.
    """
    first = next((ln.strip() for ln in text.splitlines() if ln.strip() and ln.strip()[0] not in "#;"), "")
    offset = 0
    if not first.startswith("["):
        text = "[run]\n" + text
        offset = 1
    lines = _line_index(text)

    def err(section: str, key: str, msg: str) -> ConfigError:
        ln = lines.get((section, key)) or lines.get((section, ""))
        loc = f"line {ln - offset}: " if ln else ""
        where = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{loc}{where}: {msg}")

    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"syntax error: {e}") from None

    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    attacks = []
    for section in cp.sections():
        if section.startswith("attack"):
            name = section[len("attack"):].strip() or f"attack{len(attacks) + 1}"
            spec = {}
            for key, raw in cp.items(section):
                if key not in _ATTACK_KEYS:
                    raise err(section, key, "unknown key")
                try:
                    spec[key] = _ATTACK_KEYS[key](raw)
                except ValueError as e:
                    raise err(section, key, f"bad value {raw!r}: {e}") from None
            attacks.append((section, name, spec))
            continue
        if section not in _SECTIONS:
            raise err(section, "", "unknown section")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise err(section, key, "unknown key")
            try:
                values[section][key] = _SECTIONS[section][key](raw)
            except ValueError as e:
                raise err(section, key, f"bad value {raw!r}: {e}") from None

    eaves: list[LinkEavesdropper] = []
    nodes: list[NodeAttack] = []
    for section, name, spec in attacks:
        kind = spec.get("kind", "").lower()
        start = spec.get("start", 0.0)
        end = spec.get("end")
        try:
            if kind in ("eavesdrop", "eve", "intercept_resend"):
                for bad in ("targets", "bias"):
                    if bad in spec:
                        raise err(section, bad, "not valid for an eavesdropping attack")
                if "links" not in spec:
                    raise err(section, "links", "eavesdropping attack needs links")
                model = EveModel("intercept_resend", spec.get("p_intercept", 1.0), start, end)
                eaves.extend(LinkEavesdropper(c, s, model, name) for c, s in spec["links"])
            elif kind == "node":
                for bad in ("links", "p_intercept"):
                    if bad in spec:
                        raise err(section, bad, "not valid for a node attack")
                if "targets" not in spec:
                    raise err(section, "targets", "node attack needs targets")
                bias = spec.get("bias", (0.0, 0.0, 0.0))
                if len(bias) != 3:
                    raise err(section, "bias", "expected three numbers: d_omega, d_P, d_Q")
                nodes.append(NodeAttack(frozenset(spec["targets"]), tuple(bias), start, end))
            else:
                raise err(section, "kind", f"unknown attack kind {kind!r} (eavesdrop | node)")
        except ValueError as e:
            raise err(section, "", str(e)) from None

    run = values["run"]
    cfg = ScenarioConfig(
        **{k: v for k, v in run.items()},
        plant=PlantConfig(**values["plant"]),
        topology=TopologyConfig(**values["topology"]),
        qkd=QkdConfig(**values["qkd"]),
        guard=GuardSettings(**values["guard"]),
        eavesdroppers=tuple(eaves),
        node_attacks=tuple(nodes),
    )
    validate(cfg)
    return cfg


def validate(cfg: ScenarioConfig) -> None:
    def bad(msg: str) -> ConfigError:
        return ConfigError(msg)

    if not cfg.duration > 0:
        raise bad("[run] duration must be positive")
    if not (cfg.dt > 0 and cfg.t_s > 0):
        raise bad("[run] dt and t_s must be positive")
    ratio = cfg.t_s / cfg.dt
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise bad(f"[run] dt={cfg.dt} does not divide t_s={cfg.t_s}")
    steps = cfg.duration / cfg.t_s
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise bad(f"[run] t_s={cfg.t_s} does not divide duration={cfg.duration}")

    p = cfg.plant
    n = p.n_dg
    if n < 2:
        raise bad("[plant] n_dg must be at least 2")
    if min(p.m_p, p.n_q, p.omega_n, p.v_odn, p.omega_c) <= 0 or p.r_c <= 0:
        raise bad("[plant] droop, nominal and coupling parameters must be positive")
    for bus, r, x in p.loads:
        if not 0 <= bus < n:
            raise bad(f"[plant] loads: bus {bus + 1} outside 1..{n}")
        if r < 0 or math.hypot(r, x) == 0:
            raise bad(f"[plant] loads: invalid impedance at bus {bus + 1}")

    q = cfg.qkd
    if q.n_raw < 16:
        raise bad("[qkd] n_raw must be at least 16")
    if not 0 < q.sacrifice < 1:
        raise bad("[qkd] sacrifice must lie in (0, 1)")
    if not 0 <= q.p_noise <= 1 or not 0 <= q.threshold <= 1:
        raise bad("[qkd] p_noise and threshold must lie in [0, 1]")
    if q.key_buffer_bits < 192:
        raise bad("[qkd] key_buffer_bits must hold at least one 192-bit frame")

    g = cfg.guard
    if g.debounce < 1 or g.recovery_hold < 1:
        raise bad("[guard] debounce and recovery_hold must be at least 1")
    for name in ("upsilon1", "upsilon2"):
        v = getattr(g, name)
        if v is not None and not v > 0:
            raise bad(f"[guard] {name} must be positive")
    if g.calibration_factor <= 0 or g.arm_time < 0:
        raise bad("[guard] calibration_factor must be positive and arm_time non-negative")

    t = cfg.topology
    try:
        adj = t.matrix(n)
        pin = t.pin(n)
    except ValueError as e:
        raise bad(f"[topology] {e}") from None
    if adj.n != n or pin.gains.shape[0] != n:
        raise bad(f"[topology] adjacency/pinning size does not match n_dg={n}")
    try:
        bound = consensus_gain(adj, pin)
    except SingularGain as e:
        raise bad(f"[topology] {e}") from None
    if t.k_gain < bound and not t.allow_low_gain:
        raise bad(
            f"[topology] k_gain={t.k_gain} is below the consensus bound {bound:.4g};"
            " set allow_low_gain = true to override"
        )

    for e in cfg.eavesdroppers:
        if not (0 <= e.consumer < n and 0 <= e.source < n) or e.consumer == e.source:
            raise bad(f"[attack {e.name}] link {e.source + 1}->{e.consumer + 1} is not a DG pair")
        _check_window(f"attack {e.name}", e.eve.t_start, e.eve.t_end, cfg.duration)
    for a in cfg.node_attacks:
        if any(not 0 <= x < n for x in a.targets):
            raise bad(f"[attack] node targets outside 1..{n}")
        _check_window("attack", a.t_start, a.t_end, cfg.duration)


def _check_window(where: str, start: float, end: float | None, duration: float) -> None:
    if not 0 <= start <= duration:
        raise ConfigError(f"[{where}] start={start} outside [0, {duration}]")
    if end is not None and not start <= end <= duration:
        raise ConfigError(f"[{where}] end={end} outside [start, {duration}]")


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a scenario file, or a library scenario by name (e.g. ``clean``)."""
    p = Path(path)
    if not p.exists():
        lib = SCENARIO_DIR / f"{path}.cfg"
        if lib.exists():
            p = lib
        else:
            raise ConfigError(f"scenario file not found: {path}")
    cfg = parse_config(p.read_text())
    if cfg.name == "scenario":
        cfg = dataclasses.replace(cfg, name=p.stem)
    return cfg


def library() -> list[str]:
    return sorted(f.stem for f in SCENARIO_DIR.glob("*.cfg"))
