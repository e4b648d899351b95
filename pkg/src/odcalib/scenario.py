"""Scenario definition: network, OD pairs, demand profile, incidents, hyperparameters.

Units used throughout the package:
    lengths    meters (m) in scenario files, kilometers (km) where noted
    speeds     km/h
    flows      veh/h (per OD pair, per detector)
    densities  veh/km (total over lanes unless a name says per lane)
    times      seconds for ticks/cycles, measurement-interval index otherwise

A scenario file is a plain-text, hand-editable description with sections
``[network]``, ``[signals]``, ``[od]``, ``[profile]``, ``[incidents]`` and
``[hyper]``.  See ``parse_scenario`` for the line grammar and the README for
a worked example.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ScenarioError(ValueError):
    """Raised on scenario parse or validation failure; message names the field."""


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkSpec:
    id: str
    from_node: str
    to_node: str
    length_m: float
    lanes: int
    free_speed_kmh: float
    capacity_per_lane_vph: float
    jam_density_per_lane_vpkm: float


@dataclass(frozen=True)
class PhaseSpec:
    green_links: tuple[str, ...]
    duration_s: float


@dataclass(frozen=True)
class SignalSpec:
    node_id: str
    cycle_s: float
    phases: tuple[PhaseSpec, ...]


@dataclass(frozen=True)
class NetworkSpec:
    links: tuple[LinkSpec, ...]
    nodes: tuple[str, ...]
    signals: tuple[SignalSpec, ...]
    # OD pair name -> ordered link-id sequence (fixed path, no route choice)
    od_paths: dict[str, tuple[str, ...]]

    def link(self, link_id: str) -> LinkSpec:
        for ln in self.links:
            if ln.id == link_id:
                return ln
        raise ScenarioError(f"network: unknown link id '{link_id}'")


@dataclass(frozen=True)
class ODPair:
    name: str
    origin: str
    destination: str
    index: int  # position in every demand vector


@dataclass(frozen=True)
class DetectorSpec:
    id: str
    link_id: str


@dataclass(frozen=True)
class IncidentSpec:
    link_id: str
    start_interval: int
    end_interval: int
    lanes_closed: int


@dataclass(frozen=True)
class HyperParams:
    delta: float = 0.001            # weight of the demand-prior loss term
    learning_rate: float = 1.0
    hidden_layers: int = 2
    hidden_nodes: int = 48
    online_steps_per_interval: int = 1
    demand_clip_max: float = 3000.0  # veh/h


@dataclass(frozen=True)
class DemandProfile:
    """Per-interval mean OD demand (veh/h) plus a coefficient of variation."""

    mean: np.ndarray  # shape (horizon, n_od)
    cv: float

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @property
    def n_od(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class ScenarioConfig:
    network: NetworkSpec
    od_pairs: tuple[ODPair, ...]
    demand_profile: DemandProfile
    incidents: tuple[IncidentSpec, ...]
    detectors: tuple[DetectorSpec, ...]
    horizon: int
    interval_s: float
    hyper: HyperParams
    seed: int

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def od_path(self, index: int) -> tuple[str, ...]:
        return self.network.od_paths[self.od_pairs[index].name]

    def without_incidents(self) -> "ScenarioConfig":
        """Copy of this scenario with the incident list emptied (a typical day)."""
        return ScenarioConfig(
            network=self.network,
            od_pairs=self.od_pairs,
            demand_profile=self.demand_profile,
            incidents=(),
            detectors=self.detectors,
            horizon=self.horizon,
            interval_s=self.interval_s,
            hyper=self.hyper,
            seed=self.seed,
        )

    def with_delta(self, delta: float) -> "ScenarioConfig":
        hyper = HyperParams(
            delta=delta,
            learning_rate=self.hyper.learning_rate,
            hidden_layers=self.hyper.hidden_layers,
            hidden_nodes=self.hyper.hidden_nodes,
            online_steps_per_interval=self.hyper.online_steps_per_interval,
            demand_clip_max=self.hyper.demand_clip_max,
        )
        return ScenarioConfig(
            network=self.network,
            od_pairs=self.od_pairs,
            demand_profile=self.demand_profile,
            incidents=self.incidents,
            detectors=self.detectors,
            horizon=self.horizon,
            interval_s=self.interval_s,
            hyper=hyper,
            seed=self.seed,
        )


# --------------------------------------------------------------------------
# Demand generation
# --------------------------------------------------------------------------

def sample_true_demand(profile: DemandProfile, interval: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw one realized demand vector (veh/h) for the given interval.

    Entries are Normal(mean, cv * mean) truncated at zero.  Deterministic for
    a fixed generator state and draw order.
    """
    if not 0 <= interval < profile.horizon:
        raise IndexError(f"interval {interval} outside horizon {profile.horizon}")
    mean = profile.mean[interval]
    draw = rng.normal(mean, profile.cv * mean)
    return np.maximum(draw, 0.0)


def apriori_demand(profile: DemandProfile, interval: int) -> np.ndarray:
    """The historical mean demand row for an interval (the demand prior)."""
    if not 0 <= interval < profile.horizon:
        raise IndexError(f"interval {interval} outside horizon {profile.horizon}")
    return profile.mean[interval].copy()


# --------------------------------------------------------------------------
# Scenario file parsing
# --------------------------------------------------------------------------

_SECTIONS = ("network", "signals", "od", "profile", "incidents", "hyper")

_HYPER_DEFAULTS = {
    "delta": 0.001,
    "learning_rate": 1.0,
    "hidden_layers": 2,
    "hidden_nodes": 48,
    "online_steps_per_interval": 1,
    "demand_clip_max": 3000.0,
    "seed": 0,
}


def _tokenize(line: str) -> tuple[list[str], dict[str, str]]:
    """Split a record line into positional tokens and key=value options."""
    positional: list[str] = []
    options: dict[str, str] = {}
    for tok in line.split():
        if "=" in tok:
            key, _, val = tok.partition("=")
            options[key] = val
        else:
            positional.append(tok)
    return positional, options


def _num(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ScenarioError(f"{where}: expected a number, got '{text}'") from None


def _intnum(text: str, where: str) -> int:
    val = _num(text, where)
    if val != int(val):
        raise ScenarioError(f"{where}: expected an integer, got '{text}'")
    return int(val)


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    """Parse scenario text into a validated ScenarioConfig.

    Line grammar (``#`` starts a comment, blank lines ignored)::

        [network]
        node <id>
        link <id> <from> <to> length_m=.. lanes=.. free_speed_kmh=..
             capacity_per_lane_vph=.. jam_density_per_lane_vpkm=..
        detector <id> link=<link_id>
        [signals]
        signal <node> cycle_s=..
        phase <node> green=<link,link,..> duration_s=..
        [od]
        pair <name> <origin> <destination> path=<link,link,..>
        [profile]
        horizon = N        interval_s = S        cv = C
        anchor <interval> <v_od0> <v_od1> ...   # piecewise-linear keyframes
        row <interval> <v_od0> <v_od1> ...      # explicit per-interval values
        [incidents]
        incident link=<id> start=<interval> end=<interval> lanes_closed=<n>
        [hyper]
        delta = .. learning_rate = .. hidden_layers = .. hidden_nodes = ..
        online_steps_per_interval = .. demand_clip_max = .. seed = ..

    Anchor rows are interpolated linearly over intervals (held constant
    beyond the first/last anchor); row entries must cover every interval if
    used.  Demand columns follow the ``[od]`` pair declaration order.
    """
    nodes: list[str] = []
    links: list[LinkSpec] = []
    detectors: list[DetectorSpec] = []
    signal_cycle: dict[str, float] = {}
    signal_phases: dict[str, list[PhaseSpec]] = {}
    signal_order: list[str] = []
    od_pairs: list[ODPair] = []
    od_paths: dict[str, tuple[str, ...]] = {}
    profile_keys: dict[str, float] = {}
    anchors: list[tuple[int, list[float]]] = []
    rows: list[tuple[int, list[float]]] = []
    incidents: list[IncidentSpec] = []
    hyper_keys: dict[str, float] = {}

    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            section = m.group(1)
            if section not in _SECTIONS:
                raise ScenarioError(f"{where}: unknown section [{section}]")
            continue
        if section is None:
            raise ScenarioError(f"{where}: content before any [section] header")

        if "=" in line and section in ("profile", "hyper") and not line.split()[0] in (
                "anchor", "row"):
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            target = profile_keys if section == "profile" else hyper_keys
            target[key] = _num(val, where)
            continue

        pos, opts = _tokenize(line)
        tag = pos[0]

        if section == "network":
            if tag == "node":
                if len(pos) != 2:
                    raise ScenarioError(f"{where}: node takes one id")
                nodes.append(pos[1])
            elif tag == "link":
                if len(pos) != 4:
                    raise ScenarioError(f"{where}: link needs id, from, to")
                try:
                    links.append(LinkSpec(
                        id=pos[1], from_node=pos[2], to_node=pos[3],
                        length_m=_num(opts["length_m"], where),
                        lanes=_intnum(opts["lanes"], where),
                        free_speed_kmh=_num(opts["free_speed_kmh"], where),
                        capacity_per_lane_vph=_num(opts["capacity_per_lane_vph"], where),
                        jam_density_per_lane_vpkm=_num(
                            opts["jam_density_per_lane_vpkm"], where),
                    ))
                except KeyError as exc:
                    raise ScenarioError(f"{where}: link missing option {exc}") from None
            elif tag == "detector":
                if len(pos) != 2 or "link" not in opts:
                    raise ScenarioError(f"{where}: detector needs an id and link=")
                detectors.append(DetectorSpec(id=pos[1], link_id=opts["link"]))
            else:
                raise ScenarioError(f"{where}: unknown [network] record '{tag}'")

        elif section == "signals":
            if tag == "signal":
                if len(pos) != 2 or "cycle_s" not in opts:
                    raise ScenarioError(f"{where}: signal needs a node and cycle_s=")
                node = pos[1]
                signal_cycle[node] = _num(opts["cycle_s"], where)
                signal_phases.setdefault(node, [])
                signal_order.append(node)
            elif tag == "phase":
                if len(pos) != 2 or "green" not in opts or "duration_s" not in opts:
                    raise ScenarioError(
                        f"{where}: phase needs a node, green= and duration_s=")
                node = pos[1]
                if node not in signal_cycle:
                    raise ScenarioError(
                        f"{where}: phase for undeclared signal '{node}'")
                greens = tuple(g for g in opts["green"].split(",") if g)
                signal_phases[node].append(
                    PhaseSpec(green_links=greens,
                              duration_s=_num(opts["duration_s"], where)))
            else:
                raise ScenarioError(f"{where}: unknown [signals] record '{tag}'")

        elif section == "od":
            if tag != "pair":
                raise ScenarioError(f"{where}: unknown [od] record '{tag}'")
            if len(pos) != 4 or "path" not in opts:
                raise ScenarioError(
                    f"{where}: pair needs name, origin, destination and path=")
            name = pos[1]
            if name in od_paths:
                raise ScenarioError(f"{where}: duplicate od pair '{name}'")
            od_pairs.append(ODPair(name=name, origin=pos[2], destination=pos[3],
                                   index=len(od_pairs)))
            od_paths[name] = tuple(p for p in opts["path"].split(",") if p)

        elif section == "profile":
            if tag not in ("anchor", "row"):
                raise ScenarioError(f"{where}: unknown [profile] record '{tag}'")
            if len(pos) < 3:
                raise ScenarioError(f"{where}: {tag} needs an interval and values")
            interval = _intnum(pos[1], where)
            values = [_num(v, where) for v in pos[2:]]
            (anchors if tag == "anchor" else rows).append((interval, values))

        elif section == "incidents":
            if tag != "incident":
                raise ScenarioError(f"{where}: unknown [incidents] record '{tag}'")
            try:
                incidents.append(IncidentSpec(
                    link_id=opts["link"],
                    start_interval=_intnum(opts["start"], where),
                    end_interval=_intnum(opts["end"], where),
                    lanes_closed=_intnum(opts["lanes_closed"], where),
                ))
            except KeyError as exc:
                raise ScenarioError(f"{where}: incident missing option {exc}") from None

        else:  # hyper handled above; record lines are invalid here
            raise ScenarioError(f"{where}: unexpected record in [{section}]")

    # -- profile assembly ----------------------------------------------------
    if "horizon" not in profile_keys:
        raise ScenarioError(f"{source}: [profile] must set horizon")
    horizon = int(profile_keys["horizon"])
    interval_s = float(profile_keys.get("interval_s", 300.0))
    cv = float(profile_keys.get("cv", 0.0))
    n_od = len(od_pairs)
    if n_od == 0:
        raise ScenarioError(f"{source}: [od] declares no pairs")

    mean = _build_profile(anchors, rows, horizon, n_od, source)

    signals = tuple(
        SignalSpec(node_id=node, cycle_s=signal_cycle[node],
                   phases=tuple(signal_phases[node]))
        for node in signal_order
    )
    network = NetworkSpec(links=tuple(links), nodes=tuple(nodes),
                          signals=signals, od_paths=od_paths)

    hyper = HyperParams(
        delta=float(hyper_keys.get("delta", _HYPER_DEFAULTS["delta"])),
        learning_rate=float(hyper_keys.get("learning_rate",
                                           _HYPER_DEFAULTS["learning_rate"])),
        hidden_layers=int(hyper_keys.get("hidden_layers",
                                         _HYPER_DEFAULTS["hidden_layers"])),
        hidden_nodes=int(hyper_keys.get("hidden_nodes",
                                        _HYPER_DEFAULTS["hidden_nodes"])),
        online_steps_per_interval=int(hyper_keys.get(
            "online_steps_per_interval",
            _HYPER_DEFAULTS["online_steps_per_interval"])),
        demand_clip_max=float(hyper_keys.get("demand_clip_max",
                                             _HYPER_DEFAULTS["demand_clip_max"])),
    )
    seed = int(hyper_keys.get("seed", _HYPER_DEFAULTS["seed"]))

    config = ScenarioConfig(
        network=network,
        od_pairs=tuple(od_pairs),
        demand_profile=DemandProfile(mean=mean, cv=cv),
        incidents=tuple(incidents),
        detectors=tuple(detectors),
        horizon=horizon,
        interval_s=interval_s,
        hyper=hyper,
        seed=seed,
    )
    validate_scenario(config)
    return config


def _build_profile(anchors, rows, horizon, n_od, source) -> np.ndarray:
    if anchors and rows:
        raise ScenarioError(f"{source}: [profile] mixes anchor and row entries")
    mean = np.zeros((horizon, n_od))
    if rows:
        seen = set()
        for interval, values in rows:
            if not 0 <= interval < horizon:
                raise ScenarioError(
                    f"{source}: profile row interval {interval} outside horizon")
            if len(values) != n_od:
                raise ScenarioError(
                    f"{source}: profile row {interval} has {len(values)} values, "
                    f"expected {n_od}")
            mean[interval] = values
            seen.add(interval)
        missing = set(range(horizon)) - seen
        if missing:
            raise ScenarioError(
                f"{source}: profile rows missing intervals {sorted(missing)[:5]}...")
    elif anchors:
        anchors = sorted(anchors, key=lambda a: a[0])
        for interval, values in anchors:
            if len(values) != n_od:
                raise ScenarioError(
                    f"{source}: profile anchor {interval} has {len(values)} values, "
                    f"expected {n_od}")
        pts = np.array([a[0] for a in anchors], dtype=float)
        vals = np.array([a[1] for a in anchors], dtype=float)
        grid = np.arange(horizon, dtype=float)
        for j in range(n_od):
            mean[:, j] = np.interp(grid, pts, vals[:, j])
    else:
        raise ScenarioError(f"{source}: [profile] has no anchor or row entries")
    return mean


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file; raises ScenarioError with field context."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text(), source=str(path))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def validate_scenario(config: ScenarioConfig) -> None:
    """Check every structural invariant; raises ScenarioError naming the field."""
    net = config.network
    if config.interval_s <= 0:
        raise ScenarioError("profile.interval_s: must be > 0")
    if config.horizon <= 0:
        raise ScenarioError("profile.horizon: must be > 0")

    node_set = set(net.nodes)
    if len(node_set) != len(net.nodes):
        raise ScenarioError("network.nodes: duplicate node ids")
    link_by_id: dict[str, LinkSpec] = {}
    for ln in net.links:
        if ln.id in link_by_id:
            raise ScenarioError(f"network.links[{ln.id}]: duplicate link id")
        if ln.from_node not in node_set or ln.to_node not in node_set:
            raise ScenarioError(
                f"network.links[{ln.id}]: endpoint not a declared node")
        if ln.lanes < 1:
            raise ScenarioError(f"network.links[{ln.id}]: lanes must be >= 1")
        if ln.length_m <= 0:
            raise ScenarioError(f"network.links[{ln.id}]: length_m must be > 0")
        if ln.capacity_per_lane_vph <= 0:
            raise ScenarioError(f"network.links[{ln.id}]: capacity must be > 0")
        if ln.jam_density_per_lane_vpkm <= 0:
            raise ScenarioError(f"network.links[{ln.id}]: jam density must be > 0")
        if ln.free_speed_kmh <= 0:
            raise ScenarioError(f"network.links[{ln.id}]: free speed must be > 0")
        link_by_id[ln.id] = ln

    for sig in net.signals:
        if sig.node_id not in node_set:
            raise ScenarioError(f"signals[{sig.node_id}]: unknown node")
        if not sig.phases:
            raise ScenarioError(f"signals[{sig.node_id}]: no phases declared")
        total = sum(ph.duration_s for ph in sig.phases)
        if not math.isclose(total, sig.cycle_s, rel_tol=0, abs_tol=1e-9):
            raise ScenarioError(
                f"signals[{sig.node_id}]: phase durations sum to {total:g}, "
                f"cycle_s is {sig.cycle_s:g}")
        for ph in sig.phases:
            for g in ph.green_links:
                if g not in link_by_id:
                    raise ScenarioError(
                        f"signals[{sig.node_id}]: green link '{g}' not in network")

    indices = sorted(p.index for p in config.od_pairs)
    if indices != list(range(len(config.od_pairs))):
        raise ScenarioError("od_pairs: indices are not a bijection onto 0..n-1")
    for pair in config.od_pairs:
        if pair.origin not in node_set:
            raise ScenarioError(f"od[{pair.name}]: origin '{pair.origin}' unknown")
        if pair.destination not in node_set:
            raise ScenarioError(
                f"od[{pair.name}]: destination '{pair.destination}' unknown")
        path = net.od_paths.get(pair.name)
        if not path:
            raise ScenarioError(f"od[{pair.name}]: empty path")
        for lid in path:
            if lid not in link_by_id:
                raise ScenarioError(f"od[{pair.name}]: path link '{lid}' unknown")
        first, last = link_by_id[path[0]], link_by_id[path[-1]]
        if first.from_node != pair.origin:
            raise ScenarioError(
                f"od[{pair.name}]: path starts at {first.from_node}, "
                f"origin is {pair.origin}")
        if last.to_node != pair.destination:
            raise ScenarioError(
                f"od[{pair.name}]: path ends at {last.to_node}, "
                f"destination is {pair.destination}")
        for a, b in zip(path, path[1:]):
            if link_by_id[a].to_node != link_by_id[b].from_node:
                raise ScenarioError(
                    f"od[{pair.name}]: links '{a}' and '{b}' are not connected")

    links_on_paths = {lid for path in net.od_paths.values() for lid in path}
    if not config.detectors:
        raise ScenarioError("network.detectors: at least one detector required")
    det_ids = set()
    for det in config.detectors:
        if det.id in det_ids:
            raise ScenarioError(f"detectors[{det.id}]: duplicate detector id")
        det_ids.add(det.id)
        if det.link_id not in link_by_id:
            raise ScenarioError(f"detectors[{det.id}]: unknown link '{det.link_id}'")
        if det.link_id not in links_on_paths:
            raise ScenarioError(
                f"detectors[{det.id}]: link '{det.link_id}' lies on no OD path")

    for i, inc in enumerate(config.incidents):
        if inc.link_id not in link_by_id:
            raise ScenarioError(f"incidents[{i}]: unknown link '{inc.link_id}'")
        lanes = link_by_id[inc.link_id].lanes
        if not 0 <= inc.lanes_closed < lanes:
            raise ScenarioError(
                f"incidents[{i}]: lanes_closed {inc.lanes_closed} not in "
                f"[0, {lanes})")
        if inc.start_interval > inc.end_interval:
            raise ScenarioError(f"incidents[{i}]: start after end")

    prof = config.demand_profile
    if prof.mean.shape != (config.horizon, config.n_od):
        raise ScenarioError(
            f"profile.mean: shape {prof.mean.shape} != "
            f"({config.horizon}, {config.n_od})")
    if np.any(prof.mean < 0):
        raise ScenarioError("profile.mean: negative demand entry")
    if prof.cv < 0:
        raise ScenarioError("profile.cv: must be >= 0")

    hyp = config.hyper
    if hyp.delta < 0:
        raise ScenarioError("hyper.delta: must be >= 0")
    if hyp.learning_rate <= 0:
        raise ScenarioError("hyper.learning_rate: must be > 0")
    if hyp.online_steps_per_interval < 0:
        raise ScenarioError("hyper.online_steps_per_interval: must be >= 0")
