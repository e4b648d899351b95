"""Stochastic mesoscopic corridor plant (first-order cell transmission model).

The plant stands in for a black-box microsimulator: it advances traffic under
a per-interval OD demand vector, applies fixed-time signals and lane-closure
incidents, and reports per-detector density/flow/speed each measurement
interval.

Model conventions:
    * Triangular fundamental diagram per link: free speed v_f, per-lane
      capacity, per-lane jam density, one backward wave speed for the plant.
    * Links are discretized into cells of length v_f * tick; the last cell of
      a link absorbs the remainder (so it is up to twice the nominal length).
    * Vehicle counts are integers per (cell, OD commodity).  Fractional flow
      allowances (capacity per tick is rarely a whole vehicle) carry over via
      per-cell credit accumulators, so conservation is exact in integers.
    * The only stochasticity is Poisson arrivals at origins with rate
      demand * tick; everything downstream is deterministic.
    * A signal gates the stop-line (last) cell of each approach link named in
      one of its phases.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .scenario import IncidentSpec, ScenarioConfig, ScenarioError

try:  # the JIT tick kernel needs numba; the numpy path is the fallback
    from . import sim_kernel as _sim_kernel  # noqa: F401
    _KERNEL_OK = True
except ImportError:  # pragma: no cover
    _KERNEL_OK = False

SINK = -1  # next-cell marker for vehicles leaving the network

DEFAULT_TICK_S = 1.0
DEFAULT_BACKWARD_WAVE_KMH = 20.0


@dataclass
class SimState:
    """Mutable plant state; effective lane factors live on the plant itself."""

    counts: np.ndarray          # int64 (n_cells, n_od) vehicles per cell/commodity
    out_credit: np.ndarray      # float64 (n_cells,) fractional sending allowance
    in_credit: np.ndarray       # float64 (n_cells,) fractional receiving allowance
    source_queue: np.ndarray    # int64 (n_od,) arrivals waiting to enter
    entered: int                # cumulative vehicles injected into the network
    exited: int                 # cumulative vehicles discharged at sinks
    elapsed_ticks: int

    def copy(self) -> "SimState":
        return SimState(
            counts=self.counts.copy(),
            out_credit=self.out_credit.copy(),
            in_credit=self.in_credit.copy(),
            source_queue=self.source_queue.copy(),
            entered=self.entered,
            exited=self.exited,
            elapsed_ticks=self.elapsed_ticks,
        )

    def vehicles_in_network(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MeasurementFrame:
    """Per-detector measurements aggregated over one interval."""

    interval: int
    density: np.ndarray  # veh/km, total over lanes
    flow: np.ndarray     # veh/h
    speed: np.ndarray    # km/h


@dataclass
class MeasurementSeries:
    detector_ids: tuple[str, ...]
    density: np.ndarray  # (horizon, n_detectors)
    flow: np.ndarray
    speed: np.ndarray

    @property
    def horizon(self) -> int:
        return self.density.shape[0]

    def frame(self, interval: int) -> MeasurementFrame:
        return MeasurementFrame(
            interval=interval,
            density=self.density[interval],
            flow=self.flow[interval],
            speed=self.speed[interval],
        )


@dataclass
class DayResult:
    """One simulated day: the measurement series and the demand that drove it."""

    series: MeasurementSeries
    demand: np.ndarray  # (horizon, n_od) veh/h actually injected per interval


class SimPlant:
    """Compiled cell network.  Build with :func:`build_plant`.

    A plant is single-threaded while stepping; run independent plants for
    concurrent experiments.  ``apply_incident``/``clear_incident`` mutate the
    effective-lane factors, nothing else.
    """

    def __init__(self, config: ScenarioConfig, tick_s: float,
                 backward_wave_kmh: float):
        net = config.network
        if tick_s <= 0:
            raise ScenarioError("tick_s must be > 0")
        if abs(config.interval_s / tick_s - round(config.interval_s / tick_s)) > 1e-9:
            raise ScenarioError(
                f"tick_s {tick_s:g} does not divide interval_s {config.interval_s:g}")
        self.config = config
        self.tick_s = float(tick_s)
        self.ticks_per_interval = int(round(config.interval_s / tick_s))
        self.dt_h = tick_s / 3600.0
        self.backward_wave_kmh = float(backward_wave_kmh)

        # --- discretize links into cells -----------------------------------
        link_ids = [ln.id for ln in net.links]
        self.link_index = {lid: i for i, lid in enumerate(link_ids)}
        cell_len_km: list[float] = []
        cell_link: list[int] = []
        link_first_cell: dict[str, int] = {}
        link_last_cell: dict[str, int] = {}
        for ln in net.links:
            nominal_km = ln.free_speed_kmh * tick_s / 3600.0
            length_km = ln.length_m / 1000.0
            n_cells = int(length_km / nominal_km)
            if n_cells < 1:
                raise ScenarioError(
                    f"link '{ln.id}': tick {tick_s:g}s gives cell length "
                    f"{nominal_km * 1000:.1f}m > link length {ln.length_m:g}m")
            link_first_cell[ln.id] = len(cell_len_km)
            for i in range(n_cells):
                if i < n_cells - 1:
                    cell_len_km.append(nominal_km)
                else:
                    cell_len_km.append(length_km - (n_cells - 1) * nominal_km)
                cell_link.append(self.link_index[ln.id])
            link_last_cell[ln.id] = len(cell_len_km) - 1
        self.n_cells = len(cell_len_km)
        self.n_od = config.n_od
        self.link_first_cell = link_first_cell
        self.link_last_cell = link_last_cell
        self.cell_len_km = np.asarray(cell_len_km)
        self.cell_link = np.asarray(cell_link, dtype=np.int64)

        lanes = np.array([net.links[l].lanes for l in self.cell_link], dtype=float)
        self._cap_per_lane = np.array(
            [net.links[l].capacity_per_lane_vph for l in self.cell_link])
        self._jam_per_lane = np.array(
            [net.links[l].jam_density_per_lane_vpkm for l in self.cell_link])
        self._lanes = lanes
        vf = np.array([net.links[l].free_speed_kmh for l in self.cell_link])
        self.cell_free_speed = vf
        nominal_len = vf * tick_s / 3600.0
        # Fraction of a cell's content that can leave per tick in free flow;
        # exactly 1.0 for nominal-length cells, < 1 for remainder cells.
        self.travel_frac = nominal_len / self.cell_len_km
        self.wave_frac = backward_wave_kmh * self.dt_h / self.cell_len_km

        self.lane_factor = np.ones(self.n_cells)
        self._refresh_effective()

        # --- next-cell routing per commodity --------------------------------
        nxt = np.full((self.n_cells, self.n_od), SINK, dtype=np.int64)
        first_cell = np.zeros(self.n_od, dtype=np.int64)
        for pair in config.od_pairs:
            path = net.od_paths[pair.name]
            first_cell[pair.index] = link_first_cell[path[0]]
            for li, lid in enumerate(path):
                a, b = link_first_cell[lid], link_last_cell[lid]
                for c in range(a, b):
                    nxt[c, pair.index] = c + 1
                if li + 1 < len(path):
                    nxt[b, pair.index] = link_first_cell[path[li + 1]]
        self.nxt = nxt
        self.od_first_cell = first_cell

        flat = nxt.ravel()
        self._fwd_sel = np.nonzero(flat != SINK)[0]
        self._fwd_tgt = flat[self._fwd_sel]
        self._fwd_dst = self._fwd_tgt * self.n_od + (self._fwd_sel % self.n_od)
        self._sink_sel = np.nonzero(flat == SINK)[0]
        # claim positions per target cell (CSR), for rationing oversubscribed
        # merges; a claim is the flat (cell, od) slot of a potential sender
        claims: list[list[int]] = [[] for _ in range(self.n_cells)]
        for pos, tgt in zip(self._fwd_sel, self._fwd_tgt):
            claims[int(tgt)].append(int(pos))
        self._claims_ptr = np.zeros(self.n_cells + 1, dtype=np.int64)
        for t in range(self.n_cells):
            self._claims_ptr[t + 1] = self._claims_ptr[t] + len(claims[t])
        self._claims_src = np.asarray(
            [p for lst in claims for p in lst], dtype=np.int64)

        # entry cells and the commodities they serve (CSR)
        entries: dict[int, list[int]] = {}
        for p in range(self.n_od):
            entries.setdefault(int(first_cell[p]), []).append(p)
        entry_items = sorted(entries.items())
        self.entry_cells = [(c, np.asarray(ps, dtype=np.int64))
                            for c, ps in entry_items]
        self._entry_cell = np.asarray([c for c, _ in entry_items],
                                      dtype=np.int64)
        self._entry_ptr = np.zeros(len(entry_items) + 1, dtype=np.int64)
        for i, (_, ps) in enumerate(entry_items):
            self._entry_ptr[i + 1] = self._entry_ptr[i] + len(ps)
        self._entry_od = np.asarray(
            [p for _, ps in entry_items for p in ps], dtype=np.int64)

        # --- signals compiled to stop-line gates ----------------------------
        # Each controlled link: (cell, per-phase open flags, cumulative phase
        # ends, cycle).  Uncontrolled links are always open.
        self._gate_cells: list[int] = []
        self._gate_programs: list[tuple[np.ndarray, np.ndarray, float]] = []
        for sig in net.signals:
            controlled = sorted({g for ph in sig.phases for g in ph.green_links})
            cum = np.cumsum([ph.duration_s for ph in sig.phases])
            for lid in controlled:
                open_flags = np.array(
                    [lid in ph.green_links for ph in sig.phases], dtype=bool)
                self._gate_cells.append(link_last_cell[lid])
                self._gate_programs.append((open_flags, cum, sig.cycle_s))

        # --- detectors -------------------------------------------------------
        self.detector_ids = tuple(d.id for d in config.detectors)
        det_cells = []
        for det in config.detectors:
            a, b = link_first_cell[det.link_id], link_last_cell[det.link_id]
            det_cells.append((a + b) // 2)  # mid-link cell
        self.detector_cells = np.asarray(det_cells, dtype=np.int64)
        self.detector_free_speed = np.array(
            [net.link(d.link_id).free_speed_kmh for d in config.detectors])
        self._gate_cells_arr = np.asarray(self._gate_cells, dtype=np.int64)
        self._base_jam = (self._jam_per_lane * self._lanes * self.cell_len_km)
        self.paranoid = False  # per-tick conservation checking (tests)
        self.backend = "jit" if _KERNEL_OK else "numpy"

    # -- effective (incident-scaled) quantities -----------------------------

    def _refresh_effective(self):
        eff_lanes = self._lanes * self.lane_factor
        self.cap_dt = self._cap_per_lane * eff_lanes * self.dt_h   # veh per tick
        self.jam_storage = self._jam_per_lane * eff_lanes * self.cell_len_km
        self._jam_floor = np.floor(self.jam_storage)

    def apply_incident(self, incident: IncidentSpec):
        """Scale effective lanes on all cells of the incident link."""
        self._set_lane_factor(incident, closed=True)

    def clear_incident(self, incident: IncidentSpec):
        self._set_lane_factor(incident, closed=False)

    def _set_lane_factor(self, incident: IncidentSpec, closed: bool):
        if incident.link_id not in self.link_index:
            raise ScenarioError(f"incident: unknown link '{incident.link_id}'")
        link = self.config.network.link(incident.link_id)
        if not 0 <= incident.lanes_closed < link.lanes:
            raise ScenarioError(
                f"incident on '{incident.link_id}': lanes_closed "
                f"{incident.lanes_closed} not in [0, {link.lanes})")
        factor = (link.lanes - incident.lanes_closed) / link.lanes if closed else 1.0
        cells = self.cell_link == self.link_index[incident.link_id]
        self.lane_factor[cells] = factor
        self._refresh_effective()

    # -- state construction ---------------------------------------------------

    def fresh_state(self) -> SimState:
        return SimState(
            counts=np.zeros((self.n_cells, self.n_od), dtype=np.int64),
            out_credit=np.zeros(self.n_cells),
            in_credit=np.zeros(self.n_cells),
            source_queue=np.zeros(self.n_od, dtype=np.int64),
            entered=0,
            exited=0,
            elapsed_ticks=0,
        )

    def check_conservation(self, state: SimState):
        balance = state.entered - state.exited - state.vehicles_in_network()
        if balance != 0:
            raise AssertionError(f"vehicle conservation violated: balance {balance}")
        if np.any(state.counts < 0):
            raise AssertionError("negative cell count")

    # -- gates ----------------------------------------------------------------

    def _gates_at(self, tick_index: int, gate: np.ndarray):
        t = (tick_index * self.tick_s)
        for cell, (open_flags, cum, cycle) in zip(self._gate_cells,
                                                  self._gate_programs):
            pos = t % cycle
            phase = int(np.searchsorted(cum, pos, side="right"))
            if phase >= len(open_flags):  # guard against float edge at cycle end
                phase = len(open_flags) - 1
            gate[cell] = 1.0 if open_flags[phase] else 0.0

    def gate_schedule(self, first_tick: int, n_ticks: int) -> np.ndarray:
        """Stop-line open/closed flags, shape (n_ticks, n_gated_cells)."""
        out = np.ones((n_ticks, len(self._gate_cells)))
        times = (np.arange(first_tick, first_tick + n_ticks) * self.tick_s)
        for j, (open_flags, cum, cycle) in enumerate(self._gate_programs):
            pos = np.mod(times, cycle)
            phase = np.searchsorted(cum, pos, side="right")
            np.clip(phase, 0, len(open_flags) - 1, out=phase)
            out[:, j] = open_flags[phase]
        return out


def build_plant(config: ScenarioConfig, tick_s: float = DEFAULT_TICK_S,
                backward_wave_kmh: float = DEFAULT_BACKWARD_WAVE_KMH) -> SimPlant:
    """Discretize the scenario network into a steppable cell plant."""
    return SimPlant(config, tick_s, backward_wave_kmh)


# --------------------------------------------------------------------------
# Tick mechanics
# --------------------------------------------------------------------------

def _allocate_rows(totals: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Split integer row totals across columns proportionally to weights.

    Largest-remainder rounding, ties broken toward lower column index, so the
    result is deterministic and never exceeds a column's weight when
    totals <= row sums.
    """
    row_sum = weights.sum(axis=1)
    safe = np.where(row_sum > 0, row_sum, 1)
    quota = totals[:, None] * (weights / safe[:, None])
    base = np.floor(quota).astype(np.int64)
    remainder = totals - base.sum(axis=1)
    frac = quota - base
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(
        rank, order, np.broadcast_to(np.arange(weights.shape[1]), order.shape),
        axis=1)
    return base + (rank < remainder[:, None])


def _allocate_vector(total: int, weights: np.ndarray) -> np.ndarray:
    """1-D largest-remainder split of ``total`` proportional to ``weights``."""
    wsum = weights.sum()
    if wsum <= 0 or total <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    quota = total * (weights / wsum)
    base = np.floor(quota).astype(np.int64)
    remainder = int(total - base.sum())
    if remainder > 0:
        frac = quota - base
        order = np.argsort(-frac, kind="stable")
        base[order[:remainder]] += 1
    return base


RECV_BANK_CAP = 1.0  # max unused receiving allowance carried forward (veh)


def step_interval(plant: SimPlant, state: SimState, demand: np.ndarray,
                  interval: int, rng: np.random.Generator
                  ) -> tuple[SimState, MeasurementFrame]:
    """Advance one measurement interval; returns the new state and detector frame.

    ``demand`` is the per-OD inflow rate (veh/h) held constant over the
    interval; arrivals are Poisson per tick.  The input state is not mutated.

    Integerization: sending allowances carry only their sub-vehicle fraction
    (a red light cannot bank vehicles), while unused receiving allowance may
    bank up to one whole vehicle so that two fractional streams in anti-phase
    cannot deadlock a boundary.
    """
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (plant.n_od,):
        raise ValueError(
            f"demand shape {demand.shape} does not match {plant.n_od} OD pairs")
    state = state.copy()
    # Demand is a per-interval rate: arrivals that could not enter (entry
    # spillback) divert rather than carrying over into the next interval.
    state.source_queue[:] = 0
    ticks = plant.ticks_per_interval
    lam = np.maximum(demand, 0.0) * plant.dt_h

    det_cells = plant.detector_cells
    det_count_acc = np.zeros(len(det_cells), dtype=np.int64)
    det_flow_acc = np.zeros(len(det_cells), dtype=np.int64)

    arrivals_all = rng.poisson(lam, size=(ticks, plant.n_od)).astype(np.int64)
    gate_sched = plant.gate_schedule(state.elapsed_ticks, ticks)

    if plant.backend == "jit":
        from .sim_kernel import run_ticks
        entered, exited, elapsed = run_ticks(
            state.counts, state.out_credit, state.in_credit,
            state.source_queue, state.entered, state.exited,
            state.elapsed_ticks,
            arrivals_all, gate_sched, plant._gate_cells_arr,
            plant.travel_frac, plant.cap_dt, plant.wave_frac,
            plant.jam_storage, plant._jam_floor, plant._base_jam, plant.nxt,
            plant._claims_ptr, plant._claims_src,
            plant._entry_cell, plant._entry_ptr, plant._entry_od,
            det_cells, det_count_acc, det_flow_acc, plant.paranoid)
        state.entered, state.exited = int(entered), int(exited)
        state.elapsed_ticks = int(elapsed)
    else:
        _run_ticks_numpy(plant, state, arrivals_all, gate_sched,
                         det_count_acc, det_flow_acc)

    interval_h = ticks * plant.dt_h
    density = det_count_acc / ticks / plant.cell_len_km[det_cells]
    flow = det_flow_acc / interval_h
    speed = np.where(density > 0, np.divide(
        flow, density, out=np.zeros_like(flow), where=density > 0),
        plant.detector_free_speed)
    frame = MeasurementFrame(interval=interval, density=density, flow=flow,
                             speed=speed)
    return state, frame


def _run_ticks_numpy(plant: SimPlant, state: SimState, arrivals_all,
                     gate_sched, det_count_acc, det_flow_acc):
    """Pure-numpy tick loop; same arithmetic as the JIT kernel."""
    n = state.counts
    n_od = plant.n_od
    det_cells = plant.detector_cells
    gate = np.ones(plant.n_cells)
    gate_cells = plant._gate_cells_arr
    fwd_sel = plant._fwd_sel
    fwd_dst = plant._fwd_dst
    sink_sel = plant._sink_sel
    flat_size = plant.n_cells * n_od

    for k in range(arrivals_all.shape[0]):
        if len(gate_cells):
            gate[gate_cells] = gate_sched[k]
        state.source_queue += arrivals_all[k]

        n_tot = n.sum(axis=1)

        # sending allowance (whole vehicles this tick)
        send_f = np.minimum(n_tot * plant.travel_frac, plant.cap_dt)
        acc = send_f + state.out_credit
        allow_out = np.floor(acc)
        state.out_credit = acc - allow_out
        sendable = np.minimum(n_tot, (allow_out * gate).astype(np.int64))

        # receiving budget (float) and admissible whole vehicles
        recv_budget = np.minimum(plant.cap_dt,
                                 plant.wave_frac * (plant.jam_storage - n_tot))
        np.clip(recv_budget, 0.0, None, out=recv_budget)
        recv_budget += state.in_credit
        room = plant._jam_floor - n_tot
        np.clip(room, 0, None, out=room)
        receivable = np.minimum(np.floor(recv_budget), room).astype(np.int64)

        # split each cell's sending among its commodities
        full = sendable == n_tot
        desired = np.where(full[:, None], n, 0)
        partial = np.nonzero(~full & (sendable > 0))[0]
        if len(partial):
            desired[partial] = _allocate_rows(sendable[partial], n[partial])
        desired_flat = desired.ravel()

        # ration oversubscribed targets (merges, jams)
        inflow = np.bincount(plant._fwd_tgt, weights=desired_flat[fwd_sel],
                             minlength=plant.n_cells)
        over = np.nonzero(inflow > receivable)[0]
        for tgt in over:
            a, b = plant._claims_ptr[tgt], plant._claims_ptr[tgt + 1]
            claims = plant._claims_src[a:b]
            granted = _allocate_vector(int(receivable[tgt]),
                                       desired_flat[claims])
            desired_flat[claims] = granted
            inflow[tgt] = receivable[tgt]

        # apply moves
        moved = desired_flat.reshape(plant.n_cells, n_od)
        n -= moved
        gains = np.bincount(fwd_dst, weights=desired_flat[fwd_sel],
                            minlength=flat_size)
        n += gains.astype(np.int64).reshape(plant.n_cells, n_od)
        state.exited += int(desired_flat[sink_sel].sum())

        # inject waiting arrivals at entry cells, within the leftover
        # receiving allowance (state snapshot semantics as for cell flows)
        admitted = inflow
        for cell, commodities in plant.entry_cells:
            queued = state.source_queue[commodities]
            total_queued = int(queued.sum())
            if total_queued == 0:
                continue
            space = int(receivable[cell]) - int(admitted[cell])
            if space <= 0:
                continue
            inject = _allocate_vector(min(total_queued, space), queued)
            state.source_queue[commodities] -= inject
            n[cell, commodities] += inject
            injected = int(inject.sum())
            admitted[cell] += injected
            state.entered += injected

        # bank unused receiving allowance, capped
        state.in_credit = np.minimum(recv_budget - admitted, RECV_BANK_CAP)

        det_count_acc += n[det_cells].sum(axis=1)
        det_flow_acc += moved[det_cells].sum(axis=1)
        state.elapsed_ticks += 1

        if plant.paranoid:
            plant.check_conservation(state)
            if np.any(n.sum(axis=1) > plant._base_jam + 1e-9):
                raise AssertionError("cell count exceeds base jam storage")


# --------------------------------------------------------------------------
# Day runner
# --------------------------------------------------------------------------

def active_incidents(incidents, interval: int):
    return [inc for inc in incidents
            if inc.start_interval <= interval <= inc.end_interval]


def run_day(plant: SimPlant, demand_source, incidents, seed: int) -> DayResult:
    """Run a full horizon from an empty network.

    ``demand_source(interval, rng) -> np.ndarray`` supplies the per-interval
    demand vector; ``incidents`` are applied on the plant for the intervals
    they cover.  Reproducible: the whole result is a function of the plant
    configuration and ``seed``.
    """
    horizon = plant.config.horizon
    arrival_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
    demand_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDE3)))
    state = plant.fresh_state()
    k = len(plant.detector_ids)
    density = np.zeros((horizon, k))
    flow = np.zeros((horizon, k))
    speed = np.zeros((horizon, k))
    demand_log = np.zeros((horizon, plant.n_od))

    current: set[int] = set()
    try:
        for t in range(horizon):
            want = {i for i, inc in enumerate(incidents)
                    if inc.start_interval <= t <= inc.end_interval}
            for i in want - current:
                plant.apply_incident(incidents[i])
            for i in current - want:
                plant.clear_incident(incidents[i])
            current = want

            demand = np.asarray(demand_source(t, demand_rng), dtype=float)
            demand_log[t] = demand
            state, frame = step_interval(plant, state, demand, t, arrival_rng)
            density[t] = frame.density
            flow[t] = frame.flow
            speed[t] = frame.speed
    finally:
        for i in current:
            plant.clear_incident(incidents[i])

    series = MeasurementSeries(detector_ids=plant.detector_ids,
                               density=density, flow=flow, speed=speed)
    return DayResult(series=series, demand=demand_log)


# --------------------------------------------------------------------------
# CSV export (fixed 6-decimal formatting for reproducible diffs)
# --------------------------------------------------------------------------

def series_to_csv(series: MeasurementSeries) -> str:
    out = io.StringIO()
    out.write("interval,detector_id,density_vpkm,flow_vph,speed_kmh\n")
    for t in range(series.horizon):
        for k, det in enumerate(series.detector_ids):
            out.write(f"{t},{det},{series.density[t, k]:.6f},"
                      f"{series.flow[t, k]:.6f},{series.speed[t, k]:.6f}\n")
    return out.getvalue()


def series_from_csv(text: str) -> MeasurementSeries:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    if header != ["interval", "detector_id", "density_vpkm", "flow_vph",
                  "speed_kmh"]:
        raise ValueError("unexpected measurement CSV header")
    rows = [ln.split(",") for ln in lines[1:]]
    detector_ids: list[str] = []
    for _, det, *_ in rows:
        if det not in detector_ids:
            detector_ids.append(det)
    horizon = max(int(r[0]) for r in rows) + 1
    k = len(detector_ids)
    det_idx = {d: i for i, d in enumerate(detector_ids)}
    density = np.zeros((horizon, k))
    flow = np.zeros((horizon, k))
    speed = np.zeros((horizon, k))
    for t_str, det, dens, fl, sp in rows:
        t, i = int(t_str), det_idx[det]
        density[t, i], flow[t, i], speed[t, i] = float(dens), float(fl), float(sp)
    return MeasurementSeries(detector_ids=tuple(detector_ids), density=density,
                             flow=flow, speed=speed)
