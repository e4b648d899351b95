"""Calibration loop: losses, injected gradients, pre-training, online updates.

The loop couples three pieces:

    plant (black box)   measured density f per interval, not differentiable
    surrogate           linear density map with an exact Jacobian
    predictor           MLP proposing next-interval OD demand

The measurement loss compares observed and simulated densities; its gradient
with respect to the demand vector is assembled from the *surrogate's*
Jacobian even when the densities came from the plant.  That assembled
gradient is pushed through the predictor's backward pass, one SGD step per
measurement interval (configurable), with the previous interval's weights as
the warm start.

Losses: measurement loss in (veh/km)^2 over detectors, demand-prior loss in
(veh/h)^2 over OD pairs, combined as  L = L_measure + delta * L_prior.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import metamodel as mm
from . import predictor as pr
from . import sim
from .scenario import ScenarioConfig, apriori_demand, sample_true_demand

MODE_UPDATE = "update"
MODE_FROZEN = "frozen"

# seed-stream tags so truth realizations are identical across model variants
_TAG_TRUTH_DEMAND = 1
_TAG_TRUTH_PLANT = 2
_TAG_SIM_PLANT = 3
_TAG_PRETRAIN = 4

N_TRACE = 8  # predictor entries sampled into the parameter trace


# --------------------------------------------------------------------------
# Losses and gradient assembly
# --------------------------------------------------------------------------

def measurement_loss(observed: np.ndarray, simulated: np.ndarray) -> float:
    """Mean squared density gap over detectors, (veh/km)^2."""
    observed = np.asarray(observed, dtype=float)
    simulated = np.asarray(simulated, dtype=float)
    if observed.shape != simulated.shape:
        raise ValueError(
            f"density vectors differ in length: {observed.shape} vs "
            f"{simulated.shape}")
    return float(np.mean((observed - simulated) ** 2))


def demand_loss(predicted: np.ndarray, apriori: np.ndarray) -> float:
    """Mean squared gap to the demand prior over OD pairs, (veh/h)^2."""
    predicted = np.asarray(predicted, dtype=float)
    apriori = np.asarray(apriori, dtype=float)
    if predicted.shape != apriori.shape:
        raise ValueError(
            f"demand vectors differ in length: {predicted.shape} vs "
            f"{apriori.shape}")
    return float(np.mean((predicted - apriori) ** 2))


def assemble_gradient(observed: np.ndarray, simulated: np.ndarray,
                      jac: np.ndarray, predicted: np.ndarray,
                      prior: np.ndarray, delta: float) -> np.ndarray:
    """d(total loss)/d(demand vector).

    The measurement term routes the density residual through the surrogate
    Jacobian regardless of whether ``simulated`` came from the surrogate or
    from the plant; the surrogate error is treated as constant in demand.
    """
    observed = np.asarray(observed, dtype=float)
    simulated = np.asarray(simulated, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    prior = np.asarray(prior, dtype=float)
    k, p = jac.shape
    if observed.shape != (k,) or simulated.shape != (k,):
        raise ValueError("density vectors do not match Jacobian rows")
    if predicted.shape != (p,) or prior.shape != (p,):
        raise ValueError("demand vectors do not match Jacobian columns")
    residual = simulated - observed
    grad = (2.0 / k) * (jac.T @ residual)
    if delta != 0.0:
        grad = grad + delta * (2.0 / p) * (predicted - prior)
    return grad


# --------------------------------------------------------------------------
# Run artifacts
# --------------------------------------------------------------------------

@dataclass
class CalibState:
    """Everything the online loop carries between intervals."""

    params: pr.PredictorParams
    normalizer: pr.Normalizer
    metamodel: mm.MetamodelParams
    interval: int = 0


@dataclass
class RunLog:
    """Per-interval records of one calibration run (one row per prediction)."""

    intervals: np.ndarray            # (R,) target interval index (t+1)
    loss_measurement: np.ndarray     # (R,)
    loss_demand: np.ndarray          # (R,)
    loss_total: np.ndarray           # (R,)
    observed_density: np.ndarray     # (R, K) plant truth
    simulated_density: np.ndarray    # (R, K) calibrated twin
    surrogate_density: np.ndarray    # (R, K) surrogate at the predicted demand
    predicted_demand: np.ndarray     # (R, P)
    true_demand: np.ndarray          # (R, P)
    prior_demand: np.ndarray         # (R, P)
    param_trace: np.ndarray          # (R, N_TRACE)
    trace_labels: tuple[str, ...]
    updates_applied: np.ndarray      # (R,) SGD steps actually taken
    rejected_updates: int
    detector_ids: tuple[str, ...]
    od_names: tuple[str, ...]
    truth_hash: str                  # sha256 of the observed-density series
    final_params: pr.PredictorParams = field(repr=False, default=None)

    @property
    def n_records(self) -> int:
        return len(self.intervals)

    def mse_per_detector(self) -> np.ndarray:
        gap = self.simulated_density - self.observed_density
        return np.mean(gap ** 2, axis=0)


def trace_indices(params: pr.PredictorParams, n: int = N_TRACE):
    """Deterministic spread of n parameter slots across all layers."""
    slots = []
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        slots.append((f"W{li}", w))
        slots.append((f"b{li}", b))
    total = sum(arr.size for _, arr in slots)
    picks = np.linspace(0, total - 1, num=min(n, total), dtype=int)
    out = []
    for flat in picks:
        offset = int(flat)
        for name, arr in slots:
            if offset < arr.size:
                out.append((name, offset))
                break
            offset -= arr.size
    return out


def trace_values(params: pr.PredictorParams, indices) -> np.ndarray:
    lookup = {}
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        lookup[f"W{li}"] = w.ravel()
        lookup[f"b{li}"] = b
    return np.array([lookup[name][off] for name, off in indices])


# --------------------------------------------------------------------------
# Offline pre-training through the surrogate
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: pr.PredictorParams
    normalizer: pr.Normalizer
    epoch_losses: np.ndarray  # (epochs,) mean per-sample loss
    epoch_seconds: np.ndarray


def normalizer_from_days(days) -> pr.Normalizer:
    flows = np.vstack([day.series.flow for day in days])
    speeds = np.vstack([day.series.speed for day in days])
    return pr.normalizer_from_series(flows, speeds)


def fit_surrogate_scale(days, params: mm.MetamodelParams) -> float:
    """Least-squares c from same-interval (realized demand, observed density)."""
    dataset = []
    for day in days:
        for t in range(day.series.horizon):
            dataset.append((day.demand[t], day.series.density[t]))
    return mm.fit_c(params, dataset)


def pretrain(days, meta: mm.MetamodelParams, scenario: ScenarioConfig,
             epochs: int, seed: int,
             params: pr.PredictorParams | None = None) -> PretrainResult:
    """SGD over recorded days, with densities predicted by the surrogate.

    Each sample maps interval t's measurements to interval t+1's demand; the
    loss compares the surrogate density at the (clipped) predicted demand
    with the day's observed density at t+1, plus the delta-weighted prior
    term.  Gradients reach the weights through the surrogate Jacobian and the
    predictor's backward pass.
    """
    if not days:
        raise ValueError("pre-training needs at least one recorded day")
    hyper = scenario.hyper
    horizon = scenario.horizon
    normalizer = normalizer_from_days(days)
    if params is None:
        sizes = ([pr.input_size(horizon, scenario.n_detectors)]
                 + [hyper.hidden_nodes] * hyper.hidden_layers
                 + [scenario.n_od])
        params = pr.init_params(sizes, seed)
    jac = mm.jacobian(meta)
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_PRETRAIN)))
    samples = [(d, t) for d in range(len(days)) for t in range(horizon - 1)]

    epoch_losses = np.zeros(epochs)
    epoch_seconds = np.zeros(epochs)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        total = 0.0
        for si in order:
            d, t = samples[si]
            day = days[d]
            x = pr.encode_input(t, day.series.flow[t], day.series.speed[t],
                                normalizer, horizon)
            raw, tape = pr.forward(params, x)
            demand = pr.clip_demand(raw, hyper.demand_clip_max)
            surrogate = mm.predict_density(meta, demand)
            observed = day.series.density[t + 1]
            prior = apriori_demand(scenario.demand_profile, t + 1)
            total += (measurement_loss(observed, surrogate)
                      + hyper.delta * demand_loss(demand, prior))
            grad_d = assemble_gradient(observed, surrogate, jac, demand,
                                       prior, hyper.delta)
            grads = pr.backward(params, tape, grad_d)
            params = pr.sgd_step(params, grads, hyper.learning_rate)
        loss = total / len(samples)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"pre-training diverged at epoch {epoch}: loss {loss}")
        epoch_losses[epoch] = loss
        epoch_seconds[epoch] = time.perf_counter() - t0
    return PretrainResult(params=params, normalizer=normalizer,
                          epoch_losses=epoch_losses,
                          epoch_seconds=epoch_seconds)


def simulator_epoch(days, meta: mm.MetamodelParams, scenario: ScenarioConfig,
                    params: pr.PredictorParams, normalizer: pr.Normalizer,
                    seed: int) -> float:
    """One training pass with the plant in the loop instead of the surrogate.

    Functionally the baseline the surrogate replaces: per sample the twin
    plant must actually be stepped one interval to produce the simulated
    density.  Returns wall-clock seconds for the full pass over ``days``.
    """
    hyper = scenario.hyper
    horizon = scenario.horizon
    jac = mm.jacobian(meta)
    t0 = time.perf_counter()
    for di, day in enumerate(days):
        plant = sim.build_plant(scenario.without_incidents())
        state = plant.fresh_state()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 5, di)))
        state, _ = sim.step_interval(
            plant, state, apriori_demand(scenario.demand_profile, 0), 0, rng)
        for t in range(horizon - 1):
            x = pr.encode_input(t, day.series.flow[t], day.series.speed[t],
                                normalizer, horizon)
            raw, tape = pr.forward(params, x)
            demand = pr.clip_demand(raw, hyper.demand_clip_max)
            state, frame = sim.step_interval(plant, state, demand, t + 1, rng)
            observed = day.series.density[t + 1]
            prior = apriori_demand(scenario.demand_profile, t + 1)
            grad_d = assemble_gradient(observed, frame.density, jac, demand,
                                       prior, hyper.delta)
            grads = pr.backward(params, tape, grad_d)
            params = pr.sgd_step(params, grads, hyper.learning_rate)
    return time.perf_counter() - t0


# --------------------------------------------------------------------------
# Online calibration
# --------------------------------------------------------------------------

def run_online(state: CalibState, truth_plant: sim.SimPlant,
               sim_plant: sim.SimPlant, scenario: ScenarioConfig, mode: str,
               seed: int, predictor_override=None,
               sim_stream: int = 0, paired_twin: bool = False) -> RunLog:
    """Per-interval twin-plant loop.

    Each interval: read the truth plant's measurements, predict the next
    interval's demand, step the calibrated twin with it, step the truth plant
    with freshly sampled true demand, then (in update mode) take the
    delta-weighted gradient step(s).  Incidents apply to the truth plant
    only; the twin absorbs them through the demand corrections.

    ``predictor_override(t, features, true_next_demand) -> demand`` replaces
    the network (oracle stubs in tests); updates are skipped under an
    override.  ``sim_stream`` varies the twin's noise stream for replications
    without touching the truth realization.  ``paired_twin`` gives the twin
    the truth plant's arrival stream, so residuals reflect only the demand
    mismatch; online runs keep independent streams, offline fine-tuning pairs
    them for a noise-free learning signal.
    """
    if mode not in (MODE_UPDATE, MODE_FROZEN):
        raise ValueError(f"unknown mode '{mode}'")
    hyper = scenario.hyper
    horizon = scenario.horizon
    profile = scenario.demand_profile
    params = state.params.copy()
    meta = state.metamodel
    jac = mm.jacobian(meta)
    n_det = scenario.n_detectors
    n_od = scenario.n_od

    demand_rng = np.random.default_rng(
        np.random.SeedSequence((seed, _TAG_TRUTH_DEMAND)))
    truth_rng = np.random.default_rng(
        np.random.SeedSequence((seed, _TAG_TRUTH_PLANT)))
    sim_tags = ((seed, _TAG_TRUTH_PLANT) if paired_twin
                else (seed, _TAG_SIM_PLANT, sim_stream))
    sim_rng = np.random.default_rng(np.random.SeedSequence(sim_tags))

    records = horizon - 1
    log = RunLog(
        intervals=np.arange(1, horizon),
        loss_measurement=np.zeros(records),
        loss_demand=np.zeros(records),
        loss_total=np.zeros(records),
        observed_density=np.zeros((records, n_det)),
        simulated_density=np.zeros((records, n_det)),
        surrogate_density=np.zeros((records, n_det)),
        predicted_demand=np.zeros((records, n_od)),
        true_demand=np.zeros((records, n_od)),
        prior_demand=np.zeros((records, n_od)),
        param_trace=np.zeros((records, N_TRACE)),
        trace_labels=tuple(f"{nm}[{off}]"
                           for nm, off in trace_indices(params)),
        updates_applied=np.zeros(records, dtype=np.int64),
        rejected_updates=0,
        detector_ids=tuple(d.id for d in scenario.detectors),
        od_names=tuple(p.name for p in scenario.od_pairs),
        truth_hash="",
        final_params=None,
    )
    tr_idx = trace_indices(params)

    incidents = scenario.incidents
    active: set[int] = set()

    def sync_incidents(t: int):
        nonlocal active
        want = {i for i, inc in enumerate(incidents)
                if inc.start_interval <= t <= inc.end_interval}
        for i in want - active:
            truth_plant.apply_incident(incidents[i])
        for i in active - want:
            truth_plant.clear_incident(incidents[i])
        active = want

    truth_state = truth_plant.fresh_state()
    sim_state = sim_plant.fresh_state()
    try:
        # interval 0: truth runs on sampled demand, the twin on the prior
        sync_incidents(0)
        true_d0 = sample_true_demand(profile, 0, demand_rng)
        truth_state, truth_frame = sim.step_interval(
            truth_plant, truth_state, true_d0, 0, truth_rng)
        sim_state, _ = sim.step_interval(
            sim_plant, sim_state, apriori_demand(profile, 0), 0, sim_rng)

        for t in range(horizon - 1):
            x = pr.encode_input(t, truth_frame.flow, truth_frame.speed,
                                state.normalizer, horizon)
            true_next = sample_true_demand(profile, t + 1, demand_rng)
            if predictor_override is not None:
                demand = np.asarray(
                    predictor_override(t, x, true_next), dtype=float)
                raw = demand
            else:
                raw, _tape = pr.forward(params, x)
                demand = pr.clip_demand(raw, hyper.demand_clip_max)

            sim_state, sim_frame = sim.step_interval(
                sim_plant, sim_state, demand, t + 1, sim_rng)
            sync_incidents(t + 1)
            truth_state, truth_frame = sim.step_interval(
                truth_plant, truth_state, true_next, t + 1, truth_rng)

            prior = apriori_demand(profile, t + 1)
            l_f = measurement_loss(truth_frame.density, sim_frame.density)
            l_d = demand_loss(demand, prior)

            applied = 0
            if mode == MODE_UPDATE and predictor_override is None:
                residual_sim = sim_frame.density
                for _ in range(hyper.online_steps_per_interval):
                    raw_k, tape_k = pr.forward(params, x)
                    demand_k = pr.clip_demand(raw_k, hyper.demand_clip_max)
                    grad_d = assemble_gradient(
                        truth_frame.density, residual_sim, jac, demand_k,
                        prior, hyper.delta)
                    grads = pr.backward(params, tape_k, grad_d)
                    try:
                        params = pr.sgd_step(params, grads,
                                             hyper.learning_rate)
                        applied += 1
                    except pr.GradientError:
                        log.rejected_updates += 1
                        break

            log.loss_measurement[t] = l_f
            log.loss_demand[t] = l_d
            log.loss_total[t] = l_f + hyper.delta * l_d
            log.observed_density[t] = truth_frame.density
            log.simulated_density[t] = sim_frame.density
            log.surrogate_density[t] = mm.predict_density(meta, demand)
            log.predicted_demand[t] = demand
            log.true_demand[t] = true_next
            log.prior_demand[t] = prior
            log.param_trace[t] = trace_values(params, tr_idx)
            log.updates_applied[t] = applied
    finally:
        for i in active:
            truth_plant.clear_incident(incidents[i])

    log.truth_hash = hashlib.sha256(
        log.observed_density.tobytes()).hexdigest()
    log.final_params = params
    return log


def finetune_typical_day(params: pr.PredictorParams, scenario: ScenarioConfig,
                         normalizer: pr.Normalizer,
                         meta: mm.MetamodelParams, seed: int
                         ) -> pr.PredictorParams:
    """One incident-free day through the online loop; returns updated weights.

    The day is a single simulation, so the twin shares its arrival stream
    (paired): the update signal is the pure prediction error, free of
    twin-vs-truth plant noise.
    """
    typical = scenario.without_incidents()
    truth_plant = sim.build_plant(typical)
    sim_plant = sim.build_plant(typical)
    state = CalibState(params=params, normalizer=normalizer, metamodel=meta)
    log = run_online(state, truth_plant, sim_plant, typical, MODE_UPDATE, seed,
                     paired_twin=True)
    return log.final_params


# --------------------------------------------------------------------------
# Derived metrics
# --------------------------------------------------------------------------

def peak_window(scenario: ScenarioConfig, half_width: int = 12
                ) -> tuple[int, int]:
    """Interval window (inclusive, exclusive) around the profile's busiest slot."""
    totals = scenario.demand_profile.mean.sum(axis=1)
    center = int(np.argmax(totals))
    return max(1, center - half_width), min(scenario.horizon, center + half_width)


def adaptation_interval(log: RunLog, incident_start: int,
                        window: int = 6) -> int:
    """First interval >= incident start where the trailing mean measurement
    loss drops back to the pre-incident median; -1 if it never recovers."""
    pre = log.loss_measurement[log.intervals < incident_start]
    if len(pre) == 0:
        return -1
    baseline = float(np.median(pre))
    losses = log.loss_measurement
    for i, t in enumerate(log.intervals):
        if t < incident_start:
            continue
        lo = max(0, i - window + 1)
        if float(np.mean(losses[lo:i + 1])) <= baseline:
            return int(t)
    return -1


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------

def runlog_to_csv(log: RunLog) -> str:
    import io
    out = io.StringIO()
    cols = ["interval", "L_f", "L_d", "total"]
    cols += [f"f_obs_{d}" for d in log.detector_ids]
    cols += [f"f_sim_{d}" for d in log.detector_ids]
    cols += [f"D_pred_{o}" for o in log.od_names]
    cols += [f"D_true_{o}" for o in log.od_names]
    out.write(",".join(cols) + "\n")
    for i in range(log.n_records):
        row = [str(int(log.intervals[i])),
               f"{log.loss_measurement[i]:.6f}",
               f"{log.loss_demand[i]:.6f}",
               f"{log.loss_total[i]:.6f}"]
        row += [f"{v:.6f}" for v in log.observed_density[i]]
        row += [f"{v:.6f}" for v in log.simulated_density[i]]
        row += [f"{v:.6f}" for v in log.predicted_demand[i]]
        row += [f"{v:.6f}" for v in log.true_demand[i]]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def trace_to_csv(log: RunLog) -> str:
    import io
    out = io.StringIO()
    out.write("interval,param_id,value\n")
    for i in range(log.n_records):
        for j, label in enumerate(log.trace_labels):
            out.write(f"{int(log.intervals[i])},{label},"
                      f"{log.param_trace[i, j]:.9f}\n")
    return out.getvalue()
