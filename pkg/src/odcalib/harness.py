"""Command-line experiment driver.

Subcommands reproduce the corridor study end to end:

    generate     simulate typical days as the pre-training dataset
    pretrain     fit the surrogate scale and pre-train the predictor
    compare      run the four model variants on the incident scenario
    sensitivity  sweep the demand-prior weight delta
    export       reshape run logs into tidy analysis CSVs

Every command writes ``manifest.json`` (scenario hash, seeds, versions,
arguments) so outputs are reproducible bit for bit; wall-clock timings go to
``timing.json`` and never into CSVs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, calib
from . import metamodel as mm
from . import predictor as pr
from . import sim
from .scenario import ScenarioConfig, load_scenario, sample_true_demand

REFERENCE_SCENARIO = Path(__file__).parent / "data" / "toy_corridor.scn"


@dataclass(frozen=True)
class ModelVariant:
    id: str               # "I".."IV"
    uses_finetune: bool
    online_update: bool


MODEL_VARIANTS = (
    ModelVariant("I", uses_finetune=True, online_update=True),
    ModelVariant("II", uses_finetune=True, online_update=False),
    ModelVariant("III", uses_finetune=False, online_update=True),
    ModelVariant("IV", uses_finetune=False, online_update=False),
)


@dataclass
class MseTable:
    """Per-location MSE, medians over seeds, one column per model variant."""

    locations: tuple[str, ...]
    variants: tuple[str, ...]
    median: np.ndarray          # (n_locations, n_variants)
    by_seed: dict               # (variant, seed) -> per-location MSE array
    seeds: tuple[int, ...]
    replications: int


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(outdir: Path, command: str, args: dict, scenario_path,
                    extra: dict | None = None):
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(args.items())},
        "scenario_sha256": _sha256_file(scenario_path),
        "package_version": __version__,
    }
    if extra:
        manifest.update(extra)
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_timing(outdir: Path, timing: dict):
    (outdir / "timing.json").write_text(
        json.dumps(timing, indent=2, sort_keys=True) + "\n")


def _demand_csv(demand: np.ndarray, od_names) -> str:
    lines = ["interval,od_name,demand_vph"]
    for t in range(demand.shape[0]):
        for j, name in enumerate(od_names):
            lines.append(f"{t},{name},{demand[t, j]:.6f}")
    return "\n".join(lines) + "\n"


def _demand_from_csv(text: str, od_names) -> np.ndarray:
    lines = text.strip().splitlines()[1:]
    idx = {name: j for j, name in enumerate(od_names)}
    horizon = max(int(ln.split(",")[0]) for ln in lines) + 1
    out = np.zeros((horizon, len(od_names)))
    for ln in lines:
        t, name, v = ln.split(",")
        out[int(t), idx[name]] = float(v)
    return out


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

def cmd_generate(scenario_path, days: int, seed: int, outdir,
                 keep_incidents: bool = False) -> Path:
    """Write per-day measurement and demand CSVs for typical (incident-free)
    days unless ``keep_incidents`` is set."""
    scenario = load_scenario(scenario_path)
    if not keep_incidents:
        scenario = scenario.without_incidents()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if days == 0:
        print("warning: --days 0 produces an empty dataset", file=sys.stderr)

    od_names = [p.name for p in scenario.od_pairs]
    day_seeds = [_day_seed(seed, d) for d in range(days)]
    t0 = time.perf_counter()
    for d in range(days):
        plant = sim.build_plant(scenario)
        day = sim.run_day(
            plant,
            lambda t, rng: sample_true_demand(scenario.demand_profile, t, rng),
            scenario.incidents, seed=day_seeds[d])
        (outdir / f"day_{d:02d}_measurements.csv").write_text(
            sim.series_to_csv(day.series))
        (outdir / f"day_{d:02d}_demand.csv").write_text(
            _demand_csv(day.demand, od_names))
    _write_manifest(outdir, "generate",
                    {"scenario": str(scenario_path), "days": days,
                     "seed": seed, "keep_incidents": keep_incidents},
                    scenario_path,
                    extra={"day_seeds": day_seeds})
    _write_timing(outdir, {"generate_seconds": time.perf_counter() - t0})
    return outdir


def _day_seed(seed: int, day: int) -> int:
    return int(np.random.SeedSequence((seed, 0xDA4, day)).generate_state(1)[0])


def load_dataset(dataset_dir, scenario: ScenarioConfig):
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {dataset_dir}")
    od_names = [p.name for p in scenario.od_pairs]
    days = []
    for meas in sorted(dataset_dir.glob("day_*_measurements.csv")):
        demand_path = dataset_dir / meas.name.replace("_measurements",
                                                      "_demand")
        series = sim.series_from_csv(meas.read_text())
        demand = _demand_from_csv(demand_path.read_text(), od_names)
        days.append(sim.DayResult(series=series, demand=demand))
    if not days:
        raise FileNotFoundError(f"no day files in {dataset_dir}")
    return days


# --------------------------------------------------------------------------
# pretrain
# --------------------------------------------------------------------------

def cmd_pretrain(dataset_dir, scenario_path, epochs: int, seed: int, outdir,
                 probe_sim_epoch: bool = False) -> Path:
    scenario = load_scenario(scenario_path)
    days = load_dataset(dataset_dir, scenario)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    base = mm.params_from_scenario(scenario)
    c = calib.fit_surrogate_scale(days, base)
    meta = base.with_c(c)

    result = calib.pretrain(days, meta, scenario, epochs=epochs, seed=seed)

    pr.save_params(result.params, outdir / "params.txt")
    (outdir / "normalizer.json").write_text(
        json.dumps(result.normalizer.to_dict(), indent=2, sort_keys=True)
        + "\n")
    (outdir / "metamodel.json").write_text(json.dumps({
        "c": c,
        "jam_density": meta.jam_density.tolist(),
        "capacity": meta.capacity.tolist(),
        "lanes": meta.lanes.tolist(),
        "incidence": meta.incidence.astype(int).tolist(),
    }, indent=2, sort_keys=True) + "\n")
    loss_lines = ["epoch,mean_loss"]
    for e, loss in enumerate(result.epoch_losses):
        loss_lines.append(f"{e},{loss:.6f}")
    (outdir / "loss_curve.csv").write_text("\n".join(loss_lines) + "\n")

    timing = {
        "epoch_seconds": result.epoch_seconds.tolist(),
        "mean_epoch_seconds": float(result.epoch_seconds.mean()),
    }
    if probe_sim_epoch:
        sim_seconds = calib.simulator_epoch(
            days, meta, scenario, result.params, result.normalizer, seed)
        timing["simulator_epoch_seconds"] = sim_seconds
        timing["surrogate_speedup"] = (
            sim_seconds / float(result.epoch_seconds.mean()))
    _write_manifest(outdir, "pretrain",
                    {"dataset": str(dataset_dir),
                     "scenario": str(scenario_path), "epochs": epochs,
                     "seed": seed},
                    scenario_path,
                    extra={"fitted_c": c})
    _write_timing(outdir, timing)
    return outdir


def load_pretrained(params_dir, scenario: ScenarioConfig):
    params_dir = Path(params_dir)
    params = pr.load_params(params_dir / "params.txt")
    normalizer = pr.Normalizer.from_dict(
        json.loads((params_dir / "normalizer.json").read_text()))
    meta_d = json.loads((params_dir / "metamodel.json").read_text())
    meta = mm.MetamodelParams(
        c=float(meta_d["c"]),
        jam_density=np.asarray(meta_d["jam_density"], dtype=float),
        capacity=np.asarray(meta_d["capacity"], dtype=float),
        lanes=np.asarray(meta_d["lanes"], dtype=float),
        incidence=np.asarray(meta_d["incidence"], dtype=bool),
    )
    return params, normalizer, meta


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

def run_variant(scenario: ScenarioConfig, variant: ModelVariant,
                params_pre: pr.PredictorParams,
                params_ft: pr.PredictorParams | None,
                normalizer: pr.Normalizer, meta: mm.MetamodelParams,
                seed: int, sim_stream: int = 0) -> calib.RunLog:
    """One model-variant run against a fresh truth realization for ``seed``."""
    params = params_ft if variant.uses_finetune else params_pre
    if params is None:
        raise ValueError(f"variant {variant.id} needs fine-tuned parameters")
    state = calib.CalibState(params=params, normalizer=normalizer,
                             metamodel=meta)
    truth_plant = sim.build_plant(scenario)
    twin_plant = sim.build_plant(scenario.without_incidents())
    mode = calib.MODE_UPDATE if variant.online_update else calib.MODE_FROZEN
    return calib.run_online(state, truth_plant, twin_plant, scenario, mode,
                            seed, sim_stream=sim_stream)


def _variant_task(args):
    (scenario, variant, params_pre, params_ft, normalizer, meta, seed,
     stream) = args
    log = run_variant(scenario, variant, params_pre, params_ft, normalizer,
                      meta, seed, sim_stream=stream)
    return (variant.id, seed, stream), log


def _run_pool(tasks, jobs: int):
    """Run task tuples through ``_variant_task``, deterministically ordered."""
    if jobs <= 1 or len(tasks) <= 1:
        results = [_variant_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_variant_task, tasks))
    return dict((key, log) for key, log in results)


def cmd_compare(scenario_path, params_dir, seeds, outdir, replications: int = 1,
                jobs: int = 1, finetune_seed: int = 9001) -> MseTable:
    scenario = load_scenario(scenario_path)
    if not scenario.incidents:
        print("warning: compare scenario has no incidents", file=sys.stderr)
    params_pre, normalizer, meta = load_pretrained(params_dir, scenario)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    params_ft = calib.finetune_typical_day(params_pre, scenario, normalizer,
                                           meta, seed=finetune_seed)
    finetune_seconds = time.perf_counter() - t0

    tasks = [(scenario, v, params_pre, params_ft, normalizer, meta, s, r)
             for s in seeds for v in MODEL_VARIANTS
             for r in range(replications)]
    t0 = time.perf_counter()
    logs = _run_pool(tasks, jobs)
    run_seconds = time.perf_counter() - t0

    locations = tuple(d.id for d in scenario.detectors)
    by_seed = {}
    truth_hashes = {}
    for (vid, seed, stream), log in logs.items():
        (outdir / f"runlog_{vid}_{seed}_{stream}.csv").write_text(
            calib.runlog_to_csv(log))
        (outdir / f"trace_{vid}_{seed}_{stream}.csv").write_text(
            calib.trace_to_csv(log))
        key = (vid, seed)
        by_seed.setdefault(key, []).append(log.mse_per_detector())
        truth_hashes.setdefault(seed, set()).add(log.truth_hash)
    by_seed = {k: np.mean(v, axis=0) for k, v in by_seed.items()}

    for seed, hashes in truth_hashes.items():
        if len(hashes) != 1:
            raise AssertionError(
                f"truth realizations diverged across variants for seed {seed}")

    variants = tuple(v.id for v in MODEL_VARIANTS)
    median = np.zeros((len(locations), len(variants)))
    for vi, vid in enumerate(variants):
        stack = np.vstack([by_seed[(vid, s)] for s in seeds])
        median[:, vi] = np.median(stack, axis=0)

    table = MseTable(locations=locations, variants=variants, median=median,
                     by_seed=by_seed, seeds=tuple(seeds),
                     replications=replications)
    (outdir / "mse_table.csv").write_text(mse_table_to_csv(table))
    lines = ["seed,variant,location,mse"]
    for (vid, seed), arr in sorted(by_seed.items(),
                                   key=lambda kv: (kv[0][1], kv[0][0])):
        for li, loc in enumerate(locations):
            lines.append(f"{seed},{vid},{loc},{arr[li]:.6f}")
    (outdir / "mse_by_seed.csv").write_text("\n".join(lines) + "\n")

    _write_manifest(outdir, "compare",
                    {"scenario": str(scenario_path),
                     "params": str(params_dir),
                     "seeds": list(seeds), "replications": replications,
                     "finetune_seed": finetune_seed},
                    scenario_path,
                    extra={"truth_hashes": {str(s): sorted(h)[0]
                                            for s, h in truth_hashes.items()}})
    _write_timing(outdir, {"finetune_seconds": finetune_seconds,
                           "run_seconds": run_seconds})
    return table


def mse_table_to_csv(table: MseTable) -> str:
    lines = ["location," + ",".join(f"mse_{v}" for v in table.variants)]
    for li, loc in enumerate(table.locations):
        row = [loc] + [f"{table.median[li, vi]:.6f}"
                       for vi in range(len(table.variants))]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# sensitivity
# --------------------------------------------------------------------------

def cmd_sensitivity(scenario_path, params_dir, deltas, seeds, outdir,
                    jobs: int = 1, finetune_seed: int = 9001):
    scenario = load_scenario(scenario_path)
    params_pre, normalizer, meta = load_pretrained(params_dir, scenario)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    params_ft = calib.finetune_typical_day(params_pre, scenario, normalizer,
                                           meta, seed=finetune_seed)

    variant = MODEL_VARIANTS[0]  # full pipeline with online updates
    locations = tuple(d.id for d in scenario.detectors)
    incident_start = min((i.start_interval for i in scenario.incidents),
                         default=scenario.horizon)
    post_window = min(incident_start + 24, scenario.horizon - 1)

    mse = {}
    post_mse = {}
    adaptation = {}
    for delta in deltas:
        sc_d = scenario.with_delta(delta)
        per_seed = []
        per_seed_post = []
        adapt_seeds = []
        for seed in seeds:
            log = run_variant(sc_d, variant, params_pre, params_ft,
                              normalizer, meta, seed)
            (outdir / f"runlog_delta{delta:g}_{seed}.csv").write_text(
                calib.runlog_to_csv(log))
            per_seed.append(log.mse_per_detector())
            sel = log.intervals >= post_window
            gap = log.simulated_density[sel] - log.observed_density[sel]
            per_seed_post.append((gap ** 2).mean(axis=0))
            adapt_seeds.append(
                calib.adaptation_interval(log, incident_start))
        mse[delta] = np.median(np.vstack(per_seed), axis=0)
        post_mse[delta] = np.median(np.vstack(per_seed_post), axis=0)
        adaptation[delta] = int(np.median(adapt_seeds))

    lines = ["location," + ",".join(f"mse_delta_{d:g}" for d in deltas)]
    for li, loc in enumerate(locations):
        lines.append(loc + "," + ",".join(f"{mse[d][li]:.6f}" for d in deltas))
    (outdir / "sensitivity_mse.csv").write_text("\n".join(lines) + "\n")

    lines = ["location," + ",".join(f"mse_delta_{d:g}" for d in deltas)]
    for li, loc in enumerate(locations):
        lines.append(loc + "," + ",".join(f"{post_mse[d][li]:.6f}"
                                          for d in deltas))
    (outdir / "sensitivity_post_adaptation_mse.csv").write_text(
        "\n".join(lines) + "\n")

    lines = ["delta,adaptation_interval"]
    for d in deltas:
        lines.append(f"{d:g},{adaptation[d]}")
    (outdir / "adaptation_time.csv").write_text("\n".join(lines) + "\n")

    _write_manifest(outdir, "sensitivity",
                    {"scenario": str(scenario_path),
                     "params": str(params_dir),
                     "deltas": [float(d) for d in deltas],
                     "seeds": list(seeds), "finetune_seed": finetune_seed},
                    scenario_path)
    return mse, post_mse, adaptation


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def cmd_export(runs_dir, outdir) -> Path:
    """Tidy long-format CSVs from the run logs in ``runs_dir``."""
    runs_dir = Path(runs_dir)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    runlogs = sorted(runs_dir.glob("runlog_*.csv"))
    if not runlogs:
        raise FileNotFoundError(f"no runlog_*.csv files in {runs_dir}")

    loss_rows = ["run,interval,L_f,L_d,total"]
    dens_rows = ["run,interval,location,series,density_vpkm"]
    scat_rows = ["run,interval,od_name,predicted_vph,true_vph"]
    for path in runlogs:
        run = path.stem.replace("runlog_", "")
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        obs_cols = [(i, h[len("f_obs_"):]) for i, h in enumerate(header)
                    if h.startswith("f_obs_")]
        sim_cols = [(i, h[len("f_sim_"):]) for i, h in enumerate(header)
                    if h.startswith("f_sim_")]
        pred_cols = [(i, h[len("D_pred_"):]) for i, h in enumerate(header)
                     if h.startswith("D_pred_")]
        true_cols = [(i, h[len("D_true_"):]) for i, h in enumerate(header)
                     if h.startswith("D_true_")]
        for ln in lines[1:]:
            parts = ln.split(",")
            t = parts[0]
            loss_rows.append(f"{run},{t},{parts[1]},{parts[2]},{parts[3]}")
            for i, loc in obs_cols:
                dens_rows.append(f"{run},{t},{loc},truth,{parts[i]}")
            for i, loc in sim_cols:
                dens_rows.append(f"{run},{t},{loc},simulated,{parts[i]}")
            for (ip, od), (it, _) in zip(pred_cols, true_cols):
                scat_rows.append(f"{run},{t},{od},{parts[ip]},{parts[it]}")

    trace_rows = ["run,interval,param_id,value"]
    for path in sorted(runs_dir.glob("trace_*.csv")):
        run = path.stem.replace("trace_", "")
        for ln in path.read_text().strip().splitlines()[1:]:
            trace_rows.append(f"{run},{ln}")

    (outdir / "loss_over_time.csv").write_text("\n".join(loss_rows) + "\n")
    (outdir / "density_over_time.csv").write_text("\n".join(dens_rows) + "\n")
    (outdir / "demand_scatter.csv").write_text("\n".join(scat_rows) + "\n")
    (outdir / "parameter_traces.csv").write_text("\n".join(trace_rows) + "\n")
    manifest = {
        "command": "export",
        "arguments": {"runs": str(runs_dir)},
        "inputs": [p.name for p in runlogs],
        "package_version": __version__,
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return outdir


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def _parse_seeds(text: str):
    return [int(s) for s in text.split(",") if s]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="odcalib",
        description="Real-time OD demand calibration experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate pre-training days")
    p.add_argument("--scenario", default=str(REFERENCE_SCENARIO))
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-incidents", action="store_true")

    p = sub.add_parser("pretrain", help="fit surrogate scale and pre-train")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scenario", default=str(REFERENCE_SCENARIO))
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--probe-sim-epoch", action="store_true",
                   help="also time one plant-in-the-loop epoch")

    p = sub.add_parser("compare", help="run model variants I-IV")
    p.add_argument("--scenario", default=str(REFERENCE_SCENARIO))
    p.add_argument("--params", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sensitivity", help="sweep the demand-prior weight")
    p.add_argument("--scenario", default=str(REFERENCE_SCENARIO))
    p.add_argument("--params", required=True)
    p.add_argument("--deltas", default="0,0.001,0.1,1")
    p.add_argument("--seeds", default="1")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", help="tidy analysis CSVs from run logs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cmd_generate(args.scenario, args.days, args.seed, args.out,
                         keep_incidents=args.keep_incidents)
        elif args.command == "pretrain":
            cmd_pretrain(args.dataset, args.scenario, args.epochs, args.seed,
                         args.out, probe_sim_epoch=args.probe_sim_epoch)
        elif args.command == "compare":
            table = cmd_compare(args.scenario, args.params,
                                _parse_seeds(args.seeds), args.out,
                                replications=args.replications,
                                jobs=args.jobs)
            print(mse_table_to_csv(table), end="")
        elif args.command == "sensitivity":
            cmd_sensitivity(args.scenario, args.params,
                            [float(d) for d in args.deltas.split(",")],
                            _parse_seeds(args.seeds), args.out,
                            jobs=args.jobs)
        elif args.command == "export":
            cmd_export(args.runs, args.out)
    except Exception as exc:  # CLI contract: nonzero exit with a named error
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
