"""Analytic demand-to-density surrogate for the corridor plant.

The surrogate is a static assignment map: predicted density at detector k is

    c * (k_jam_k / q_cap_k) * (sum of demand over OD pairs crossing k) / n_k

with a single global scale ``c`` fitted by least squares against observed
densities.  It is linear and homogeneous in the demand vector, so its
Jacobian is constant and exact, which is what makes loss gradients
computable even though the plant itself is a black box.

Units: demand veh/h, jam density veh/km (per lane), capacity veh/h (per
lane), predicted density veh/km.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scenario import ScenarioConfig


class MetamodelError(ValueError):
    pass


@dataclass(frozen=True)
class MetamodelParams:
    c: float
    jam_density: np.ndarray   # (n_detectors,) veh/km per lane
    capacity: np.ndarray      # (n_detectors,) veh/h per lane
    lanes: np.ndarray         # (n_detectors,)
    incidence: np.ndarray     # bool (n_detectors, n_od); True if OD path crosses k

    @property
    def n_detectors(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_od(self) -> int:
        return self.incidence.shape[1]

    def with_c(self, c: float) -> "MetamodelParams":
        return replace(self, c=float(c))


def params_from_scenario(config: ScenarioConfig, c: float = 1.0) -> MetamodelParams:
    """Derive detector constants and the OD-path incidence from the scenario."""
    k = config.n_detectors
    incidence = np.zeros((k, config.n_od), dtype=bool)
    jam = np.zeros(k)
    cap = np.zeros(k)
    lanes = np.zeros(k)
    for ki, det in enumerate(config.detectors):
        link = config.network.link(det.link_id)
        jam[ki] = link.jam_density_per_lane_vpkm
        cap[ki] = link.capacity_per_lane_vph
        lanes[ki] = link.lanes
        for pair in config.od_pairs:
            if det.link_id in config.network.od_paths[pair.name]:
                incidence[ki, pair.index] = True
    return MetamodelParams(c=float(c), jam_density=jam, capacity=cap,
                           lanes=lanes, incidence=incidence)


def structural_density(params: MetamodelParams, demand: np.ndarray) -> np.ndarray:
    """Predicted density with c factored out (the c=1 evaluation)."""
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (params.n_od,):
        raise MetamodelError(
            f"demand length {demand.shape} does not match "
            f"{params.n_od} incidence columns")
    loads = params.incidence @ demand
    return (params.jam_density / params.capacity) * loads / params.lanes


def predict_density(params: MetamodelParams, demand: np.ndarray) -> np.ndarray:
    """Surrogate density (veh/km) per detector; linear and homogeneous in demand."""
    return params.c * structural_density(params, demand)


def jacobian(params: MetamodelParams) -> np.ndarray:
    """d(predicted density)/d(demand), shape (n_detectors, n_od); constant."""
    coeff = params.c * params.jam_density / (params.capacity * params.lanes)
    return coeff[:, None] * params.incidence


def fit_c(params: MetamodelParams, dataset) -> float:
    """Least-squares scale from (demand, observed density) pairs.

    Minimizes sum over the dataset of ||observed - c * structural||^2; the
    closed form is sum(structural * observed) / sum(structural^2).
    """
    num = 0.0
    den = 0.0
    for demand, observed in dataset:
        s = structural_density(params, demand)
        observed = np.asarray(observed, dtype=float)
        if observed.shape != s.shape:
            raise MetamodelError("observed density length mismatch")
        num += float(s @ observed)
        den += float(s @ s)
    if den == 0.0:
        raise MetamodelError(
            "cannot fit c: structural term is zero for every observation")
    return num / den
