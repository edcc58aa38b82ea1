"""Dataset recipes for the Lorenz, pendulum and PV applications."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datagen import AUTONOMOUS, NON_AUTONOMOUS, Dataset, build_quartets, concat, make_rng
from .dynamics import (GRFSpec, LORENZ_PARAMS, PendulumParams, TimeGrid, Trajectory, grf_factor,
                       lorenz_rhs, pendulum_rhs, rk4_integrate, sample_grf)
from .ingest import PVRecord, synth_pv_generator, window_and_interpolate

LORENZ_BOX = ((-17.0, 20.0), (-23.0, 28.0), (0.0, 50.0))
PENDULUM_BOX = ((-math.pi, math.pi), (-8.0, 8.0))


@dataclass(frozen=True)
class Preset:
    name: str
    system_kind: str
    n_train: int          # trajectories (or PV customers)
    n_test: int
    replicas: int
    test_replicas: int
    h_max: float
    eval_h: float
    T: float
    dt: float
    n_days: int = 0       # PV only

    def scaled(self, scale: float) -> "Preset":
        """Shrink trajectory counts, never lengths."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return replace(self, n_train=max(1, int(round(self.n_train * scale))),
                       n_test=max(1, int(round(self.n_test * scale))))


PRESETS = {
    "lorenz": Preset("lorenz", AUTONOMOUS, 5000, 100, 4, 200, 0.02, 0.01, 20.0, 0.01),
    "pendulum": Preset("pendulum", NON_AUTONOMOUS, 5000, 100, 10, 200, 0.02, 0.01, 10.0, 0.01),
    "pv": Preset("pv", AUTONOMOUS, 50, 10, 5, 100, 0.5, 0.25, 10.0, 0.05, n_days=366),
}

PV_TRAIN_START = dt.date(2010, 6, 30)


def _streams(seed, n: int):
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _uniform_box(box, n: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * rng.uniform(size=(n, len(box)))


def lorenz_trajectories(n: int, rng: np.random.Generator, T: float = 20.0, dt_: float = 0.01,
                        x0: Optional[np.ndarray] = None) -> List[Trajectory]:
    x0 = _uniform_box(LORENZ_BOX, n, rng) if x0 is None else np.atleast_2d(x0)
    grid = TimeGrid.span(0.0, T, dt_)
    return rk4_integrate(lambda x: lorenz_rhs(x, **LORENZ_PARAMS), x0, grid)


def pendulum_trajectories(n: int, rng: np.random.Generator, T: float = 10.0, dt_: float = 0.01,
                          control: str = "grf", length_scale: float = 0.01,
                          params: PendulumParams = PendulumParams(),
                          x0: Optional[np.ndarray] = None) -> List[Trajectory]:
    """GRF-driven (``control="grf"``) or u = sin(t/2) (``control="sin"``) responses."""
    grid = TimeGrid.span(0.0, T, dt_)
    x0 = _uniform_box(PENDULUM_BOX, n, rng) if x0 is None else np.atleast_2d(x0)
    if control == "grf":
        spec = GRFSpec(length_scale, grid)
        u = sample_grf(spec, rng, size=x0.shape[0], factor=grf_factor(spec))
    elif control == "sin":
        u = np.tile(np.sin(grid.times / 2.0), (x0.shape[0], 1))
    else:
        raise ValueError(f"unknown control {control!r}")
    return rk4_integrate(lambda x, v: pendulum_rhs(x, v, params), x0, grid, u)


def pendulum_rhs_default(x, u):
    return pendulum_rhs(x, u, PendulumParams())


def lorenz_rhs_default(x):
    return lorenz_rhs(x, **LORENZ_PARAMS)


def pv_trajectories(records: Sequence[PVRecord]) -> List[Trajectory]:
    return [window_and_interpolate(r) for r in records]


def pv_records(customers: Tuple[int, int], n_days: int, rng: np.random.Generator,
               start: dt.date = PV_TRAIN_START) -> List[PVRecord]:
    first, last = customers
    return synth_pv_generator(last - first + 1, n_days, rng, start=start, first_customer=first)


def quartets_from(trajectories: Sequence[Trajectory], replicas: int, h_max: float,
                  rng: np.random.Generator, system_kind: str,
                  fixed_step: Optional[float] = None) -> Dataset:
    return concat([build_quartets(t, replicas, h_max, rng, system_kind, fixed_step=fixed_step)
                   for t in trajectories])


@dataclass
class ExperimentData:
    preset: Preset
    train: Dataset
    test: List[Trajectory]


def generate(name: str, scale: float = 1.0, seed: int = 0, fixed_step: Optional[float] = None,
             n_days: Optional[int] = None, with_test: bool = True) -> ExperimentData:
    """Training quartets and held-out test trajectories for a named experiment."""
    if name not in PRESETS:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name].scaled(scale)
    r_train, r_quart, r_test = _streams(seed, 3)
    if name == "lorenz":
        train = lorenz_trajectories(p.n_train, r_train, p.T, p.dt)
        test = lorenz_trajectories(p.n_test, r_test, p.T, p.dt) if with_test else []
    elif name == "pendulum":
        train = pendulum_trajectories(p.n_train, r_train, p.T, p.dt)
        test = pendulum_trajectories(p.n_test, r_test, p.T, p.dt) if with_test else []
    else:
        days = n_days if n_days is not None else p.n_days
        p = replace(p, n_days=days)
        train = pv_trajectories(pv_records((1, p.n_train), days, r_train))
        test = (pv_trajectories(pv_records((p.n_train + 1, p.n_train + p.n_test), days, r_test))
                if with_test else [])
    ds = quartets_from(train, p.replicas, p.h_max, r_quart, p.system_kind, fixed_step)
    ds.metadata["experiment"] = name
    return ExperimentData(p, ds, test)
