"""Ground-truth generators: Lorenz-63 and pendulum right-hand sides, a fixed-step
RK4 integrator and Gaussian-random-field control inputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class DivergenceError(RuntimeError):
    pass


class ConditioningError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_points: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_points < 2:
            raise ValueError(f"need at least 2 grid points, got {self.n_points}")

    @classmethod
    def span(cls, t0: float, T: float, dt: float) -> "TimeGrid":
        return cls(t0, dt, int(round(T / dt)) + 1)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    @property
    def T(self) -> float:
        return (self.n_points - 1) * self.dt

    @property
    def t_end(self) -> float:
        return self.t0 + self.T


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray                   # (n_points, state_dim)
    inputs: Optional[np.ndarray] = None  # (n_points, input_dim)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.states.shape[0] != self.grid.n_points:
            raise ValueError("state rows do not match the grid")
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=np.float64)
            if self.inputs.ndim == 1:
                self.inputs = self.inputs[:, None]
            if self.inputs.shape[0] != self.grid.n_points:
                raise ValueError("input rows do not match the grid")

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def head(self, n_points: int) -> "Trajectory":
        """Prefix of the first ``n_points`` samples."""
        grid = TimeGrid(self.grid.t0, self.grid.dt, n_points)
        inputs = None if self.inputs is None else self.inputs[:n_points]
        return Trajectory(grid, self.states[:n_points], inputs)


# ---------------------------------------------------------------------------
# Right-hand sides

LORENZ_PARAMS = dict(sigma=10.0, rho=28.0, beta=8.0 / 3.0)


def lorenz_rhs(state, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> np.ndarray:
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    l: float = 1.0
    b_fric: float = 0.01
    g: float = 9.81

    @property
    def inertia(self) -> float:
        return self.m * self.l ** 2 / 12.0


def pendulum_rhs(state, u, params: PendulumParams = PendulumParams()) -> np.ndarray:
    """Swing-up pendulum; ``u`` is the applied torque. The angle is not wrapped."""
    theta, omega = state[..., 0], state[..., 1]
    u = np.asarray(u, dtype=np.float64)
    if u.ndim and u.shape[-1:] == (1,):
        u = u[..., 0]
    p = params
    denom = 0.25 * p.m * p.l ** 2 + p.inertia
    accel = (u - p.b_fric * omega - 0.5 * p.m * p.l * p.g * np.sin(theta)) / denom
    return np.stack([omega, accel], axis=-1)


# ---------------------------------------------------------------------------
# Integration


def _control_at(u_fn: Callable, t: float, batch: int) -> np.ndarray:
    """Evaluate a control callable as a (batch, k) array."""
    v = np.asarray(u_fn(t), dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1) if batch == 1 or v.size != batch else v.reshape(-1, 1)
    return np.broadcast_to(v, (batch, v.shape[-1])).copy()


def rk4_integrate(rhs: Callable, x0, grid: TimeGrid, inputs=None) -> Trajectory:
    """Classical fixed-step RK4 on ``grid``.

    ``rhs(x)`` for autonomous systems, ``rhs(x, u)`` when ``inputs`` holds the
    control sampled on the grid (shape (n_points,) or (n_points, k)). Stage
    controls are linearly interpolated between grid samples. ``inputs`` may
    instead be a callable ``u(t)``, evaluated exactly at the stage times.
    ``x0`` may carry a leading batch axis, in which case ``inputs`` must too
    and the result is a list of trajectories.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batched = x0.ndim == 2
    x = x0 if batched else x0[None]
    dt = grid.dt
    n = grid.n_points
    u = None
    u_fn = inputs if callable(inputs) else None
    if u_fn is not None:
        inputs = None
        samples = np.stack([_control_at(u_fn, t, x.shape[0]) for t in grid.times], axis=1)
    if inputs is not None:
        u = np.asarray(inputs, dtype=np.float64)
        if not batched:
            u = u[None]
        if u.ndim == 2:
            u = u[..., None]
        if u.shape[1] != n:
            raise ValueError(f"inputs have {u.shape[1]} samples, grid has {n}")

    out = np.empty((x.shape[0], n, x.shape[1]))
    out[:, 0] = x
    for k in range(n - 1):
        if u_fn is not None:
            t = grid.t0 + k * dt
            ua = samples[:, k]
            ub = samples[:, k + 1]
            um = _control_at(u_fn, t + 0.5 * dt, x.shape[0])
            k1 = rhs(x, ua)
            k2 = rhs(x + 0.5 * dt * k1, um)
            k3 = rhs(x + 0.5 * dt * k2, um)
            k4 = rhs(x + dt * k3, ub)
        elif u is None:
            k1 = rhs(x)
            k2 = rhs(x + 0.5 * dt * k1)
            k3 = rhs(x + 0.5 * dt * k2)
            k4 = rhs(x + dt * k3)
        else:
            ua, ub = u[:, k], u[:, k + 1]
            um = 0.5 * (ua + ub)
            k1 = rhs(x, ua)
            k2 = rhs(x + 0.5 * dt * k1, um)
            k3 = rhs(x + 0.5 * dt * k2, um)
            k4 = rhs(x + dt * k3, ub)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at step {k + 1}")
        out[:, k + 1] = x

    if u_fn is not None:
        u = samples
    trajs = [Trajectory(grid, out[i], None if u is None else u[i]) for i in range(x.shape[0])]
    return trajs if batched else trajs[0]


# ---------------------------------------------------------------------------
# Gaussian random fields


@dataclass(frozen=True)
class GRFSpec:
    length_scale: float
    grid: TimeGrid
    jitter: float = 1e-10

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError("kernel length must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def rbf_kernel(t1, t2, length_scale: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64))
    return np.exp(-d ** 2 / (2.0 * length_scale ** 2))


def grf_factor(spec: GRFSpec, max_jitter: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor of the Gram matrix, escalating jitter x10 on failure."""
    t = spec.grid.times
    gram = rbf_kernel(t, t, spec.length_scale)
    jitter = spec.jitter
    while True:
        try:
            return np.linalg.cholesky(gram + jitter * np.eye(t.size))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10, 1e-12)
            if jitter > max_jitter * (1 + 1e-9):
                raise ConditioningError(
                    f"Cholesky failed up to jitter {max_jitter:g} (length {spec.length_scale})")


def sample_grf(spec: GRFSpec, rng: np.random.Generator, size: Optional[int] = None,
               factor: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-mean draw(s) on ``spec.grid``: shape (n_points,) or (size, n_points)."""
    L = grf_factor(spec) if factor is None else factor
    n = spec.grid.n_points
    z = rng.standard_normal(n if size is None else (size, n))
    return z @ L.T if size is not None else L @ z


# ---------------------------------------------------------------------------
# CSV


def save_trajectory_csv(traj: Trajectory, path) -> None:
    d = traj.state_dim
    k = 0 if traj.inputs is None else traj.inputs.shape[1]
    header = ["t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(k)]
    cols = [traj.times[:, None], traj.states]
    if k:
        cols.append(traj.inputs)
    data = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([f"{v:.17g}" for v in row])


def load_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
    xs = [i for i, h in enumerate(header) if h.startswith("x")]
    us = [i for i, h in enumerate(header) if h.startswith("u")]
    t = body[:, 0]
    dt = float(t[1] - t[0])
    grid = TimeGrid(float(t[0]), dt, t.size)
    return Trajectory(grid, body[:, xs], body[:, us] if us else None)
