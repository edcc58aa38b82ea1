"""Rollouts, error metrics, coverage and the horizon / step-size studies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch

from . import numerics as nx
from .datagen import AUTONOMOUS, NON_AUTONOMOUS, Dataset, Normalizer, build_quartets
from .dynamics import TimeGrid, Trajectory
from .model import (DEEPONET, LSTM_MIONET, VANILLA_LSTM, ModelConfig, branch_state_forward,
                    build_layout, decode_history, fuse, lift_forward, local_deeponet_forward,
                    predict, trunk_forward)
from .training import Ensemble, PredictionBand, ensemble_stats

__all__ = ["PredictionBand", "EvalReport", "NeuralModel", "EnsembleModel", "OracleModel",
           "rollout", "l2_relative_error", "picp", "batch_evaluate", "extrapolation_study",
           "stepsize_study", "write_curve", "write_band"]


class RolloutDivergence(RuntimeError):
    pass


class DegenerateReferenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics


def _channel(values, channel):
    a = values.states if isinstance(values, Trajectory) else np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a if channel is None else a[:, channel]


def l2_relative_error(pred, truth, channel: Optional[int] = None) -> float:
    """||pred - truth||_2 / ||truth||_2 over the time samples of one channel
    (all channels jointly when ``channel`` is None)."""
    p, t = _channel(pred, channel), _channel(truth, channel)
    if p.shape != t.shape:
        raise nx.DimensionError(f"prediction shape {p.shape} != truth shape {t.shape}")
    denom = np.linalg.norm(t)
    if denom == 0:
        raise DegenerateReferenceError("reference has zero norm")
    return float(np.linalg.norm(p - t) / denom)


def picp(band: PredictionBand, truth, channel: Optional[int] = None) -> float:
    """Fraction of samples whose true value lies inside mean +- 1.96 std."""
    t = _channel(truth, channel)
    lo = band.lower if band.lower.ndim > 1 else band.lower[:, None]
    hi = band.upper if band.upper.ndim > 1 else band.upper[:, None]
    if channel is not None:
        lo, hi = lo[:, channel], hi[:, channel]
    if lo.shape != t.shape:
        raise nx.DimensionError(f"band shape {lo.shape} != truth shape {t.shape}")
    with np.errstate(invalid="ignore"):
        inside = (t >= lo) & (t <= hi)
    return float(inside.mean())


# ---------------------------------------------------------------------------
# Models behind a common interface


class NeuralModel:
    """A trained operator: config + normalizer + one parameter vector."""

    def __init__(self, cfg: ModelConfig, normalizer: Normalizer, params):
        self.cfg = cfg
        self.normalizer = normalizer
        self.theta = torch.from_numpy(np.asarray(getattr(params, "values", params), dtype=np.float64))

    @property
    def system_kind(self) -> str:
        return self.cfg.system_kind

    def predict(self, ds: Dataset) -> np.ndarray:
        return predict(self.theta, self.cfg, self.normalizer, ds)

    def rollout_states(self, x0, n_steps: int, stride: int, h: float, inputs=None,
                       teacher=None) -> np.ndarray:
        return _neural_rollout(self.theta, self.cfg, self.normalizer, x0, n_steps, stride, h,
                               inputs, teacher)


class EnsembleModel:
    """Posterior ensemble; point predictions are the member mean."""

    def __init__(self, cfg: ModelConfig, normalizer: Normalizer, ensemble: Ensemble):
        self.cfg = cfg
        self.normalizer = normalizer
        self.ensemble = ensemble

    @property
    def system_kind(self) -> str:
        return self.cfg.system_kind

    def members(self):
        for k in range(len(self.ensemble)):
            yield NeuralModel(self.cfg, self.normalizer, self.ensemble.members[k])

    def predict_band(self, ds: Dataset) -> PredictionBand:
        return ensemble_stats(np.stack([m.predict(ds) for m in self.members()]))

    def predict(self, ds: Dataset) -> np.ndarray:
        return self.predict_band(ds).mean

    def rollout_members(self, *args, **kwargs) -> np.ndarray:
        return np.stack([m.rollout_states(*args, **kwargs) for m in self.members()])

    def rollout_states(self, *args, **kwargs) -> np.ndarray:
        return self.rollout_members(*args, **kwargs).mean(axis=0)


class OracleModel:
    """Ground truth standing in for a network.

    One-step predictions return the interpolated reference target; rollouts
    integrate ``rhs`` with one RK4 step per prediction using the same stage
    rule as the data generator, so they reproduce generated trajectories.
    """

    def __init__(self, system_kind: str, rhs: Optional[Callable] = None):
        self.system_kind = system_kind
        self.rhs = rhs

    def predict(self, ds: Dataset) -> np.ndarray:
        return ds.target.copy()

    def rollout_states(self, x0, n_steps: int, stride: int, h: float, inputs=None,
                       teacher=None) -> np.ndarray:
        if self.rhs is None:
            raise ValueError("oracle rollout needs a right-hand side")
        x0 = np.asarray(x0, dtype=np.float64)
        out = np.empty((x0.shape[0], n_steps + 1, x0.shape[1]))
        out[:, 0] = x0
        x = x0
        for k in range(n_steps):
            if teacher is not None:
                x = teacher[:, k]
            if inputs is None:
                k1 = self.rhs(x)
                k2 = self.rhs(x + 0.5 * h * k1)
                k3 = self.rhs(x + 0.5 * h * k2)
                k4 = self.rhs(x + h * k3)
            else:
                ua, ub = inputs[:, k * stride], inputs[:, (k + 1) * stride]
                um = 0.5 * (ua + ub)
                k1 = self.rhs(x, ua)
                k2 = self.rhs(x + 0.5 * h * k1, um)
                k3 = self.rhs(x + 0.5 * h * k2, um)
                k4 = self.rhs(x + h * k3, ub)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out[:, k + 1] = x
        return out


Model = Union[NeuralModel, EnsembleModel, OracleModel]


# ---------------------------------------------------------------------------
# Rollout


def _neural_rollout(theta, cfg: ModelConfig, norm: Normalizer, x0, n_steps: int, stride: int,
                    h: float, inputs=None, teacher=None) -> np.ndarray:
    """Batched closed-loop (or teacher-forced) prediction.

    ``x0`` is (B, d); ``inputs`` (B, n_fine, k) sampled on the fine grid;
    output states sit every ``stride`` fine steps. ``teacher`` (B, n_steps+1, d)
    replaces the fed-back state (and autonomous history) by the truth.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B, d = x0.shape
    layout = build_layout(cfg)
    autonomous = cfg.system_kind == AUTONOMOUS
    out = np.empty((B, n_steps + 1, d))
    out[:, 0] = x0
    hn = torch.full((B,), float(norm.step(h)))
    with torch.no_grad():
        phi = trunk_forward(theta, cfg, hn, layout) if cfg.architecture != VANILLA_LSTM else None
        decoded = None
        lstm = state = None
        if cfg.uses_history:
            lstm = nx.LSTMParams.from_flat(theta, layout, "branch2.lstm")
            # known history channel: the LSTM is causal, so one pass over the
            # whole record yields the memory at every prefix
            channel = inputs if not autonomous else teacher
            if channel is not None:
                take = np.arange(n_steps) * (1 if autonomous else stride)
                rows = norm.history_rows(np.asarray(channel[:, :take[-1] + 1], dtype=np.float64))
                hs = nx.lstm_hidden_sequence(lstm, lift_forward(theta, cfg, torch.from_numpy(rows), layout))
                decoded = decode_history(theta, cfg, hs[:, take], layout)
            else:
                state = nx.LSTMState.zeros(cfg.lstm_hidden, (B,))
        x = x0
        for k in range(n_steps):
            cur = teacher[:, k] if teacher is not None else x
            if cfg.uses_history:
                if decoded is not None:
                    dk = decoded[:, k]
                else:
                    row = torch.from_numpy(norm.history_rows(cur))
                    state = nx.lstm_step(lstm, lift_forward(theta, cfg, row, layout), state)
                    dk = decode_history(theta, cfg, state.hidden, layout)
            if cfg.architecture == LSTM_MIONET:
                b = branch_state_forward(theta, cfg, torch.from_numpy(norm.state(cur)), layout)
                z = fuse(b, dk.reshape(B, d, cfg.p), phi)
            elif cfg.architecture == DEEPONET:
                nxt = None
                if not autonomous:
                    nxt = torch.from_numpy(norm.next_input(inputs[:, (k + 1) * stride]))
                z = local_deeponet_forward(theta, cfg, torch.from_numpy(norm.state(cur)), nxt, hn, layout)
            else:
                z = dk
            x = norm.invert_target(z.numpy(), cur)
            if not np.all(np.isfinite(x)):
                raise RolloutDivergence(f"non-finite prediction at step {k + 1}")
            out[:, k + 1] = x
    return out


@dataclass
class RolloutResult:
    trajectories: List[Trajectory]
    bands: Optional[List[PredictionBand]] = None

    @property
    def trajectory(self) -> Trajectory:
        return self.trajectories[0]

    @property
    def band(self) -> Optional[PredictionBand]:
        return None if self.bands is None else self.bands[0]


def rollout(model: Model, x0, grid: TimeGrid, h: Optional[float] = None, inputs=None,
            teacher=None, mode: str = "closed") -> RolloutResult:
    """Predict from ``x0`` over ``grid`` in steps of ``h`` (default: grid spacing).

    ``inputs`` holds the control sampled on ``grid``. ``h`` must be a whole
    multiple of the grid spacing; the returned trajectories live on the
    coarse grid of spacing ``h``. Pass ``teacher`` (truth on the coarse grid)
    with ``mode="teacher"`` for one-step-ahead predictions from true states.
    Several initial conditions may be stacked along a leading axis.
    """
    h = grid.dt if h is None else float(h)
    stride = int(round(h / grid.dt))
    if stride < 1 or abs(stride * grid.dt - h) > 1e-9 * h:
        raise ValueError(f"step {h} is not a whole multiple of the grid spacing {grid.dt}")
    if model.system_kind == AUTONOMOUS and stride != 1 and getattr(getattr(model, "cfg", None), "uses_history", False):
        raise ValueError("autonomous history models roll out at the grid spacing only")
    if model.system_kind == NON_AUTONOMOUS and inputs is None:
        raise ValueError("non-autonomous rollout needs the control input")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    x0 = np.atleast_2d(x0)
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=np.float64)
        if single or inputs.ndim == 1:
            inputs = inputs.reshape(1, grid.n_points, -1) if inputs.ndim < 3 else inputs
        if inputs.ndim == 2:
            inputs = inputs[..., None]
    n_steps = (grid.n_points - 1) // stride
    if mode == "teacher":
        if teacher is None:
            raise ValueError("teacher-forced mode needs the true states")
        teacher = np.asarray(teacher, dtype=np.float64)
        if teacher.ndim == 2:
            teacher = teacher[None]
    elif mode != "closed":
        raise ValueError(f"unknown rollout mode {mode!r}")
    else:
        teacher = None
    coarse = TimeGrid(grid.t0, h, n_steps + 1)
    args = (x0, n_steps, stride, h, inputs, teacher)
    bands = None
    if isinstance(model, EnsembleModel):
        runs = model.rollout_members(*args)
        bands = [ensemble_stats(runs[:, b]) for b in range(x0.shape[0])]
        states = np.stack([bd.mean for bd in bands])
    else:
        states = model.rollout_states(*args)
    coarse_inputs = None if inputs is None else inputs[:, ::stride][:, :n_steps + 1]
    trajs = [Trajectory(coarse, states[b], None if coarse_inputs is None else coarse_inputs[b])
             for b in range(x0.shape[0])]
    return RolloutResult(trajs, bands)


# ---------------------------------------------------------------------------
# Reports and studies


@dataclass
class EvalReport:
    """Per-trajectory relative errors (rows) per channel (columns) and their
    mean / population standard deviation across trajectories."""

    errors: np.ndarray
    mode: str = "one-step"
    picp: Optional[List[float]] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=np.float64))

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.errors.std(axis=0)

    def to_json(self) -> dict:
        return dict(mode=self.mode, errors=self.errors.tolist(), mean=self.mean.tolist(),
                    std=self.std.tolist(), picp=self.picp, metadata=self.metadata)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)


def _per_trajectory_errors(pred, target, d):
    errs = np.empty(d)
    for j in range(d):
        errs[j] = l2_relative_error(pred[:, j], target[:, j])
    return errs


def batch_evaluate(model: Model, trajectories: Sequence[Trajectory], replicas: int, h: float,
                   rng: np.random.Generator, h_window: Optional[float] = None,
                   with_band: bool = False) -> EvalReport:
    """One-step scoring at ``replicas`` random prefixes of each trajectory.

    Prefix ends are drawn from (t0, t0 + T - h_window) with ``h_window``
    defaulting to ``h``; every record uses the fixed step ``h``.
    """
    if not trajectories:
        raise ValueError("empty test set")
    kind = model.system_kind
    window = h if h_window is None else h_window
    rows, coverage = [], []
    for traj in trajectories:
        ds = build_quartets(traj, replicas, window, rng, kind, fixed_step=h)
        if with_band and isinstance(model, EnsembleModel):
            band = model.predict_band(ds)
            pred = band.mean
            coverage.append([picp(band, ds.target, j) for j in range(ds.state_dim)])
        else:
            pred = model.predict(ds)
        rows.append(_per_trajectory_errors(pred, ds.target, ds.state_dim))
    meta = dict(h=h, replicas=replicas, n_trajectories=len(trajectories),
                T=float(trajectories[0].grid.T))
    cov = np.mean(coverage, axis=0).tolist() if coverage else None
    return EvalReport(np.array(rows), "one-step", cov, meta)


def rollout_evaluate(model: Model, trajectories: Sequence[Trajectory], h: Optional[float] = None,
                     horizons: Optional[Sequence[float]] = None, mode: str = "closed"):
    """Rollout per trajectory (closed-loop, or teacher-forced from the true
    states); returns the rollouts and, for each horizon T, an EvalReport of
    the L2 error over [t0, t0 + T]."""
    grid = trajectories[0].grid
    h = grid.dt if h is None else float(h)
    stride = int(round(h / grid.dt))
    x0 = np.stack([t.states[0] for t in trajectories])
    inputs = None
    if model.system_kind == NON_AUTONOMOUS:
        inputs = np.stack([t.inputs for t in trajectories])
    teacher = np.stack([t.states[::stride] for t in trajectories]) if mode == "teacher" else None
    res = rollout(model, x0, grid, h, inputs, teacher=teacher, mode=mode)
    horizons = [grid.T] if horizons is None else list(horizons)
    reports = []
    for T in horizons:
        n = int(round(T / h)) + 1
        rows = []
        for pred, truth in zip(res.trajectories, trajectories):
            ref = truth.states[::stride][:n]
            rows.append(_per_trajectory_errors(pred.states[:n], ref, ref.shape[1]))
        reports.append(EvalReport(np.array(rows), "rollout" if mode == "closed" else "teacher-forced",
                                  None, dict(T=float(T), h=h, n_trajectories=len(trajectories))))
    return res, reports


def extrapolation_study(model: Model, trajectories: Sequence[Trajectory], T_values: Sequence[float],
                        h: Optional[float] = None, channel: int = 0, mode: str = "closed"):
    """Rollout error over [0, T] against the horizon T; trajectories must span
    max(T_values). ``mode="teacher"`` scores one-step-ahead predictions along
    the true trajectory instead, isolating the effect of history length."""
    T_values = sorted(float(t) for t in T_values)
    if trajectories[0].grid.T + 1e-9 < T_values[-1]:
        raise ValueError("test trajectories are shorter than the largest horizon")
    _, reports = rollout_evaluate(model, trajectories, h, T_values, mode)
    curve = np.array([[T, r.mean[channel]] for T, r in zip(T_values, reports)])
    return curve, reports


def stepsize_study(model: Model, trajectories: Sequence[Trajectory], h_values: Sequence[float],
                   replicas: int, rng: np.random.Generator, channel: int = 0) -> dict:
    """One-step error at each step size plus a least-squares line through the
    (h, mean error) points and their Pearson correlation."""
    h_values = [float(h) for h in h_values]
    means = []
    reports = []
    for h in h_values:
        rep = batch_evaluate(model, trajectories, replicas, h, rng)
        reports.append(rep)
        means.append(rep.mean[channel])
    hv, mv = np.array(h_values), np.array(means)
    if hv.size >= 2:
        slope, intercept = np.polyfit(hv, mv, 1)
        r = float(np.corrcoef(hv, mv)[0, 1]) if np.std(mv) > 0 else float("nan")
    else:
        slope = intercept = r = float("nan")
    return dict(curve=np.column_stack([hv, mv]), slope=float(slope), intercept=float(intercept),
                pearson=r, reports=reports)


def parse_range(text: str) -> List[float]:
    """"start:stop:step" inclusive of stop (within half a step), or a comma list."""
    if ":" in text:
        a, b, s = (float(v) for v in text.split(":"))
        if s <= 0:
            raise ValueError("range step must be positive")
        n = int(np.floor((b - a) / s + 0.5)) + 1
        return [round(a + i * s, 12) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Plot data


def write_curve(x, y, path) -> None:
    """Two whitespace-separated columns: x value."""
    with open(path, "w") as fh:
        for a, b in zip(np.asarray(x).ravel(), np.asarray(y).ravel()):
            fh.write(f"{a:.17g} {b:.17g}\n")


def write_band(t, lower, upper, path) -> None:
    """Three whitespace-separated columns: t lower upper."""
    with open(path, "w") as fh:
        for a, lo, hi in zip(np.asarray(t).ravel(), np.asarray(lower).ravel(), np.asarray(upper).ravel()):
            fh.write(f"{a:.17g} {lo:.17g} {hi:.17g}\n")


def read_columns(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)
