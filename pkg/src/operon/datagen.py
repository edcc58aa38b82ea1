"""Training records from trajectories: masked histories, interpolated targets,
normalization, target noise and the dataset file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dynamics import Trajectory

AUTONOMOUS = "autonomous"
NON_AUTONOMOUS = "non-autonomous"
FORMAT_NAME = "operon-dataset"
FORMAT_VERSION = 1
SCALE_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """The dataset generator: Philox (counter-based) seeded from ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass
class HistorySequence:
    values: np.ndarray  # (capacity, dim); rows >= valid_len are zero
    valid_len: int
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if not 1 <= self.valid_len <= self.values.shape[0]:
            raise ValueError(f"valid_len {self.valid_len} outside [1, {self.values.shape[0]}]")

    @property
    def capacity(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values[:self.valid_len]


@dataclass
class Quartet:
    current_state: np.ndarray
    history: HistorySequence
    step: float
    target: np.ndarray
    next_input: Optional[np.ndarray] = None


def apply_mask(channel: np.ndarray, end_index: int, capacity: Optional[int] = None,
               dt: float = 1.0) -> HistorySequence:
    """Keep the first ``end_index`` rows, zero the rest up to ``capacity``.

    >>> apply_mask(np.array([1., 2., 3., 4.]), 2).values[:, 0]
    array([1., 2., 0., 0.])
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim == 1:
        channel = channel[:, None]
    capacity = channel.shape[0] if capacity is None else capacity
    if not 1 <= end_index <= min(channel.shape[0], capacity):
        raise IndexError(f"end_index {end_index} outside [1, {min(channel.shape[0], capacity)}]")
    values = np.zeros((capacity, channel.shape[1]))
    values[:end_index] = channel[:end_index]
    return HistorySequence(values, end_index, dt)


def interpolate_state(traj: Trajectory, t) -> np.ndarray:
    """Linear interpolation of the state at time(s) ``t``; exact on grid times."""
    t = np.asarray(t, dtype=np.float64)
    g = traj.grid
    lo, hi = g.t0, g.t_end
    tol = 1e-12 * max(1.0, abs(hi))
    if np.any(t < lo - tol) or np.any(t > hi + tol):
        raise ValueError(f"time outside trajectory span [{lo}, {hi}]")
    s = np.clip((t - g.t0) / g.dt, 0.0, g.n_points - 1)
    k = np.minimum(np.floor(s).astype(int), g.n_points - 2)
    w = (s - k)[..., None]
    a, b = traj.states[k], traj.states[k + 1]
    out = a + w * (b - a)
    # exact grid hits
    on_grid = w[..., 0] == 0.0
    out[on_grid] = a[on_grid]
    return out


def admissible_indices(traj: Trajectory, h_max: float) -> np.ndarray:
    """Grid indices n with t_0 < t_n < t_0 + T - h_max."""
    g = traj.grid
    n = np.arange(1, g.n_points)
    return n[n * g.dt < g.T - h_max - 1e-9 * g.dt]


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class Normalizer:
    """Per-channel affine maps: z = (v - shift) / scale.

    ``target_mode`` "absolute" standardizes the next state directly;
    "increment" standardizes the displacement (target - current).
    """

    state_shift: np.ndarray
    state_scale: np.ndarray
    history_shift: np.ndarray
    history_scale: np.ndarray
    step_shift: float
    step_scale: float
    target_shift: np.ndarray
    target_scale: np.ndarray
    target_mode: str = "absolute"
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None

    def state(self, x):
        return (x - self.state_shift) / self.state_scale

    def history(self, values, valid_len):
        """Normalize valid rows only; padded rows stay exactly zero."""
        values = np.asarray(values, dtype=np.float64)
        out = (values - self.history_shift) / self.history_scale
        mask = np.arange(values.shape[-2]) < np.asarray(valid_len)[..., None]
        return np.where(mask[..., None], out, 0.0)

    def history_rows(self, rows):
        return (rows - self.history_shift) / self.history_scale

    def step(self, h):
        return (np.asarray(h, dtype=np.float64) - self.step_shift) / self.step_scale

    def next_input(self, u):
        return (u - self.input_shift) / self.input_scale

    def target(self, y, current):
        if self.target_mode == "increment":
            return (y - current - self.target_shift) / self.target_scale
        return (y - self.target_shift) / self.target_scale

    def invert_target(self, z, current):
        if self.target_mode == "increment":
            return current + z * self.target_scale + self.target_shift
        return z * self.target_scale + self.target_shift

    def invert_state(self, z):
        return z * self.state_scale + self.state_shift

    def invert_history_rows(self, z):
        return z * self.history_scale + self.history_shift

    def to_json(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        kw = {}
        for k, v in d.items():
            kw[k] = np.asarray(v, dtype=np.float64) if isinstance(v, list) else v
        return cls(**kw)


@dataclass
class Dataset:
    """Columnar storage of quartets.

    Arrays: ``current`` (N, d), ``valid_len`` (N,), ``history`` (N, capacity, c),
    ``step`` (N,), ``target`` (N, d), optional ``next_input`` (N, k) holding the
    control at t_n + h for the history-free baseline.
    """

    current: np.ndarray
    valid_len: np.ndarray
    history: np.ndarray
    step: np.ndarray
    target: np.ndarray
    metadata: Dict = field(default_factory=dict)
    normalizer: Optional[Normalizer] = None
    next_input: Optional[np.ndarray] = None

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=np.float64)
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64)
        self.history = np.asarray(self.history, dtype=np.float64)
        self.step = np.asarray(self.step, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.next_input is not None:
            self.next_input = np.asarray(self.next_input, dtype=np.float64)

    def __len__(self) -> int:
        return self.current.shape[0]

    def __getitem__(self, i: int) -> Quartet:
        nxt = None if self.next_input is None else self.next_input[i]
        return Quartet(self.current[i], HistorySequence(self.history[i], int(self.valid_len[i]),
                                                        self.metadata.get("dt", 1.0)),
                       float(self.step[i]), self.target[i], nxt)

    @property
    def state_dim(self) -> int:
        return self.current.shape[1]

    @property
    def capacity(self) -> int:
        return self.history.shape[1]

    @property
    def history_dim(self) -> int:
        return self.history.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.current[idx], self.valid_len[idx], self.history[idx], self.step[idx],
                       self.target[idx], dict(self.metadata), self.normalizer,
                       None if self.next_input is None else self.next_input[idx])

    def with_targets(self, target: np.ndarray) -> "Dataset":
        return Dataset(self.current, self.valid_len, self.history, self.step, target,
                       dict(self.metadata), self.normalizer, self.next_input)


def concat(datasets: Sequence[Dataset], metadata: Optional[dict] = None) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    has_next = all(d.next_input is not None for d in datasets)
    return Dataset(
        np.concatenate([d.current for d in datasets]),
        np.concatenate([d.valid_len for d in datasets]),
        np.concatenate([d.history for d in datasets]),
        np.concatenate([d.step for d in datasets]),
        np.concatenate([d.target for d in datasets]),
        dict(metadata if metadata is not None else datasets[0].metadata),
        datasets[0].normalizer,
        np.concatenate([d.next_input for d in datasets]) if has_next else None,
    )


def build_quartets(traj: Trajectory, replicas: int, h_max: float, rng: np.random.Generator,
                   system_kind: str = AUTONOMOUS, random_count: bool = False,
                   fixed_step: Optional[float] = None) -> Dataset:
    """Masked training records from one trajectory.

    Each replica draws a grid index t_n in (t_0, t_0 + T - h_max) and a step
    h ~ U[0, h_max] (or ``fixed_step``); the history is the input (or, for
    autonomous systems, the state) up to and including t_n. With
    ``random_count`` the number of replicas is itself drawn from 1..replicas.
    """
    if system_kind == NON_AUTONOMOUS and traj.inputs is None:
        raise ValueError("non-autonomous quartets need a trajectory with inputs")
    idx = admissible_indices(traj, h_max if fixed_step is None else max(h_max, fixed_step))
    if idx.size == 0:
        raise ValueError(f"trajectory of span {traj.grid.T} too short for h_max {h_max}")
    count = int(rng.integers(1, replicas + 1)) if random_count else replicas
    channel = traj.inputs if system_kind == NON_AUTONOMOUS else traj.states
    cap = traj.grid.n_points
    n = np.empty(count, dtype=np.int64)
    h = np.empty(count)
    for r in range(count):
        n[r] = idx[int(rng.integers(0, idx.size))]
        h[r] = rng.uniform(0.0, h_max) if fixed_step is None else fixed_step
    t_n = traj.grid.t0 + n * traj.grid.dt
    hist = np.zeros((count, cap, channel.shape[1]))
    for r in range(count):
        hist[r, :n[r] + 1] = channel[:n[r] + 1]
    current = traj.states[n]
    target = interpolate_state(traj, t_n + h)
    target[h == 0.0] = current[h == 0.0]
    next_input = None
    if traj.inputs is not None:
        s = (t_n + h - traj.grid.t0) / traj.grid.dt
        k = np.minimum(np.floor(s).astype(int), cap - 2)
        w = (s - k)[:, None]
        next_input = traj.inputs[k] + w * (traj.inputs[k + 1] - traj.inputs[k])
    meta = dict(system_kind=system_kind, state_dim=traj.state_dim, history_dim=channel.shape[1],
                input_dim=0 if traj.inputs is None else traj.inputs.shape[1],
                dt=traj.grid.dt, h_max=h_max, capacity=cap, T=traj.grid.T)
    return Dataset(current, n + 1, hist, h, target, meta, None, next_input)


def fit_normalizer(ds: Dataset, target_mode: str = "absolute") -> Normalizer:
    """Mean/std per channel; the step channel maps [0, h_max] onto [0, 1]."""
    if len(ds) == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")

    def stats(a: np.ndarray):
        return a.mean(axis=0), np.maximum(a.std(axis=0), SCALE_FLOOR)

    s_shift, s_scale = stats(ds.current)
    mask = np.arange(ds.capacity)[None, :] < ds.valid_len[:, None]
    h_shift, h_scale = stats(ds.history[mask])
    if target_mode == "increment":
        t_shift, t_scale = np.zeros(ds.state_dim), np.maximum(
            np.sqrt(((ds.target - ds.current) ** 2).mean(axis=0)), SCALE_FLOOR)
    else:
        t_shift, t_scale = stats(ds.target)
    u_shift = u_scale = None
    if ds.next_input is not None:
        u_shift, u_scale = stats(ds.next_input)
    h_max = float(ds.metadata.get("h_max", ds.step.max() if ds.step.max() > 0 else 1.0))
    return Normalizer(s_shift, s_scale, h_shift, h_scale, 0.0, h_max, t_shift, t_scale,
                      target_mode, u_shift, u_scale)


def add_noise(ds: Dataset, sigma, rng: np.random.Generator) -> Dataset:
    """Perturb targets with i.i.d. N(0, sigma^2) per channel; inputs untouched."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (ds.state_dim,))
    if np.any(sigma < 0):
        raise ValueError("noise level must be non-negative")
    if not np.any(sigma > 0):
        out = ds.with_targets(ds.target.copy())
    else:
        out = ds.with_targets(ds.target + rng.standard_normal(ds.target.shape) * sigma)
    out.metadata["noise_sigma"] = sigma.tolist()
    return out


def history_groups(ds: Dataset) -> np.ndarray:
    """Label runs of consecutive quartets whose histories are prefixes of one
    common recording, so a single encoder pass can serve the whole run."""
    n = len(ds)
    groups = np.zeros(n, dtype=np.int64)
    if n == 0:
        return groups
    g, rep = 0, 0
    for i in range(1, n):
        m = min(ds.valid_len[i], ds.valid_len[rep])
        if np.array_equal(ds.history[i, :m], ds.history[rep, :m]):
            if ds.valid_len[i] > ds.valid_len[rep]:
                rep = i
        else:
            g += 1
            rep = i
        groups[i] = g
    return groups


# ---------------------------------------------------------------------------
# Serialization


def _record_fields(ds: Dataset) -> List[str]:
    fields = ["current_state", "valid_len", "history", "step", "target"]
    if ds.next_input is not None:
        fields.append("next_input")
    return fields


def save_dataset(ds: Dataset, path) -> None:
    """One JSON header line, then little-endian float64 records laid out as
    current_state (d), valid_len (1), history (capacity * c), step (1),
    target (d) [, next_input (k)]."""
    n = len(ds)
    d, cap, c = ds.current.shape[1], ds.history.shape[1], ds.history.shape[2]
    k = 0 if ds.next_input is None else ds.next_input.shape[1]
    header = dict(format=FORMAT_NAME, version=FORMAT_VERSION, count=n, state_dim=d,
                  capacity=cap, history_dim=c, next_input_dim=k, fields=_record_fields(ds),
                  metadata=ds.metadata,
                  normalizer=None if ds.normalizer is None else ds.normalizer.to_json())
    cols = [ds.current, ds.valid_len[:, None].astype(np.float64), ds.history.reshape(n, cap * c),
            ds.step[:, None], ds.target]
    if k:
        cols.append(ds.next_input)
    block = np.hstack(cols) if n else np.zeros((0, 2 * d + 2 + cap * c + k))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"no header line terminator (read {len(buf)} bytes, offset 0)")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unparseable header at byte 0: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("header at byte 0 is not an operon dataset header")
    try:
        n, d = int(header["count"]), int(header["state_dim"])
        cap, c = int(header["capacity"]), int(header["history_dim"])
        k = int(header.get("next_input_dim", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"header at byte 0 missing field: {exc}") from None
    width = 2 * d + 2 + cap * c + k
    start = nl + 1
    expected = n * width * 8
    got = len(buf) - start
    if got != expected:
        raise DatasetFormatError(
            f"payload starting at byte {start} should hold {expected} bytes, found {got} "
            f"(file ends at byte {len(buf)})")
    block = np.frombuffer(buf, dtype="<f8", offset=start).astype(np.float64).reshape(n, width)
    o = 0
    current = block[:, o:o + d]; o += d
    valid_len = block[:, o].astype(np.int64); o += 1
    history = block[:, o:o + cap * c].reshape(n, cap, c); o += cap * c
    step = block[:, o]; o += 1
    target = block[:, o:o + d]; o += d
    next_input = block[:, o:o + k] if k else None
    norm = header.get("normalizer")
    return Dataset(current.copy(), valid_len, history.copy(), step.copy(), target.copy(),
                   header.get("metadata", {}), None if norm is None else Normalizer.from_json(norm),
                   None if next_input is None else next_input.copy())
