"""Differentiable building blocks: flat parameter storage, dense layers, the
LSTM cell and reverse-mode gradients.

Everything runs in float64. Reverse-mode accumulation is delegated to torch
autograd; ``finite_diff_check`` is an independent central-difference harness
that only ever evaluates the forward pass.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

torch.set_default_dtype(torch.float64)

DTYPE = torch.float64
MAGIC = b"OPRN1"

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda x: x,
}


class DimensionError(ValueError):
    pass


class EmptyHistoryError(ValueError):
    pass


class GradientContractError(RuntimeError):
    pass


class ParameterFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parameter storage


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class Layout:
    """Ordered manifest of named segments over one flat array."""

    def __init__(self, segments: Iterable[Segment] = ()):
        self._segments: Dict[str, Segment] = {}
        self.size = 0
        for seg in segments:
            if seg.offset != self.size:
                raise ParameterFormatError(
                    f"segment {seg.name!r} at offset {seg.offset}, expected {self.size}")
            self._add(seg)

    def _add(self, seg: Segment) -> None:
        if seg.name in self._segments:
            raise ParameterFormatError(f"duplicate segment {seg.name!r}")
        self._segments[seg.name] = seg
        self.size += seg.size

    def add(self, name: str, shape: Sequence[int]) -> Segment:
        seg = Segment(name, self.size, tuple(int(s) for s in shape))
        self._add(seg)
        return seg

    def __getitem__(self, name: str) -> Segment:
        return self._segments[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __iter__(self):
        return iter(self._segments.values())

    def __len__(self) -> int:
        return len(self._segments)

    def names(self) -> List[str]:
        return list(self._segments)

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and list(self) == list(other)


@dataclass
class ParameterVector:
    """All trainable weights of a model in one flat float64 array."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ParameterFormatError(
                f"flat array of size {self.values.size} does not match layout size {self.layout.size}")

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __len__(self) -> int:
        return self.values.size


def view(theta: torch.Tensor, layout: Layout, name: str) -> torch.Tensor:
    """Reshaped slice of a flat parameter tensor (autograd-transparent)."""
    seg = layout[name]
    return theta[seg.offset:seg.offset + seg.size].view(seg.shape)


def save_parameters(pv: ParameterVector, path) -> None:
    """Binary format: magic, u32 segment count, per segment
    (u16 name length, utf-8 name, u64 offset, u8 ndim, u64 dims...),
    u64 payload length, little-endian float64 payload."""
    chunks = [MAGIC, struct.pack("<I", len(pv.layout))]
    for seg in pv.layout:
        name = seg.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<QB", seg.offset, len(seg.shape)))
        chunks.append(struct.pack(f"<{len(seg.shape)}Q", *seg.shape))
    chunks.append(struct.pack("<Q", pv.values.size))
    chunks.append(pv.values.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_parameters(path) -> ParameterVector:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParameterFormatError(f"truncated parameter file at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise ParameterFormatError("bad magic at byte 0")
    (count,) = struct.unpack("<I", take(4))
    segments = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        offset, ndim = struct.unpack("<QB", take(9))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        segments.append(Segment(name, offset, tuple(shape)))
    layout = Layout(segments)
    (n,) = struct.unpack("<Q", take(8))
    if n != layout.size:
        raise ParameterFormatError(f"payload length {n} != layout size {layout.size} at byte {pos - 8}")
    values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
    if pos != len(buf):
        raise ParameterFormatError(f"trailing bytes after payload at byte {pos}")
    return ParameterVector(values, layout)


# ---------------------------------------------------------------------------
# Layers


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def dense_forward(weights, bias, x, activation: str = "identity") -> torch.Tensor:
    """activation(W x + b); ``x`` may carry leading batch dimensions."""
    W, b, x = _as_tensor(weights), _as_tensor(bias), _as_tensor(x)
    if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0] or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"dense: weights {tuple(W.shape)}, bias {tuple(b.shape)}, input {tuple(x.shape)}")
    return ACTIVATIONS[activation](torch.nn.functional.linear(x, W, b))


@dataclass
class LSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, size: int, batch: Tuple[int, ...] = ()) -> "LSTMState":
        return cls(torch.zeros(*batch, size), torch.zeros(*batch, size))


@dataclass
class LSTMParams:
    """Gate-stacked weights in (input, forget, candidate, output) order."""

    weight_ih: torch.Tensor  # (4H, E)
    weight_hh: torch.Tensor  # (4H, H)
    bias: torch.Tensor       # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.weight_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.weight_ih.shape[1]

    @classmethod
    def from_flat(cls, theta: torch.Tensor, layout: Layout, prefix: str) -> "LSTMParams":
        return cls(view(theta, layout, prefix + ".weight_ih"),
                   view(theta, layout, prefix + ".weight_hh"),
                   view(theta, layout, prefix + ".bias"))


def lstm_step(params: LSTMParams, x, state: LSTMState) -> LSTMState:
    """One step of the four-gate LSTM recurrence."""
    x = _as_tensor(x)
    if x.shape[-1] != params.input_size or state.hidden.shape[-1] != params.hidden_size:
        raise DimensionError(
            f"lstm_step: input {tuple(x.shape)} / hidden {tuple(state.hidden.shape)} vs "
            f"cell sizes E={params.input_size}, H={params.hidden_size}")
    gates = (torch.nn.functional.linear(x, params.weight_ih, params.bias)
             + torch.nn.functional.linear(state.hidden, params.weight_hh))
    i, f, g, o = gates.chunk(4, dim=-1)
    cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
    hidden = torch.sigmoid(o) * torch.tanh(cell)
    return LSTMState(hidden, cell)


def lstm_encode(params: LSTMParams, values, valid_len: int) -> torch.Tensor:
    """Fold ``lstm_step`` over the first ``valid_len`` rows from a zero state.

    Rows past ``valid_len`` are never read.
    """
    if valid_len < 1:
        raise EmptyHistoryError("history has no valid entries")
    values = _as_tensor(values)
    state = LSTMState.zeros(params.hidden_size)
    for k in range(valid_len):
        state = lstm_step(params, values[k], state)
    return state.hidden


_LSTM_MODULES: Dict[Tuple[int, int], torch.nn.LSTM] = {}


def _lstm_module(input_size: int, hidden_size: int) -> torch.nn.LSTM:
    key = (input_size, hidden_size)
    if key not in _LSTM_MODULES:
        mod = torch.nn.LSTM(input_size, hidden_size, batch_first=True)
        for p in mod.parameters():
            p.requires_grad_(False)
        _LSTM_MODULES[key] = mod
    return _LSTM_MODULES[key]


def lstm_hidden_sequence(params: LSTMParams, seqs: torch.Tensor) -> torch.Tensor:
    """Hidden states after every step for a batch of sequences (G, L, E) -> (G, L, H).

    Uses the fused kernel; equivalent to repeated ``lstm_step`` from a zero
    state. The output at step k depends on rows 0..k only.
    """
    mod = _lstm_module(params.input_size, params.hidden_size)
    weights = {
        "weight_ih_l0": params.weight_ih,
        "weight_hh_l0": params.weight_hh,
        "bias_ih_l0": params.bias,
        "bias_hh_l0": torch.zeros_like(params.bias),
    }
    out, _ = torch.func.functional_call(mod, weights, (seqs,))
    return out


def lstm_encode_batch(params: LSTMParams, seqs: torch.Tensor, lengths,
                      group: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Hidden state after ``lengths[i]`` steps of sequence ``group[i]``.

    ``group`` lets several queries share one encoded sequence (histories that
    are prefixes of a common recording); by default query i reads sequence i.
    """
    lengths = torch.as_tensor(np.asarray(lengths), dtype=torch.long)
    if lengths.numel() and int(lengths.min()) < 1:
        raise EmptyHistoryError("history has no valid entries")
    if group is None:
        group = torch.arange(lengths.numel())
    max_len = int(lengths.max()) if lengths.numel() else 1
    hs = lstm_hidden_sequence(params, seqs[:, :max_len])
    return hs[group, lengths - 1]


# ---------------------------------------------------------------------------
# Gradients


class Tape:
    """Records one scalar forward pass over a flat parameter vector.

    >>> tape = Tape(np.array([1.0, 2.0]))
    >>> _ = tape.record(lambda t: (t ** 2).sum())
    >>> backward(tape)
    array([2., 4.])
    """

    def __init__(self, theta):
        self.params = torch.tensor(np.asarray(theta, dtype=np.float64), requires_grad=True)
        self.root: Optional[torch.Tensor] = None
        self._used = False

    def record(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
        self.root = fn(self.params)
        return self.root


def backward(tape: Tape) -> np.ndarray:
    root = tape.root
    if root is None:
        raise GradientContractError("tape has no recorded output")
    if root.numel() != 1:
        raise GradientContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if tape._used:
        raise GradientContractError("tape already consumed")
    tape._used = True
    if not root.requires_grad:
        return np.zeros(tape.params.numel())
    (grad,) = torch.autograd.grad(root.reshape(()), tape.params, allow_unused=True)
    if grad is None:
        return np.zeros(tape.params.numel())
    return grad.detach().numpy().copy()


def value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor], theta) -> Tuple[float, np.ndarray]:
    tape = Tape(theta)
    value = float(tape.record(fn).detach())
    return value, backward(tape)


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: np.ndarray
    rel_err: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def finite_diff_report(fn: Callable[[torch.Tensor], torch.Tensor], theta, step: float = 1e-5,
                       max_coords: int = 200, rng: Optional[np.random.Generator] = None,
                       kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare autograd against central differences.

    All coordinates are checked when there are at most ``max_coords``;
    otherwise a random subset of that size. A coordinate whose one-sided
    slopes disagree by more than ``kink_tol`` (relative) sits on a
    nondifferentiable point and is excluded rather than scored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    _, analytic = value_and_grad(fn, theta)
    n = theta.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))

    def f(x: np.ndarray) -> float:
        with torch.no_grad():
            return float(fn(torch.from_numpy(x)))

    f0 = f(theta)
    errs, kept, excluded = [], [], []
    for i in coords:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        fp, fm = f(tp), f(tm)
        numeric = (fp - fm) / (2 * step)
        gap = abs((fp - f0) / step - (f0 - fm) / step)
        if gap > kink_tol * max(abs(numeric), 1e-8):
            # smooth curvature shrinks the one-sided gap with the step, a kink does not
            small = step / 10
            tp[i], tm[i] = theta[i] + small, theta[i] - small
            gap_small = abs((f(tp) - f0) / small - (f0 - f(tm)) / small)
            if gap_small > 0.5 * gap:
                excluded.append(i)
                continue
        denom = max(abs(analytic[i]), abs(numeric), 1e-12)
        errs.append(abs(analytic[i] - numeric) / denom)
        kept.append(i)
    rel = np.asarray(errs)
    return GradCheckReport(float(rel.max()) if rel.size else 0.0,
                           np.asarray(kept, dtype=int), rel, np.asarray(excluded, dtype=int))


def finite_diff_check(fn, theta, step: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between autograd and central differences."""
    return finite_diff_report(fn, theta, step, **kwargs).max_rel_err


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
