"""Operator networks as pure functions of a flat parameter tensor.

LSTM-MIONet
    output_j = sum_i b_ji * beta_ji * phi_ji, with ``b`` from the current
    state, ``beta`` from the FNN-LSTM-FNN history encoder and ``phi`` from
    the step size. There is no additive bias.
local DeepONet
    output_j = sum_i b_ji * phi_ji + b0_j, branch on the current state (and
    the control at t+h for non-autonomous systems).
vanilla LSTM
    lift-LSTM-decode straight to the next state; ignores state and step.

Every sub-network emits ``d * p`` features reshaped to (d, p): one
independent feature block per output dimension. All tensors carry a leading
batch axis and live in normalized coordinates.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from . import numerics as nx
from .datagen import AUTONOMOUS, NON_AUTONOMOUS, Dataset, Normalizer, history_groups

LSTM_MIONET = "lstm_mionet"
DEEPONET = "deeponet"
VANILLA_LSTM = "vanilla_lstm"
ARCHITECTURES = (LSTM_MIONET, DEEPONET, VANILLA_LSTM)


class ConfigMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    system_kind: str
    state_dim: int
    history_dim: int
    input_dim: int = 0
    architecture: str = LSTM_MIONET
    p: int = 100
    branch_hidden: Tuple[int, ...] = (100, 100)
    lift_hidden: Tuple[int, ...] = (100, 100)
    lstm_hidden: int = 100
    decoder_hidden: Tuple[int, ...] = (100, 100)
    trunk_hidden: Tuple[int, ...] = (100, 100)
    activation: str = "tanh"
    h_max: float = 0.02

    def __post_init__(self):
        for name in ("branch_hidden", "lift_hidden", "decoder_hidden", "trunk_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.p < 1:
            raise ValueError("feature width p must be >= 1")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.system_kind not in (AUTONOMOUS, NON_AUTONOMOUS):
            raise ValueError(f"unknown system kind {self.system_kind!r}")
        if self.activation not in nx.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def latent_dim(self) -> int:
        return self.lift_hidden[-1] if self.lift_hidden else self.history_dim

    @property
    def uses_history(self) -> bool:
        return self.architecture in (LSTM_MIONET, VANILLA_LSTM)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def check_dataset(self, ds: Dataset) -> None:
        meta = ds.metadata
        if ds.state_dim != self.state_dim:
            raise ConfigMismatchError(f"state_dim {ds.state_dim} != config {self.state_dim}")
        if self.uses_history and ds.history_dim != self.history_dim:
            raise ConfigMismatchError(f"history_dim {ds.history_dim} != config {self.history_dim}")
        if meta.get("system_kind", self.system_kind) != self.system_kind:
            raise ConfigMismatchError(f"dataset is {meta['system_kind']}, model is {self.system_kind}")


def config_for(ds: Dataset, **overrides) -> ModelConfig:
    meta = ds.metadata
    kw = dict(system_kind=meta["system_kind"], state_dim=ds.state_dim,
              history_dim=ds.history_dim, input_dim=int(meta.get("input_dim", 0)),
              h_max=float(meta["h_max"]))
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# Layout and initialization


def _mlp_layout(layout: nx.Layout, prefix: str, sizes: Sequence[int]) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layout.add(f"{prefix}.layer{i}.weight", (b, a))
        layout.add(f"{prefix}.layer{i}.bias", (b,))


def _n_layers(sizes: Sequence[int]) -> int:
    return len(sizes) - 1


def build_layout(cfg: ModelConfig) -> nx.Layout:
    layout = nx.Layout()
    d, p = cfg.state_dim, cfg.p
    if cfg.architecture == LSTM_MIONET:
        _mlp_layout(layout, "branch1", (d, *cfg.branch_hidden, d * p))
        _history_layout(layout, cfg, d * p)
        _mlp_layout(layout, "trunk", (1, *cfg.trunk_hidden, d * p))
    elif cfg.architecture == DEEPONET:
        n_in = d + (cfg.input_dim if cfg.system_kind == NON_AUTONOMOUS else 0)
        _mlp_layout(layout, "branch", (n_in, *cfg.branch_hidden, d * p))
        _mlp_layout(layout, "trunk", (1, *cfg.trunk_hidden, d * p))
        layout.add("bias0", (d,))
    else:
        _history_layout(layout, cfg, d)
    return layout


def _history_layout(layout: nx.Layout, cfg: ModelConfig, n_out: int) -> None:
    H, E = cfg.lstm_hidden, cfg.latent_dim
    if cfg.lift_hidden:
        _mlp_layout(layout, "branch2.lift", (cfg.history_dim, *cfg.lift_hidden))
    layout.add("branch2.lstm.weight_ih", (4 * H, E))
    layout.add("branch2.lstm.weight_hh", (4 * H, H))
    layout.add("branch2.lstm.bias", (4 * H,))
    _mlp_layout(layout, "branch2.decoder", (H, *cfg.decoder_hidden, n_out))


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> nx.ParameterVector:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    layout = build_layout(cfg)
    theta = np.zeros(layout.size)
    for seg in layout:
        sl = slice(seg.offset, seg.offset + seg.size)
        if seg.name.endswith(".weight"):
            fan_out, fan_in = seg.shape
            b = nx.glorot_bound(fan_in, fan_out)
            theta[sl] = rng.uniform(-b, b, seg.size)
        elif seg.name.endswith("weight_ih") or seg.name.endswith("weight_hh"):
            H = seg.shape[0] // 4
            b = nx.glorot_bound(seg.shape[1], H)
            theta[sl] = rng.uniform(-b, b, seg.size)
        elif seg.name.endswith("lstm.bias"):
            H = seg.shape[0] // 4
            bias = np.zeros(4 * H)
            bias[H:2 * H] = 1.0
            theta[sl] = bias
    return nx.ParameterVector(theta, layout)


# ---------------------------------------------------------------------------
# Sub-networks


def mlp_forward(theta: torch.Tensor, layout: nx.Layout, prefix: str, x: torch.Tensor,
                n_layers: int, activation: str, final_activation: bool = False) -> torch.Tensor:
    for i in range(n_layers):
        act = activation if (i < n_layers - 1 or final_activation) else "identity"
        x = nx.dense_forward(nx.view(theta, layout, f"{prefix}.layer{i}.weight"),
                             nx.view(theta, layout, f"{prefix}.layer{i}.bias"), x, act)
    return x


def _features(out: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    return out.reshape(*out.shape[:-1], cfg.state_dim, cfg.p)


def branch_state_forward(theta, cfg: ModelConfig, x: torch.Tensor, layout=None) -> torch.Tensor:
    """Current state (B, d) -> features (B, d, p)."""
    layout = layout or build_layout(cfg)
    if x.shape[-1] != cfg.state_dim:
        raise nx.DimensionError(f"state has {x.shape[-1]} entries, config says {cfg.state_dim}")
    n = _n_layers((cfg.state_dim, *cfg.branch_hidden, 0))
    return _features(mlp_forward(theta, layout, "branch1", x, n, cfg.activation), cfg)


def lift_forward(theta, cfg: ModelConfig, rows: torch.Tensor, layout=None) -> torch.Tensor:
    layout = layout or build_layout(cfg)
    if not cfg.lift_hidden:
        return rows
    return mlp_forward(theta, layout, "branch2.lift", rows, len(cfg.lift_hidden),
                       cfg.activation, final_activation=True)


def encode_history(theta, cfg: ModelConfig, seqs: torch.Tensor, lengths, group=None,
                   layout=None) -> torch.Tensor:
    """Lift every step, run the LSTM over each valid prefix, return the memory (B, H)."""
    layout = layout or build_layout(cfg)
    if seqs.shape[-1] != cfg.history_dim:
        raise nx.DimensionError(f"history rows have {seqs.shape[-1]} entries, expected {cfg.history_dim}")
    lengths = torch.as_tensor(np.asarray(lengths), dtype=torch.long)
    if lengths.numel() and int(lengths.min()) < 1:
        raise nx.EmptyHistoryError("history has no valid entries")
    max_len = int(lengths.max())
    latent = lift_forward(theta, cfg, seqs[:, :max_len], layout)
    lstm = nx.LSTMParams.from_flat(theta, layout, "branch2.lstm")
    return nx.lstm_encode_batch(lstm, latent, lengths, group)


def decode_history(theta, cfg: ModelConfig, memory: torch.Tensor, layout=None) -> torch.Tensor:
    layout = layout or build_layout(cfg)
    n = len(cfg.decoder_hidden) + 1
    return mlp_forward(theta, layout, "branch2.decoder", memory, n, cfg.activation)


def branch_history_forward(theta, cfg: ModelConfig, seqs, lengths, group=None,
                           layout=None) -> torch.Tensor:
    """Histories -> features (B, d, p) through the FNN-LSTM-FNN sandwich."""
    memory = encode_history(theta, cfg, seqs, lengths, group, layout)
    return _features(decode_history(theta, cfg, memory, layout), cfg)


def trunk_forward(theta, cfg: ModelConfig, h: torch.Tensor, layout=None) -> torch.Tensor:
    """Normalized step (B,) -> features (B, d, p)."""
    layout = layout or build_layout(cfg)
    n = len(cfg.trunk_hidden) + 1
    return _features(mlp_forward(theta, layout, "trunk", h.reshape(-1, 1), n, cfg.activation), cfg)


def fuse(b: torch.Tensor, beta: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Per output dimension j: sum_i b_ji * beta_ji * phi_ji."""
    b, beta, phi = (torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v
                    for v in (b, beta, phi))
    if not (b.shape == beta.shape == phi.shape):
        raise nx.DimensionError(f"feature shapes differ: {tuple(b.shape)}, {tuple(beta.shape)}, {tuple(phi.shape)}")
    return (b * beta * phi).sum(-1)


# ---------------------------------------------------------------------------
# Batches and full forwards


@dataclass
class Batch:
    """Normalized model inputs for a set of quartets.

    ``seqs`` holds one history per encoded group; quartet i reads
    ``seqs[group[i], :lengths[i]]``.
    """

    current: torch.Tensor
    seqs: Optional[torch.Tensor]
    lengths: Optional[torch.Tensor]
    group: Optional[torch.Tensor]
    step: torch.Tensor
    target: Optional[torch.Tensor] = None
    next_input: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.current.shape[0]


class BatchBuilder:
    """Normalizes a dataset once and cuts batches from it."""

    def __init__(self, ds: Dataset, normalizer: Normalizer, with_history: bool = True):
        self.ds = ds
        self.norm = normalizer
        self.with_history = with_history
        self.current = normalizer.state(ds.current)
        self.step = normalizer.step(ds.step)
        self.target = normalizer.target(ds.target, ds.current)
        self.next_input = (normalizer.next_input(ds.next_input)
                           if ds.next_input is not None and normalizer.input_shift is not None else None)
        self.groups = history_groups(ds) if with_history else None

    def group_members(self):
        """Quartet indices per history group, in dataset order."""
        if self.groups is None:
            return [np.array([i]) for i in range(len(self.ds))]
        bounds = np.flatnonzero(np.diff(self.groups)) + 1
        return np.split(np.arange(len(self.ds)), bounds)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        seqs = lengths = group = None
        if self.with_history:
            lens = self.ds.valid_len[idx]
            gids = self.groups[idx]
            uniq, inverse = np.unique(gids, return_inverse=True)
            max_len = int(lens.max())
            rep = np.empty(uniq.size, dtype=np.int64)
            for u in range(uniq.size):
                members = idx[inverse == u]
                rep[u] = members[np.argmax(self.ds.valid_len[members])]
            raw = self.ds.history[rep, :max_len]
            seqs = torch.from_numpy(self.norm.history(raw, self.ds.valid_len[rep]))
            lengths = torch.from_numpy(lens)
            group = torch.from_numpy(inverse.astype(np.int64))
        nxt = None if self.next_input is None else torch.from_numpy(self.next_input[idx])
        return Batch(torch.from_numpy(self.current[idx]), seqs, lengths, group,
                     torch.from_numpy(self.step[idx]), torch.from_numpy(self.target[idx]), nxt)


def forward_normalized(theta: torch.Tensor, cfg: ModelConfig, batch: Batch,
                       layout: Optional[nx.Layout] = None) -> torch.Tensor:
    """Normalized prediction (B, d) for any architecture."""
    layout = layout or build_layout(cfg)
    if cfg.architecture == LSTM_MIONET:
        b = branch_state_forward(theta, cfg, batch.current, layout)
        beta = branch_history_forward(theta, cfg, batch.seqs, batch.lengths, batch.group, layout)
        phi = trunk_forward(theta, cfg, batch.step, layout)
        return fuse(b, beta, phi)
    if cfg.architecture == DEEPONET:
        return local_deeponet_forward(theta, cfg, batch.current, batch.next_input, batch.step, layout)
    return vanilla_lstm_forward(theta, cfg, batch.seqs, batch.lengths, batch.group, layout)


def local_deeponet_forward(theta, cfg: ModelConfig, current, next_input, h, layout=None) -> torch.Tensor:
    layout = layout or build_layout(cfg)
    x = current
    if cfg.system_kind == NON_AUTONOMOUS:
        if next_input is None:
            raise ConfigMismatchError("non-autonomous DeepONet needs the control at t + h")
        x = torch.cat([current, next_input], dim=-1)
    n = len(cfg.branch_hidden) + 1
    b = _features(mlp_forward(theta, layout, "branch", x, n, cfg.activation), cfg)
    phi = trunk_forward(theta, cfg, h, layout)
    return (b * phi).sum(-1) + nx.view(theta, layout, "bias0")


def vanilla_lstm_forward(theta, cfg: ModelConfig, seqs, lengths, group=None, layout=None) -> torch.Tensor:
    memory = encode_history(theta, cfg, seqs, lengths, group, layout)
    return decode_history(theta, cfg, memory, layout)


def _as_theta(theta) -> torch.Tensor:
    if isinstance(theta, nx.ParameterVector):
        return torch.from_numpy(theta.values)
    if isinstance(theta, torch.Tensor):
        return theta
    return torch.from_numpy(np.asarray(theta, dtype=np.float64))


def predict(theta, cfg: ModelConfig, normalizer: Normalizer, ds: Dataset,
            chunk: int = 512) -> np.ndarray:
    """Denormalized next-state predictions for every quartet of ``ds``."""
    cfg.check_dataset(ds)
    th = _as_theta(theta)
    layout = build_layout(cfg)
    builder = BatchBuilder(ds, normalizer, with_history=cfg.uses_history)
    out = np.empty((len(ds), cfg.state_dim))
    members = builder.group_members()
    start = 0
    with torch.no_grad():
        while start < len(members):
            stop, count = start, 0
            while stop < len(members) and count < chunk:
                count += members[stop].size
                stop += 1
            idx = np.concatenate(members[start:stop])
            z = forward_normalized(th, cfg, builder.batch(idx), layout).numpy()
            out[idx] = normalizer.invert_target(z, ds.current[idx])
            start = stop
    return out


def model_forward(theta, cfg: ModelConfig, normalizer: Normalizer, current, history,
                  valid_len: int, step: float, next_input=None) -> np.ndarray:
    """Single-quartet prediction in physical units."""
    current = np.asarray(current, dtype=np.float64).reshape(1, -1)
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 1:
        history = history[:, None]
    nxt = None if next_input is None else np.asarray(next_input, dtype=np.float64).reshape(1, -1)
    ds = Dataset(current, [valid_len], history[None], [step], np.zeros_like(current),
                 {"system_kind": cfg.system_kind}, normalizer, nxt)
    return predict(theta, cfg, normalizer, ds)[0]


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: nx.ParameterVector
    normalizer: Normalizer
    extra: dict = field(default_factory=dict)

    def predict(self, ds: Dataset) -> np.ndarray:
        return predict(self.params, self.config, self.normalizer, ds)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """``path`` gets the parameter binary, ``path.json`` the config sidecar."""
    path = Path(path)
    nx.save_parameters(ckpt.params, path)
    side = dict(config=ckpt.config.to_json(), normalizer=ckpt.normalizer.to_json(), extra=ckpt.extra)
    path.with_name(path.name + ".json").write_text(json.dumps(side, sort_keys=True, indent=1))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    cfg = ModelConfig.from_json(side["config"])
    params = nx.load_parameters(path)
    if params.layout != build_layout(cfg):
        raise ConfigMismatchError("parameter layout does not match the stored config")
    return Checkpoint(cfg, params, Normalizer.from_json(side["normalizer"]), side.get("extra", {}))
