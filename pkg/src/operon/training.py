"""Point-estimate training and replica-exchange SGLD posterior sampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import numerics as nx
from .datagen import Dataset, Normalizer, fit_normalizer, make_rng
from .model import (BatchBuilder, Batch, ModelConfig, build_layout, forward_normalized,
                    init_parameters, predict)

log = logging.getLogger(__name__)

Z95 = 1.96


class TrainingDivergence(RuntimeError):
    pass


class InsufficientEnsembleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Losses


def residuals(theta: torch.Tensor, cfg: ModelConfig, batch: Batch, layout=None) -> torch.Tensor:
    return forward_normalized(theta, cfg, batch, layout) - batch.target


def mse_loss(theta: torch.Tensor, cfg: ModelConfig, batch: Batch, layout=None) -> torch.Tensor:
    """Mean over quartets and output dimensions of the squared normalized residual."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return (residuals(theta, cfg, batch, layout) ** 2).mean()


def loss_and_grad(theta, cfg: ModelConfig, batch: Batch):
    layout = build_layout(cfg)
    return nx.value_and_grad(lambda t: mse_loss(t, cfg, batch, layout), theta)


# ---------------------------------------------------------------------------
# Mini-batches


def group_batches(members: Sequence[np.ndarray], batch_size: int, rng: np.random.Generator):
    """Shuffle history groups and pack them into batches of >= batch_size quartets."""
    order = rng.permutation(len(members))
    batch: List[np.ndarray] = []
    count = 0
    for g in order:
        batch.append(members[g])
        count += members[g].size
        if count >= batch_size:
            yield np.concatenate(batch)
            batch, count = [], 0
    if batch:
        yield np.concatenate(batch)


# ---------------------------------------------------------------------------
# Point estimate


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 30
    lr: float = 1e-3
    lr_final: float = 1e-5
    seed: int = 0
    max_iterations: Optional[int] = None
    target_mode: str = "increment"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")
        if self.lr < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class TrainResult:
    params: nx.ParameterVector
    normalizer: Normalizer
    loss_trace: List[float]


def _lr_at(tcfg: TrainConfig, it: int, total: int) -> float:
    if total <= 1 or tcfg.lr == 0:
        return tcfg.lr
    lo = max(tcfg.lr_final, 1e-300)
    return tcfg.lr * (lo / tcfg.lr) ** (it / (total - 1)) if tcfg.lr_final > 0 else tcfg.lr


def train_point_estimate(ds: Dataset, cfg: ModelConfig, tcfg: TrainConfig,
                         normalizer: Optional[Normalizer] = None,
                         init: Optional[nx.ParameterVector] = None,
                         callback: Optional[Callable[[int, float, torch.Tensor], None]] = None
                         ) -> TrainResult:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) on shuffled mini-batches with an
    exponentially decaying learning rate from ``lr`` to ``lr_final``."""
    cfg.check_dataset(ds)
    normalizer = normalizer or ds.normalizer or fit_normalizer(ds, tcfg.target_mode)
    rng = make_rng(tcfg.seed)
    params = init if init is not None else init_parameters(cfg, rng)
    layout = params.layout
    builder = BatchBuilder(ds, normalizer, with_history=cfg.uses_history)
    members = builder.group_members()
    per_epoch = sum(1 for _ in group_batches(members, tcfg.batch_size, make_rng(0)))
    total = per_epoch * tcfg.epochs
    if tcfg.max_iterations is not None:
        total = min(total, tcfg.max_iterations)

    theta = torch.tensor(params.values, requires_grad=True)
    opt = torch.optim.Adam([theta], lr=tcfg.lr, betas=(0.9, 0.999), eps=1e-8)
    trace: List[float] = []
    it = 0
    for epoch in range(tcfg.epochs):
        for idx in group_batches(members, tcfg.batch_size, rng):
            if it >= total:
                break
            for g in opt.param_groups:
                g["lr"] = _lr_at(tcfg, it, total)
            batch = builder.batch(idx)
            opt.zero_grad()
            loss = mse_loss(theta, cfg, batch, layout)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at iteration {it}")
            loss.backward()
            opt.step()
            trace.append(value)
            if callback is not None:
                callback(it, value, theta)
            it += 1
        log.info("epoch %d: last loss %.3e", epoch, trace[-1] if trace else float("nan"))
        if it >= total:
            break
    return TrainResult(params.with_values(theta.detach().numpy()), normalizer, trace)


# ---------------------------------------------------------------------------
# Langevin dynamics


def sgld_step(theta: np.ndarray, grad: np.ndarray, eta: float, tau: float,
              rng: np.random.Generator, precond: Optional[np.ndarray] = None) -> np.ndarray:
    """theta - eta * G grad + sqrt(2 eta tau G) xi, with G = 1 unless ``precond`` is given."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    if tau < 0:
        raise ValueError("temperature must be non-negative")
    g = grad if precond is None else precond * grad
    out = theta - eta * g
    if tau > 0:
        scale = math.sqrt(2.0 * eta * tau)
        noise = rng.standard_normal(theta.shape)
        out = out + (scale * noise if precond is None else scale * np.sqrt(precond) * noise)
    return out


def swap_probability(e_low: float, e_high: float, tau_low: float, tau_high: float,
                     correction: float = 0.0) -> float:
    """min{1, exp((1/tau_low - 1/tau_high) * (e_low - e_high - correction))}."""
    a = (1.0 / tau_low - 1.0 / tau_high) * (e_low - e_high - correction)
    return 1.0 if a >= 0 else math.exp(a)


def swap_decision(e_low: float, e_high: float, tau_low: float, tau_high: float,
                  correction: float, rng: np.random.Generator) -> bool:
    if not (math.isfinite(e_low) and math.isfinite(e_high)):
        raise TrainingDivergence("non-finite energy in swap test")
    return bool(rng.uniform() < swap_probability(e_low, e_high, tau_low, tau_high, correction))


@dataclass
class ReSGLDConfig:
    """Two-chain replica exchange settings.

    Energies are negative log posteriors in normalized target units: Gaussian
    likelihood with std ``sigma`` (per output dimension, already normalized)
    and an isotropic Gaussian prior with std ``prior_std``.
    """

    tau_low: float = 0.01
    tau_high: float = 1.0
    eta_low: float = 1e-7
    eta_high: float = 1e-7
    swap_interval: int = 50
    correction_factor: float = 1.0
    variance_smoothing: float = 0.9
    burn_in: int = 500
    thinning: int = 20
    M: int = 50
    sigma: Optional[List[float]] = None
    prior_std: float = 1.0
    batch_size: int = 256
    preconditioned: bool = False
    precond_decay: float = 0.99
    precond_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_low <= self.tau_high:
            raise ValueError("need 0 < tau_low <= tau_high")
        if self.M < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.burn_in < 0 or self.thinning < 1 or self.swap_interval < 1:
            raise ValueError("burn_in >= 0, thinning >= 1, swap_interval >= 1 required")

    @property
    def iterations(self) -> int:
        return self.burn_in + self.M * self.thinning


@dataclass
class Ensemble:
    members: np.ndarray          # (M, n_params)
    layout: nx.Layout
    config: ReSGLDConfig
    swap_attempts: int = 0
    swap_accepts: int = 0
    energy_low: List[float] = field(default_factory=list)
    energy_high: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.members.shape[0]

    @property
    def swap_rate(self) -> float:
        return self.swap_accepts / self.swap_attempts if self.swap_attempts else float("nan")

    def member(self, k: int) -> nx.ParameterVector:
        return nx.ParameterVector(self.members[k], self.layout)


def default_sigma(ds: Dataset, normalizer: Normalizer) -> np.ndarray:
    """Likelihood std in normalized target units: the injected noise level when
    recorded, otherwise 5% of the target spread."""
    if "noise_sigma" in ds.metadata and np.any(np.asarray(ds.metadata["noise_sigma"]) > 0):
        return np.asarray(ds.metadata["noise_sigma"], dtype=np.float64) / normalizer.target_scale
    spread = normalizer.target(ds.target, ds.current).std(axis=0)
    return 0.05 * np.maximum(spread, 1e-8)


def replica_exchange(energy: Callable, init: np.ndarray, rcfg: ReSGLDConfig, next_batch: Callable,
                     rng: np.random.Generator, layout: Optional[nx.Layout] = None,
                     n_total: Optional[int] = None) -> Ensemble:
    """Two-chain replica-exchange SGLD over an arbitrary energy.

    ``energy(theta, batch)`` returns ``(U, grad U, per_sample)`` where
    ``per_sample`` holds each batch element's contribution scaled to the full
    data size; its spread drives the swap correction. ``next_batch()`` yields
    the next mini-batch. With ``n_total`` the variance estimate carries the
    finite-population factor, so full batches get no correction.
    """
    init = np.asarray(init, dtype=np.float64)
    if layout is None:
        layout = nx.Layout()
        layout.add("theta", (init.size,))
    chains = [init.copy(), init.copy()]
    taus = (rcfg.tau_low, rcfg.tau_high)
    etas = (rcfg.eta_low, rcfg.eta_high)
    sq = [np.zeros(init.size), np.zeros(init.size)]
    var_est = None
    ens = Ensemble(np.empty((0, init.size)), layout, rcfg)
    stored: List[np.ndarray] = []
    gap = 1.0 / rcfg.tau_low - 1.0 / rcfg.tau_high
    it = 0
    while len(stored) < rcfg.M:
        batch = next_batch()
        energies, per = [], []
        for c in range(2):
            u, grad, ps = energy(chains[c], batch)
            if not math.isfinite(u):
                raise TrainingDivergence(f"non-finite energy at iteration {it} (chain {c})")
            precond = None
            if rcfg.preconditioned:
                sq[c] = rcfg.precond_decay * sq[c] + (1 - rcfg.precond_decay) * grad ** 2
                # bias-corrected like Adam, otherwise the zero start inflates early steps
                v = sq[c] / (1.0 - rcfg.precond_decay ** (it + 1))
                precond = 1.0 / (rcfg.precond_eps + np.sqrt(v))
            chains[c] = sgld_step(chains[c], grad, etas[c], taus[c], rng, precond)
            energies.append(u)
            per.append(np.asarray(ps, dtype=np.float64))
        ens.energy_low.append(energies[0])
        ens.energy_high.append(energies[1])
        # variance of the mini-batch estimate of the energy difference
        diff = per[0] - per[1]
        v = float(np.var(diff, ddof=1) / diff.size) if diff.size > 1 else 0.0
        if n_total is not None and n_total > 1:
            v *= max(n_total - diff.size, 0) / (n_total - 1)
        var_est = v if var_est is None else rcfg.variance_smoothing * var_est + (1 - rcfg.variance_smoothing) * v
        it += 1
        if it % rcfg.swap_interval == 0:
            correction = gap * var_est / rcfg.correction_factor
            ens.swap_attempts += 1
            if swap_decision(energies[0], energies[1], rcfg.tau_low, rcfg.tau_high, correction, rng):
                chains = [chains[1], chains[0]]
                sq = [sq[1], sq[0]]
                ens.swap_accepts += 1
        if it > rcfg.burn_in and (it - rcfg.burn_in) % rcfg.thinning == 0:
            if not np.all(np.isfinite(chains[0])):
                raise TrainingDivergence(f"non-finite parameters at iteration {it}")
            stored.append(chains[0].copy())
    ens.members = np.stack(stored)
    return ens


def resgld_sample(ds: Dataset, cfg: ModelConfig, rcfg: ReSGLDConfig,
                  normalizer: Optional[Normalizer] = None,
                  init: Optional[nx.ParameterVector] = None) -> Ensemble:
    """Sample the network posterior: Gaussian likelihood on normalized targets,
    Gaussian prior on all weights, mini-batch energies scaled to the full set."""
    cfg.check_dataset(ds)
    normalizer = normalizer or ds.normalizer or fit_normalizer(ds, "increment")
    rng = make_rng(rcfg.seed)
    params = init if init is not None else init_parameters(cfg, rng)
    layout = params.layout
    builder = BatchBuilder(ds, normalizer, with_history=cfg.uses_history)
    members = builder.group_members()
    n_total = len(ds)
    sigma = (np.asarray(rcfg.sigma, dtype=np.float64) if rcfg.sigma is not None
             else default_sigma(ds, normalizer))
    inv_var = torch.from_numpy(1.0 / (2.0 * np.broadcast_to(sigma, (cfg.state_dim,)) ** 2))
    prior_coef = 1.0 / (2.0 * rcfg.prior_std ** 2)

    def energy(theta_np: np.ndarray, batch: Batch):
        theta = torch.tensor(theta_np, requires_grad=True)
        per_sample = (residuals(theta, cfg, batch, layout) ** 2 * inv_var).sum(-1)
        u = n_total / len(batch) * per_sample.sum() + prior_coef * (theta ** 2).sum()
        u.backward()
        return float(u.detach()), theta.grad.numpy().copy(), per_sample.detach().numpy() * n_total

    state = {"it": iter(())}

    def next_batch() -> Batch:
        idx = next(state["it"], None)
        if idx is None:
            state["it"] = group_batches(members, rcfg.batch_size, rng)
            idx = next(state["it"])
        return builder.batch(idx)

    return replica_exchange(energy, params.values, rcfg, next_batch, rng, layout, n_total)


# ---------------------------------------------------------------------------
# Ensemble statistics


@dataclass
class PredictionBand:
    """Mean and spread per point and dimension; the band is mean +- 1.96 std."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std < 0):
            raise ValueError("negative spread")

    @property
    def lower(self) -> np.ndarray:
        return self.mean - Z95 * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + Z95 * self.std


def ensemble_stats(preds: np.ndarray) -> PredictionBand:
    """Member axis first. Variance uses the M - 1 divisor."""
    preds = np.asarray(preds, dtype=np.float64)
    M = preds.shape[0]
    if M < 2:
        raise InsufficientEnsembleError(f"need at least 2 members, got {M}")
    mu = preds.mean(axis=0)
    var = ((preds - mu) ** 2).sum(axis=0) / (M - 1)
    return PredictionBand(mu, np.sqrt(var))


def ensemble_predict(ens: Ensemble, cfg: ModelConfig, normalizer: Normalizer, ds: Dataset) -> PredictionBand:
    if len(ens) < 2:
        raise InsufficientEnsembleError(f"need at least 2 members, got {len(ens)}")
    preds = np.stack([predict(ens.members[k], cfg, normalizer, ds) for k in range(len(ens))])
    return ensemble_stats(preds)


# ---------------------------------------------------------------------------
# Files


def write_trace_csv(values: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,value\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{v:.17g}\n")


def read_trace_csv(path) -> List[float]:
    with open(path) as fh:
        next(fh)
        return [float(line.split(",")[1]) for line in fh if line.strip()]


def save_ensemble(ens: Ensemble, cfg: ModelConfig, normalizer: Normalizer, directory,
                  extra: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(len(ens)):
        name = f"member_{k:04d}.bin"
        nx.save_parameters(ens.member(k), directory / name)
        names.append(name)
    manifest = dict(members=names, model=cfg.to_json(), normalizer=normalizer.to_json(),
                    resgld=asdict(ens.config), swap_attempts=ens.swap_attempts,
                    swap_accepts=ens.swap_accepts, extra=extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    write_trace_csv(ens.energy_low, directory / "energy_low.csv")
    write_trace_csv(ens.energy_high, directory / "energy_high.csv")


def load_ensemble(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = ModelConfig.from_json(manifest["model"])
    vecs = [nx.load_parameters(directory / name) for name in manifest["members"]]
    layout = vecs[0].layout
    ens = Ensemble(np.stack([v.values for v in vecs]), layout, ReSGLDConfig(**manifest["resgld"]),
                   manifest["swap_attempts"], manifest["swap_accepts"],
                   read_trace_csv(directory / "energy_low.csv"),
                   read_trace_csv(directory / "energy_high.csv"))
    return ens, cfg, Normalizer.from_json(manifest["normalizer"])
