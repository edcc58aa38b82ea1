"""Command-line entry point: ``operon <subcommand> [options]``.

Options may also come from a JSON file of flat dotted keys (``--config``),
e.g. ``{"train.epochs": 20, "model.p": 64}``; explicit flags win.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from . import __version__
from . import numerics as nx
from .datagen import (AUTONOMOUS, add_noise, fit_normalizer, load_dataset,
                      make_rng, save_dataset)
from .dynamics import DivergenceError, load_trajectory_csv, save_trajectory_csv
from .evaluate import (EnsembleModel, NeuralModel, OracleModel, RolloutDivergence,
                       batch_evaluate, extrapolation_study, parse_range, rollout, stepsize_study,
                       write_band, write_curve)
from .experiments import (PRESETS, generate, lorenz_rhs_default, pendulum_rhs_default,
                          pendulum_trajectories, quartets_from)
from .ingest import read_pv_csv, synth_pv_generator, window_and_interpolate, write_pv_csv
from .model import ARCHITECTURES, Checkpoint, ModelConfig, config_for, load_checkpoint, save_checkpoint
from .training import (ReSGLDConfig, TrainConfig, TrainingDivergence, load_ensemble,
                       resgld_sample, save_ensemble, train_point_estimate, write_trace_csv)

log = logging.getLogger("operon")


class ConfigError(ValueError):
    pass


EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

MODEL_KEYS = ("p", "branch_hidden", "lift_hidden", "lstm_hidden", "decoder_hidden", "trunk_hidden",
              "activation")
TRAIN_KEYS = ("batch_size", "epochs", "lr", "lr_final", "max_iterations")
RESGLD_KEYS = ("tau_low", "tau_high", "eta_low", "eta_high", "swap_interval", "correction_factor",
               "burn_in", "thinning", "M", "prior_std", "batch_size", "preconditioned")


# ---------------------------------------------------------------------------
# Argument parsing


def _sizes(text: str):
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).lower() in ("1", "true", "yes", "on")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", dest="model.architecture", choices=ARCHITECTURES)
    p.add_argument("--model.p", dest="model.p", type=int)
    for k in ("branch_hidden", "lift_hidden", "decoder_hidden", "trunk_hidden"):
        p.add_argument(f"--model.{k}", dest=f"model.{k}", type=_sizes, metavar="N,N")
    p.add_argument("--model.lstm_hidden", dest="model.lstm_hidden", type=int)
    p.add_argument("--model.activation", dest="model.activation", choices=sorted(nx.ACTIVATIONS))


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="operon", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"operon {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--seed", type=int, help="defaults to $OPERON_SEED, else 0")
    common.add_argument("--threads", type=int, help="worker cap; 1 gives serial, bit-reproducible runs")
    common.add_argument("--log-level", default="WARNING")
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate training / test data")
    g.add_argument("--experiment", choices=sorted(PRESETS))
    g.add_argument("--scale", type=float)
    g.add_argument("--out")
    g.add_argument("--noise", type=float, help="target noise as a fraction of per-channel target std")
    g.add_argument("--fixed-step", dest="fixed_step", type=float, help="use one step size for every record")
    g.add_argument("--days", type=int, help="PV: days per customer")
    g.add_argument("--test-control", dest="test_control", choices=("grf", "sin"),
                   help="pendulum: control family of the test trajectories")
    g.add_argument("--test-T", dest="test_T", type=float, help="pendulum: test trajectory span")
    g.add_argument("--no-test", dest="no_test", action="store_true")

    i = sub.add_parser("ingest", parents=[common], help="read Ausgrid-layout PV CSV into trajectories")
    i.add_argument("--csv")
    i.add_argument("--customers", help="first:last (inclusive)")
    i.add_argument("--dates", help="YYYY-MM-DD:YYYY-MM-DD (inclusive)")
    i.add_argument("--out")
    i.add_argument("--replicas", type=int)
    i.add_argument("--h-max", dest="h_max", type=float)
    i.add_argument("--write-synthetic", dest="write_synthetic", metavar="CUSTOMERS:DAYS",
                   help="write a synthetic CSV to --csv instead of reading one")

    t = sub.add_parser("train", parents=[common], help="point-estimate training")
    t.add_argument("--dataset")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--target-mode", dest="target_mode", choices=("increment", "absolute"))
    for k in TRAIN_KEYS:
        typ = int if k in ("batch_size", "epochs", "max_iterations") else float
        t.add_argument(f"--{k.replace('_', '-')}", f"--train.{k}", dest=f"train.{k}", type=typ)
    _add_model_args(t)

    s = sub.add_parser("sample", parents=[common], help="replica-exchange SGLD ensemble")
    s.add_argument("--dataset")
    s.add_argument("--init", help="checkpoint to warm-start both chains")
    s.add_argument("--out", help="ensemble directory")
    s.add_argument("--target-mode", dest="target_mode", choices=("increment", "absolute"))
    for k in RESGLD_KEYS:
        typ = (int if k in ("swap_interval", "burn_in", "thinning", "M", "batch_size")
               else _bool if k == "preconditioned" else float)
        flags = [f"--resgld.{k}"] + ([f"--{k}"] if k in ("M", "burn_in", "thinning") else [])
        s.add_argument(*flags, dest=f"resgld.{k}", type=typ)
    _add_model_args(s)

    e = sub.add_parser("eval", parents=[common], help="one-step scores, rollouts and plot data")
    _add_eval_sources(e)
    e.add_argument("--h", type=float, help="prediction step")
    e.add_argument("--replicas", type=int)
    e.add_argument("--rollouts", type=int, help="number of test trajectories to roll out for plot files")
    e.add_argument("--rollout-mode", dest="rollout_mode", choices=("closed", "teacher"))

    st = sub.add_parser("study", parents=[common], help="horizon or step-size study")
    _add_eval_sources(st)
    st.add_argument("--kind", choices=("extrapolation", "stepsize"))
    st.add_argument("--h", help="step sizes, start:stop:step or comma list")
    st.add_argument("--T", dest="T", help="horizons, start:stop:step or comma list")
    st.add_argument("--replicas", type=int)
    st.add_argument("--rollout-mode", dest="rollout_mode", choices=("closed", "teacher"))

    ins = sub.add_parser("inspect", parents=[common], help="summarize any artifact")
    ins.add_argument("path")
    return top


def _add_eval_sources(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    p.add_argument("--test", help="directory of test trajectory CSVs")
    p.add_argument("--experiment", choices=sorted(PRESETS))
    p.add_argument("--out")


DEFAULTS: Dict[str, Any] = {
    "scale": 1.0, "noise": 0.0, "replicas": None, "rollouts": 2, "rollout_mode": "closed",
    "target_mode": "increment", "test_control": "grf", "kind": "stepsize",
}


def resolve(ns: argparse.Namespace) -> Dict[str, Any]:
    """Merge built-in defaults < config file < explicit flags."""
    cfg: Dict[str, Any] = dict(DEFAULTS)
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        cfg.update(loaded)
    for k, v in vars(ns).items():
        if v is not None and v is not False:
            cfg[k] = v
        elif k not in cfg:
            cfg[k] = v
    if cfg.get("seed") is None:
        env = os.environ.get("OPERON_SEED")
        cfg["seed"] = int(env) if env not in (None, "") else 0
    return cfg


def _section(cfg: Dict[str, Any], prefix: str, keys) -> Dict[str, Any]:
    out = {}
    for k in keys:
        v = cfg.get(f"{prefix}.{k}")
        if v is None:
            continue
        if k.endswith("_hidden") and k != "lstm_hidden" and not isinstance(v, tuple):
            v = _sizes(",".join(str(x) for x in v) if isinstance(v, list) else v)
        out[k] = v
    return out


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"missing required option --{k.replace('_', '-')}")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(cfg) -> dict:
    _require(cfg, "experiment", "out")
    name = cfg["experiment"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = generate(name, float(cfg["scale"]), int(cfg["seed"]), cfg.get("fixed_step"),
                    cfg.get("days"), with_test=not cfg.get("no_test"))
    ds = data.train
    if cfg.get("noise"):
        rng = make_rng(np.random.SeedSequence(int(cfg["seed"])).spawn(4)[3])
        ds = add_noise(ds, float(cfg["noise"]) * ds.target.std(axis=0), rng)
        ds.metadata["noise_fraction"] = float(cfg["noise"])
    test = data.test
    if name == "pendulum" and (cfg.get("test_control") != "grf" or cfg.get("test_T")):
        rng = make_rng(np.random.SeedSequence(int(cfg["seed"])).spawn(5)[4])
        test = pendulum_trajectories(data.preset.n_test, rng, float(cfg.get("test_T") or data.preset.T),
                                     data.preset.dt, cfg.get("test_control") or "grf")
    save_dataset(ds, out / "train.dataset")
    if test:
        (out / "test").mkdir(exist_ok=True)
        for k, traj in enumerate(test):
            save_trajectory_csv(traj, out / "test" / f"traj_{k:05d}.csv")
    manifest = dict(experiment=name, scale=float(cfg["scale"]), seed=int(cfg["seed"]),
                    quartets=len(ds), train_trajectories=data.preset.n_train,
                    test_trajectories=len(test), replicas=data.preset.replicas,
                    h_max=data.preset.h_max, eval_h=data.preset.eval_h,
                    test_replicas=data.preset.test_replicas, system_kind=data.preset.system_kind,
                    noise_fraction=float(cfg.get("noise") or 0.0))
    _write_json(manifest, out / "manifest.json")
    return manifest


def cmd_ingest(cfg) -> dict:
    _require(cfg, "csv")
    if cfg.get("write_synthetic"):
        n_cust, n_days = (int(v) for v in str(cfg["write_synthetic"]).split(":"))
        recs = synth_pv_generator(n_cust, n_days, make_rng(int(cfg["seed"])))
        write_pv_csv(recs, cfg["csv"])
        return dict(written=str(cfg["csv"]), records=len(recs))
    _require(cfg, "out")
    src = _existing(cfg["csv"], "CSV file")
    cust = None
    if cfg.get("customers"):
        a, b = str(cfg["customers"]).split(":")
        cust = (int(a), int(b))
    dates = None
    if cfg.get("dates"):
        a, b = str(cfg["dates"]).split(":")
        dates = (dt.date.fromisoformat(a), dt.date.fromisoformat(b))
    recs = read_pv_csv(src, cust, dates)
    out = Path(cfg["out"])
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    trajs = [window_and_interpolate(r) for r in recs]
    for r, traj in zip(recs, trajs):
        save_trajectory_csv(traj, out / "trajectories" / f"c{r.customer_id:04d}_{r.date.isoformat()}.csv")
    summary = dict(records=len(recs), skipped=recs.skipped, reasons=recs.reasons)
    if trajs:
        preset = PRESETS["pv"]
        reps = int(cfg.get("replicas") or preset.replicas)
        h_max = float(cfg.get("h_max") or preset.h_max)
        ds = quartets_from(trajs, reps, h_max, make_rng(int(cfg["seed"])), AUTONOMOUS)
        ds.metadata["experiment"] = "pv"
        save_dataset(ds, out / "train.dataset")
        summary["quartets"] = len(ds)
    _write_json(summary, out / "ingest_report.json")
    return summary


def _configure_model(cfg, ds) -> ModelConfig:
    overrides = _section(cfg, "model", MODEL_KEYS)
    arch = cfg.get("model.architecture")
    if arch:
        overrides["architecture"] = arch
    return config_for(ds, **overrides)


def cmd_train(cfg) -> dict:
    _require(cfg, "dataset", "out")
    ds = load_dataset(_existing(cfg["dataset"], "dataset"))
    mcfg = _configure_model(cfg, ds)
    tcfg = TrainConfig(seed=int(cfg["seed"]), **_section(cfg, "train", TRAIN_KEYS))
    norm = fit_normalizer(ds, cfg.get("target_mode") or "increment")
    res = train_point_estimate(ds, mcfg, tcfg, norm)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(mcfg, res.params, res.normalizer,
                               dict(train=asdict(tcfg), experiment=ds.metadata.get("experiment"))), out)
    write_trace_csv(res.loss_trace, out.with_name(out.name + ".loss.csv"))
    final = res.loss_trace[-1] if res.loss_trace else float("nan")
    print(f"final training loss {final:.6e}")
    return dict(checkpoint=str(out), iterations=len(res.loss_trace), final_loss=final)


def cmd_sample(cfg) -> dict:
    _require(cfg, "dataset", "out")
    ds = load_dataset(_existing(cfg["dataset"], "dataset"))
    init = norm = None
    if cfg.get("init"):
        ck = load_checkpoint(_existing(cfg["init"], "checkpoint"))
        mcfg, init, norm = ck.config, ck.params, ck.normalizer
    else:
        mcfg = _configure_model(cfg, ds)
        norm = fit_normalizer(ds, cfg.get("target_mode") or "increment")
    rcfg = ReSGLDConfig(seed=int(cfg["seed"]), **_section(cfg, "resgld", RESGLD_KEYS))
    ens = resgld_sample(ds, mcfg, rcfg, norm, init)
    save_ensemble(ens, mcfg, norm, cfg["out"], extra=dict(experiment=ds.metadata.get("experiment")))
    print(f"stored {len(ens)} members; swap acceptance {ens.swap_accepts}/{ens.swap_attempts}")
    return dict(ensemble=str(cfg["out"]), members=len(ens), swap_attempts=ens.swap_attempts,
                swap_accepts=ens.swap_accepts)


def _load_model(cfg):
    chosen = [k for k in ("checkpoint", "ensemble", "oracle") if cfg.get(k)]
    if len(chosen) != 1:
        raise ConfigError("give exactly one of --checkpoint, --ensemble, --oracle")
    if cfg.get("checkpoint"):
        ck = load_checkpoint(_existing(cfg["checkpoint"], "checkpoint"))
        return NeuralModel(ck.config, ck.normalizer, ck.params), ck.extra.get("experiment")
    if cfg.get("ensemble"):
        ens, mcfg, norm = load_ensemble(_existing(cfg["ensemble"], "ensemble"))
        manifest = json.loads((Path(cfg["ensemble"]) / "manifest.json").read_text())
        return EnsembleModel(mcfg, norm, ens), manifest.get("extra", {}).get("experiment")
    name = cfg.get("experiment")
    if name is None:
        raise ConfigError("--oracle needs --experiment")
    rhs = {"lorenz": lorenz_rhs_default, "pendulum": pendulum_rhs_default}.get(name)
    return OracleModel(PRESETS[name].system_kind, rhs), name


def _load_tests(cfg):
    _require(cfg, "test")
    d = _existing(cfg["test"], "test directory")
    files = sorted(d.glob("*.csv"))
    if not files:
        raise ConfigError(f"no trajectory CSVs in {d}")
    return [load_trajectory_csv(f) for f in files]


def _preset(cfg, experiment):
    name = cfg.get("experiment") or experiment
    return PRESETS.get(name) if name else None


def cmd_eval(cfg) -> dict:
    _require(cfg, "out")
    model, exp_name = _load_model(cfg)
    tests = _load_tests(cfg)
    preset = _preset(cfg, exp_name)
    h = float(cfg.get("h") or (preset.eval_h if preset else tests[0].grid.dt))
    reps = int(cfg.get("replicas") or (preset.test_replicas if preset else 100))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(int(cfg["seed"]))
    report = batch_evaluate(model, tests, reps, h, rng, with_band=isinstance(model, EnsembleModel))
    report.metadata.update(seed=int(cfg["seed"]), experiment=exp_name)
    report.save(out / "report.json")
    # plot data: rollouts of the first few trajectories
    n_roll = min(int(cfg.get("rollouts") or 0), len(tests))
    mode = cfg.get("rollout_mode") or "closed"
    files: List[str] = []
    roll_h = tests[0].grid.dt if model.system_kind == AUTONOMOUS and h != tests[0].grid.dt and \
        getattr(getattr(model, "cfg", None), "uses_history", False) else h
    for k in range(n_roll):
        traj = tests[k]
        stride = int(round(roll_h / traj.grid.dt))
        try:
            res = rollout(model, traj.states[0], traj.grid, roll_h, traj.inputs,
                          teacher=traj.states[::stride], mode=mode)
        except RolloutDivergence as exc:
            log.warning("rollout %d diverged: %s", k, exc)
            continue
        pred = res.trajectory
        for j in range(traj.state_dim):
            stem = out / f"traj{k:03d}_x{j}"
            write_curve(pred.times, traj.states[::stride][:pred.grid.n_points, j], f"{stem}_true.txt")
            write_curve(pred.times, pred.states[:, j], f"{stem}_pred.txt")
            files += [f"{stem}_true.txt", f"{stem}_pred.txt"]
            if res.band is not None:
                write_band(pred.times, res.band.lower[:, j], res.band.upper[:, j], f"{stem}_band.txt")
                files.append(f"{stem}_band.txt")
    summary = dict(report=str(out / "report.json"), mean=report.mean.tolist(), std=report.std.tolist(),
                   picp=report.picp, files=len(files))
    return summary


def cmd_study(cfg) -> dict:
    _require(cfg, "out")
    model, exp_name = _load_model(cfg)
    tests = _load_tests(cfg)
    preset = _preset(cfg, exp_name)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg.get("kind") or "stepsize"
    if kind == "stepsize":
        hs = parse_range(cfg.get("h") or "0.02:0.5:0.02")
        reps = int(cfg.get("replicas") or (preset.test_replicas if preset else 100))
        res = stepsize_study(model, tests, hs, reps, make_rng(int(cfg["seed"])))
        curve = res["curve"]
        summary = dict(kind=kind, h=hs, mean_l2=curve[:, 1].tolist(), slope=res["slope"],
                       intercept=res["intercept"], pearson=res["pearson"],
                       per_channel=[r.mean.tolist() for r in res["reports"]])
        write_curve(curve[:, 0], curve[:, 1], out / "stepsize_curve.txt")
    elif kind == "extrapolation":
        Ts = parse_range(cfg.get("T") or "10:20:2")
        curve, reports = extrapolation_study(model, tests, Ts, mode=cfg.get("rollout_mode") or "closed")
        summary = dict(kind=kind, T=Ts, mean_l2=curve[:, 1].tolist(),
                       per_channel=[r.mean.tolist() for r in reports], mode=reports[0].mode)
        write_curve(curve[:, 0], curve[:, 1], out / "extrapolation_curve.txt")
    else:
        raise ConfigError(f"unknown study kind {kind!r}")
    summary["seed"] = int(cfg["seed"])
    _write_json(summary, out / f"{kind}_report.json")
    return {k: v for k, v in summary.items() if k != "per_channel"}


def cmd_inspect(cfg) -> dict:
    p = _existing(cfg["path"], "path")
    if p.is_dir() and (p / "manifest.json").exists():
        m = json.loads((p / "manifest.json").read_text())
        if "members" in m:
            return dict(kind="ensemble", members=len(m["members"]), swap_attempts=m["swap_attempts"],
                        swap_accepts=m["swap_accepts"], model=m["model"])
        return dict(kind="experiment", **m)
    sidecar = p.with_name(p.name + ".json")
    if sidecar.exists():
        ck = load_checkpoint(p)
        return dict(kind="checkpoint", parameters=len(ck.params), config=ck.config.to_json(),
                    segments=ck.params.layout.names())
    with open(p, "rb") as fh:
        head = fh.read(5)
    if head == nx.MAGIC:
        pv = nx.load_parameters(p)
        return dict(kind="parameters", parameters=len(pv), segments=pv.layout.names())
    if head.startswith(b"{"):
        ds = load_dataset(p)
        return dict(kind="dataset", quartets=len(ds), state_dim=ds.state_dim, capacity=ds.capacity,
                    history_dim=ds.history_dim, metadata=ds.metadata)
    if p.suffix == ".csv":
        tr = load_trajectory_csv(p)
        return dict(kind="trajectory", n_points=tr.grid.n_points, dt=tr.grid.dt, state_dim=tr.state_dim,
                    input_dim=0 if tr.inputs is None else tr.inputs.shape[1])
    raise ConfigError(f"do not know how to inspect {p}")


COMMANDS = dict(generate=cmd_generate, ingest=cmd_ingest, train=cmd_train, sample=cmd_sample,
                eval=cmd_eval, study=cmd_study, inspect=cmd_inspect)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns)
        logging.basicConfig(level=getattr(logging, str(cfg.get("log_level", "WARNING")).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if cfg.get("threads"):
            torch.set_num_threads(int(cfg["threads"]))
        result = COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (TrainingDivergence, DivergenceError, RolloutDivergence) as exc:
        return _fail("divergence", exc, EXIT_DIVERGED)
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FAILURE)
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps(dict(error=kind, message=str(exc)), sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
