"""Command-line entry point: generate / train / eval / aggregate.

Configuration comes from a YAML file validated against a fixed key set
(unknown keys are rejected before any work starts).  The seed precedence
is: --seed flag, then the FEDPP_SEED environment variable, then the
config file.  Exit codes: 0 success, 1 runtime failure, 2 validation
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import client as cl
from . import dataio
from .aggregation import AGGREGATION_KINDS, AggregationMethod, aggregate
from .kernel import PACKING_VERSION, EncoderSpec
from .numerics import DiagGaussian, trapezoid_grid
from .orchestrator import FedConfig, run_training

__all__ = ["main", "load_config", "read_param_records", "write_param_records"]

log = logging.getLogger(__name__)

METRICS_HEADER = "round,participants,mean_test_loglik,mean_elbo,wall_time_ms"

_TOP_KEYS = {
    "seed", "clients", "participants", "rounds", "local_epochs", "batch_size",
    "step_size", "straggle_period", "aggregation", "mmd_delta", "mmd_steps",
    "mmd_eta", "n_inducing", "quad_nodes", "n_w_samples", "hidden_dim",
    "embed_dim", "n_workers", "eval_all", "split", "event_types",
    "types_per_client", "generate",
}
_GEN_KEYS = {"m", "horizon", "train_seqs", "test_seqs", "kernels", "grid_size"}

_DEFAULT_CONFIG = {
    "seed": 0,
    "clients": 2,
    "participants": 2,
    "rounds": 10,
    "local_epochs": 5,
    "batch_size": 4,
    "step_size": 1e-3,
    "straggle_period": 1,
    "aggregation": "kl",
    "n_inducing": 50,
    "quad_nodes": 200,
    "n_w_samples": 4,
    "hidden_dim": 32,
    "embed_dim": 8,
    "n_workers": 1,
    "split": "sequence",
    "generate": {
        "m": 50.0,
        "horizon": 1.0,
        "train_seqs": 8,
        "test_seqs": 4,
        "kernels": [[1.5, 10.0], [2.0, 8.0]],
    },
}


class ConfigError(ValueError):
    """Invalid run configuration (exit code 2)."""


def load_config(path=None, overrides=None) -> dict:
    """Read, validate and default-fill a run configuration."""
    cfg = {k: (dict(v) if isinstance(v, dict) else v)
           for k, v in _DEFAULT_CONFIG.items()}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        unknown = set(loaded) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        gen = loaded.get("generate", {})
        if gen:
            unknown = set(gen) - _GEN_KEYS
            if unknown:
                raise ConfigError(f"unknown generate keys: {sorted(unknown)}")
            cfg["generate"].update(gen)
        cfg.update({k: v for k, v in loaded.items() if k != "generate"})
    env_seed = os.environ.get("FEDPP_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"FEDPP_SEED must be an integer, got {env_seed!r}")
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["aggregation"] not in AGGREGATION_KINDS:
        raise ConfigError(
            f"unknown aggregation {cfg['aggregation']!r}; valid: {AGGREGATION_KINDS}"
        )
    if cfg["split"] not in ("sequence", "time"):
        raise ConfigError("split must be 'sequence' or 'time'")
    gen = cfg["generate"]
    if gen["m"] <= 0:
        raise ConfigError("generate.m must be positive")
    if gen["horizon"] <= 0:
        raise ConfigError("generate.horizon must be positive")
    if gen["train_seqs"] < 1 or gen["test_seqs"] < 0:
        raise ConfigError("generate sequence counts out of range")
    if cfg["split"] == "time":
        k_types = cfg.get("event_types")
        k_per = cfg.get("types_per_client")
        if k_types is None or k_per is None:
            raise ConfigError("time split requires event_types and types_per_client")
        if k_per >= k_types:
            raise ConfigError("types_per_client must be < event_types")
    try:
        fed_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def fed_config(cfg: dict) -> FedConfig:
    method_kwargs = {}
    if cfg["aggregation"] == "mmd":
        method_kwargs = {
            "mmd_delta": cfg.get("mmd_delta", 1.0),
            "mmd_steps": cfg.get("mmd_steps", 500),
            "mmd_eta": cfg.get("mmd_eta", 1e-2),
        }
    return FedConfig(
        n_clients=cfg["clients"],
        participants_per_round=cfg["participants"],
        rounds=cfg["rounds"],
        local_epochs=cfg["local_epochs"],
        batch_size=cfg["batch_size"],
        step_size=cfg["step_size"],
        straggle_period=cfg["straggle_period"],
        aggregation=AggregationMethod(cfg["aggregation"], **method_kwargs),
        seed=cfg["seed"],
        n_inducing=cfg["n_inducing"],
        quad_nodes=cfg["quad_nodes"],
        n_w_samples=cfg["n_w_samples"],
        hidden_dim=cfg["hidden_dim"],
        embed_dim=cfg["embed_dim"],
        n_workers=cfg["n_workers"],
        eval_all=cfg.get("eval_all", False),
    )


# ----------------------------------------------------------------------
# Parameter-record files (the standalone aggregation surface)
# ----------------------------------------------------------------------

def write_param_records(records, path) -> None:
    payload = {
        "version": PACKING_VERSION,
        "dim": records[0].dim,
        "records": [
            {"mean": r.mean.tolist(), "var": r.var.tolist()} for r in records
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def read_param_records(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != PACKING_VERSION:
        raise ValueError(
            f"parameter record version {version!r} does not match {PACKING_VERSION!r}"
        )
    dim = payload["dim"]
    records = []
    for i, rec in enumerate(payload["records"]):
        g = DiagGaussian(np.asarray(rec["mean"]), np.asarray(rec["var"]))
        if g.dim != dim:
            raise ValueError(f"record {i} has dimension {g.dim}, header says {dim}")
        records.append(g)
    if not records:
        raise ValueError("parameter record file holds no records")
    return records


# ----------------------------------------------------------------------
# Model container
# ----------------------------------------------------------------------

def _gaussian_json(g: DiagGaussian) -> dict:
    return {"mean": g.mean.tolist(), "var": g.var.tolist()}


def save_model(path, server, clients, horizon, train_window, eval_interval):
    spec = clients[0].spec
    payload = {
        "version": PACKING_VERSION,
        "horizon": horizon,
        "train_window": train_window,
        "eval_interval": list(eval_interval),
        "encoder": {
            "hidden_dim": spec.hidden_dim,
            "output_dim": spec.output_dim,
            "t_norm": spec.t_norm,
        },
        "theta": _gaussian_json(server.theta),
        "round": server.round,
        "clients": [
            {
                "id": c.id,
                "m": c.m,
                "nu": c.nu,
                "phi": _gaussian_json(c.phi),
                "inducing": {
                    "locations": c.q_u.locations.tolist(),
                    "mean": c.q_u.mean.tolist(),
                    "cov": c.q_u.cov.tolist(),
                },
            }
            for c in clients
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != PACKING_VERSION:
        raise ValueError(
            f"model version {version!r} does not match {PACKING_VERSION!r}"
        )
    enc = payload["encoder"]
    spec = EncoderSpec(
        hidden_dim=enc["hidden_dim"], output_dim=enc["output_dim"],
        t_norm=enc["t_norm"],
    )
    grid = trapezoid_grid(payload["train_window"], 8)
    clients = []
    for rec in payload["clients"]:
        phi = DiagGaussian(np.asarray(rec["phi"]["mean"]),
                           np.asarray(rec["phi"]["var"]))
        q_u = cl.InducingPosterior(
            locations=np.asarray(rec["inducing"]["locations"]),
            mean=np.asarray(rec["inducing"]["mean"]),
            cov=np.asarray(rec["inducing"]["cov"]),
        )
        clients.append(
            cl.ClientState(
                id=rec["id"], train_seqs=[], grid=grid, spec=spec,
                m=rec["m"], nu=rec["nu"], phi=phi, q_u=q_u,
                pg=np.empty(0),
                latent_rate=np.zeros(grid.size),
                latent_c=np.zeros(grid.size),
            )
        )
    theta = DiagGaussian(np.asarray(payload["theta"]["mean"]),
                         np.asarray(payload["theta"]["var"]))
    return {
        "theta": theta,
        "clients": clients,
        "horizon": payload["horizon"],
        "train_window": payload["train_window"],
        "eval_interval": tuple(payload["eval_interval"]),
    }


# ----------------------------------------------------------------------
# Data directory layout produced by `generate` / consumed by `train`
# ----------------------------------------------------------------------

def _write_intensity_csv(path, grid, lam):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,lambda\n")
        for t, y in zip(grid, lam):
            fh.write(f"{t!r},{y!r}\n")


def cmd_generate(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    gen = cfg["generate"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernels = gen["kernels"]
    n_clients = cfg["clients"]
    meta_clients = []
    for cid in range(n_clients):
        variance, inv_length = kernels[cid % len(kernels)]
        # Pairs are read as [variance, inverse length scale]; this
        # interpretation is recorded in the metadata for auditability.
        spec = dataio.RbfSpec(variance=variance, length_scale=1.0 / inv_length)
        seqs, (grid, lam) = dataio.simulate_client(
            gen["m"], spec, gen["horizon"],
            gen["train_seqs"] + gen["test_seqs"],
            cl.derive_seed(cfg["seed"], 0xDA7A, cid),
        )
        train = seqs[: gen["train_seqs"]]
        test = seqs[gen["train_seqs"]:]
        dataio.save_jsonl(train, out / f"client_{cid:02d}.train.jsonl")
        dataio.save_jsonl(test, out / f"client_{cid:02d}.test.jsonl")
        _write_intensity_csv(out / f"client_{cid:02d}.intensity.csv", grid, lam)
        meta_clients.append(
            {
                "id": cid,
                "kernel_pair": [variance, inv_length],
                "interpretation": "pair read as [variance, inverse length scale]",
                "variance": variance,
                "length_scale": 1.0 / inv_length,
                "train_events": int(sum(len(s) for s in train)),
                "test_events": int(sum(len(s) for s in test)),
            }
        )
        print(
            f"client {cid}: {sum(len(s) for s in train)} train / "
            f"{sum(len(s) for s in test)} test events"
        )
    meta = {
        "m": gen["m"],
        "horizon": gen["horizon"],
        "seed": cfg["seed"],
        "train_seqs": gen["train_seqs"],
        "test_seqs": gen["test_seqs"],
        "clients": meta_clients,
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return 0


def _load_sequence_dataset(data_dir, n_clients):
    data_dir = Path(data_dir)
    with open(data_dir / "metadata.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    train_sets, test_sets = [], []
    for cid in range(n_clients):
        train_sets.append(dataio.load_jsonl(data_dir / f"client_{cid:02d}.train.jsonl"))
        test_path = data_dir / f"client_{cid:02d}.test.jsonl"
        test_sets.append(dataio.load_jsonl(test_path) if test_path.exists() else [])
    horizon = float(meta["horizon"])
    return train_sets, test_sets, horizon, horizon, (0.0, horizon)


def _load_time_dataset(data_path, cfg):
    seqs = dataio.load_jsonl(data_path)
    split = dataio.normalize_and_split(seqs)
    plan_train = dataio.partition_heterogeneous(
        split.train, cfg["event_types"], cfg["types_per_client"],
        cfg["clients"], cfg["seed"],
    )
    plan_test = dataio.partition_heterogeneous(
        split.test, cfg["event_types"], cfg["types_per_client"],
        cfg["clients"], cfg["seed"],
    )
    train_sets = [plan_train.client_seqs[c] for c in range(cfg["clients"])]
    test_sets = [plan_test.client_seqs[c] for c in range(cfg["clients"])]
    lo, hi = split.boundaries
    return train_sets, test_sets, split.horizon, lo, (hi, split.horizon)


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "aggregation": args.aggregation,
        "rounds": args.rounds,
        "clients": args.clients,
        "participants": args.participants,
        "local_epochs": args.local_epochs,
        "straggle_period": args.straggle_period,
    }
    cfg = load_config(args.config, overrides)
    config = fed_config(cfg)
    if cfg["split"] == "sequence":
        train_sets, test_sets, horizon, window, interval = _load_sequence_dataset(
            args.data, config.n_clients
        )
    else:
        train_sets, test_sets, horizon, window, interval = _load_time_dataset(
            args.data, cfg
        )
    metrics_path = Path(args.metrics)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")

        def emit(metrics):
            ids = ";".join(str(i) for i in metrics.participant_ids)
            # wall time is written as 0 so reruns are byte-identical; real
            # timings are available on the in-memory metrics objects.
            fh.write(
                f"{metrics.round},{ids},{metrics.mean_test_loglik!r},"
                f"{metrics.mean_elbo!r},0\n"
            )
            fh.flush()

        history, server, clients = run_training(
            config, train_sets, horizon, test_sets,
            eval_interval=interval, on_round=emit,
            train_window=window,
        )
    if args.model:
        save_model(args.model, server, clients, horizon, window, interval)
    print(f"completed {len(history)} rounds; metrics in {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    n_clients = len(model["clients"])
    _, test_sets, *_ = _load_sequence_dataset(args.data, n_clients)
    interval = model["eval_interval"]
    values = []
    for state, test_seqs in zip(model["clients"], test_sets):
        if not test_seqs:
            values.append(float("nan"))
            continue
        value = cl.test_loglik(state, test_seqs, interval)
        values.append(value)
        print(f"client {state.id}: test loglik {value!r}")
    finite = [v for v in values if np.isfinite(v)]
    mean = float(np.mean(finite)) if finite else float("nan")
    print(f"mean test loglik {mean!r}")
    return 0


def cmd_aggregate(args) -> int:
    records = read_param_records(args.input)
    kwargs = {}
    if args.method == "mmd":
        kwargs = {"mmd_delta": args.mmd_delta, "mmd_steps": 500, "mmd_eta": 1e-2}
    method = AggregationMethod(args.method, **kwargs)
    result = aggregate(method, records)
    write_param_records([result], args.out)
    print(f"aggregated {len(records)} records with {args.method}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcox",
        description="Federated sigmoidal Cox process training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write synthetic client data")
    p_gen.add_argument("--config", type=str, default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", type=str, required=True)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run federated training")
    p_train.add_argument("--config", type=str, default=None)
    p_train.add_argument("--data", type=str, required=True)
    p_train.add_argument("--metrics", type=str, required=True)
    p_train.add_argument("--model", type=str, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--aggregation", choices=AGGREGATION_KINDS, default=None)
    p_train.add_argument("--rounds", type=int, default=None)
    p_train.add_argument("--clients", type=int, default=None)
    p_train.add_argument("--participants", type=int, default=None)
    p_train.add_argument("--local-epochs", dest="local_epochs", type=int,
                         default=None)
    p_train.add_argument("--straggle-period", dest="straggle_period", type=int,
                         default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved model")
    p_eval.add_argument("--model", type=str, required=True)
    p_eval.add_argument("--data", type=str, required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_agg = sub.add_parser("aggregate", help="aggregate a parameter-record file")
    p_agg.add_argument("--method", choices=AGGREGATION_KINDS, required=True)
    p_agg.add_argument("--in", dest="input", type=str, required=True)
    p_agg.add_argument("--out", type=str, required=True)
    p_agg.add_argument("--mmd-delta", dest="mmd_delta", type=float, default=1.0)
    p_agg.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
