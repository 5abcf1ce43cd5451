"""Federated round protocol: broadcast, local updates, aggregate.

The server owns only the global prior over kernel parameters.  Each round
a fixed-size participant set is drawn (frozen for a configurable number
of consecutive rounds to simulate straggling), participants run their
local epochs against the broadcast prior, and the uploaded variational
records are aggregated.  The only payload a client ever uploads is its
kernel-parameter record plus scalar metrics; event data, the intensity
scale, the process mean and the inducing posterior never leave the
client (the payload type has no fields for them).
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import client as cl
from .aggregation import AggregationMethod, aggregate
from .kernel import EncoderSpec, init_kernel_params
from .numerics import DiagGaussian, trapezoid_grid

__all__ = [
    "FedConfig",
    "ServerState",
    "RoundMetrics",
    "ClientPayload",
    "RoundError",
    "init_server",
    "build_clients",
    "sample_participants",
    "run_round",
    "run_training",
]

log = logging.getLogger(__name__)

# Stream tags keep the participant-sampling and client-update random
# streams disjoint under one run seed.
_STREAM_PARTICIPANTS = 0x5A17
_STREAM_CLIENT = 0xC11E


class RoundError(RuntimeError):
    """A client failed during a round; the server state was not changed."""


@dataclass(frozen=True)
class FedConfig:
    """Run-level knobs for the federated protocol and the client models."""

    n_clients: int = 20
    participants_per_round: int = 10
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 4
    step_size: float = 1e-3
    straggle_period: int = 1
    aggregation: AggregationMethod = AggregationMethod("kl")
    seed: int = 0
    n_inducing: int = 50
    quad_nodes: int = 200
    n_w_samples: int = 4
    hidden_dim: int = 32
    embed_dim: int = 8
    eval_all: bool = False
    n_workers: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 1 <= self.participants_per_round <= self.n_clients:
            raise ValueError("participants_per_round must be in [1, n_clients]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.straggle_period < 1:
            raise ValueError("straggle_period must be >= 1")
        if self.n_inducing < 1 or self.quad_nodes < 2 or self.n_w_samples < 1:
            raise ValueError("model size parameters out of range")


@dataclass
class ServerState:
    theta: DiagGaussian
    round: int = 0


@dataclass(frozen=True)
class ClientPayload:
    """Everything a participant uploads.  Deliberately nothing else."""

    client_id: int
    phi: DiagGaussian
    elbo: float
    test_loglik: float


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    participant_ids: tuple
    mean_test_loglik: float
    per_client_loglik: tuple
    mean_elbo: float
    wall_time_ms: int


def encoder_spec(config: FedConfig, horizon: float) -> EncoderSpec:
    return EncoderSpec(
        hidden_dim=config.hidden_dim,
        output_dim=config.embed_dim,
        t_norm=horizon,
    )


def init_server(config: FedConfig, horizon: float) -> ServerState:
    """Prior mean from the deterministic kernel init, unit variances."""
    spec = encoder_spec(config, horizon)
    mu = init_kernel_params(spec, config.seed)
    return ServerState(theta=DiagGaussian(mu, np.ones(spec.n_params)))


def build_clients(config: FedConfig, train_sets, horizon: float,
                  train_window: float | None = None):
    """One client per training set, all sharing inducing grid and encoder.

    ``train_window`` bounds the observed part of the timeline (the
    quadrature grid and the likelihood integral); inducing locations span
    the full horizon so the model extrapolates to evaluation intervals.
    """
    if len(train_sets) != config.n_clients:
        raise ValueError(
            f"dataset has {len(train_sets)} clients, config says {config.n_clients}"
        )
    if train_window is None:
        train_window = horizon
    spec = encoder_spec(config, horizon)
    server = init_server(config, horizon)
    inducing = np.linspace(0.0, horizon, config.n_inducing + 2)[1:-1]
    grid = trapezoid_grid(train_window, config.quad_nodes)
    clients = [
        cl.init_client(
            cid, seqs, server.theta, spec, inducing, grid,
            n_w_samples=config.n_w_samples,
        )
        for cid, seqs in enumerate(train_sets)
    ]
    return server, clients


def sample_participants(round_index: int, config: FedConfig) -> tuple:
    """Uniform without-replacement participant set, frozen per straggle window.

    Drawn from a counter-based generator keyed by (seed, round div G), so
    every round inside one straggle window returns the identical set and
    the draw is reproducible across process restarts.
    """
    window = round_index // config.straggle_period
    key = np.random.SeedSequence(
        [config.seed & 0x7FFFFFFFFFFFFFFF, _STREAM_PARTICIPANTS, window]
    )
    rng = np.random.Generator(np.random.Philox(key))
    ids = rng.choice(config.n_clients, size=config.participants_per_round,
                     replace=False)
    return tuple(sorted(int(i) for i in ids))


def _update_one(state, theta, config, round_index, test_seqs, interval):
    """Run one participant on a copy of its state; return (state, payload)."""
    work = cl.clone_state(state)
    seed = cl.derive_seed(config.seed, _STREAM_CLIENT, state.id, round_index)
    phi = cl.client_update(
        work, theta, config.local_epochs, config.batch_size,
        config.step_size, seed,
    )
    elbo_value = cl.elbo(work, theta, config.n_w_samples,
                         cl.derive_seed(seed, 0xE1B0))
    loglik = (
        cl.test_loglik(work, test_seqs, interval) if test_seqs else float("nan")
    )
    payload = ClientPayload(
        client_id=state.id,
        phi=DiagGaussian(phi.mean.copy(), phi.var.copy()),
        elbo=elbo_value,
        test_loglik=loglik,
    )
    return work, payload


def run_round(server: ServerState, clients, config: FedConfig,
              test_sets=None, eval_interval=None):
    """One communication round; mutates server and participant states.

    Participants work on copies that are committed only after every one
    of them succeeds, so a failing client aborts the round with the
    server and all clients untouched.
    """
    participants = sample_participants(server.round, config)
    theta = server.theta
    jobs = {}

    def job(cid):
        test_seqs = test_sets[cid] if test_sets else None
        return _update_one(
            clients[cid], theta, config, server.round, test_seqs, eval_interval
        )

    t0 = time.perf_counter()
    try:
        if config.n_workers > 1:
            with ThreadPoolExecutor(max_workers=config.n_workers) as pool:
                futures = {cid: pool.submit(job, cid) for cid in participants}
                jobs = {cid: fut.result() for cid, fut in futures.items()}
        else:
            jobs = {cid: job(cid) for cid in participants}
    except Exception as exc:
        failed = next(
            (cid for cid in participants if cid not in jobs), participants[0]
        )
        raise RoundError(
            f"round {server.round} aborted: client {failed} failed: {exc}"
        ) from exc

    # Barrier: exactly this round's uploads feed the aggregation.
    payloads = [jobs[cid][1] for cid in participants]
    new_theta = aggregate(config.aggregation, [p.phi for p in payloads])
    for cid in participants:
        clients[cid] = jobs[cid][0]
    server.theta = new_theta
    elapsed_ms = int(round(1000.0 * (time.perf_counter() - t0)))

    logliks = tuple(p.test_loglik for p in payloads)
    pool_logliks = list(logliks)
    if config.eval_all and test_sets:
        # Full-population evaluation: non-participants are scored read-only
        # on their unchanged states.
        pool_logliks = [
            cl.test_loglik(clients[cid], test_sets[cid], eval_interval)
            if test_sets[cid] else float("nan")
            for cid in range(config.n_clients)
        ]
    finite = [x for x in pool_logliks if np.isfinite(x)]
    metrics = RoundMetrics(
        round=server.round,
        participant_ids=participants,
        mean_test_loglik=float(np.mean(finite)) if finite else float("nan"),
        per_client_loglik=logliks,
        mean_elbo=float(np.mean([p.elbo for p in payloads])),
        wall_time_ms=elapsed_ms,
    )
    server.round += 1
    return server, metrics


def run_training(config: FedConfig, train_sets, horizon: float,
                 test_sets=None, eval_interval=None, on_round=None,
                 train_window: float | None = None):
    """Full federated run: J rounds over freshly initialized clients.

    ``on_round`` (if given) receives each RoundMetrics as it is produced.
    Returns (metrics list, server, client states).
    """
    server, clients = build_clients(config, train_sets, horizon, train_window)
    if eval_interval is None:
        eval_interval = (0.0, horizon)
    history = []
    for j in range(config.rounds):
        try:
            server, metrics = run_round(
                server, clients, config, test_sets, eval_interval
            )
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(f"round {j} aborted: {exc}") from exc
        history.append(metrics)
        if on_round is not None:
            on_round(metrics)
        log.info(
            "round %d: mean test loglik %.4f, mean elbo %.4f",
            metrics.round, metrics.mean_test_loglik, metrics.mean_elbo,
        )
    return history, server, clients
