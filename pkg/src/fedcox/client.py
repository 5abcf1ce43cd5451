"""One federated client: a sigmoidal Cox process with a deep kernel.

The client keeps a variational distribution over its kernel parameters,
a sparse Gaussian-process posterior at fixed inducing locations, tilted
Polya-Gamma parameters at its events, and the rate of the auxiliary
thinned-out point process on a quadrature grid.  Coordinate updates for
the latter three blocks are closed form; the kernel-parameter block is
trained by reparameterized stochastic gradients against the broadcast
global prior.

All expectations over the kernel parameters use a common set of
reparameterized samples ``w = mean + std * eps`` drawn from a noise seed.
Passing the same sample set to the coordinate updates and to the bound
makes every update an exact coordinate-ascent step of the sampled bound,
which is what the monotonicity guarantees in the tests rely on.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit, roots_hermite

from . import kernel as dk
from .kernel import EncoderSpec, KernelParams
from .numerics import (
    DiagGaussian,
    QuadratureGrid,
    chol_factor_jittered,
    chol_logdet,
    kl_diag,
    log_2cosh,
    pg_mean,
    solve_with,
)

__all__ = [
    "InducingPosterior",
    "ClientState",
    "init_client",
    "derive_seed",
    "draw_w_samples",
    "posterior_f_moments",
    "update_pg",
    "update_latent_pp",
    "update_inducing",
    "update_scale",
    "augmented_elbo",
    "elbo",
    "local_objective",
    "local_objective_grad",
    "client_update",
    "intensity",
    "test_loglik",
]

log = logging.getLogger(__name__)

# Exponent clamp for the latent-process rate; hitting it is recorded in the
# client diagnostics.
_LOG_RATE_CLAMP = 60.0

GAUSS_HERMITE_ORDER = 20


@dataclass
class InducingPosterior:
    """Gaussian posterior over the process values at fixed inducing times."""

    locations: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        m = self.locations.size
        if np.any(np.diff(self.locations) <= 0):
            raise ValueError("inducing locations must be strictly increasing")
        if self.mean.shape != (m,) or self.cov.shape != (m, m):
            raise ValueError("inducing posterior shapes are inconsistent")


@dataclass
class ClientState:
    """Everything one client owns between communication rounds."""

    id: int
    train_seqs: list
    grid: QuadratureGrid
    spec: EncoderSpec
    m: float
    nu: float
    phi: DiagGaussian
    q_u: InducingPosterior
    pg: np.ndarray
    latent_rate: np.ndarray
    latent_c: np.ndarray
    n_w_samples: int = 4
    diagnostics: dict = field(default_factory=dict)
    events: np.ndarray = None
    seq_slices: list = None

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("scale m must be positive")
        if self.events is None:
            times, slices, start = [], [], 0
            for seq in self.train_seqs:
                times.append(seq.times)
                slices.append(slice(start, start + len(seq)))
                start += len(seq)
            self.events = (
                np.concatenate(times) if times else np.empty(0)
            )
            self.seq_slices = slices
        if self.pg.shape != self.events.shape:
            raise ValueError("pg must hold one value per training event")
        q = self.grid.size
        if self.latent_rate.shape != (q,) or self.latent_c.shape != (q,):
            raise ValueError("latent blocks must align with the grid")
        if np.any(self.latent_rate < 0) or not np.all(np.isfinite(self.latent_rate)):
            raise ValueError("latent_rate entries must be finite and >= 0")

    @property
    def n_seqs(self) -> int:
        return len(self.train_seqs)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of integers (order-sensitive)."""
    entropy = [int(p) & 0x7FFFFFFFFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def _draw_eps(dim: int, n_samples: int, noise_seed: int) -> np.ndarray:
    rng = np.random.default_rng(noise_seed)
    return rng.standard_normal((n_samples, dim))


def draw_w_samples(phi: DiagGaussian, n_samples: int, noise_seed: int) -> np.ndarray:
    """Reparameterized kernel-parameter samples, (n_samples, dim)."""
    eps = _draw_eps(phi.dim, n_samples, noise_seed)
    return phi.mean + phi.std() * eps


def _w_matrix(w, spec: EncoderSpec) -> np.ndarray:
    """Accept a packed vector, a sample matrix, or KernelParams."""
    if isinstance(w, KernelParams):
        w = w.packed
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2 or w.shape[1] != spec.n_params:
        raise ValueError(
            f"kernel parameters must have {spec.n_params} entries per sample"
        )
    return w


class _SampleCache:
    """Kernel blocks and posterior moments for one kernel-parameter sample."""

    __slots__ = (
        "params", "k_zz", "factor", "jitter", "logdet_kzz", "k_tz",
        "beta", "alpha", "mean", "var", "tape_z", "tape_t",
    )

    def __init__(self, state: ClientState, w_row: np.ndarray, times: np.ndarray,
                 with_tape: bool):
        spec = state.spec
        z = state.q_u.locations
        self.params = KernelParams(w_row, spec)
        if with_tape:
            self.tape_z = dk.embed_with_tape(z, self.params, spec)
            self.tape_t = dk.embed_with_tape(times, self.params, spec)
            h_z, h_t = self.tape_z.out, self.tape_t.out
        else:
            self.tape_z = self.tape_t = None
            h_z = dk.embed(z, self.params, spec)
            h_t = dk.embed(times, self.params, spec)
        ell2 = self.params.length_scale ** 2
        r = self.params.r
        dz = h_z[:, None, :] - h_z[None, :, :]
        self.k_zz = r * np.exp(-0.5 * np.sum(dz * dz, axis=-1) / ell2)
        dt = h_t[:, None, :] - h_z[None, :, :]
        self.k_tz = r * np.exp(-0.5 * np.sum(dt * dt, axis=-1) / ell2)
        self.factor, self.jitter = chol_factor_jittered(
            self.k_zz, f"client {state.id} inducing gram", baseline=True
        )
        self.logdet_kzz = chol_logdet(self.factor)
        # One batched triangular solve covers beta and alpha.
        rhs = np.concatenate(
            [self.k_tz.T, (state.q_u.mean - state.nu)[:, None]], axis=1
        )
        solved = solve_with(self.factor, rhs)
        self.beta = solved[:, :-1].T  # rows: Kzz^-1 k_t
        self.alpha = solved[:, -1]
        self.mean = state.nu + self.k_tz @ self.alpha
        explained = np.sum(self.k_tz * self.beta, axis=1)
        smoothed = np.sum((self.beta @ state.q_u.cov) * self.beta, axis=1)
        self.var = r - explained + smoothed


def _caches(state, w, times, with_tape=False):
    w_mat = _w_matrix(w, state.spec)
    return [
        _SampleCache(state, row, times, with_tape) for row in w_mat
    ]


def _mixture_moments(caches):
    """First and second moments of f averaged over the kernel samples."""
    means = np.stack([c.mean for c in caches])
    second = np.stack([c.var + c.mean**2 for c in caches])
    return means.mean(axis=0), second.mean(axis=0)


def posterior_f_moments(state: ClientState, w, times):
    """Posterior mean and variance of the process at ``times``.

    ``w`` may be a single packed vector or a sample matrix; with several
    samples the returned moments are those of the sample mixture.
    Variances are clamped to at least 1e-12.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    caches = _caches(state, w, times)
    ef, ef2 = _mixture_moments(caches)
    var = ef2 - ef**2
    if np.any(var < -1e-8):
        log.warning("posterior variance fell below -1e-8; clamping")
    return ef, np.maximum(var, 1e-12)


def update_pg(state: ClientState, w) -> np.ndarray:
    """Tilt the per-event Polya-Gamma parameters to sqrt(E[f^2])."""
    if state.events.size:
        caches = _caches(state, w, state.events)
        _, ef2 = _mixture_moments(caches)
        state.pg = np.sqrt(np.maximum(ef2, 0.0))
    return state.pg


def update_latent_pp(state: ClientState, w) -> np.ndarray:
    """Refresh the thinned-process rate and mark parameter on the grid.

    rate = m * exp(-E[f]/2) / (2 cosh(c/2)) with c = sqrt(E[f^2]); the
    exponent is clamped to +-60 and clamping is recorded in diagnostics.
    """
    caches = _caches(state, w, state.grid.nodes)
    ef, ef2 = _mixture_moments(caches)
    state.latent_c = np.sqrt(np.maximum(ef2, 0.0))
    log_rate = math.log(state.m) - 0.5 * ef - log_2cosh(0.5 * state.latent_c)
    clipped = np.abs(log_rate) > _LOG_RATE_CLAMP
    if np.any(clipped):
        state.diagnostics["log_rate_clamped"] = (
            state.diagnostics.get("log_rate_clamped", 0) + int(clipped.sum())
        )
        log_rate = np.clip(log_rate, -_LOG_RATE_CLAMP, _LOG_RATE_CLAMP)
    state.latent_rate = np.exp(log_rate)
    return state.latent_rate


def _ab_coefficients(state: ClientState):
    """Event weights and integrated grid weights of the A and B densities.

    Events enter as exact delta sums; the continuous parts carry the
    quadrature weights and the sequence count (one latent process per
    training sequence).  Event sums and grid integrals never mix.
    """
    a_ev = pg_mean(state.pg) if state.events.size else np.empty(0)
    b_ev = np.full(state.events.size, 0.5)
    lam_w = state.n_seqs * state.grid.weights * state.latent_rate
    a_gr = lam_w * pg_mean(state.latent_c)
    b_gr = -0.5 * lam_w
    return a_ev, b_ev, a_gr, b_gr


def update_inducing(state: ClientState, w) -> InducingPosterior:
    """Closed-form refresh of the sparse posterior at the inducing points.

    Natural parameters are averaged over the kernel samples: precision
    Kzz^-1 (Int A k k^T) Kzz^-1 + Kzz^-1 and linear term
    Kzz^-1 (Int B~ k + nu 1) with B~ = B - A (nu - k^T Kzz^-1 nu 1).
    """
    a_ev, b_ev, a_gr, b_gr = _ab_coefficients(state)
    a_all = np.concatenate([a_ev, a_gr])
    b_all = np.concatenate([b_ev, b_gr])
    times = np.concatenate([state.events, state.grid.nodes])
    m_ind = state.q_u.locations.size
    caches = _caches(state, w, times)
    precision = np.zeros((m_ind, m_ind))
    linear = np.zeros(m_ind)
    eye = np.eye(m_ind)
    ones = np.ones(m_ind)
    for c in caches:
        kzz_inv = solve_with(c.factor, eye)
        offset = state.nu * (1.0 - c.k_tz @ solve_with(c.factor, ones))
        b_tilde = b_all - a_all * offset
        precision += c.beta.T @ (a_all[:, None] * c.beta) + kzz_inv
        linear += c.beta.T @ b_tilde + state.nu * (kzz_inv @ ones)
    precision /= len(caches)
    linear /= len(caches)
    factor, _ = chol_factor_jittered(
        precision, f"client {state.id} inducing precision"
    )
    cov = solve_with(factor, eye)
    cov = 0.5 * (cov + cov.T)
    state.q_u = InducingPosterior(
        locations=state.q_u.locations, mean=solve_with(factor, linear), cov=cov
    )
    return state.q_u


def update_scale(state: ClientState) -> float:
    """Fixed-point refresh of the intensity upper bound m.

    Stationary point of the bound in m with the latent rate held fixed:
    (observed events + expected thinned events) per unit of observed time.
    """
    integral = float(state.grid.weights @ state.latent_rate)
    n_total = state.events.size
    state.m = (n_total + state.n_seqs * integral) / (
        state.n_seqs * state.grid.horizon
    )
    if state.m <= 0:
        state.m = 1.0 / state.grid.horizon
    return state.m


def _event_terms(state, ef, ef2, idx=None):
    """Per-event augmented-likelihood terms at the current tilting."""
    c = state.pg if idx is None else state.pg[idx]
    omega = pg_mean(c)
    return (
        math.log(state.m)
        + 0.5 * ef
        - 0.5 * omega * (ef2 - c * c)
        - log_2cosh(0.5 * c)
    )


def _grid_term(state, ef, ef2):
    """Integrated latent-process terms, counted once per sequence."""
    lam = state.latent_rate
    c = state.latent_c
    omega = pg_mean(c)
    integrand = np.zeros_like(lam)
    pos = lam > 0.0
    integrand[pos] = lam[pos] * (
        math.log(state.m)
        - 0.5 * ef[pos]
        - 0.5 * omega[pos] * (ef2[pos] - c[pos] * c[pos])
        - log_2cosh(0.5 * c[pos])
        - np.log(lam[pos])
        + 1.0
    )
    return state.n_seqs * (
        float(state.grid.weights @ integrand) - state.m * state.grid.horizon
    )


def _kl_inducing(state, caches) -> float:
    """KL(q(u) || p(u | w)) averaged over the kernel samples."""
    m_ind = state.q_u.locations.size
    cov_factor, _ = chol_factor_jittered(
        state.q_u.cov, f"client {state.id} inducing covariance"
    )
    logdet_cov = chol_logdet(cov_factor)
    a = state.q_u.mean - state.nu
    total = 0.0
    for c in caches:
        total += 0.5 * (
            c.logdet_kzz
            - logdet_cov
            + float(np.trace(solve_with(c.factor, state.q_u.cov)))
            + float(a @ solve_with(c.factor, a))
            - m_ind
        )
    return total / len(caches)


def _batch_event_idx(state, batch):
    idx = np.concatenate(
        [np.arange(s.start, s.stop) for s in (state.seq_slices[i] for i in batch)]
    ) if len(batch) else np.empty(0, dtype=int)
    return idx


def augmented_elbo(state: ClientState, w) -> float:
    """Bound terms that depend on the augmented model, for given w samples.

    Expected augmented log-likelihood minus KL(q(u) || p(u|w)), averaged
    over the rows of ``w``.  Excludes the kernel-parameter divergence.
    """
    times = np.concatenate([state.events, state.grid.nodes])
    caches = _caches(state, w, times)
    ef, ef2 = _mixture_moments(caches)
    n_ev = state.events.size
    value = float(np.sum(_event_terms(state, ef[:n_ev], ef2[:n_ev])))
    value += _grid_term(state, ef[n_ev:], ef2[n_ev:])
    value -= _kl_inducing(state, caches)
    if not np.isfinite(value):
        raise FloatingPointError("augmented bound is not finite")
    return value


def elbo(state: ClientState, theta: DiagGaussian, n_w_samples: int,
         noise_seed: int) -> float:
    """Evidence lower bound with the kernel-parameter divergence included.

    Deterministic given ``noise_seed``; the kernel-parameter expectation
    uses ``n_w_samples`` reparameterized draws from the client's phi.
    """
    w = draw_w_samples(state.phi, n_w_samples, noise_seed)
    return augmented_elbo(state, w) - kl_diag(state.phi, theta)


def local_objective(state: ClientState, theta: DiagGaussian, batch=None,
                    n_w_samples: int = 1, noise_seed: int = 0) -> float:
    """Negative sampled bound, with event terms rescaled to a mini-batch.

    ``batch`` is a list of training-sequence indices; its event terms are
    scaled by n_seqs / |batch| so the estimator stays unbiased, while the
    integral, inducing-KL and prior-divergence terms keep full weight.
    """
    if batch is None:
        batch = np.arange(state.n_seqs)
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    scale = state.n_seqs / batch.size
    idx = _batch_event_idx(state, batch)
    times = np.concatenate([state.events[idx], state.grid.nodes])
    w = draw_w_samples(state.phi, n_w_samples, noise_seed)
    caches = _caches(state, w, times)
    ef, ef2 = _mixture_moments(caches)
    n_ev = idx.size
    value = scale * float(np.sum(_event_terms(state, ef[:n_ev], ef2[:n_ev], idx)))
    value += _grid_term(state, ef[n_ev:], ef2[n_ev:])
    value -= _kl_inducing(state, caches)
    value -= kl_diag(state.phi, theta)
    if not np.isfinite(value):
        raise FloatingPointError("local objective is not finite")
    return -value


def local_objective_grad(state: ClientState, theta: DiagGaussian, batch=None,
                         n_w_samples: int = 1, noise_seed: int = 0):
    """Gradient of :func:`local_objective` w.r.t. (mean, log variance).

    Uses the same reparameterized samples as the objective (common random
    numbers), so it matches finite differences of the sampled objective.
    Returns ``(grad_mean, grad_log_var)``.
    """
    if batch is None:
        batch = np.arange(state.n_seqs)
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    scale = state.n_seqs / batch.size
    idx = _batch_event_idx(state, batch)
    times = np.concatenate([state.events[idx], state.grid.nodes])

    eps = _draw_eps(state.phi.dim, n_w_samples, noise_seed)
    std = state.phi.std()
    w = state.phi.mean + std * eps
    caches = _caches(state, w, times, with_tape=True)

    # Linear coefficients of E[f] (a) and -E[f^2]/2 (b) per evaluation time.
    pg_ev = pg_mean(state.pg[idx]) if idx.size else np.empty(0)
    lam_w = state.n_seqs * state.grid.weights * state.latent_rate
    a_t = np.concatenate([np.full(idx.size, 0.5 * scale), -0.5 * lam_w])
    b_t = np.concatenate([scale * pg_ev, lam_w * pg_mean(state.latent_c)])

    sigma_u = state.q_u.cov
    ones = np.ones(state.q_u.locations.size)
    grad_w = np.zeros((len(caches), state.phi.dim))
    for s, c in enumerate(caches):
        beta = c.beta
        gamma = solve_with(c.factor, (beta @ sigma_u).T).T
        u_t = a_t - b_t * c.mean
        d_k_tz = u_t[:, None] * c.alpha[None, :] + b_t[:, None] * (beta - gamma)
        coeff_tt = -0.5 * float(np.sum(b_t))
        kzz_inv = solve_with(c.factor, np.eye(ones.size))
        m_k = (
            -0.5 * (beta.T @ (b_t[:, None] * beta))
            - 0.5 * kzz_inv
            + 0.5 * kzz_inv @ sigma_u @ kzz_inv
            + 0.5 * np.outer(c.alpha, c.alpha)
        )
        cross = np.outer(c.alpha, beta.T @ u_t)
        m_k -= 0.5 * (cross + cross.T)
        gb = (b_t[:, None] * gamma).T @ beta
        m_k += 0.5 * (gb + gb.T)
        grad_w[s] = dk.accumulate_param_grad(
            m_k, d_k_tz, coeff_tt, c.k_zz, c.k_tz, c.tape_z, c.tape_t,
            c.params, state.spec, k_zz_jitter=c.jitter,
        )
    g_mean = grad_w.mean(axis=0)
    g_logv = (grad_w * eps).mean(axis=0) * 0.5 * std
    # Kernel-parameter divergence (always KL for the client-side gradient).
    g_mean = g_mean - (state.phi.mean - theta.mean) / theta.var
    g_logv = g_logv - 0.5 * (state.phi.var / theta.var - 1.0)
    if not (np.all(np.isfinite(g_mean)) and np.all(np.isfinite(g_logv))):
        raise FloatingPointError("objective gradient is not finite")
    return -g_mean, -g_logv


def client_update(state: ClientState, theta: DiagGaussian, epochs: int,
                  batch_size: int, eta: float, seed: int) -> DiagGaussian:
    """Run the local epochs: coordinate sweep, then mini-batch phi steps.

    Each epoch draws one shared set of kernel samples for the sweep, then
    walks shuffled mini-batches of sequences with per-step fresh noise.
    The phi steps use Adam on (mean, log variance); raw gradients carry
    the event count's scale, which plain constant-step descent cannot
    survive on the log-variance coordinates.  Fully deterministic given
    ``seed``.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    dim = state.phi.dim
    adam_m = np.zeros(2 * dim)
    adam_v = np.zeros(2 * dim)
    adam_t = 0
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    for epoch in range(epochs):
        w = draw_w_samples(
            state.phi, state.n_w_samples, derive_seed(seed, epoch, 0)
        )
        update_pg(state, w)
        update_latent_pp(state, w)
        update_inducing(state, w)
        update_scale(state)
        order = np.random.default_rng(
            derive_seed(seed, epoch, 1)
        ).permutation(state.n_seqs)
        for step, start in enumerate(range(0, state.n_seqs, batch_size)):
            batch = order[start:start + batch_size]
            g_mean, g_logv = local_objective_grad(
                state, theta, batch, state.n_w_samples,
                derive_seed(seed, epoch, 2, step),
            )
            if eta == 0.0:
                continue
            g = np.concatenate([g_mean, g_logv])
            adam_t += 1
            adam_m = beta1 * adam_m + (1.0 - beta1) * g
            adam_v = beta2 * adam_v + (1.0 - beta2) * g * g
            m_hat = adam_m / (1.0 - beta1**adam_t)
            v_hat = adam_v / (1.0 - beta2**adam_t)
            delta = eta * m_hat / (np.sqrt(v_hat) + adam_eps)
            new_mean = state.phi.mean - delta[:dim]
            new_logv = np.log(state.phi.var) - delta[dim:]
            state.phi = DiagGaussian(new_mean, np.exp(new_logv))
    return state.phi


@lru_cache(maxsize=4)
def _gh_nodes(order: int):
    x, w = roots_hermite(order)
    return x, w / math.sqrt(math.pi)


def _expected_sigmoid(mean, var, order=GAUSS_HERMITE_ORDER):
    x, w = _gh_nodes(order)
    f = mean[:, None] + np.sqrt(2.0 * var)[:, None] * x[None, :]
    return expit(f) @ w


def intensity(state: ClientState, times, w=None) -> np.ndarray:
    """Posterior predictive intensity m E[sigmoid(f(t))] at ``times``.

    The expectation over f uses 20-node Gauss-Hermite quadrature on the
    Gaussian marginal; ``w`` defaults to the variational mean.
    """
    if w is None:
        w = state.phi.mean
    mean, var = posterior_f_moments(state, w, times)
    return state.m * _expected_sigmoid(mean, var)


def test_loglik(state: ClientState, test_seqs, interval, n_quad: int = 200) -> float:
    """Average held-out log-likelihood over sequences on ``interval``.

    Per sequence: sum of log intensity at its events minus the integrated
    intensity over [t_a, t_b] (trapezoid with ``n_quad`` nodes), with the
    kernel parameters fixed at the variational mean.
    """
    t_a, t_b = float(interval[0]), float(interval[1])
    if not t_a < t_b:
        raise ValueError("interval must satisfy t_a < t_b")
    if not test_seqs:
        raise ValueError("no test sequences supplied")
    grid = np.linspace(t_a, t_b, n_quad)
    lam_grid = intensity(state, grid)
    integral = float(np.trapezoid(lam_grid, grid))
    total = 0.0
    for seq in test_seqs:
        if seq.times.size and (
            seq.times[0] < t_a or seq.times[-1] > t_b
        ):
            raise ValueError("test event outside the evaluation interval")
        if seq.times.size:
            lam_ev = intensity(state, seq.times)
            total += float(np.sum(np.log(np.maximum(lam_ev, 1e-300))))
        total -= integral
    return total / len(test_seqs)


def init_client(client_id: int, train_seqs, theta: DiagGaussian,
                spec: EncoderSpec, inducing_locations, grid: QuadratureGrid,
                n_w_samples: int = 4, nu: float = 0.0) -> ClientState:
    """Fresh client state: phi broadcast from theta, q(u) at the prior.

    The initial scale is twice the empirical event rate; the latent rate
    starts at the corresponding zero-function value m/2.
    """
    n_events = sum(len(s) for s in train_seqs)
    rate = n_events / (max(len(train_seqs), 1) * grid.horizon)
    m0 = 2.0 * rate if rate > 0 else 1.0 / grid.horizon
    z = np.asarray(inducing_locations, dtype=np.float64)
    k_zz = dk.kernel_matrix(z, z, theta.mean, spec)
    state = ClientState(
        id=client_id,
        train_seqs=list(train_seqs),
        grid=grid,
        spec=spec,
        m=m0,
        nu=nu,
        phi=DiagGaussian(theta.mean.copy(), theta.var.copy()),
        q_u=InducingPosterior(
            locations=z, mean=np.full(z.size, nu), cov=k_zz
        ),
        pg=np.ones(n_events),
        latent_rate=np.full(grid.size, 0.5 * m0),
        latent_c=np.zeros(grid.size),
        n_w_samples=n_w_samples,
    )
    return state


def clone_state(state: ClientState) -> ClientState:
    """Deep copy for speculative updates (commit-at-barrier semantics)."""
    return copy.deepcopy(state)
