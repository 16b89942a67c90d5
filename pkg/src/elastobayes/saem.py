"""Stochastic-approximation EM around the Gibbs sampler.

Each iteration runs N Gibbs sweeps, averages the per-element constitutive
residuals into sufficient statistics, blends them with Robbins-Monro weights
gamma_j = j**(-p), and maximizes the blended objective one log-discrepancy
component at a time (coordinate ascent on a strictly concave 1D function, so a
full scan never decreases the objective). The loop stops when the relative
increase of the blended objective drops below epsilon, after which a final
sample batch is drawn at the learned Lambda for posterior summaries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import fem
from .fem import Mesh
from .priors import GmrfSpec
from .samplers import (RESIDUAL_FLOOR, GibbsSampler, LatentState,
                       sample_noise_precision)

logger = logging.getLogger(__name__)

N_SIGMA = 3
Z_MIN = math.log(1e-12)
Z_MAX = math.log(1e12)


@dataclass
class DiscrepancyParams:
    """Per-element log model-error variances z_e = log(lambda_e^2)."""

    z: np.ndarray

    @property
    def lambda2(self) -> np.ndarray:
        return np.exp(self.z)

    @classmethod
    def from_lambda2(cls, lam2) -> "DiscrepancyParams":
        lam2 = np.asarray(lam2, dtype=float)
        if np.any(lam2 <= 0.0):
            raise ValueError("lambda^2 must be positive")
        return cls(z=np.log(lam2))


def saem_weight(j: int, p: float) -> float:
    """Robbins-Monro weight gamma_j = j**(-p) with 1/2 < p <= 1."""
    if not 0.5 < p <= 1.0:
        raise ValueError(f"SAEM exponent must satisfy 1/2 < p <= 1, got {p}")
    if j < 1:
        raise ValueError(f"iteration index must be >= 1, got {j}")
    return float(j) ** (-p)


def saem_blend(phi_tilde_prev: np.ndarray | None, phi_new: np.ndarray,
               j: int, p: float) -> np.ndarray:
    """Blend phi_tilde = (1 - gamma_j) phi_tilde_prev + gamma_j phi_new.

    At j = 1 the weight is 1 so any previous value is discarded.
    """
    gamma = saem_weight(j, p)
    phi_new = np.asarray(phi_new, dtype=float)
    if phi_tilde_prev is None:
        if j != 1:
            raise ValueError("missing previous statistic after the first iteration")
        return phi_new.copy()
    return (1.0 - gamma) * np.asarray(phi_tilde_prev, dtype=float) + gamma * phi_new


@dataclass
class SufficientStats:
    """Blended constitutive-residual statistics with their iteration counter."""

    phi_tilde: np.ndarray | None = None
    iteration: int = 0
    p: float = 0.51

    def update(self, phi_new: np.ndarray) -> np.ndarray:
        self.iteration += 1
        self.phi_tilde = saem_blend(self.phi_tilde, phi_new, self.iteration, self.p)
        return self.phi_tilde


def constitutive_residual(state: LatentState, sampler: GibbsSampler) -> np.ndarray:
    """Per-element squared constitutive gap ||sigma_e - E_e Dhat_e eps_e||^2."""
    gap = state.sigma - sampler.model_stress(state.u, state.E)
    return (gap.reshape(-1, 3) ** 2).sum(axis=1)


# ---------------------------------------------------------------------------
# Incremental M-step
# ---------------------------------------------------------------------------

def _mstep_dg(x, phi, w_ee, s, n_sigma):
    return -0.5 * n_sigma + 0.5 * phi * np.exp(-x) - w_ee * x - s


def m_step_component(e: int, z: np.ndarray, phi_tilde: np.ndarray, gmrf: GmrfSpec,
                     n_sigma: int = N_SIGMA, z_min: float = Z_MIN,
                     z_max: float = Z_MAX, tol: float = 1e-10) -> float:
    """Maximize the blended objective over the single component z_e.

    The objective restricted to z_e is g(z) = -(n_sigma/2) z
    - phi_tilde_e exp(-z) / 2 - (GMRF quadratic) / 2, strictly concave, solved
    by safeguarded Newton on g' to |g'| <= tol and clamped into [z_min, z_max].
    """
    w = gmrf.precision
    w_ee = w[e, e]
    s = float(w[e] @ z) - w_ee * z[e]
    phi = float(phi_tilde[e])
    if phi < 0.0:
        raise ValueError(f"phi_tilde[{e}] must be nonnegative, got {phi}")

    if phi == 0.0:
        if w_ee <= 0.0:
            return z_min  # maximizer at -inf without data or prior curvature
        return float(np.clip(-(0.5 * n_sigma + s) / w_ee, z_min, z_max))

    # Bracket the root of the decreasing g'; g'(-inf) = +inf, g'(+inf) = -inf.
    lo, hi = z_min, z_max
    if _mstep_dg(lo, phi, w_ee, s, n_sigma) <= 0.0:
        return lo
    if _mstep_dg(hi, phi, w_ee, s, n_sigma) >= 0.0:
        return hi
    x = float(np.clip(z[e], lo, hi))
    for _ in range(200):
        g1 = _mstep_dg(x, phi, w_ee, s, n_sigma)
        if abs(g1) <= tol:
            return x
        if g1 > 0.0:
            lo = x
        else:
            hi = x
        g2 = -0.5 * phi * np.exp(-x) - w_ee
        step = x - g1 / g2
        x = step if lo < step < hi else 0.5 * (lo + hi)
    return x


def m_step_scan(z: np.ndarray, phi_tilde: np.ndarray, gmrf: GmrfSpec,
                n_sigma: int = N_SIGMA, z_min: float = Z_MIN,
                z_max: float = Z_MAX) -> np.ndarray:
    """One incremental scan over all components (coordinate ascent, in order)."""
    z = np.asarray(z, dtype=float).copy()
    for e in range(z.size):
        z[e] = m_step_component(e, z, phi_tilde, gmrf, n_sigma, z_min, z_max)
    return z


def q_objective(z: np.ndarray, phi_tilde: np.ndarray, gmrf: GmrfSpec,
                n_sigma: int = N_SIGMA) -> float:
    """Blended EM objective (up to Lambda-independent constants)."""
    data_term = np.sum(-0.5 * n_sigma * z - 0.5 * phi_tilde * np.exp(-z))
    return float(data_term - 0.5 * (z @ gmrf.precision @ z))


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------

@dataclass
class EmConfig:
    n_mcmc: int = 10               # Gibbs sweeps per EM iteration
    p: float = 0.51                # Robbins-Monro exponent
    epsilon: float = 1e-3          # relative-increase stopping threshold
    max_iterations: int = 500
    final_samples: int = 400       # posterior sample batch at the learned Lambda
    sample_burn_in: int = 100      # sweeps discarded before collecting the batch
    gibbs_mode: str = "full"
    z_min: float = Z_MIN
    z_max: float = Z_MAX
    init_lambda_scale: float = 1e-2
    warmup_iterations: int = 50    # cap on the Lambda fixed-point initialization
    fit_regularization: float = 1e-6

    def __post_init__(self):
        saem_weight(1, self.p)  # validates p
        if self.n_mcmc < 1 or self.max_iterations < 1:
            raise ValueError("n_mcmc and max_iterations must be >= 1")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


@dataclass
class SampleStore:
    """Posterior samples collected at the learned Lambda."""

    E: np.ndarray        # (S, n_el)
    u_full: np.ndarray   # (S, n_dofs), Dirichlet values embedded
    sigma: np.ndarray    # (S, 3 * n_el)
    nu2: np.ndarray      # (S,)


@dataclass
class EmTrace:
    q_tilde: list = field(default_factory=list)
    rel_increase: list = field(default_factory=list)
    lambda2_history: list = field(default_factory=list)
    max_violation: float = 0.0
    n_iterations: int = 0
    converged: bool = False


@dataclass
class EmResult:
    lambda2: np.ndarray
    z: np.ndarray
    trace: EmTrace
    samples: SampleStore | None
    state: LatentState
    mesh: Mesh


def initial_state(sampler: GibbsSampler, cfg: EmConfig,
                  rng: np.random.Generator) -> tuple[LatentState, np.ndarray]:
    """Cold start: E = 1, u from a lightly prior-regularized fit of the
    observations, lambda^2 from the background stress scale, nu2 from its
    conditional at u0, and sigma at the constrained conditional mean."""
    mesh = sampler.mesh
    n_free = mesh.n_free
    a = np.diag(sampler.qtq) + cfg.fit_regularization * (
        sampler.u_prior + np.eye(n_free))
    u0 = cho_solve(cho_factor(a), sampler.qt_uq)

    moduli = np.ones(mesh.n_el)
    eps = (sampler.strain_free @ u0 + sampler.strain_offset).reshape(-1, 3)
    t_norm = np.linalg.norm(eps @ sampler.base.dhat.T, axis=1)
    scale = float(np.mean(t_norm))
    lam2_0 = max(cfg.init_lambda_scale * scale**2, 1e-12)
    z0 = np.full(mesh.n_el, np.clip(np.log(lam2_0), cfg.z_min, cfg.z_max))

    state = LatentState(nu2=1.0, u=u0, sigma=np.zeros(3 * mesh.n_el), E=moduli)
    state.nu2 = sample_noise_precision(state.u, sampler.obs, sampler.noise_prior,
                                       rng, residual_floor=RESIDUAL_FLOOR)
    state.sigma = sampler.stress_mean(state, np.exp(z0))
    return state, z0


def _stabilize_z(sampler: GibbsSampler, state: LatentState, z: np.ndarray,
                 cfg: EmConfig) -> np.ndarray:
    """Fixed-point initialization of the log-discrepancies at the mean state.

    Iterates z_e <- log(residual_e(sigma_mean(z)) / n_sigma) with u and E held
    fixed. The constrained mean strips the lambda-driven MC inflation out of
    the residual, so Lambda starts at its systematic-mismatch floor, localized
    at the genuinely inconsistent elements. Without this, a spatially uniform
    start smears the equilibrium correction over every element and the chain
    spends dozens of iterations decaying self-generated noise, during which the
    global (sigma, E) scale that pure Dirichlet data leaves unidentified drifts.
    """
    mean_state = state.copy()
    for _ in range(cfg.warmup_iterations):
        mean_state.sigma = sampler.stress_mean(state, np.exp(z))
        resid = constitutive_residual(mean_state, sampler)
        z_new = np.clip(np.log(np.maximum(resid / N_SIGMA, 1e-300)),
                        cfg.z_min, cfg.z_max)
        done = np.max(np.abs(z_new - z)) <= 1e-3
        z = z_new
        if done:
            break
    return z


def run_em(sampler: GibbsSampler, gmrf: GmrfSpec, cfg: EmConfig,
           rng: np.random.Generator, state: LatentState | None = None,
           z: np.ndarray | None = None, collect_samples: bool = True) -> EmResult:
    """MCMC-within-EM loop learning the per-element discrepancy variances.

    Raises RuntimeError with the trace attached if the objective goes
    non-finite. ``trace.converged`` is False when the iteration cap was hit.
    """
    mesh = sampler.mesh
    if gmrf.n_sites != mesh.n_el:
        raise ValueError("Lambda-prior GMRF sites must match the element count")
    if state is None or z is None:
        state, z = initial_state(sampler, cfg, rng)
        z = _stabilize_z(sampler, state, z, cfg)
        state.sigma = sampler.stress_mean(state, np.exp(z))
    else:
        state, z = state.copy(), np.asarray(z, dtype=float).copy()

    trace = EmTrace()
    stats = SufficientStats(p=cfg.p)
    q_prev = None
    for _ in range(cfg.max_iterations):
        lam2 = np.exp(z)
        phi_acc = np.zeros(mesh.n_el)
        for _ in range(cfg.n_mcmc):
            state = sampler.sweep(state, lam2, rng, mode=cfg.gibbs_mode)
            phi_acc += constitutive_residual(state, sampler)
            trace.max_violation = max(trace.max_violation,
                                      sampler.constraint_violation(state.sigma))
        phi_tilde = stats.update(phi_acc / cfg.n_mcmc)
        z = m_step_scan(z, phi_tilde, gmrf, z_min=cfg.z_min, z_max=cfg.z_max)
        q_now = q_objective(z, phi_tilde, gmrf)
        if not np.isfinite(q_now):
            err = RuntimeError(f"EM objective became non-finite at iteration "
                               f"{trace.n_iterations + 1}")
            err.trace = trace
            raise err

        trace.n_iterations += 1
        trace.q_tilde.append(q_now)
        trace.lambda2_history.append(np.exp(z))
        if q_prev is None:
            rel = np.inf
        else:
            rel = abs(q_now - q_prev) / max(abs(q_prev), 1e-300)
        trace.rel_increase.append(rel)
        q_prev = q_now
        if rel <= cfg.epsilon:
            trace.converged = True
            break
    logger.info("EM finished after %d iterations (converged=%s) on %dx%d",
                trace.n_iterations, trace.converged, mesh.nx, mesh.ny)

    samples = None
    if collect_samples:
        lam2 = np.exp(z)
        for _ in range(cfg.sample_burn_in):
            state = sampler.sweep(state, lam2, rng, mode=cfg.gibbs_mode)
        s_e = np.empty((cfg.final_samples, mesh.n_el))
        s_u = np.empty((cfg.final_samples, mesh.n_dofs))
        s_sig = np.empty((cfg.final_samples, 3 * mesh.n_el))
        s_nu = np.empty(cfg.final_samples)
        for k in range(cfg.final_samples):
            state = sampler.sweep(state, lam2, rng, mode=cfg.gibbs_mode)
            trace.max_violation = max(trace.max_violation,
                                      sampler.constraint_violation(state.sigma))
            s_e[k] = state.E
            s_u[k] = fem.embed_displacement(mesh, sampler.bc, state.u)
            s_sig[k] = state.sigma
            s_nu[k] = state.nu2
        samples = SampleStore(E=s_e, u_full=s_u, sigma=s_sig, nu2=s_nu)

    return EmResult(lambda2=np.exp(z), z=z, trace=trace, samples=samples,
                    state=state, mesh=mesh)


# ---------------------------------------------------------------------------
# Coarse-to-fine cascade
# ---------------------------------------------------------------------------

@dataclass
class CascadeResult:
    results: list

    @property
    def final(self) -> EmResult:
        return self.results[-1]


def transfer_state(coarse: EmResult, coarse_sampler: GibbsSampler,
                   fine_sampler: GibbsSampler, rng: np.random.Generator,
                   cfg: EmConfig | None = None) -> tuple[LatentState, np.ndarray]:
    """Warm start for the next refinement level.

    lambda^2 and E transfer by centroid containment, u by nodal interpolation;
    sigma restarts at the constrained conditional mean of the transferred state.
    """
    cmesh, fmesh = coarse.mesh, fine_sampler.mesh
    owner = fem.containing_element(cmesh, fmesh.centroids)
    z = coarse.z[owner].copy()
    moduli = coarse.state.E[owner].copy()

    u_coarse_full = fem.embed_displacement(cmesh, coarse_sampler.bc, coarse.state.u)
    u_nodal = fem.interpolate_displacement(cmesh, u_coarse_full, fmesh.node_coords)
    u_free = u_nodal.ravel()[fmesh.free_dofs]

    state = LatentState(nu2=coarse.state.nu2, u=u_free,
                        sigma=np.zeros(3 * fmesh.n_el), E=moduli)
    state.sigma = fine_sampler.stress_mean(state, np.exp(z))
    return state, z


def refine_cascade(samplers: list[GibbsSampler], gmrfs: list[GmrfSpec],
                   cfg: EmConfig, rng: np.random.Generator) -> CascadeResult:
    """Run the EM per level, warm-starting each level from the previous one.

    Posterior samples are collected at the final level only.
    """
    if len(samplers) != len(gmrfs) or not samplers:
        raise ValueError("need one GMRF per level sampler")
    results = []
    state, z = None, None
    for lvl, (sampler, gmrf) in enumerate(zip(samplers, gmrfs)):
        last = lvl == len(samplers) - 1
        result = run_em(sampler, gmrf, cfg, rng, state=state, z=z,
                        collect_samples=last)
        results.append(result)
        if not last:
            state, z = transfer_state(result, sampler, samplers[lvl + 1], rng, cfg)
    return CascadeResult(results=results)
