"""Exact Gibbs conditionals for the augmented elasticity posterior.

The latent state is theta = (nu2, u, sigma, {E_e}); all four blocks have
closed-form conditionals. Stresses live on the affine manifold
``Bhat.T @ sigma = f`` and are sampled by projecting an unconstrained Gaussian
onto it, so every stress draw satisfies equilibrium by construction. Block
variants update one scalar displacement DOF (or the null-space directions
assigned to one element, for stresses) at a time, trading mixing for a per-sweep
cost linear in the state dimension times the stress dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, null_space, solve_triangular

from .fem import BoundaryData, ConstitutiveBase, Mesh, strain_operators
from .priors import NoiseHyperprior

ZERO_STRAIN_TOL = 1e-30
RESIDUAL_FLOOR = 1e-30


class DegeneratePosteriorError(RuntimeError):
    """Zero Gamma rate: no noise information and a flat hyperprior."""


class DegenerateConditionalError(RuntimeError):
    """A scalar displacement conditional has zero precision."""


class SingularConditionalError(RuntimeError):
    """Modulus conditional undefined because the element strain vanishes."""


class FactorizationError(RuntimeError):
    """A conditional precision matrix is not positive definite."""


class ConstraintDegeneracyError(RuntimeError):
    """Bhat' Lambda Bhat is singular; the equilibrium constraint is degenerate."""


@dataclass
class ObservationSet:
    """Observed displacements and their free-DOF slots.

    ``dofs[k]`` is the free-DOF index observed by ``values[k]``; the default
    full-observation setup uses ``dofs = arange(n_free)``.
    """

    values: np.ndarray
    dofs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.dofs = np.asarray(self.dofs, dtype=int)
        if self.values.shape != self.dofs.shape or self.values.ndim != 1:
            raise ValueError("values and dofs must be 1D arrays of equal length")
        if self.n_q < 1:
            raise ValueError("at least one observation is required")

    @property
    def n_q(self) -> int:
        return self.values.size


@dataclass
class LatentState:
    """Current values of all sampled blocks (u holds free DOFs only)."""

    nu2: float
    u: np.ndarray
    sigma: np.ndarray
    E: np.ndarray

    def copy(self) -> "LatentState":
        return LatentState(self.nu2, self.u.copy(), self.sigma.copy(), self.E.copy())


def sample_noise_precision(u: np.ndarray, obs: ObservationSet,
                           prior: NoiseHyperprior, rng: np.random.Generator,
                           residual_floor: float = 0.0) -> float:
    """Draw nu^-2 ~ Gamma(alpha + n_q/2, beta + ||u_Q - Qu||^2 / 2); returns nu^2.

    ``residual_floor`` clamps the squared residual away from zero so a perfect
    fit under a flat hyperprior does not produce a zero rate.
    """
    resid = obs.values - u[obs.dofs]
    r2 = max(float(resid @ resid), residual_floor)
    rate = prior.beta + 0.5 * r2
    if rate <= 0.0:
        raise DegeneratePosteriorError("zero residual with beta=0; clamp the residual")
    shape = prior.alpha + 0.5 * obs.n_q
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def sample_modulus(sigma_e: np.ndarray, eps_e: np.ndarray, dhat_e: np.ndarray,
                   lam2_e: float, rng: np.random.Generator) -> float:
    """Draw E_e ~ N(eps' Dhat' sigma / ||Dhat eps||^2, lam2 / ||Dhat eps||^2)."""
    t = dhat_e @ eps_e
    den = float(t @ t)
    if den <= ZERO_STRAIN_TOL:
        raise SingularConditionalError("zero element strain; skip this modulus update")
    mu = float(t @ sigma_e) / den
    if lam2_e <= 0.0:
        return mu
    return mu + np.sqrt(lam2_e / den) * rng.standard_normal()


class GibbsSampler:
    """Gibbs machinery bound to one mesh / constitutive base / dataset.

    Immutable after construction apart from internal factorization caches; a
    chain is sequential, but independent chains can share one instance as long
    as each carries its own random generator (caches only depend on Lambda).
    """

    def __init__(self, mesh: Mesh, base: ConstitutiveBase, bc: BoundaryData,
                 obs: ObservationSet, noise_prior: NoiseHyperprior | None = None,
                 u_prior: np.ndarray | None = None):
        self.mesh = mesh
        self.base = base
        self.bc = bc
        self.obs = obs
        self.noise_prior = noise_prior if noise_prior is not None else NoiseHyperprior()

        n_free, n_el = mesh.n_free, mesh.n_el
        if obs.dofs.size and (obs.dofs.min() < 0 or obs.dofs.max() >= n_free):
            raise ValueError("observation DOF index out of range")
        if u_prior is None:
            self.u_prior = np.zeros((n_free, n_free))
        else:
            self.u_prior = np.asarray(u_prior, dtype=float)
            if self.u_prior.shape != (n_free, n_free):
                raise ValueError("u_prior must be (n_free, n_free)")

        s_free, s_presc = strain_operators(mesh)
        u_p = bc.prescribed_values(mesh)
        self.strain_free = s_free.tocsr()
        self.strain_offset = s_presc @ u_p
        dblk = sp.kron(sp.identity(n_el, format="csr"), sp.csr_matrix(base.dhat))
        self.chat = (dblk @ s_free).tocsr()
        self.chat0 = (self.strain_offset.reshape(-1, 3) @ base.dhat.T).ravel()
        self._chat_csc = self.chat.tocsc()
        self.bhat = mesh.bhat.tocsr()
        self._bhat_t = self.bhat.T.tocsr()
        self.f = np.asarray(bc.f, dtype=float)

        # Q' Q is diagonal (each observation maps to exactly one DOF).
        self.qtq = np.bincount(obs.dofs, minlength=n_free).astype(float)
        self.qt_uq = np.bincount(obs.dofs, weights=obs.values, minlength=n_free)

        self._stress_cache = None   # (lam2 copy, lamB csr, cho factor)
        self._null = None           # (N fortran, Lambda^-1 N template, visit order, dirs by elem)

    # -- strains and model stresses -----------------------------------------

    def element_strains(self, u: np.ndarray) -> np.ndarray:
        return (self.strain_free @ u + self.strain_offset).reshape(-1, 3)

    def model_stress(self, u: np.ndarray, moduli: np.ndarray) -> np.ndarray:
        """Constitutive prediction C u + c0, i.e. E_e Dhat_e eps_e stacked."""
        e_row = np.repeat(moduli, 3)
        return e_row * (self.chat @ u + self.chat0)

    def constraint_violation(self, sigma: np.ndarray) -> float:
        """Relative equilibrium residual ||Bhat' sigma - f|| / (1 + ||f||)."""
        return float(np.linalg.norm(self._bhat_t @ sigma - self.f)
                     / (1.0 + np.linalg.norm(self.f)))

    # -- displacement conditional --------------------------------------------

    def displacement_moments(self, state: LatentState, lam2: np.ndarray):
        """Mean and precision of u | rest: A = C' Lam^-1 C + Q'Q/nu2 + V."""
        e_row = np.repeat(state.E, 3)
        lam_row = np.repeat(lam2, 3)
        w = e_row**2 / lam_row
        a = (self.chat.T @ sp.diags(w) @ self.chat).toarray()
        a[np.diag_indices_from(a)] += self.qtq / state.nu2
        a += self.u_prior
        b = self.chat.T @ ((e_row / lam_row) * (state.sigma - e_row * self.chat0))
        b += self.qt_uq / state.nu2
        return b, a

    def sample_displacement_full(self, state: LatentState, lam2: np.ndarray,
                                 rng: np.random.Generator) -> np.ndarray:
        """One joint draw of u; a single Cholesky of the precision per call."""
        b, a = self.displacement_moments(state, lam2)
        try:
            chol = cho_factor(a, lower=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(
                f"displacement precision not positive definite: {exc}") from exc
        mu = cho_solve(chol, b)
        z = rng.standard_normal(mu.size)
        return mu + solve_triangular(chol[0], z, lower=True, trans="T")

    def _block_setup(self, state: LatentState, lam2: np.ndarray):
        e_row = np.repeat(state.E, 3)
        lam_row = np.repeat(lam2, 3)
        cdata = self._chat_csc.data * e_row[self._chat_csc.indices]
        m0 = e_row * (self.chat @ state.u + self.chat0)
        return e_row, 1.0 / lam_row, cdata, state.sigma - m0

    def _block_moments(self, i, u, r, vu, winv_row, cdata, nu2):
        a0, a1 = self._chat_csc.indptr[i], self._chat_csc.indptr[i + 1]
        rows = self._chat_csc.indices[a0:a1]
        cv = cdata[a0:a1]
        cw = cv * winv_row[rows]
        acc = cw @ cv
        prec = acc + self.qtq[i] / nu2 + self.u_prior[i, i]
        if prec <= 0.0:
            raise DegenerateConditionalError(
                f"DOF {i} is unobserved, unconstrained and strain-free")
        lin = (cw @ r[rows] + acc * u[i] + self.qt_uq[i] / nu2
               - (vu[i] - self.u_prior[i, i] * u[i]))
        return lin / prec, prec, rows, cv

    def sample_displacement_block(self, state: LatentState, i: int,
                                  lam2: np.ndarray, rng: np.random.Generator) -> float:
        """Draw u_i | u_{-i} and the rest; returns the new value of u_i."""
        _, winv_row, cdata, r = self._block_setup(state, lam2)
        vu = self.u_prior @ state.u
        mu, prec, _, _ = self._block_moments(i, state.u, r, vu, winv_row, cdata, state.nu2)
        return mu + rng.standard_normal() / np.sqrt(prec)

    def sweep_displacement_blocks(self, state: LatentState, lam2: np.ndarray,
                                  rng: np.random.Generator) -> np.ndarray:
        """One scalar-Gibbs pass over every free DOF in index order."""
        u = state.u.copy()
        _, winv_row, cdata, r = self._block_setup(state, lam2)
        vu = self.u_prior @ u
        z = rng.standard_normal(u.size)
        for i in range(u.size):
            mu, prec, rows, cv = self._block_moments(
                i, u, r, vu, winv_row, cdata, state.nu2)
            delta = mu + z[i] / np.sqrt(prec) - u[i]
            u[i] += delta
            r[rows] -= cv * delta
            vu += self.u_prior[:, i] * delta
        return u

    # -- stress conditional ----------------------------------------------------

    def _stress_factor(self, lam2: np.ndarray):
        cached = self._stress_cache
        if cached is not None and np.array_equal(cached[0], lam2):
            return cached[1], cached[2]
        lam_row = np.repeat(lam2, 3)
        lam_b = (sp.diags(lam_row) @ self.bhat).tocsr()
        m = (self._bhat_t @ lam_b).toarray()
        m = 0.5 * (m + m.T)
        try:
            chol = cho_factor(m, lower=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ConstraintDegeneracyError(
                f"Bhat' Lambda Bhat is singular: {exc}") from exc
        self._stress_cache = (lam2.copy(), lam_b, chol)
        return lam_b, chol

    def stress_mean(self, state: LatentState, lam2: np.ndarray) -> np.ndarray:
        """Constrained conditional mean mu_sigma = m0 + Lam Bhat M^-1 (f - Bhat' m0)."""
        lam_b, chol = self._stress_factor(lam2)
        m0 = self.model_stress(state.u, state.E)
        return m0 + lam_b @ cho_solve(chol, self.f - self._bhat_t @ m0)

    def stress_covariance(self, lam2: np.ndarray) -> np.ndarray:
        """Dense conditional covariance Lambda - Lam Bhat M^-1 Bhat' Lam (test-sized)."""
        lam_b, chol = self._stress_factor(lam2)
        lam_bd = lam_b.toarray()
        cov = np.diag(np.repeat(lam2, 3)) - lam_bd @ cho_solve(chol, lam_bd.T)
        return cov

    def sample_stress(self, state: LatentState, lam2: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
        """Joint draw of sigma on the equilibrium manifold."""
        lam_b, chol = self._stress_factor(lam2)
        mu = self.stress_mean(state, lam2)
        xi = np.sqrt(np.repeat(lam2, 3)) * rng.standard_normal(mu.size)
        return mu + xi - lam_b @ cho_solve(chol, self._bhat_t @ xi)

    def _null_directions(self):
        if self._null is None:
            basis = null_space(self.bhat.toarray().T)
            n_el = self.mesh.n_el
            if basis.shape[1]:
                support = (basis.reshape(n_el, 3, -1) ** 2).sum(axis=1)
                owner = np.argmax(support, axis=0)
            else:
                owner = np.zeros(0, dtype=int)
            dirs_by_elem = [np.flatnonzero(owner == e) for e in range(n_el)]
            visit = np.concatenate(dirs_by_elem) if basis.shape[1] else np.zeros(0, int)
            self._null = (np.asfortranarray(basis), visit, dirs_by_elem)
        return self._null

    def _stress_direction_updates(self, sigma, m0, lam2, dirs, z):
        basis, _, _ = self._null_directions()
        iw = np.repeat(1.0 / lam2, 3)
        r = iw * (sigma - m0)
        a_cols = basis * iw[:, None]
        coef = np.einsum("ij,ij->j", basis, a_cols)
        for t, k in enumerate(dirs):
            delta = -(basis[:, k] @ r) / coef[k] + z[t] / np.sqrt(coef[k])
            sigma += basis[:, k] * delta
            r += a_cols[:, k] * delta
        return sigma

    def sample_stress_block(self, state: LatentState, e: int, lam2: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
        """Update the null-space directions assigned to element e; returns sigma.

        Each direction coefficient gets an exact scalar conditional draw along
        ``sigma + N_k * delta``, so the equilibrium constraint is preserved.
        """
        _, _, dirs_by_elem = self._null_directions()
        dirs = dirs_by_elem[e]
        m0 = self.model_stress(state.u, state.E)
        z = rng.standard_normal(dirs.size)
        return self._stress_direction_updates(state.sigma.copy(), m0, lam2, dirs, z)

    def sweep_stress_blocks(self, state: LatentState, lam2: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
        """One pass over all null-space directions grouped by owning element."""
        _, visit, _ = self._null_directions()
        m0 = self.model_stress(state.u, state.E)
        z = rng.standard_normal(visit.size)
        return self._stress_direction_updates(state.sigma.copy(), m0, lam2, visit, z)

    # -- moduli ---------------------------------------------------------------

    def sample_moduli(self, state: LatentState, lam2: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
        """Vectorized modulus draws; zero-strain elements keep their value."""
        eps = self.element_strains(state.u)
        t = eps @ self.base.dhat.T
        den = (t * t).sum(axis=1)
        num = (t * state.sigma.reshape(-1, 3)).sum(axis=1)
        ok = den > ZERO_STRAIN_TOL
        moduli = state.E.copy()
        mu = num[ok] / den[ok]
        sd = np.sqrt(lam2[ok] / den[ok])
        moduli[ok] = mu + sd * rng.standard_normal(mu.size)
        return moduli

    # -- one full Gibbs sweep ---------------------------------------------------

    def sweep(self, state: LatentState, lam2: np.ndarray, rng: np.random.Generator,
              mode: str = "full") -> LatentState:
        """Update nu2, u, sigma and all E_e once each, in that frozen order."""
        if mode not in ("full", "block"):
            raise ValueError(f"mode must be 'full' or 'block', got {mode!r}")
        nu2 = sample_noise_precision(state.u, self.obs, self.noise_prior, rng,
                                     residual_floor=RESIDUAL_FLOOR)
        work = LatentState(nu2, state.u, state.sigma, state.E)
        if mode == "full":
            work.u = self.sample_displacement_full(work, lam2, rng)
            work.sigma = self.sample_stress(work, lam2, rng)
        else:
            work.u = self.sweep_displacement_blocks(work, lam2, rng)
            work.sigma = self.sweep_stress_blocks(work, lam2, rng)
        work.E = self.sample_moduli(work, lam2, rng)
        return work
