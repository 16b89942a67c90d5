import numpy as np
import pytest

from elastobayes import fem, priors
from elastobayes.samplers import GibbsSampler, LatentState, ObservationSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_problem(nx, ny, element_kind="quad", prescribed=None, walls=fem.Walls(),
                 u_prior_scale=None, seed=0, lam2_value=1e-2, snr_db=np.inf):
    """Small self-consistent sampling problem (inverse-crime data on one mesh)."""
    mesh = fem.build_structured_mesh(nx, ny, element_kind, prescribed_dofs=prescribed)
    base = fem.ConstitutiveBase.isotropic()
    if prescribed is None:
        bc = fem.standard_boundary_data(mesh, walls)
    else:
        raise ValueError("use make_custom_problem for custom partitions")
    gen = np.random.default_rng(seed)
    u_full = fem.forward_solve(mesh, np.ones(mesh.n_el), bc, base,
                               quadrature="centroid")
    u_free = u_full[mesh.free_dofs]
    values = fem.add_noise(u_free, snr_db, gen)
    obs = ObservationSet(values=values, dofs=np.arange(mesh.n_free))
    u_prior = None
    if u_prior_scale is not None:
        u_prior = priors.displacement_gmrf(mesh, scale=u_prior_scale)
    sampler = GibbsSampler(mesh, base, bc, obs, u_prior=u_prior)
    lam2 = np.full(mesh.n_el, lam2_value)
    state = LatentState(nu2=1e-6, u=u_free.copy(),
                        sigma=sampler.stress_mean(
                            LatentState(1e-6, u_free, np.zeros(3 * mesh.n_el),
                                        np.ones(mesh.n_el)), lam2),
                        E=np.ones(mesh.n_el))
    return sampler, state, lam2


def make_custom_problem(prescribed_values: dict, nx=1, ny=1, lam2_value=1e-2,
                        obs_dofs=None, obs_values=None):
    """Single- or few-element mesh with an explicit Dirichlet map."""
    mesh = fem.build_structured_mesh(nx, ny, "quad",
                                     prescribed_dofs=sorted(prescribed_values))
    base = fem.ConstitutiveBase.isotropic()
    f = fem.assemble_force(mesh)
    bc = fem.BoundaryData(dirichlet=dict(prescribed_values), f=f)
    if obs_dofs is None:
        obs_dofs = np.arange(mesh.n_free)
    if obs_values is None:
        obs_values = np.zeros(len(obs_dofs))
    obs = ObservationSet(values=np.asarray(obs_values, float),
                         dofs=np.asarray(obs_dofs, int))
    sampler = GibbsSampler(mesh, base, bc, obs)
    lam2 = np.full(mesh.n_el, lam2_value)
    return sampler, mesh, base, bc, lam2
