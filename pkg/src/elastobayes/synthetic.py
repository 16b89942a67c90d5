"""Ground-truth fields and synthetic observation sets for the two benchmarks.

Scenario 1: two stiff elliptical inclusions (modulus contrast 5:1). Scenario 2:
a stiff circular inclusion plus a top-left corner patch whose material is
anisotropic, deliberately inconsistent with the isotropic inversion model so
the learned per-element discrepancies light up there. Data is manufactured on
a fine mesh and interpolated to the observation mesh to avoid the inverse
crime; membership of an element in an inclusion is decided by its centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .fem import ConstitutiveBase, Mesh, Walls
from .samplers import ObservationSet

ELLIPSES = ((0.25, 0.25, 0.1, 0.2), (0.75, 0.75, 0.1, 0.2))  # cx, cy, semi-ax, semi-ay
CIRCLE = (0.5, 0.5, 0.2)
CORNER_BOX = (0.0, 0.2, 0.8, 1.0)  # x_lo, x_hi, y_lo, y_hi
INCLUSION_MODULUS = 5.0
BACKGROUND_MODULUS = 1.0

# Anisotropic constitutive matrix of the corner patch (positive definite but
# inconsistent with any isotropic E * Dhat).
ANISOTROPIC_D = np.array([
    [10.0, -5.0, -5.0],
    [-5.0, 20.0, -5.0],
    [-5.0, -5.0, 100.0],
])


@dataclass
class GroundTruth:
    """Per-element constitutive truth: scalar moduli where isotropic, full D everywhere."""

    E: np.ndarray             # (n_el,), NaN where the true material is anisotropic
    D: np.ndarray             # (n_el, 3, 3)
    anisotropic: np.ndarray   # (n_el,) bool
    descriptors: dict


def in_ellipse(points: np.ndarray, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    points = np.atleast_2d(points)
    return (((points[:, 0] - cx) / ax) ** 2 + ((points[:, 1] - cy) / ay) ** 2) <= 1.0


def in_box(points: np.ndarray, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> np.ndarray:
    points = np.atleast_2d(points)
    return ((points[:, 0] >= x_lo) & (points[:, 0] <= x_hi)
            & (points[:, 1] >= y_lo) & (points[:, 1] <= y_hi))


def example1_field(mesh: Mesh, base: ConstitutiveBase | None = None) -> GroundTruth:
    """Two axis-aligned elliptical inclusions with modulus 5 on a background of 1."""
    if base is None:
        base = ConstitutiveBase.isotropic()
    inside = np.zeros(mesh.n_el, dtype=bool)
    for ell in ELLIPSES:
        inside |= in_ellipse(mesh.centroids, *ell)
    moduli = np.where(inside, INCLUSION_MODULUS, BACKGROUND_MODULUS)
    return GroundTruth(
        E=moduli.astype(float),
        D=moduli[:, None, None] * base.dhat,
        anisotropic=np.zeros(mesh.n_el, dtype=bool),
        descriptors={"ellipses": ELLIPSES},
    )


def example2_field(mesh: Mesh, base: ConstitutiveBase | None = None) -> GroundTruth:
    """Circular inclusion (E = 5) plus the anisotropic top-left corner patch."""
    if base is None:
        base = ConstitutiveBase.isotropic()
    in_circle = in_ellipse(mesh.centroids, CIRCLE[0], CIRCLE[1], CIRCLE[2], CIRCLE[2])
    in_corner = in_box(mesh.centroids, *CORNER_BOX)
    moduli = np.where(in_circle, INCLUSION_MODULUS, BACKGROUND_MODULUS).astype(float)
    d_mats = moduli[:, None, None] * base.dhat
    d_mats[in_corner] = ANISOTROPIC_D
    moduli[in_corner] = np.nan
    return GroundTruth(
        E=moduli,
        D=d_mats,
        anisotropic=in_corner,
        descriptors={"circle": CIRCLE, "corner": CORNER_BOX},
    )


@dataclass
class Dataset:
    """One noisy realization of nodal displacement data on the observation mesh.

    ``nodal`` holds the full DOF field of the observation mesh: noisy values at
    free DOFs, exact Dirichlet values at prescribed DOFs. Coarser inversion
    meshes derive their observations by interpolating this field.
    """

    obs_mesh: Mesh
    walls: Walls
    nodal: np.ndarray       # (n_dofs,)
    snr_db: float
    f: np.ndarray           # generalized force on the observation mesh's free DOFs
    fine_mesh: Mesh | None = None          # absent when reloaded from disk
    u_fine: np.ndarray | None = None       # (n_dofs_fine,) clean forward solution
    sigma_fine: np.ndarray | None = None   # (n_el_fine, 3) true fine-mesh stresses

    @property
    def observations(self) -> ObservationSet:
        free = self.obs_mesh.free_dofs
        return ObservationSet(values=self.nodal[free], dofs=np.arange(free.size))


def make_dataset(truth: GroundTruth, fine_mesh: Mesh, obs_mesh: Mesh,
                 walls: Walls = Walls(), snr_db: float = np.inf,
                 rng: np.random.Generator | None = None) -> Dataset:
    """Forward-solve on the fine mesh, interpolate to the observation mesh, add noise.

    All free nodal displacements of the observation mesh are observed (Q = I).
    The fine mesh must be at least as fine as the observation mesh; equal sizes
    give the inverse-crime mode used by unit tests.
    """
    if fine_mesh.nx < obs_mesh.nx or fine_mesh.ny < obs_mesh.ny:
        raise ValueError("the data mesh must be at least as fine as the observation mesh")
    if rng is None:
        rng = np.random.default_rng()
    walls = Walls(*walls)

    fine_bc = fem.standard_boundary_data(fine_mesh, walls)
    u_fine = fem.forward_solve(fine_mesh, truth.D, fine_bc)
    sigma_fine = fem.element_stress(fine_mesh, truth.D, u_fine)

    obs_bc = fem.standard_boundary_data(obs_mesh, walls)
    if (fine_mesh.nx, fine_mesh.ny) == (obs_mesh.nx, obs_mesh.ny):
        nodal = u_fine.copy()
    else:
        nodal = fem.interpolate_displacement(fine_mesh, u_fine,
                                             obs_mesh.node_coords).ravel()
    nodal[obs_mesh.prescribed_dofs] = obs_bc.prescribed_values(obs_mesh)
    free = obs_mesh.free_dofs
    nodal[free] = fem.add_noise(nodal[free], snr_db, rng)

    return Dataset(obs_mesh=obs_mesh, walls=walls, nodal=nodal, snr_db=float(snr_db),
                   f=obs_bc.f, fine_mesh=fine_mesh, u_fine=u_fine,
                   sigma_fine=sigma_fine)


def observations_for_mesh(dataset: Dataset, mesh: Mesh):
    """Observation set and boundary data for an inversion mesh.

    Interpolates the dataset's nodal field at the mesh nodes (an exact
    restriction whenever the observation-mesh size is a multiple of the
    inversion-mesh size, as in the default cascade).
    """
    bc = fem.standard_boundary_data(mesh, dataset.walls)
    if (mesh.nx, mesh.ny) == (dataset.obs_mesh.nx, dataset.obs_mesh.ny):
        nodal = dataset.nodal.copy()
    else:
        nodal = fem.interpolate_displacement(dataset.obs_mesh, dataset.nodal,
                                             mesh.node_coords).ravel()
    free = mesh.free_dofs
    obs = ObservationSet(values=nodal[free], dofs=np.arange(free.size))
    return obs, bc
