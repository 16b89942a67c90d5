"""Intrinsic GMRF priors for the log-discrepancy and displacement fields.

The precision of an intrinsic autoregressive field over sites ``s_i`` is
``W = H / scale`` with off-diagonal entries ``-h_ij``, diagonal entries equal to
the row sums of ``h``, and proximities ``h_ij = exp(-d_ij / d0)``. Every row of
``H`` sums to zero, so the prior penalizes differences between site values and
is flat along the constant vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import Mesh

DEFAULT_D0 = 0.1
DEFAULT_SIGMA_Z2 = 100.0
DEFAULT_SIGMA_U2 = 1.0
DEFAULT_ALPHA_NU = 2.0
DEFAULT_BETA_NU = 0.0

PROXIMITY_CUTOFF = 1e-8


@dataclass(frozen=True)
class GmrfSpec:
    """Intrinsic GMRF: precision W = H / scale over the stored sites."""

    sites: np.ndarray   # (n, 2)
    d0: float
    scale: float
    H: np.ndarray       # (n, n), zero row sums

    @property
    def precision(self) -> np.ndarray:
        return self.H / self.scale

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]


def build_gmrf(sites: np.ndarray, d0: float, scale: float) -> GmrfSpec:
    """Intrinsic GMRF precision from pairwise site proximities.

    Coincident distinct sites get proximity 1 (distance zero). Proximities below
    ``PROXIMITY_CUTOFF`` are truncated to exact zeros; the diagonal is rebuilt
    from the truncated row sums so rows still sum to zero.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    if sites.shape[0] < 2:
        raise ValueError("a GMRF needs at least 2 sites")
    if d0 <= 0.0:
        raise ValueError(f"correlation length d0 must be positive, got {d0}")
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    diff = sites[:, None, :] - sites[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    h = np.exp(-dist / d0)
    np.fill_diagonal(h, 0.0)
    h[h < PROXIMITY_CUTOFF] = 0.0
    big_h = np.diag(h.sum(axis=1)) - h
    return GmrfSpec(sites=sites, d0=float(d0), scale=float(scale), H=big_h)


def gmrf_penalty(z: np.ndarray, spec: GmrfSpec) -> float:
    """Quadratic form z' W z (minus twice the log-density, up to a constant)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.n_sites,):
        raise ValueError(f"field length {z.shape} does not match {spec.n_sites} sites")
    return float(z @ spec.precision @ z)


def displacement_gmrf(mesh: Mesh, d0: float = DEFAULT_D0,
                      scale: float = DEFAULT_SIGMA_U2) -> np.ndarray:
    """Dense precision for the free-DOF displacement prior.

    One intrinsic GMRF per displacement component over the node positions of
    the free DOFs of that component; x and y components do not couple.
    Components with fewer than two free DOFs contribute nothing.
    """
    w = np.zeros((mesh.n_free, mesh.n_free))
    for comp in (0, 1):
        idx = np.flatnonzero(mesh.free_dofs % 2 == comp)
        if idx.size < 2:
            continue
        nodes = mesh.free_dofs[idx] // 2
        block = build_gmrf(mesh.node_coords[nodes], d0, scale)
        w[np.ix_(idx, idx)] = block.precision
    return w


@dataclass(frozen=True)
class NoiseHyperprior:
    """Inverse-Gamma hyperprior on the observation-noise variance."""

    alpha: float = DEFAULT_ALPHA_NU
    beta: float = DEFAULT_BETA_NU

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
