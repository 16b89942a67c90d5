"""Mesh construction, element operators, equilibrium assembly, forward solver."""

import numpy as np
import pytest

from elastobayes import fem
from elastobayes.fem import (ConstitutiveBase, DegenerateElementError,
                             IllPosedProblemError, Walls, add_noise,
                             assemble_equilibrium, build_structured_mesh,
                             element_strain, forward_solve, isotropic_dhat,
                             standard_boundary_data, strain_displacement,
                             strain_operators)


class TestConstitutive:
    def test_plane_stress_incompressible_is_spd(self):
        dhat = isotropic_dhat("plane_stress", 0.5)
        eig = np.linalg.eigvalsh(dhat)
        assert eig.min() > 0.1

    @pytest.mark.parametrize("regime,nu", [
        ("plane_stress", 0.0), ("plane_stress", 0.3), ("plane_stress", 0.5),
        ("plane_strain", 0.0), ("plane_strain", 0.3), ("plane_strain", 0.49),
    ])
    def test_spd_over_admissible_range(self, regime, nu):
        eig = np.linalg.eigvalsh(isotropic_dhat(regime, nu))
        assert eig.min() > 0

    def test_plane_strain_rejects_half(self):
        with pytest.raises(ValueError):
            isotropic_dhat("plane_strain", 0.5)

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            isotropic_dhat("plane_nonsense", 0.3)


class TestStructuredMesh:
    def test_5x5_quad_counts(self):
        mesh = build_structured_mesh(5, 5, "quad")
        assert mesh.n_el == 25
        assert mesh.n_nodes == 36
        assert mesh.n_dofs == 72

    def test_20x20_volumes(self):
        mesh = build_structured_mesh(20, 20, "quad")
        assert mesh.n_el == 400
        np.testing.assert_allclose(mesh.volumes, 1.0 / 400, rtol=1e-12)

    def test_volume_sum_is_domain_area(self):
        for kind in ("quad", "triangles"):
            mesh = build_structured_mesh(3, 4, kind)
            assert mesh.volumes.sum() == pytest.approx(1.0, rel=1e-12)

    def test_triangles_element_count(self):
        mesh = build_structured_mesh(4, 3, "triangles")
        assert mesh.n_el == 24

    def test_1x1_bhat_shape_and_rank(self):
        mesh = build_structured_mesh(1, 1, "quad",
                                     prescribed_dofs=[0, 1, 2, 3, 4, 6])
        assert mesh.bhat.shape == (3, 2)
        assert np.linalg.matrix_rank(mesh.bhat.toarray()) <= mesh.n_free

    @pytest.mark.parametrize("nx,ny", [(0, 3), (3, 0), (-1, 2)])
    def test_rejects_bad_dimensions(self, nx, ny):
        with pytest.raises(ValueError):
            build_structured_mesh(nx, ny)

    def test_rejects_bad_kind(self):
        with pytest.raises(ValueError):
            build_structured_mesh(2, 2, "hexagons")

    def test_default_partition_prescribes_wall_normals(self):
        mesh = build_structured_mesh(2, 2)
        x, y = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
        for dof in mesh.prescribed_dofs:
            node, comp = divmod(dof, 2)
            on_wall = (x[node] in (0.0, 1.0)) if comp == 0 else (y[node] in (0.0, 1.0))
            assert on_wall


class TestStrainDisplacement:
    def test_rigid_translations_annihilated(self):
        for kind in ("quad", "triangles"):
            mesh = build_structured_mesh(3, 3, kind)
            nloc = mesh.element_conn.shape[1]
            tx = np.zeros(2 * nloc)
            tx[0::2] = 1.0
            ty = np.zeros(2 * nloc)
            ty[1::2] = 1.0
            for e in range(mesh.n_el):
                assert np.linalg.norm(mesh.b_matrices[e] @ tx) <= 1e-14
                assert np.linalg.norm(mesh.b_matrices[e] @ ty) <= 1e-14

    def test_uniform_stretch(self):
        coords = np.array([[0.2, 0.1], [0.9, 0.3], [0.8, 0.9], [0.1, 0.7]])
        b = strain_displacement(coords)
        u_e = np.zeros(8)
        u_e[0::2] = coords[:, 0]  # u_x = x
        np.testing.assert_allclose(b @ u_e, [1.0, 0.0, 0.0], atol=1e-12)

    def test_unit_right_triangle_matches_finite_differences(self):
        # Shape functions on the unit right triangle: N1 = 1-x-y, N2 = x, N3 = y.
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        b = strain_displacement(coords)
        shapes = [lambda x, y: 1.0 - x - y, lambda x, y: x, lambda x, y: y]
        h = 1e-6
        x0, y0 = 1.0 / 3.0, 1.0 / 3.0
        expected = np.zeros((3, 6))
        for i, n in enumerate(shapes):
            dx = (n(x0 + h, y0) - n(x0 - h, y0)) / (2 * h)
            dy = (n(x0, y0 + h) - n(x0, y0 - h)) / (2 * h)
            expected[0, 2 * i] = dx
            expected[1, 2 * i + 1] = dy
            expected[2, 2 * i] = dy
            expected[2, 2 * i + 1] = dx
        np.testing.assert_allclose(b, expected, atol=1e-8)

    def test_degenerate_triangle_raises(self):
        with pytest.raises(DegenerateElementError):
            strain_displacement([[0, 0], [1, 0], [2, 0]])

    def test_wrong_node_count(self):
        with pytest.raises(ValueError):
            strain_displacement(np.zeros((5, 2)))


class TestAssembleEquilibrium:
    def test_shape(self):
        mesh = build_structured_mesh(3, 2)
        assert mesh.bhat.shape == (3 * mesh.n_el, mesh.n_free)

    def test_uniform_stress_balances_interior_dofs(self):
        mesh = build_structured_mesh(4, 4)
        sigma = np.tile([2.0, -1.0, 0.5], mesh.n_el)
        resid = mesh.bhat.T @ sigma
        x, y = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
        interior = [k for k, dof in enumerate(mesh.free_dofs)
                    if 0.0 < x[dof // 2] < 1.0 and 0.0 < y[dof // 2] < 1.0]
        np.testing.assert_allclose(resid[interior], 0.0, atol=1e-13)

    def test_stiffness_identity_against_direct_assembly(self, rng):
        # Bhat' blockdiag(E_e Dhat) (Dhat B L) equals sum_e V_e L' B' D B L.
        mesh = build_structured_mesh(3, 3)
        base = ConstitutiveBase.isotropic()
        moduli = rng.uniform(0.5, 5.0, mesh.n_el)
        s_free, _ = strain_operators(mesh)
        import scipy.sparse as sp
        dblk = sp.block_diag([e * base.dhat for e in moduli])
        k_via_bhat = (mesh.bhat.T @ dblk @ s_free).toarray()

        k_direct = np.zeros((mesh.n_free, mesh.n_free))
        g2f = mesh.global_to_free
        for e in range(mesh.n_el):
            ke = mesh.volumes[e] * mesh.b_matrices[e].T @ (
                moduli[e] * base.dhat) @ mesh.b_matrices[e]
            dofs = mesh.element_dofs[e]
            for a, da in enumerate(dofs):
                if g2f[da] < 0:
                    continue
                for b, db in enumerate(dofs):
                    if g2f[db] < 0:
                        continue
                    k_direct[g2f[da], g2f[db]] += ke[a, b]
        np.testing.assert_allclose(k_via_bhat, k_direct, atol=1e-12)


class TestForwardSolve:
    @pytest.mark.parametrize("kind", ["quad", "triangles"])
    def test_patch_test_affine_dirichlet(self, kind):
        # All-boundary Dirichlet from an affine field reproduces it exactly.
        mesh = build_structured_mesh(4, 4, kind)
        coords = mesh.node_coords
        affine = np.empty(mesh.n_dofs)
        affine[0::2] = 0.3 * coords[:, 0] + 0.1 * coords[:, 1] + 0.05
        affine[1::2] = -0.2 * coords[:, 0] + 0.4 * coords[:, 1]
        x, y = coords[:, 0], coords[:, 1]
        boundary = (x == 0) | (x == 1) | (y == 0) | (y == 1)
        presc = np.concatenate([2 * np.flatnonzero(boundary),
                                2 * np.flatnonzero(boundary) + 1])
        mesh = build_structured_mesh(4, 4, kind, prescribed_dofs=presc)
        bc = fem.BoundaryData(
            dirichlet={int(d): float(affine[d]) for d in mesh.prescribed_dofs},
            f=fem.assemble_force(mesh))
        u = forward_solve(mesh, np.ones(mesh.n_el), bc, ConstitutiveBase.isotropic())
        np.testing.assert_allclose(u, affine, atol=1e-10)

    def test_patch_test_centroid_quadrature(self):
        mesh = build_structured_mesh(3, 3)
        bc = standard_boundary_data(mesh)
        u = forward_solve(mesh, np.ones(mesh.n_el), bc,
                          ConstitutiveBase.isotropic(), quadrature="centroid")
        expected = mesh.node_coords.ravel()
        np.testing.assert_allclose(u, expected, atol=1e-10)

    def test_displacement_control_scaling_invariance(self):
        mesh = build_structured_mesh(4, 4)
        base = ConstitutiveBase.isotropic()
        bc = standard_boundary_data(mesh)
        e1 = np.linspace(1.0, 3.0, mesh.n_el)
        u1 = forward_solve(mesh, e1, bc, base)
        u2 = forward_solve(mesh, 2.0 * e1, bc, base)
        np.testing.assert_allclose(u1, u2, atol=1e-12)

    def test_equilibrium_consistency_random_fields(self, rng):
        # Forward solution with centroid quadrature satisfies Bhat' sigma = f.
        base = ConstitutiveBase.isotropic()
        for n in (2, 3, 4):
            mesh = build_structured_mesh(n, n)
            bc = standard_boundary_data(mesh)
            moduli = rng.uniform(0.5, 4.0, mesh.n_el)
            u = forward_solve(mesh, moduli, bc, base, quadrature="centroid")
            d_mats = fem.constitutive_matrices(moduli, base)
            sigma = fem.element_stress(mesh, d_mats, u).ravel()
            resid = np.linalg.norm(mesh.bhat.T @ sigma - bc.f)
            assert resid <= 1e-10 * (1.0 + np.linalg.norm(bc.f))

    def test_singular_stiffness_raises(self):
        mesh = build_structured_mesh(2, 2, prescribed_dofs=[0])  # rigid modes left
        bc = fem.BoundaryData(dirichlet={0: 1.0}, f=fem.assemble_force(mesh))
        with pytest.raises(IllPosedProblemError):
            forward_solve(mesh, np.ones(mesh.n_el), bc, ConstitutiveBase.isotropic())

    def test_non_spd_constitutive_rejected(self):
        mesh = build_structured_mesh(2, 2)
        bc = standard_boundary_data(mesh)
        d_bad = np.tile(-np.eye(3), (mesh.n_el, 1, 1))
        with pytest.raises(ValueError):
            forward_solve(mesh, d_bad, bc)

    def test_refinement_convergence_to_fine_reference(self):
        # Smooth modulus field: coarse solutions approach the 64x64 reference
        # monotonically at shared nodes.
        base = ConstitutiveBase.isotropic()

        def solve(n):
            mesh = build_structured_mesh(n, n)
            c = mesh.centroids
            moduli = 1.5 + 0.5 * np.sin(np.pi * c[:, 0]) * np.sin(np.pi * c[:, 1])
            bc = standard_boundary_data(mesh)
            return mesh, forward_solve(mesh, moduli, bc, base)

        ref_mesh, ref_u = solve(64)
        errors = []
        for n in (4, 8, 16, 32):
            mesh, u = solve(n)
            interp = fem.interpolate_displacement(ref_mesh, ref_u, mesh.node_coords)
            errors.append(np.sqrt(np.mean((u.reshape(-1, 2) - interp) ** 2)))
        assert all(a > b for a, b in zip(errors, errors[1:]))
        assert errors[-1] > 0

    def test_traction_force_assembly(self):
        # Tangential traction on the top wall: the free x-DOF of the top-middle
        # node collects half of each adjacent edge's load, 2 * (0.5 * 0.5 * 2).
        mesh = build_structured_mesh(2, 2)
        top = [n for n in range(mesh.n_nodes) if mesh.node_coords[n, 1] == 1.0]
        top.sort(key=lambda n: mesh.node_coords[n, 0])
        tractions = [(top[0], top[1], 2.0, 0.0), (top[1], top[2], 2.0, 0.0)]
        f = fem.assemble_force(mesh, tractions=tractions)
        mid_x = mesh.global_to_free[2 * top[1]]
        assert f[mid_x] == pytest.approx(1.0)
        assert np.count_nonzero(f) == 1  # only that tangential DOF is free and loaded

    def test_zero_data_gives_zero_force(self):
        mesh = build_structured_mesh(3, 3)
        bc = standard_boundary_data(mesh, Walls(0.0, 0.0, 0.0, 0.0))
        np.testing.assert_array_equal(bc.f, 0.0)
        u = forward_solve(mesh, np.ones(mesh.n_el), bc, ConstitutiveBase.isotropic())
        np.testing.assert_allclose(u, 0.0, atol=1e-12)


class TestAddNoise:
    def test_infinite_snr_is_identity(self, rng):
        u = np.linspace(-1, 1, 50)
        out = add_noise(u, np.inf, rng)
        np.testing.assert_array_equal(out, u)
        assert out is not u

    def test_noise_std_matches_snr_definition(self, rng):
        u = rng.normal(size=100)
        rms = np.sqrt(np.mean(u**2))
        noisy = add_noise(u, 40.0, np.random.default_rng(7))
        eta = noisy - u
        # a second draw from the same generator state reproduces the std used
        expected_std = rms * 1e-2
        assert np.std(eta) == pytest.approx(expected_std, rel=0.35)

    def test_empirical_snr_40db(self):
        # Monte Carlo check of the generator over 1e5 entries.
        gen = np.random.default_rng(3)
        u = 0.5 + gen.normal(size=100_000)
        noisy = add_noise(u, 40.0, gen)
        eta = noisy - u
        snr_est = 20 * np.log10(np.sqrt(np.mean(u**2)) / np.sqrt(np.mean(eta**2)))
        assert snr_est == pytest.approx(40.0, abs=0.2)

    def test_nan_snr_rejected(self, rng):
        with pytest.raises(ValueError):
            add_noise(np.ones(3), np.nan, rng)


class TestInterpolation:
    def test_nodal_exact_on_shared_nodes(self):
        fine = build_structured_mesh(8, 8)
        coarse = build_structured_mesh(4, 4)
        vals = np.arange(fine.n_dofs, dtype=float)
        out = fem.interpolate_displacement(fine, vals, coarse.node_coords)
        expect_nodes = [np.flatnonzero(
            (fine.node_coords == c).all(axis=1))[0] for c in coarse.node_coords]
        np.testing.assert_allclose(out, vals.reshape(-1, 2)[expect_nodes])

    def test_containing_element_structured(self):
        mesh = build_structured_mesh(4, 4)
        found = fem.containing_element(mesh, mesh.centroids)
        np.testing.assert_array_equal(found, np.arange(mesh.n_el))

    def test_containing_element_clips_outside_points(self):
        mesh = build_structured_mesh(2, 2)
        out = fem.containing_element(mesh, np.array([[-0.5, 0.5], [1.5, 1.5]]))
        assert out[0] == 2  # left-middle cell... clipped to column 0, row 1
        assert out[1] == 3
