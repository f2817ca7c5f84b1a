from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttreliab.macrofem import (
    LoadCase, LocationError, Mesh, MeshError, PlateModel, SensorSet, SetupError, assemble_solve,
    generate_plate_mesh, log_likelihood, observe, solve, von_mises, write_results,
)
from ttreliab.micromech import isotropic_stiffness, plane_stress_condense
from ttreliab.randfield import CovarianceKernel, LognormalMarginal, kl_decompose, lumped_weights

E, NU = 10.0, 0.3
C_ISO = plane_stress_condense(isotropic_stiffness(E, NU, 4))


@pytest.fixture(scope="module")
def plate():
    return generate_plate_mesh(100.0, 100.0, 10.0, nx=16)


def test_plane_stress_matrix_is_hooke():
    expect = E / (1 - NU**2) * np.array([[1, NU, 0], [NU, 1, 0], [0, 0, (1 - NU) / 2]])
    np.testing.assert_allclose(C_ISO, expect, rtol=1e-12)


def test_full_rectangle_node_count():
    m = generate_plate_mesh(2.0, 1.0, 0.0, nx=6, ny=4)
    assert m.n_nodes == 7 * 5 and m.n_elements == 2 * 6 * 4
    assert np.isclose(m.areas.sum(), 2.0)


def test_refinement_quadruples_elements():
    a = generate_plate_mesh(hole_radius=10.0, nx=16).n_elements
    b = generate_plate_mesh(hole_radius=10.0, nx=32).n_elements
    assert 3.7 < b / a < 4.3


@settings(max_examples=15, deadline=None)
@given(r=st.floats(15.0, 35.0), nx=st.sampled_from([12, 16, 24]))
def test_rim_nodes_on_circle_and_areas_positive(r, nx):
    try:
        m = generate_plate_mesh(100.0, 100.0, r, nx=nx)
    except MeshError:
        return
    d = np.linalg.norm(m.nodes[m.sets["hole"]] - 50.0, axis=1)
    assert np.all(np.abs(d - r) < 1e-10)
    assert np.all(m.areas > 0)
    assert all(m.sets[k].size for k in ("left", "right", "hole"))


def test_mesh_errors():
    with pytest.raises(MeshError):
        generate_plate_mesh(100.0, 100.0, 60.0)
    with pytest.raises(MeshError):
        generate_plate_mesh(100.0, 100.0, 5.0, nx=8)


def test_mesh_file_round_trip(tmp_path, plate):
    plate.save(tmp_path / "mesh.txt")
    text = (tmp_path / "mesh.txt").read_text().splitlines()
    assert text[0] == f"nodes {plate.n_nodes}"
    back = Mesh.load(tmp_path / "mesh.txt")
    np.testing.assert_array_equal(back.nodes, plate.nodes)
    np.testing.assert_array_equal(back.elements, plate.elements)
    for k in plate.sets:
        np.testing.assert_array_equal(back.sets[k], plate.sets[k])


def test_uniform_uniaxial_stress():
    m = generate_plate_mesh(100.0, 50.0, 0.0, nx=10, ny=5)
    load = LoadCase(1000.0, 10.0, support="roller")
    sol = assemble_solve(m, C_ISO, load)
    s = 1000.0 / (50.0 * 10.0)
    np.testing.assert_allclose(sol.stress[:, 0], s, atol=1e-8)
    np.testing.assert_allclose(sol.stress[:, 1:], 0.0, atol=1e-8)
    sensors = SensorSet([[10.0, 10.0], [55.0, 25.0], [90.0, 40.0]])
    y = observe(sol, sensors.locate(m)).reshape(-1, 2)
    e_mpa = E * 1e3
    np.testing.assert_allclose(y[:, 0], s / e_mpa, atol=1e-8)
    np.testing.assert_allclose(y[:, 1], -NU * s / e_mpa, atol=1e-8)


def test_zero_load(plate):
    sol = assemble_solve(plate, C_ISO, LoadCase(0.0))
    assert np.all(sol.displacement == 0) and np.all(sol.stress == 0)
    assert np.all(observe(sol, SensorSet.ring_and_far_field().locate(plate)) == 0)


def test_reactions_balance_load(plate):
    load = LoadCase(1000.0)
    sol = assemble_solve(plate, C_ISO, load)
    assert abs(sol.reaction[:, 0].sum() + load.force) <= 1e-8 * load.force
    assert abs(sol.reaction[:, 1].sum()) <= 1e-8 * load.force


def test_kirsch_concentration():
    # r / height = 0.05 in a wide strip, far-field sigma = F / (h t)
    m = generate_plate_mesh(200.0, 100.0, 5.0, nx=200, ny=100)
    sol = assemble_solve(m, C_ISO, LoadCase(1000.0, 10.0))
    k = sol.max_von_mises / (1000.0 / (100.0 * 10.0))
    assert 2.7 <= k <= 3.3


def test_linearity_in_load(plate):
    a = assemble_solve(plate, C_ISO, LoadCase(500.0))
    b = assemble_solve(plate, C_ISO, LoadCase(1000.0))
    np.testing.assert_allclose(b.displacement, 2 * a.displacement, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(b.stress, 2 * a.stress, rtol=1e-10, atol=1e-14)
    assert np.isclose(b.max_von_mises, 2 * a.max_von_mises, rtol=1e-12)


def test_stiffness_scaling_leaves_stress(plate):
    rng = np.random.default_rng(0)
    c = C_ISO * rng.uniform(0.5, 2.0, plate.n_elements)[:, None, None]
    a = assemble_solve(plate, c, LoadCase())
    b = assemble_solve(plate, 3.7 * c, LoadCase())
    np.testing.assert_allclose(b.displacement, a.displacement / 3.7, rtol=1e-8, atol=1e-14)
    np.testing.assert_allclose(b.stress, a.stress, rtol=1e-8, atol=1e-10)


def test_patch_test(plate):
    eps = np.array([1e-3, -4e-4, 6e-4])
    x, y = plate.nodes[:, 0], plate.nodes[:, 1]
    u = np.column_stack([eps[0] * x + 0.5 * eps[2] * y, 0.5 * eps[2] * x + eps[1] * y]).ravel()
    bnd = np.unique(np.concatenate([plate.sets["left"], plate.sets["right"], plate.sets["hole"],
                                    np.flatnonzero(np.isclose(y, 0) | np.isclose(y, 100))]))
    dofs = np.sort(np.concatenate([2 * bnd, 2 * bnd + 1]))
    # any constant material; anisotropic here
    c = C_ISO + np.array([[2.0, 0.5, 0.3], [0.5, 1.0, -0.2], [0.3, -0.2, 0.7]])
    sol = solve(plate, c, 1.0, dofs, u[dofs], np.zeros(2 * plate.n_nodes))
    np.testing.assert_allclose(sol.strain, np.broadcast_to(eps, sol.strain.shape), atol=1e-10)


def test_singular_system(plate):
    with pytest.raises(SetupError):
        solve(plate, C_ISO, 1.0, np.array([0]), np.zeros(1), np.zeros(2 * plate.n_nodes))


def _contains(mesh, e, p):
    try:
        SensorSet([p]).locate(Mesh(mesh.nodes, mesh.elements[e:e + 1]))
    except LocationError:
        return False
    return True


def test_sensor_tie_break_and_location():
    m = generate_plate_mesh(1.0, 1.0, 0.0, nx=2)
    s = SensorSet([[0.5, 0.5], [0.25, 0.25]])
    idx = s.locate(m)
    # (0.5, 0.5) is a vertex shared by several elements and (0.25, 0.25) lies on
    # a diagonal; the lowest-index element touching the point wins
    for p, k in zip(s.points, idx):
        touching = [e for e in range(m.n_elements) if _contains(m, e, p)]
        assert len(touching) >= 2 and k == touching[0]
    sol = assemble_solve(m, C_ISO, LoadCase(support="roller"))
    assert np.array_equal(observe(sol, idx), observe(sol, s.locate(m)))
    with pytest.raises(LocationError):
        SensorSet([[1.5, 0.5]]).locate(m)
    with pytest.raises(LocationError):
        SensorSet([[50.0, 50.0]]).locate(generate_plate_mesh(100.0, 100.0, 10.0, nx=16))


def test_log_likelihood_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert log_likelihood(y, y, 1e-5) == 0.0
    d = np.array([0.0, 3e-5, 0.0])
    assert np.isclose(log_likelihood(y + d, y, 1e-5), -(3e-5) ** 2 / (2e-10))
    assert np.isclose(log_likelihood(y + [1e-5, 0, 0], y, 1e-5), -0.5)
    with pytest.raises(ValueError):
        log_likelihood(y, y, 0.0)


def test_von_mises_formula():
    assert np.isclose(von_mises(np.array([1.0, 0.0, 0.0])), 1.0)
    assert np.isclose(von_mises(np.array([0.0, 0.0, 1.0])), np.sqrt(3.0))
    assert np.isclose(von_mises(np.array([1.0, 1.0, 0.0])), 1.0)


def test_results_csv(tmp_path, plate):
    sol = assemble_solve(plate, C_ISO, LoadCase())
    write_results(tmp_path / "r.csv", sol)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "kind,index,c0,c1,c2"
    assert len(lines) == 1 + plate.n_nodes + plate.n_elements


def _stub_stiffness(chi):
    # isotropic matrix whose modulus follows the rule of mixtures
    chi = np.atleast_2d(chi)
    e = chi[:, 0] * chi[:, 1] + (1 - chi[:, 0]) * chi[:, 2]
    return e[:, None, None] * plane_stress_condense(isotropic_stiffness(1.0, 0.3, 4))


@pytest.fixture(scope="module")
def model(plate):
    w = lumped_weights(plate.nodes / 100.0, plate.elements)

    def basis(mean):
        mg = LognormalMarginal(mean, 0.05)
        return kl_decompose(plate.nodes / 100.0, CovarianceKernel("exponential", mg.sigma_g, 0.05),
                            4, w, mg)

    return PlateModel(plate, LoadCase(), SensorSet.ring_and_far_field(), (basis(0.55), basis(65.0),
                      basis(3.5)), _stub_stiffness, sigma_allow=0.96)


def test_performance_deterministic(model):
    g1, f1 = model.performance(np.zeros(12))
    g2, f2 = model.performance(np.zeros(12))
    assert g1[0] == g2[0] and np.isclose(g1[0], 0.96 - f1[0])


def test_threshold_crossing(model):
    _, f = model.performance(np.zeros(12))
    model2 = PlateModel(model.mesh, model.load, model.sensors, model.fields, model.stiffness,
                        sigma_allow=float(f[0]))
    assert model2.performance(np.zeros(12))[0][0] == 0.0


def test_uniform_field_scaling_invariance(model):
    # shifting both moduli coefficients of the constant-like mode scales stiffness uniformly
    base = model.element_stiffness(model.element_chi(np.zeros(12)))
    a = assemble_solve(model.mesh, base, model.load)
    b = assemble_solve(model.mesh, 5.0 * base, model.load)
    assert np.isclose(a.max_von_mises, b.max_von_mises, rtol=1e-10)


def test_response_shapes_and_likelihood(model):
    sol = model.solve(np.zeros(12))
    model.y_obs = model.observe(sol)
    try:
        f, ll = model.response(np.zeros((2, 12)))
        assert f.shape == (2,) and np.all(ll == 0.0)
    finally:
        model.y_obs = None
    with pytest.raises(ValueError):
        model.element_chi(np.zeros(5))
