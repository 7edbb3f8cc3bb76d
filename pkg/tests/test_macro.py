import numpy as np
import pytest

from trusslaw.design import seed_cells, tessellate
from trusslaw.icnn import ConstitutiveModel, IcnnWeights
from trusslaw.macro import (ElementInversionError, LearnedClosure, MacroMesh, MacroProblem,
                            NeoHookeanClosure, ResponseCurve, assemble, compare, fully_resolved,
                            solve, tile_lattice)


def test_box_mesh():
    m = MacroMesh.box(2.0, 3)
    assert len(m.nodes) == 64 and len(m.tets) == 6 * 27
    assert m.volumes.sum() == pytest.approx(8.0, rel=1e-14)
    assert np.all(m.volumes > 0)
    assert len(m.face(2, 2.0)) == 16
    with pytest.raises(ValueError):
        MacroMesh(m.nodes, m.tets[:, [1, 0, 2, 3]])


def test_zero_and_affine_fields():
    m = MacroMesh.box(1.0, 2)
    law = NeoHookeanClosure()
    assert np.max(np.abs(assemble(m, law, np.zeros(3 * len(m.nodes))).residual)) == 0.0
    F = np.array([[1.02, 0.01, 0.0], [0.0, 0.97, 0.02], [0.01, 0.0, 1.01]])
    u = (m.nodes @ (F - np.eye(3)).T).ravel()
    r = assemble(m, law, u).residual.reshape(-1, 3)
    interior = np.all((m.nodes > 0) & (m.nodes < 1), axis=1)
    assert np.max(np.abs(r[interior])) <= 1e-14
    assert np.max(np.abs(r.sum(axis=0))) <= 1e-14


def test_tangent_matches_fd(rng):
    m = MacroMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]]),
                  np.array([[0, 1, 2, 3], [1, 4, 2, 3]]))
    law = LearnedClosure(ConstitutiveModel(IcnnWeights.random(rng, scale=0.5)))
    u = 0.03 * rng.standard_normal(15)
    K = assemble(m, law, u).tangent.toarray()
    h = 1e-6
    Kfd = np.zeros_like(K)
    for j in range(15):
        e = np.zeros(15)
        e[j] = h
        Kfd[:, j] = (assemble(m, law, u + e, False).residual - assemble(m, law, u - e, False).residual) / (2 * h)
    assert np.linalg.norm(K - Kfd) <= 1e-6 * np.linalg.norm(K)


def test_inversion_detected():
    m = MacroMesh.box(1.0, 1)
    u = np.zeros(3 * len(m.nodes))
    u[2::3] = -2.0 * m.nodes[:, 2]
    with pytest.raises(ElementInversionError):
        assemble(m, NeoHookeanClosure(), u)


@pytest.mark.parametrize("which", ["neo", "learned"])
def test_patch(which, rng):
    law = NeoHookeanClosure() if which == "neo" else \
        LearnedClosure(ConstitutiveModel(IcnnWeights.random(rng, scale=0.5)))
    mesh = MacroMesh.box(1.0, 3)
    sol = solve(MacroProblem(mesh, law, 1.0, -0.05, steps=2, loading="patch"))
    assert not sol.curve.truncated
    affine = np.zeros_like(sol.u)
    affine[2::3] = -0.05 * mesh.nodes[:, 2]
    assert np.max(np.abs(sol.u - affine)) <= 1e-8


def test_uniaxial_solve_balance_and_newton_rate():
    mesh = MacroMesh.box(1.0, 2)
    sol = solve(MacroProblem(mesh, NeoHookeanClosure(), 1.0, -0.05, steps=5))
    assert not sol.curve.truncated and len(sol.curve.u) == 6
    assert max(sol.balance) <= 1e-12
    assert np.all(np.diff(sol.curve.force) < 0)
    for hist in sol.histories:
        h = [x for x in hist if x > 1e-10]
        if len(h) >= 3:
            assert h[-1] / h[-2] <= 0.1


def test_zero_displacement_flat():
    sol = solve(MacroProblem(MacroMesh.box(1.0, 1), NeoHookeanClosure(), 1.0, 0.0, steps=3))
    assert np.all(sol.curve.force == 0.0)


def test_compare():
    u = np.linspace(0, -0.05, 11)
    f = -np.linspace(0, 1, 11)
    a = ResponseCurve(u, f, 1.0)
    assert compare(a, a) == 0.0
    b = ResponseCurve(u, f + 0.1, 1.0)
    assert compare(a, b) == pytest.approx(0.1, rel=1e-12)
    c = ResponseCurve(u[::2], f[::2], 1.0)
    assert compare(a, c) <= 1e-14
    with pytest.raises(ValueError):
        compare(a, ResponseCurve(-u[1:] + 1, f[1:], 1.0))


def test_normalization_invariance():
    """Scaling the modulus and the cube size leaves normalized curves unchanged."""
    curves = []
    for L, mu in ((1.0, 0.4), (2.0, 0.8)):
        sol = solve(MacroProblem(MacroMesh.box(L, 1), NeoHookeanClosure(mu, 1.5 * mu), L, -0.04 * L,
                                 steps=2, youngs_modulus=2.5 * mu))
        curves.append(sol.curve)
    assert np.allclose(curves[0].force_normalized, curves[1].force_normalized, rtol=1e-10, atol=0)


def test_curve_csv_roundtrip(tmp_path):
    c = ResponseCurve(np.linspace(0, -0.1, 4), np.array([0.0, -1.0, -2.5, -3.0]), 2.0)
    c.write_csv(tmp_path / "c.csv")
    back = ResponseCurve.read_csv(tmp_path / "c.csv", 2.0)
    assert np.array_equal(back.u, c.u) and np.array_equal(back.force, c.force)


def test_tiled_density_matches_cell():
    g = seed_cells()["simple_cubic"]
    cell = tessellate(g)
    cell_len = np.sum(cell.share * np.linalg.norm(np.diff(cell.nodes[cell.beams], axis=1)[:, 0], axis=1))
    nodes, beams, _, share, side = tile_lattice(g, 2, radius=0.05)
    assert side == 2.0
    tile_len = np.sum(share * np.linalg.norm(nodes[beams[:, 1]] - nodes[beams[:, 0]], axis=1))
    assert tile_len == pytest.approx(8 * cell_len, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2])
def test_resolved_bar(n):
    g = seed_cells()["simple_cubic"]
    r = 0.05
    c = fully_resolved(g, n, -1e-3, steps=2, radius=r)
    expected = -np.pi * r**2 * 1e-3 * n**2
    assert abs(c.force[-1] / expected - 1) <= 1e-6
