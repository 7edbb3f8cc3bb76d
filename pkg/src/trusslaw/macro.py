"""Macroscale finite elements driven by a learned constitutive law, and the
fully resolved beam-lattice counterpart used as reference.

The continuum solver is total Lagrangian with linear tetrahedra and one
quadrature point. A material closure maps a stack of Green-Lagrange strains
to (S, C) with C the full fourth-order tangent.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .beam import BeamMaterial
from .design import DEDUPE_TOL, OctantGraph, tessellate
from .homogenize import (BeamStructure, DivergenceError, SolverConfig, equilibrate,
                         strut_radius)
from .metrics import nrmse

log = logging.getLogger(__name__)

I3 = np.eye(3)


class ElementInversionError(ValueError):
    def __init__(self, element: int, det: float):
        super().__init__(f"element {element} inverted (det F = {det:.3e})")
        self.element = element


# --------------------------------------------------------------------------
# mesh


@dataclass
class MacroMesh:
    nodes: np.ndarray
    tets: np.ndarray
    grads: np.ndarray = field(init=False)  # (m, 4, 3) reference shape-function gradients
    volumes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, float)
        self.tets = np.asarray(self.tets, int)
        X = self.nodes[self.tets]
        D = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0], X[:, 3] - X[:, 0]], axis=2)
        det = np.linalg.det(D)
        if np.any(det <= 0):
            raise ValueError(f"{int(np.sum(det <= 0))} tetrahedra have non-positive volume")
        Dinv = np.linalg.inv(D)  # rows are gradients of N1..N3
        self.grads = np.concatenate([-Dinv.sum(axis=1, keepdims=True), Dinv], axis=1)
        self.volumes = det / 6.0

    @classmethod
    def box(cls, L: float, n: int) -> "MacroMesh":
        """Cube [0, L]^3 on an n^3 hex grid, each hex split into 6 tetrahedra
        around its main diagonal."""
        if n < 1:
            raise ValueError("need at least one hex per side")
        g = np.linspace(0.0, L, n + 1)
        nodes = np.array([(x, y, z) for z in g for y in g for x in g])

        def nid(i, j, k):
            return i + (n + 1) * (j + (n + 1) * k)

        tets = []
        for k, j, i in itertools.product(range(n), repeat=3):
            for perm in itertools.permutations(range(3)):
                c = [0, 0, 0]
                corners = [nid(i, j, k)]
                for axis in perm:
                    c[axis] = 1
                    corners.append(nid(i + c[0], j + c[1], k + c[2]))
                tets.append(corners)
        tets = np.array(tets)
        # permutation parity decides orientation; flip the negative ones
        X = nodes[tets]
        det = np.linalg.det(np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0], X[:, 3] - X[:, 0]], axis=2))
        neg = det < 0
        tets[neg] = tets[neg][:, [0, 2, 1, 3]]
        return cls(nodes, tets)

    def face(self, axis: int, value: float, tol: float = 1e-12) -> np.ndarray:
        return np.flatnonzero(np.abs(self.nodes[:, axis] - value) <= tol)


# --------------------------------------------------------------------------
# material closures


class NeoHookeanClosure:
    """Compressible reference law used for tests (analytic S and C)."""

    def __init__(self, mu: float = 0.4, lam: float = 0.6):
        self.mu, self.lam = mu, lam

    def __call__(self, E):
        C = 2.0 * E + I3
        Cinv = np.linalg.inv(C)
        J = np.sqrt(np.linalg.det(C))
        lnJ = np.log(J)
        S = self.mu * (I3 - Cinv) + self.lam * lnJ[..., None, None] * Cinv
        CC = np.einsum("...ij,...kl->...ijkl", Cinv, Cinv)
        CikCjl = np.einsum("...ik,...jl->...ijkl", Cinv, Cinv)
        CilCjk = np.einsum("...il,...jk->...ijkl", Cinv, Cinv)
        coef = (self.mu - self.lam * lnJ)[..., None, None, None, None]
        tangent = self.lam * CC + coef * (CikCjl + CilCjk)
        return S, tangent


class LearnedClosure:
    """Adapter from a ConstitutiveModel to the closure interface."""

    def __init__(self, model):
        self.model = model

    def __call__(self, E):
        return self.model.stress_and_tangent(E)


# --------------------------------------------------------------------------
# assembly


@dataclass
class Assembly:
    residual: np.ndarray  # internal nodal forces, flattened (3 n)
    tangent: sp.csr_matrix
    out_of_range: int


def deformation_gradients(mesh: MacroMesh, u) -> np.ndarray:
    U = np.asarray(u, float).reshape(-1, 3)[mesh.tets]  # (m, 4, 3)
    return I3 + np.einsum("mai,maJ->miJ", U, mesh.grads)


def assemble(mesh: MacroMesh, closure, u, with_tangent: bool = True,
             strain_range=(-0.25, 0.5)) -> Assembly:
    """Internal force vector and consistent tangent for displacement u."""
    F = deformation_gradients(mesh, u)
    det = np.linalg.det(F)
    bad = np.flatnonzero(det <= 0)
    if len(bad):
        raise ElementInversionError(int(bad[0]), float(det[bad[0]]))
    E = 0.5 * (np.einsum("mkI,mkJ->mIJ", F, F) - I3)
    S, C = closure(E)
    stretch = np.sqrt(np.linalg.eigvalsh(2.0 * E + I3)) - 1.0
    out_of_range = int(np.sum((stretch.min(axis=1) < strain_range[0]) | (stretch.max(axis=1) > strain_range[1])))
    P = F @ S
    V = mesh.volumes
    fe = np.einsum("m,miJ,maJ->mai", V, P, mesh.grads)
    n_dof = 3 * len(mesh.nodes)
    dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
    r = np.bincount(dofs.ravel(), fe.reshape(-1), minlength=n_dof)
    K = None
    if with_tangent:
        A = np.einsum("ik,mLJ->miJkL", I3, S) + np.einsum("miI,mIJML,mkM->miJkL", F, C, F)
        Ke = np.einsum("m,maJ,miJkL,mbL->maibk", V, mesh.grads, A, mesh.grads).reshape(-1, 12, 12)
        rows = np.broadcast_to(dofs[:, :, None], Ke.shape).ravel()
        cols = np.broadcast_to(dofs[:, None, :], Ke.shape).ravel()
        K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n_dof, n_dof)).tocsr()
    return Assembly(r, K, out_of_range)


# --------------------------------------------------------------------------
# boundary value problem


@dataclass
class ResponseCurve:
    u: np.ndarray
    force: np.ndarray
    L: float
    youngs_modulus: float = 1.0
    truncated: bool = False
    note: str = ""

    @property
    def u_over_L(self) -> np.ndarray:
        return self.u / self.L

    @property
    def force_normalized(self) -> np.ndarray:
        return self.force / (self.youngs_modulus * self.L**2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "u", "u_over_L", "force", "force_normalized"])
            for k in range(len(self.u)):
                w.writerow([k, repr(float(self.u[k])), repr(float(self.u_over_L[k])),
                            repr(float(self.force[k])), repr(float(self.force_normalized[k]))])

    @classmethod
    def read_csv(cls, path, L: float, youngs_modulus: float = 1.0) -> "ResponseCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["u"]) for r in rows]), np.array([float(r["force"]) for r in rows]),
                   L, youngs_modulus)


@dataclass
class MacroProblem:
    """Cube of side L: bottom face clamped, top face moved along e3 (lateral
    components held), lateral faces free. ``loading="patch"`` instead
    prescribes the homogeneous uniaxial field on every boundary node."""

    mesh: MacroMesh
    closure: object
    L: float
    displacement: float
    steps: int = 50
    youngs_modulus: float = 1.0
    loading: str = "uniaxial"
    max_iter: int = 30
    tol: float = 1e-8

    def __post_init__(self):
        if self.loading not in ("uniaxial", "patch"):
            raise ValueError(f"unknown loading {self.loading!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if abs(self.displacement) > 0.25 * self.L:
            log.warning("prescribed displacement %.3g exceeds 0.25 L (training range)", self.displacement)

    def constraints(self, t: float):
        """(constrained dof indices, their values) at load fraction t."""
        nodes = self.mesh.nodes
        top = self.mesh.face(2, self.L)
        if self.loading == "patch":
            bnd = np.flatnonzero(np.any((np.abs(nodes) <= 1e-12) | (np.abs(nodes - self.L) <= 1e-12), axis=1))
            vals = np.zeros((len(bnd), 3))
            vals[:, 2] = t * self.displacement * nodes[bnd, 2] / self.L
            return (3 * bnd[:, None] + np.arange(3)).ravel(), vals.ravel(), top
        bottom = self.mesh.face(2, 0.0)
        idx = np.concatenate([3 * bottom[:, None] + np.arange(3), 3 * top[:, None] + np.arange(3)]).ravel()
        vals = np.zeros((len(bottom) + len(top), 3))
        vals[len(bottom):, 2] = t * self.displacement
        return idx, vals.ravel(), top


def _newton(problem: MacroProblem, u, fixed, free):
    """Newton with backtracking on the free residual norm; returns (u, assembly, iterations)."""
    mesh, closure = problem.mesh, problem.closure
    floor = problem.youngs_modulus * problem.L**2 * 1e-6
    asm = assemble(mesh, closure, u)
    history = []
    for it in range(problem.max_iter + 1):
        r_free = asm.residual[free]
        rn = float(np.linalg.norm(r_free))
        f_ext = float(np.linalg.norm(asm.residual[fixed]))
        history.append(rn)
        if rn <= problem.tol * max(f_ext, floor):
            return u, asm, it, history
        if it == problem.max_iter:
            break
        K = asm.tangent[free][:, free].tocsc()
        du = spla.spsolve(K, -r_free)
        alpha = 1.0
        while True:
            trial = u.copy()
            trial[free] += alpha * du
            try:
                cand = assemble(mesh, closure, trial)
                if np.linalg.norm(cand.residual[free]) < rn or alpha < 1e-3:
                    break
            except ElementInversionError:
                if alpha < 1e-3:
                    raise
            alpha *= 0.5
        u, asm = trial, cand
    raise DivergenceError(f"macro Newton did not converge in {problem.max_iter} iterations", rn)


@dataclass
class MacroSolution:
    curve: ResponseCurve
    u: np.ndarray
    out_of_range: int = 0
    histories: list = field(default_factory=list)
    balance: list = field(default_factory=list)  # |sum of all nodal forces| per step


def solve(problem: MacroProblem) -> MacroSolution:
    """Incremental loading in ``steps`` equal increments; the reaction is the
    e3 sum of internal forces on the top-face nodes."""
    n_dof = 3 * len(problem.mesh.nodes)
    u = np.zeros(n_dof)
    us, forces = [0.0], [0.0]
    sol = MacroSolution(None, u)
    truncated, note = False, ""
    for k in range(1, problem.steps + 1):
        t = k / problem.steps
        fixed, vals, top = problem.constraints(t)
        free = np.setdiff1d(np.arange(n_dof), fixed)
        if k == 1:
            # affine guess consistent with the prescribed values
            trial = np.zeros(n_dof)
            trial[2::3] = t * problem.displacement * problem.mesh.nodes[:, 2] / problem.L
        else:
            trial = u * (k / (k - 1))
        trial[fixed] = vals
        try:
            u_new, asm, _, hist = _newton(problem, trial, fixed, free)
        except (DivergenceError, ElementInversionError) as exc:
            truncated, note = True, f"step {k}: {exc}"
            log.warning("macro solve truncated at %s", note)
            break
        u = u_new
        sol.histories.append(hist)
        sol.out_of_range += asm.out_of_range
        sol.balance.append(float(np.abs(asm.residual.reshape(-1, 3).sum(axis=0)).max()))
        us.append(t * problem.displacement)
        forces.append(float(asm.residual[3 * top + 2].sum()))
    if sol.out_of_range:
        log.warning("%d element evaluations outside the training strain range", sol.out_of_range)
    sol.u = u
    sol.curve = ResponseCurve(np.array(us), np.array(forces), problem.L, problem.youngs_modulus,
                              truncated, note)
    return sol


# --------------------------------------------------------------------------
# fully resolved lattice


def tile_lattice(graph: OctantGraph, n: int, radius: float | None = None, rho: float = 0.025,
                 material: BeamMaterial = BeamMaterial(), subdivision: int = 1):
    """n^3 copies of the unit cell merged into one beam structure.

    Beams shared between neighbouring cells merge with their periodic shares
    summed, so boundary struts of the block keep a partial share and the
    block has the same average density as the periodic cell.
    Returns (nodes, beams, radii, share, side length).
    """
    cell = tessellate(graph)
    if radius is None:
        radius = strut_radius(cell, rho)
    cell = cell.with_radius(radius).subdivided(subdivision)
    scale = 1.0 / DEDUPE_TOL
    keys: dict = {}
    nodes, beam_share = [], {}
    for off in itertools.product(range(n), repeat=3):
        shift = np.asarray(off, float) @ cell.cell_vectors
        local = []
        for X in cell.nodes + shift:
            key = tuple(np.round(X * scale).astype(np.int64))
            if key not in keys:
                keys[key] = len(nodes)
                nodes.append(X)
            local.append(keys[key])
        for (a, b), s in zip(cell.beams, cell.share):
            pair = (min(local[a], local[b]), max(local[a], local[b]))
            beam_share[pair] = beam_share.get(pair, 0.0) + float(s)
    pairs = sorted(beam_share)
    share = np.minimum(np.array([beam_share[p] for p in pairs]), 1.0)
    side = float(n * np.linalg.norm(cell.cell_vectors[2]))
    return np.array(nodes), np.array(pairs), np.full(len(pairs), radius), share, side


def fully_resolved(graph: OctantGraph, n: int, u_over_L: float, steps: int = 50,
                   material: BeamMaterial = BeamMaterial(), rho: float = 0.025,
                   radius: float | None = None, subdivision: int = 1,
                   config: SolverConfig = SolverConfig(), imperfection: float = 0.0,
                   seed: int = 0, max_cutbacks: int = 6) -> ResponseCurve:
    """Beam-lattice block under the same platen loading as MacroProblem.

    Bottom nodes are clamped, top nodes move along e3 with all other dofs
    held; everything else is free. ``imperfection`` jitters interior node
    positions by that fraction of the cell size.
    """
    if n < 1:
        raise ValueError("tiling must be at least 1")
    nodes, beams, radii, share, L = tile_lattice(graph, n, radius, rho, material, subdivision)
    z = nodes[:, 2]
    bottom = np.flatnonzero(np.abs(z) <= 1e-9)
    top = np.flatnonzero(np.abs(z - L) <= 1e-9)
    if len(bottom) == 0 or len(top) == 0:
        raise ValueError("lattice does not touch both platens")
    if imperfection > 0:
        rng = np.random.default_rng(seed)
        interior = np.all((nodes > 1e-9) & (nodes < L - 1e-9), axis=1)
        nodes = nodes.copy()
        nodes[interior] += imperfection * (L / n) * rng.uniform(-1, 1, size=(int(interior.sum()), 3))
    platen = np.concatenate([bottom, top])
    fixed = (6 * platen[:, None] + np.arange(6)).ravel()
    model = BeamStructure(nodes, beams, radii, share, material, fixed=fixed)
    top_z = 6 * top + 2
    if abs(u_over_L) > 0.25:
        log.warning("prescribed displacement beyond 0.25 L")

    v = np.zeros(model.n_dofs)
    us, forces = [0.0], [0.0]
    truncated, note = False, ""
    prev_v, prev_u = v.copy(), 0.0

    def advance(v_from, u_from, u_to, depth, slope):
        v0 = v_from + slope * (u_to - u_from) if slope is not None else v_from.copy()
        v0[fixed] = 0.0
        v0[top_z] = u_to
        try:
            return equilibrate(model, v0, None, config).dofs
        except (DivergenceError, ValueError):
            if depth >= max_cutbacks:
                raise
            mid = 0.5 * (u_from + u_to)
            v_mid = advance(v_from, u_from, mid, depth + 1, None)
            return advance(v_mid, mid, u_to, depth + 1, None)

    for k in range(1, steps + 1):
        u_to = k / steps * u_over_L * L
        u_from = us[-1]
        slope = (v - prev_v) / (u_from - prev_u) if k > 1 else None
        try:
            new_v = advance(v, u_from, u_to, 0, slope)
        except (DivergenceError, ValueError) as exc:
            truncated, note = True, f"step {k}: {exc}"
            log.warning("resolved solve truncated at %s", note)
            break
        prev_v, prev_u = v, u_from
        v = new_v
        f = model.node_forces(v, I3)
        us.append(u_to)
        forces.append(float(f[top, 2].sum()))
    return ResponseCurve(np.array(us), np.array(forces), L, material.youngs_modulus, truncated, note)


def compare(reference: ResponseCurve, other: ResponseCurve) -> float:
    """Range-normalized RMSE of the normalized force, on the reference's u/L
    grid (``other`` is linearly interpolated where the grids differ)."""
    xa, ya = reference.u_over_L, reference.force_normalized
    xb, yb = other.u_over_L, other.force_normalized
    lo, hi = max(xa.min(), xb.min()), min(xa.max(), xb.max())
    if lo >= hi and not (len(xa) == len(xb) and np.array_equal(xa, xb)):
        raise ValueError("curves have disjoint displacement ranges")
    if len(xa) == len(xb) and np.array_equal(xa, xb):
        return nrmse(ya, yb)
    sel = (xa >= lo - 1e-15) & (xa <= hi + 1e-15)
    order = np.argsort(xb)
    return nrmse(ya[sel], np.interp(xa[sel], xb[order], yb[order]))
