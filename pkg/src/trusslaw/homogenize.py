"""Periodic homogenization of beam lattices under an average deformation.

Node positions are x = F X + w with a periodic fluctuation w and periodic
total rotations. Periodicity is imposed by master-slave elimination: every
node maps to a representative node inside the half-open cell and carries
that node's fluctuation and rotation dofs. The three translations of the
first representative are held fixed to remove rigid translation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .beam import BeamMaterial, ElementSet, section_constants
from .design import DEDUPE_TOL, UnitCellMesh
from .kinematics import DeformationPath, path_F, polar_rotation

log = logging.getLogger(__name__)

DEFAULT_RHO = 0.025
_DENSE_LIMIT = 2500
_WATCHDOG_STEPS = 12
_WATCHDOG_RATIO = 1e4


class DivergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.message = message
        self.residual = residual


class PathError(RuntimeError):
    pass


def strut_radius(mesh: UnitCellMesh, rho: float) -> float:
    """Radius giving relative density ``rho`` for a uniform circular section.

    Lengths are weighted by the periodic share of each beam; node overlap is
    ignored.
    """
    if rho < 0:
        raise ValueError("relative density must be non-negative")
    total = float(np.sum(mesh.share * mesh.lengths())) if len(mesh.beams) else 0.0
    if total <= 0:
        raise ValueError("total strut length is zero")
    return float(np.sqrt(rho * mesh.volume / (np.pi * total)))


@dataclass(frozen=True)
class SolverConfig:
    tol_rel: float = 1e-10
    tol_abs: float = 1e-12
    max_iter: int = 60
    max_halvings: int = 20
    subdivision: int = 1
    perturbation: float = 1e-8
    seed: int = 0
    max_cutbacks: int = 6
    max_escapes: int = 8
    check_stability: bool = True


# --------------------------------------------------------------------------
# assembled beam structure


class BeamStructure:
    """Beam elements whose node dofs are mapped onto a reduced dof vector.

    node_map[i] gives the reduced node whose fluctuation and rotation node i
    shares. Reduced dofs listed in ``fixed`` keep whatever value the dof
    vector holds, which is how prescribed displacements enter.
    """

    def __init__(self, nodes, beams, radii, share, material: BeamMaterial,
                 node_map=None, fixed=()):
        self.nodes = np.asarray(nodes, float)
        self.beams = np.asarray(beams, int).reshape(-1, 2)
        self.share = np.asarray(share, float)
        self.radii = np.asarray(radii, float)
        self.material = material
        n = len(self.nodes)
        self.node_map = np.arange(n) if node_map is None else np.asarray(node_map, int)
        self.n_reduced_nodes = int(self.node_map.max()) + 1 if n else 0
        self.n_dofs = 6 * self.n_reduced_nodes
        Xa = self.nodes[self.beams[:, 0]]
        Xb = self.nodes[self.beams[:, 1]]
        L0 = np.linalg.norm(Xb - Xa, axis=1)
        self.elements = ElementSet(Xa, Xb, section_constants(self.radii, material, L0))

        fixed_mask = np.zeros(self.n_dofs, dtype=bool)
        fixed_mask[list(fixed)] = True
        self.fixed_mask = fixed_mask
        self.free = np.flatnonzero(~fixed_mask)
        free_index = -np.ones(self.n_dofs, dtype=int)
        free_index[self.free] = np.arange(len(self.free))

        rn = self.node_map[self.beams]  # (ne, 2)
        dofs = (6 * rn[:, :, None] + np.arange(6)[None, None, :]).reshape(-1, 12)
        self.elem_dofs = dofs
        fi = free_index[dofs]
        rows = np.broadcast_to(fi[:, :, None], (len(dofs), 12, 12))
        cols = np.broadcast_to(fi[:, None, :], (len(dofs), 12, 12))
        keep = (rows >= 0) & (cols >= 0)
        self._keep = keep
        self._rows = rows[keep]
        self._cols = cols[keep]

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def stiffness_scale(self) -> float:
        return self.material.youngs_modulus * float(np.pi * np.max(self.radii) ** 2)

    def element_dofs(self, v, F) -> np.ndarray:
        """Element dof vectors (ne, 12) from reduced dofs v under affine map F."""
        V = v.reshape(-1, 6)
        U = self.nodes @ (F - np.eye(3)).T + V[self.node_map, :3]
        T = V[self.node_map, 3:]
        a, b = self.beams[:, 0], self.beams[:, 1]
        return np.concatenate([U[a], T[a], U[b], T[b]], axis=1)

    def energy(self, v, F) -> float:
        e = self.elements.energy(self.element_dofs(v, F))
        return float(np.dot(self.share, e))

    def gradient(self, v, F):
        e, g = self.elements.energy_grad(self.element_dofs(v, F))
        g = g * self.share[:, None]
        r = np.bincount(self.elem_dofs.ravel(), g.ravel(), minlength=self.n_dofs)
        return float(np.dot(self.share, e)), r

    def system(self, v, F):
        """Energy, full reduced gradient and free-free sparse tangent."""
        e, g, H = self.elements.energy_grad_hess(self.element_dofs(v, F))
        g = g * self.share[:, None]
        r = np.bincount(self.elem_dofs.ravel(), g.ravel(), minlength=self.n_dofs)
        H = H * self.share[:, None, None]
        n = self.n_free
        K = sp.coo_matrix((H[self._keep], (self._rows, self._cols)), shape=(n, n)).tocsc()
        return float(np.dot(self.share, e)), r, K

    def node_forces(self, v, F) -> np.ndarray:
        """Internal translational force on every (unreduced) node."""
        _, g = self.elements.energy_grad(self.element_dofs(v, F))
        g = g * self.share[:, None]
        f = np.zeros((len(self.nodes), 3))
        np.add.at(f, self.beams[:, 0], g[:, 0:3])
        np.add.at(f, self.beams[:, 1], g[:, 6:9])
        return f


def _periodic_map(nodes, tol=DEDUPE_TOL):
    """Representative node and integer lattice shift of every node."""
    reduced = nodes.copy()
    reduced[np.abs(reduced - 1.0) <= tol] = 0.0
    shift = np.rint(nodes - reduced).astype(int)
    reps = np.flatnonzero(np.all(shift == 0, axis=1))
    rep_index = {int(r): k for k, r in enumerate(reps)}
    node_map = np.empty(len(nodes), dtype=int)
    for i, y in enumerate(reduced):
        d = np.max(np.abs(nodes[reps] - y), axis=1)
        k = int(np.argmin(d))
        if d[k] > 10 * tol:
            raise ValueError(f"node {i} has no periodic representative")
        node_map[i] = rep_index[int(reps[k])]
    return node_map, shift


class CellModel(BeamStructure):
    """Periodic unit cell ready for homogenization."""

    def __init__(self, mesh: UnitCellMesh, material: BeamMaterial = BeamMaterial(),
                 rho: float = DEFAULT_RHO, radius: float | None = None, subdivision: int = 1):
        if radius is None:
            radius = strut_radius(mesh, rho)
        mesh = mesh.with_radius(radius).subdivided(subdivision)
        self.mesh = mesh
        self.radius = float(radius)
        node_map, shift = _periodic_map(mesh.nodes)
        self.shift = shift
        self.lattice_offset = shift @ mesh.cell_vectors
        super().__init__(mesh.nodes, mesh.beams, mesh.radii, mesh.share, material,
                         node_map=node_map, fixed=(0, 1, 2))
        self.volume = mesh.volume


# --------------------------------------------------------------------------
# states and results


@dataclass
class CellState:
    dofs: np.ndarray
    F: np.ndarray
    converged: bool = False
    energy: float = 0.0
    iterations: int = 0
    residual: float = 0.0
    perturbed: bool = False
    stable: bool | None = None
    log: list = field(default_factory=list)

    @classmethod
    def zero(cls, model: BeamStructure) -> "CellState":
        return cls(np.zeros(model.n_dofs), np.eye(3), converged=True)


@dataclass(frozen=True)
class HomogenizedPoint:
    W: float
    P: np.ndarray
    S: np.ndarray
    F: np.ndarray
    step: int = 0
    skew: float = 0.0


@dataclass
class PathResult:
    path: DeformationPath
    points: list
    failed_steps: list
    perturbed_steps: list = field(default_factory=list)

    @property
    def perturbations(self) -> int:
        return len(self.perturbed_steps)

    @property
    def truncated(self) -> bool:
        return bool(self.failed_steps)


# --------------------------------------------------------------------------
# nonlinear solve


def _tolerance(model: BeamStructure, config: SolverConfig) -> float:
    return max(config.tol_rel * model.stiffness_scale, config.tol_abs)


def _factor(K):
    """Sparse LU with diagonal pivoting; also reports positive definiteness."""
    lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    d = lu.U.diagonal()
    return lu, bool(np.all(d > 0))


def _is_positive_definite(K) -> bool:
    if K.shape[0] <= _DENSE_LIMIT:
        try:
            scipy.linalg.cho_factor(K.toarray(), check_finite=False)
            return True
        except np.linalg.LinAlgError:
            return False
    try:
        return _factor(K)[1]
    except RuntimeError:
        return False


def _lowest_mode(K):
    if K.shape[0] <= _DENSE_LIMIT:
        w, V = np.linalg.eigh(K.toarray())
        return w[0], V[:, 0]
    # large systems: any negative-curvature mode will do, and shift-invert just
    # below zero finds the one nearest the instability in a few iterations
    sigma = -1e-6 * float(np.max(np.abs(K.diagonal())) or 1.0)
    w, V = spla.eigsh(K.tocsc(), k=1, sigma=sigma, which="LM", tol=1e-8)
    if w[0] < 0:
        return w[0], V[:, 0]
    try:
        w2, V2 = spla.eigsh(K, k=1, which="SA", tol=1e-8, maxiter=2000)
    except spla.ArpackNoConvergence:
        return w[0], V[:, 0]
    return w2[0], V2[:, 0]


def _seeded_direction(n: int, seed: int) -> np.ndarray:
    p = np.random.default_rng(seed).standard_normal(n)
    return p / np.max(np.abs(p))


def _newton(model, F, v, config, tol, state_log):
    """Damped Newton on the residual; returns (v, iterations, residual, K).

    Near-neutral modes (e.g. the free orientation of a buckled circular
    strut) make the residual non-monotone even when Newton converges
    quadratically, so a bounded number of full steps that raise the residual
    by less than ``_WATCHDOG_RATIO`` are accepted. Beyond that budget a
    rejected step is retried with a diagonal shift (K + mu I) and finally by
    halving.
    """
    free = model.free
    perturbed_once = False
    e, r, K = model.system(v, F)
    rn = np.linalg.norm(r[free])
    scale = float(np.max(np.abs(K.diagonal()))) if K.shape[0] else 1.0
    eye = sp.identity(K.shape[0], format="csc")
    mu = 0.0
    it = 0
    budget = _WATCHDOG_STEPS
    while rn > tol:
        if it >= config.max_iter:
            raise DivergenceError(f"Newton did not converge in {config.max_iter} iterations", rn)
        it += 1
        try:
            d = _factor(K + mu * eye if mu else K)[0].solve(-r[free])
            if not np.all(np.isfinite(d)):
                raise RuntimeError("non-finite Newton step")
        except RuntimeError:
            if perturbed_once:
                raise DivergenceError("singular tangent after perturbation", rn)
            perturbed_once = True
            state_log.append("singular tangent: seeded perturbation")
            v = v.copy()
            v[free] += config.perturbation * _seeded_direction(len(free), config.seed)
            e, r, K = model.system(v, F)
            rn = np.linalg.norm(r[free])
            continue
        trial = v.copy()
        trial[free] += d
        rtn = _residual_norm(model, trial, F)
        if rn <= rtn < _WATCHDOG_RATIO * rn and budget > 0 and mu == 0.0:
            budget -= 1
            v = trial
            e, r, K = model.system(v, F)
            rn = np.linalg.norm(r[free])
            continue
        if rtn >= rn and mu < 1e-3 * scale:
            mu = max(10.0 * mu, 1e-10 * scale)
            continue
        alpha = 1.0
        for _ in range(config.max_halvings):
            if rtn < rn:
                break
            alpha *= 0.5
            trial = v.copy()
            trial[free] += alpha * d
            rtn = _residual_norm(model, trial, F)
        if not np.isfinite(rtn):
            raise DivergenceError("line search failed", rn)
        if rtn < rn:
            mu = 0.0 if mu <= 1e-10 * scale else 0.1 * mu
        v = trial
        e, r, K = model.system(v, F)
        rn = np.linalg.norm(r[free])
    return v, it, rn, K


def _residual_norm(model, v, F) -> float:
    try:
        return float(np.linalg.norm(model.gradient(v, F)[1][model.free]))
    except ValueError:
        return float("inf")


def _minimize_energy(model, F, v, config, tol, state_log):
    """Leave an unstable equilibrium along the lowest mode, then descend the
    energy with a shifted Newton method until the tangent is positive
    definite."""
    free = model.free
    e, r, K = model.system(v, F)
    lam, mode = _lowest_mode(K)
    p = _seeded_direction(len(free), config.seed)
    sign = 1.0 if np.dot(mode, p) >= 0 else -1.0
    mode = sign * mode / np.max(np.abs(mode))
    state_log.append(f"unstable equilibrium (lowest eigenvalue {lam:.3e}): branch switch")

    # expanding search along the mode
    best_a, best_e = 0.0, e
    a = 1e-5
    for _ in range(30):
        trial = v.copy()
        trial[free] += a * mode
        try:
            et = model.energy(trial, F)
        except ValueError:
            break
        if et < best_e:
            best_a, best_e = a, et
            a *= 2.0
        else:
            break
    if best_a > 0:
        v = v.copy()
        v[free] += best_a * mode

    diag_scale = float(np.max(np.abs(K.diagonal()))) or 1.0
    for _ in range(4 * config.max_iter):
        e, r, K = model.system(v, F)
        g = r[free]
        if np.linalg.norm(g) <= tol:
            break
        mu = 0.0
        while True:
            Kmu = K + mu * sp.identity(K.shape[0], format="csc") if mu else K
            if _is_positive_definite(Kmu):
                break
            mu = max(2.0 * mu, 1e-8 * diag_scale)
        if mu == 0.0 and np.linalg.norm(g) < 1e3 * tol:
            break
        d = _factor(Kmu)[0].solve(-g)
        slope = float(np.dot(g, d))
        alpha = 1.0
        moved = False
        for _ in range(config.max_halvings + 1):
            trial = v.copy()
            trial[free] += alpha * d
            try:
                et = model.energy(trial, F)
            except ValueError:
                et = np.inf
            if et <= e + 1e-4 * alpha * slope:
                moved = True
                break
            alpha *= 0.5
        if not moved:
            # energy changes are at round-off; hand over to residual Newton
            break
        v = trial
        if mu == 0.0 and alpha == 1.0:
            break
    return v


def _solve_at(model, F, v0, config, state_log):
    tol = _tolerance(model, config)
    v, it, rn, K = _newton(model, F, v0, config, tol, state_log)
    stable = None
    if config.check_stability and model.n_free:
        stable = _is_positive_definite(K)
        escapes = 0
        while not stable and escapes < config.max_escapes:
            escapes += 1
            v = _minimize_energy(model, F, v, config, tol, state_log)
            v, it2, rn, K = _newton(model, F, v, config, tol, state_log)
            it += it2
            stable = _is_positive_definite(K)
    return v, it, rn, stable


def equilibrate(model: BeamStructure, v0, F=None, config: SolverConfig = SolverConfig()) -> CellState:
    """Equilibrium from the start vector ``v0``; fixed dofs keep their values.

    No cutbacks: callers that drive the structure through prescribed dofs
    split their own increments.
    """
    F = np.eye(3) if F is None else np.asarray(F, float)
    state_log: list = []
    v, it, rn, stable = _solve_at(model, F, np.asarray(v0, float).copy(), config, state_log)
    return CellState(
        dofs=v, F=F.copy(), converged=True, energy=model.energy(v, F), iterations=it,
        residual=rn, perturbed=any("perturbation" in m or "branch" in m for m in state_log),
        stable=stable, log=state_log,
    )


def initial_guess(model: BeamStructure, F) -> np.ndarray:
    """Zero fluctuation with every node rotated by the polar rotation of F."""
    v = np.zeros(model.n_dofs).reshape(-1, 6)
    R = polar_rotation(F)
    if not np.allclose(R, np.eye(3), atol=1e-15):
        v[:, 3:] = Rotation.from_matrix(R).as_rotvec()
    return v.ravel()


def solve_step(model: BeamStructure, F, prior: CellState | None = None,
               config: SolverConfig = SolverConfig()) -> CellState:
    """Equilibrium under average deformation F, warm-started from ``prior``.

    A step that fails from the warm start is retried by bisecting the
    increment from the prior deformation (intermediate states are not
    returned).
    """
    F = np.asarray(F, float)
    if np.linalg.det(F) <= 0:
        raise ValueError("det F must be positive")
    if prior is None:
        prior = CellState.zero(model)
    v0 = prior.dofs
    if not np.any(v0) and np.array_equal(prior.F, np.eye(3)):
        v0 = initial_guess(model, F)
    state_log: list = []

    def attempt(F_from, v_from, F_to, depth):
        try:
            return _solve_at(model, F_to, v_from, config, state_log)
        except (DivergenceError, ValueError) as exc:
            if depth >= config.max_cutbacks:
                raise DivergenceError(f"step failed after {depth} cutbacks: {getattr(exc, 'message', exc)}",
                                      getattr(exc, "residual", float("nan")))
            state_log.append(f"cutback level {depth + 1}")
            F_mid = 0.5 * (F_from + F_to)
            v_mid, it1, _, _ = attempt(F_from, v_from, F_mid, depth + 1)
            v, it2, rn, stable = attempt(F_mid, v_mid, F_to, depth + 1)
            return v, it1 + it2, rn, stable

    v, it, rn, stable = attempt(prior.F, v0, F, 0)
    return CellState(
        dofs=v,
        F=F.copy(),
        converged=True,
        energy=model.energy(v, F),
        iterations=it,
        residual=rn,
        perturbed=any("perturbation" in m or "branch" in m for m in state_log),
        stable=stable,
        log=state_log,
    )


def effective_response(state: CellState, model: CellModel, step: int = 0) -> HomogenizedPoint:
    """Volume-averaged energy and stresses of a converged cell state.

    P is the sum of slave-node reaction forces times their lattice offsets,
    which equals the derivative of the cell energy with respect to F.
    """
    if not state.converged:
        raise ValueError("state is not converged")
    F = state.F
    W = state.energy / model.volume
    f = model.node_forces(state.dofs, F)
    P = f.T @ model.lattice_offset / model.volume
    A = np.linalg.solve(F, P)
    S = 0.5 * (A + A.T)
    skew = float(np.linalg.norm(A - A.T) / 2)
    return HomogenizedPoint(W=W, P=P, S=S, F=F.copy(), step=step, skew=skew)


def run_path(model: CellModel, path: DeformationPath,
             config: SolverConfig = SolverConfig()) -> PathResult:
    """Homogenized response at steps t = 1..T with warm starts."""
    state = CellState.zero(model)
    points, failed, perturbed = [], [], []
    for t in range(1, path.steps + 1):
        F = path_F(path, t)
        try:
            state = solve_step(model, F, state, config)
        except DivergenceError as exc:
            if t == 1:
                raise PathError(f"first step of {path.descriptor()} diverged: {exc}") from exc
            log.warning("path %s truncated at step %d: %s", path.descriptor(), t, exc)
            failed = list(range(t, path.steps + 1))
            break
        if state.perturbed:
            perturbed.append(t)
        points.append(effective_response(state, model, t))
    return PathResult(path, points, failed, perturbed)
