"""Octant-graph truss unit cells: representation, validation, tessellation,
stochastic perturbation and design-file I/O.

The cubic unit cell [0, 1]^3 is mirror-symmetric across its three mid-planes,
so one octant [0, 1/2]^3 determines it. The octant is described in its own
normalized coordinates c in [0, 1]^3 (cell position X = c / 2) by 14 candidate
nodes:

* vertex nodes v0..v7 (indices 0..7) at the octant corners, index = i + 2j + 4k
  for the corner (i, j, k);
* face nodes f0..f5 (indices 8..13); f(2a) lies on the octant face c_a = 0
  (a cell boundary face) and f(2a+1) on c_a = 1 (a cell mid-plane). The
  fixed-axis coordinate is pinned, the two in-plane coordinates are free.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

N_NODES = 14
N_VERTEX = 8
N_FACE = 6
N_ADJ_FEATURES = N_NODES * (N_NODES + 1) // 2  # 105
N_COORD_FEATURES = 2 * N_FACE  # 12
N_FEATURES = N_ADJ_FEATURES + N_COORD_FEATURES  # 117

DEDUPE_TOL = 1e-9
MIN_STRUT_LENGTH = 0.05

VERTEX_COORDS = np.array(
    [[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=float
)
FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
FACE_VALUE = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
# in-plane axes of each face node, ascending
FACE_INPLANE = np.array([[a for a in range(3) if a != ax] for ax in FACE_AXIS])
NODE_KIND = ("vertex",) * N_VERTEX + ("face",) * N_FACE

_TRIU = np.triu_indices(N_NODES)


class ValidationError(ValueError):
    """Raised when an octant graph violates one of its invariants."""


class TessellationError(ValueError):
    """Raised when an octant graph does not tessellate into a load-bearing cell."""


def face_rest_coords() -> np.ndarray:
    """Face-node positions at the centre of their octant faces."""
    c = np.full((N_FACE, 3), 0.5)
    c[np.arange(N_FACE), FACE_AXIS] = FACE_VALUE
    return c


@dataclass(frozen=True, eq=False)
class OctantGraph:
    """Adjacency (diagonal = node-active flag) and 14 node positions."""

    adjacency: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=bool)
        xyz = np.array(self.coords, dtype=float)
        if adj.shape != (N_NODES, N_NODES) or xyz.shape != (N_NODES, 3):
            raise ValidationError(
                f"expected adjacency {N_NODES}x{N_NODES} and coords {N_NODES}x3, "
                f"got {adj.shape} and {xyz.shape}"
            )
        adj.setflags(write=False)
        xyz.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "coords", xyz)

    def __eq__(self, other):
        if not isinstance(other, OctantGraph):
            return NotImplemented
        return bool(
            np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.coords, other.coords)
        )

    def __hash__(self):
        return hash((self.adjacency.tobytes(), self.coords.tobytes()))

    @property
    def active(self) -> np.ndarray:
        return np.diag(self.adjacency).copy()

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(i.tolist(), j.tolist()))

    def cell_positions(self) -> np.ndarray:
        return self.coords / 2.0

    def face_inplane(self) -> np.ndarray:
        """(6, 2) in-plane coordinates of the face nodes."""
        return self.coords[N_VERTEX + np.arange(N_FACE)[:, None], FACE_INPLANE]


def empty_graph() -> OctantGraph:
    coords = np.vstack([VERTEX_COORDS, face_rest_coords()])
    return OctantGraph(np.zeros((N_NODES, N_NODES), dtype=bool), coords)


def from_edges(
    edges, face_inplane: dict[int, tuple[float, float]] | None = None
) -> OctantGraph:
    """Build a graph from an edge list; endpoints become active.

    ``face_inplane`` maps a face index (0..5) to its two in-plane coordinates.
    """
    adj = np.zeros((N_NODES, N_NODES), dtype=bool)
    for a, b in edges:
        if a == b:
            raise ValidationError(f"self edge on node {a}")
        adj[a, b] = adj[b, a] = True
        adj[a, a] = adj[b, b] = True
    coords = np.vstack([VERTEX_COORDS, face_rest_coords()])
    for f, (p, q) in (face_inplane or {}).items():
        coords[N_VERTEX + f, FACE_INPLANE[f]] = (p, q)
    return OctantGraph(adj, coords)


def _normalized(adj: np.ndarray, coords: np.ndarray) -> OctantGraph:
    """Set active flags from node degree and park inactive face nodes at rest."""
    adj = adj.copy()
    np.fill_diagonal(adj, False)
    deg = adj.sum(axis=1)
    np.fill_diagonal(adj, deg > 0)
    coords = coords.copy()
    rest = face_rest_coords()
    for f in range(N_FACE):
        if deg[N_VERTEX + f] == 0:
            coords[N_VERTEX + f] = rest[f]
    return OctantGraph(adj, coords)


# --------------------------------------------------------------------------
# seed cells

def seed_cells() -> dict[str, OctantGraph]:
    """The six elementary cells the design population starts from."""
    sc = [(0, 1), (0, 2), (0, 4)]  # cell edges
    fcc = [(0, 3), (0, 5), (0, 6)]  # corner to face centre on the boundary faces
    octa = [(3, 5), (3, 6), (5, 6)]  # between face centres
    bcc = [(0, 7)]  # corner to body centre
    return {
        "simple_cubic": from_edges(sc),
        "body_centered": from_edges(bcc),
        "face_centered": from_edges(fcc),
        "octet": from_edges(fcc + octa),
        "octahedron": from_edges(octa),
        "cross_braced": from_edges(sc + fcc),
    }


# --------------------------------------------------------------------------
# encoding

def encode(graph: OctantGraph) -> np.ndarray:
    """117 features: upper-triangular adjacency (row-major, incl. diagonal)
    followed by the in-plane face-node coordinates (f0..f5, ascending axes)."""
    failures = invariant_failures(graph)
    if failures:
        raise ValidationError("; ".join(failures))
    adj = graph.adjacency[_TRIU].astype(float)
    return np.concatenate([adj, graph.face_inplane().ravel()])


def decode(features) -> OctantGraph:
    x = np.asarray(features, dtype=float)
    if x.shape != (N_FEATURES,):
        raise ValidationError(f"expected {N_FEATURES} features, got shape {x.shape}")
    adj = np.zeros((N_NODES, N_NODES), dtype=bool)
    adj[_TRIU] = x[:N_ADJ_FEATURES] > 0.5
    adj = adj | adj.T
    coords = np.vstack([VERTEX_COORDS, face_rest_coords()])
    inplane = x[N_ADJ_FEATURES:].reshape(N_FACE, 2)
    coords[N_VERTEX + np.arange(N_FACE)[:, None], FACE_INPLANE] = inplane
    return OctantGraph(adj, coords)


def design_key(graph: OctantGraph, quantum: float = 1e-6) -> bytes:
    """Uniqueness key: adjacency bits plus quantized face coordinates."""
    bits = np.packbits(graph.adjacency[_TRIU]).tobytes()
    q = np.round(graph.face_inplane().ravel() / quantum).astype(np.int64)
    return bits + q.tobytes()


# --------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, msg: str):
        self.failures.append(msg)


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(a + t * ab - p), t


def invariant_failures(graph: OctantGraph) -> list[str]:
    """Violations of the OctantGraph type invariants (no design checks)."""
    out = []
    adj, xyz = graph.adjacency, graph.coords
    if not np.array_equal(adj, adj.T):
        out.append("adjacency not symmetric")
    if not np.array_equal(xyz[:N_VERTEX], VERTEX_COORDS):
        out.append("vertex node moved from its canonical corner")
    fixed = xyz[N_VERTEX:][np.arange(N_FACE), FACE_AXIS]
    if not np.array_equal(fixed, FACE_VALUE):
        out.append("face node off its face")
    inplane = graph.face_inplane()
    if not np.all(np.isfinite(inplane)) or inplane.min() < 0 or inplane.max() > 1:
        out.append("face node in-plane coordinate outside [0, 1]")
    active = graph.active
    if any(not (active[a] and active[b]) for a, b in graph.edges()):
        out.append("inactive endpoint")
    return out


def validate(
    graph: OctantGraph,
    min_strut_length: float = MIN_STRUT_LENGTH,
    check_mesh: bool = True,
) -> ValidationReport:
    """Check a design for use: type invariants plus geometric and topological
    soundness. The report lists every failure found.

    With ``check_mesh`` the graph is also tessellated and the resulting cell
    must be connected across periodic images and load-bearing in all three
    lattice directions.
    """
    rep = ValidationReport(invariant_failures(graph))
    if rep.failures:
        return rep

    adj = graph.adjacency
    active = graph.active
    deg = (adj & ~np.eye(N_NODES, dtype=bool)).sum(axis=1)
    edges = graph.edges()
    if np.any(active & (deg == 0)):
        rep.fail("isolated active node")
    if not np.any(active[:N_VERTEX] & (deg[:N_VERTEX] > 0)):
        rep.fail("no active vertex node")

    pos = graph.cell_positions()
    for a, b in edges:
        if np.linalg.norm(pos[a] - pos[b]) < min_strut_length:
            rep.fail(f"strut {a}-{b} shorter than {min_strut_length}")
    act = np.flatnonzero(active)
    for a, b in itertools.combinations(act, 2):
        if np.linalg.norm(pos[a] - pos[b]) < min_strut_length:
            rep.fail(f"nodes {a} and {b} closer than {min_strut_length}")
    for a, b in edges:
        for c in act:
            if c in (a, b):
                continue
            d, t = _point_segment_distance(pos[c], pos[a], pos[b])
            if d < 1e-6 and 0.0 < t < 1.0:
                rep.fail(f"strut {a}-{b} overlaps node {c}")
    if rep.failures or not check_mesh:
        return rep
    try:
        tessellate(graph)
    except TessellationError as exc:
        rep.fail(f"disconnected: {exc}")
    return rep


# --------------------------------------------------------------------------
# tessellation

@dataclass(frozen=True, eq=False)
class UnitCellMesh:
    """Beam mesh of the full unit cell.

    ``share`` is the fraction of each beam owned by this cell: a beam lying in
    a boundary face (edge) of the cell is present with its periodic images
    and counts 1/2 (1/4). ``boundary_pairs`` rows are (master, slave, shift)
    with X[slave] = X[master] + shift.
    """

    nodes: np.ndarray
    beams: np.ndarray  # (n, 2) int
    radii: np.ndarray
    share: np.ndarray
    cell_vectors: np.ndarray = field(default_factory=lambda: np.eye(3))
    boundary_pairs: tuple = ()

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.cell_vectors)))

    def lengths(self) -> np.ndarray:
        d = self.nodes[self.beams[:, 1]] - self.nodes[self.beams[:, 0]]
        return np.linalg.norm(d, axis=1)

    def with_radius(self, radius) -> "UnitCellMesh":
        r = np.broadcast_to(np.asarray(radius, dtype=float), (len(self.beams),)).copy()
        return UnitCellMesh(
            self.nodes, self.beams, r, self.share, self.cell_vectors, self.boundary_pairs
        )

    def subdivided(self, parts: int) -> "UnitCellMesh":
        """Split every beam into ``parts`` collinear sub-beams."""
        if parts <= 1:
            return self
        nodes = [x for x in self.nodes]
        beams, radii, share = [], [], []
        for (a, b), r, s in zip(self.beams, self.radii, self.share):
            chain = [a]
            for k in range(1, parts):
                nodes.append(self.nodes[a] + (self.nodes[b] - self.nodes[a]) * k / parts)
                chain.append(len(nodes) - 1)
            chain.append(b)
            for p, q in zip(chain[:-1], chain[1:]):
                beams.append((p, q))
                radii.append(r)
                share.append(s)
        nodes = np.array(nodes)
        return UnitCellMesh(
            nodes,
            np.array(beams, dtype=int),
            np.array(radii),
            np.array(share),
            self.cell_vectors,
            _boundary_pairs(nodes, DEDUPE_TOL),
        )


class _NodeIndex:
    """Tolerance-based point deduplication."""

    def __init__(self, tol: float):
        self.tol = tol
        self.points: list[np.ndarray] = []

    def add(self, p: np.ndarray) -> int:
        for i, q in enumerate(self.points):
            if np.max(np.abs(p - q)) <= self.tol:
                return i
        self.points.append(np.array(p, dtype=float))
        return len(self.points) - 1


def reflections() -> list[np.ndarray]:
    """The 8 mirror maps of the cell, as boolean masks of reflected axes."""
    return [np.array(m, dtype=bool) for m in itertools.product((False, True), repeat=3)]


def reflect(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=float, copy=True)
    out[..., mask] = 1.0 - out[..., mask]
    return out


def _boundary_pairs(nodes: np.ndarray, tol: float) -> tuple:
    pairs = []
    for s, x in enumerate(nodes):
        for ax in range(3):
            if abs(x[ax] - 1.0) <= tol:
                target = x.copy()
                target[ax] = 0.0
                d = np.max(np.abs(nodes - target), axis=1)
                m = int(np.argmin(d))
                if d[m] > tol:
                    raise TessellationError(f"node {s} at {x} has no periodic image")
                shift = np.zeros(3, dtype=int)
                shift[ax] = 1
                pairs.append((m, s, tuple(shift)))
    return tuple(pairs)


def _periodic_rank(n_nodes: int, beams: np.ndarray, pairs) -> tuple[int, int]:
    """Number of connected components of the periodic quotient graph and the
    rank of the lattice of cycle translations of the component of node 0."""
    links = [(int(a), int(b), np.zeros(3, dtype=int)) for a, b in beams]
    links += [(m, s, np.array(sh, dtype=int)) for m, s, sh in pairs]
    adj: list[list] = [[] for _ in range(n_nodes)]
    for a, b, sh in links:
        # position(b) = position(a) + sh in the periodic lift
        adj[a].append((b, sh))
        adj[b].append((a, -sh))
    offset = [None] * n_nodes
    n_comp = 0
    cycles = []
    for start in range(n_nodes):
        if offset[start] is not None:
            continue
        n_comp += 1
        offset[start] = np.zeros(3, dtype=int)
        stack = [start]
        while stack:
            a = stack.pop()
            for b, sh in adj[a]:
                ob = offset[a] + sh
                if offset[b] is None:
                    offset[b] = ob
                    stack.append(b)
                elif n_comp == 1:
                    c = ob - offset[b]
                    if np.any(c):
                        cycles.append(c)
    rank = int(np.linalg.matrix_rank(np.array(cycles))) if cycles else 0
    return n_comp, rank


def tessellate(graph: OctantGraph, dedupe_tol: float = DEDUPE_TOL) -> UnitCellMesh:
    """Mirror the octant into the full cell and attach periodic pairing."""
    deg = (graph.adjacency & ~np.eye(N_NODES, dtype=bool)).sum(axis=1)
    if np.any(graph.active & (deg == 0)):
        raise TessellationError("isolated active node")
    edges = graph.edges()
    if not edges:
        raise TessellationError("graph has no struts")
    pos = graph.cell_positions()
    index = _NodeIndex(dedupe_tol)
    beams = set()
    for mask in reflections():
        for a, b in edges:
            ia = index.add(reflect(pos[a], mask))
            ib = index.add(reflect(pos[b], mask))
            if ia == ib:
                raise TessellationError(f"strut {a}-{b} collapses under reflection")
            beams.add((min(ia, ib), max(ia, ib)))
    nodes = np.array(index.points)
    beams = np.array(sorted(beams), dtype=int)
    pairs = _boundary_pairs(nodes, dedupe_tol)

    # periodic multiplicity of each beam inside the closed cell
    lookup = {}
    for k, (a, b) in enumerate(beams):
        lookup[_beam_key(nodes[a], nodes[b], dedupe_tol)] = k
    share = np.empty(len(beams))
    for k, (a, b) in enumerate(beams):
        count = 0
        for sh in itertools.product((-1, 0, 1), repeat=3):
            if _beam_key(nodes[a] + sh, nodes[b] + sh, dedupe_tol) in lookup:
                count += 1
        share[k] = 1.0 / count

    n_comp, rank = _periodic_rank(len(nodes), beams, pairs)
    if n_comp != 1:
        raise TessellationError(f"{n_comp} disconnected components")
    if rank < 3:
        raise TessellationError(f"structure spans only {rank} lattice directions")
    return UnitCellMesh(nodes, beams, np.zeros(len(beams)), share, np.eye(3), pairs)


def _beam_key(p, q, tol):
    kp = tuple(np.round(np.asarray(p) / (10 * tol)).astype(np.int64))
    kq = tuple(np.round(np.asarray(q) / (10 * tol)).astype(np.int64))
    return (kp, kq) if kp <= kq else (kq, kp)


# --------------------------------------------------------------------------
# stochastic perturbation

@dataclass(frozen=True)
class PerturbParams:
    p_add_edge: float = 0.5
    p_remove_edge: float = 0.3
    p_toggle_face_node: float = 0.3
    jitter_sigma: float = 0.05
    min_strut_length: float = MIN_STRUT_LENGTH
    max_attempts: int = 20

    def __post_init__(self):
        for name in ("p_add_edge", "p_remove_edge", "p_toggle_face_node"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.min_strut_length <= DEDUPE_TOL:
            raise ValueError("min_strut_length must exceed the dedupe tolerance")
        if self.jitter_sigma < 0 or self.max_attempts < 1:
            raise ValueError("jitter_sigma >= 0 and max_attempts >= 1 required")

    @property
    def is_identity(self) -> bool:
        return (
            self.p_add_edge == 0
            and self.p_remove_edge == 0
            and self.p_toggle_face_node == 0
            and self.jitter_sigma == 0
        )


_PAIRS = [(a, b) for a in range(N_NODES) for b in range(a + 1, N_NODES)]


def _propose(graph: OctantGraph, params: PerturbParams, rng) -> tuple[OctantGraph, list[str]]:
    adj = graph.adjacency.copy()
    coords = graph.coords.copy()
    changes = []
    if rng.random() < params.p_add_edge:
        free = [p for p in _PAIRS if not adj[p]]
        if free:
            a, b = free[rng.integers(len(free))]
            adj[a, b] = adj[b, a] = True
            changes.append(f"+edge {a}-{b}")
    if rng.random() < params.p_remove_edge:
        present = [p for p in _PAIRS if adj[p]]
        if present:
            a, b = present[rng.integers(len(present))]
            adj[a, b] = adj[b, a] = False
            changes.append(f"-edge {a}-{b}")
    if rng.random() < params.p_toggle_face_node:
        f = N_VERTEX + int(rng.integers(N_FACE))
        if adj[f].any() and np.any(np.delete(adj[f], f)):
            adj[f, :] = adj[:, f] = False
            changes.append(f"-node {f}")
        else:
            others = [n for n in range(N_NODES) if n != f and (adj[n, n] or n < N_VERTEX)]
            k = 2 if len(others) > 1 else 1
            for n in rng.choice(others, size=k, replace=False):
                adj[f, n] = adj[n, f] = True
            changes.append(f"+node {f}")
    if params.jitter_sigma > 0:
        for f in range(N_FACE):
            i = N_VERTEX + f
            if np.any(np.delete(adj[i], i)):
                ax = FACE_INPLANE[f]
                coords[i, ax] = np.clip(
                    coords[i, ax] + params.jitter_sigma * rng.standard_normal(2), 0.0, 1.0
                )
        changes.append("jitter")
    return _normalized(adj, coords), changes


def perturb(
    graph: OctantGraph, params: PerturbParams, rng: np.random.Generator
) -> tuple[OctantGraph, list[str]]:
    """Randomly edit connectivity and face-node positions.

    Returns the new graph and a change log. Invalid proposals are retried up
    to ``params.max_attempts`` times, after which the input comes back
    unchanged with a log entry saying so.
    """
    if params.is_identity:
        return graph, []
    for attempt in range(params.max_attempts):
        cand, changes = _propose(graph, params, rng)
        if validate(cand, params.min_strut_length).ok:
            return cand, changes
    return graph, [f"identity: {params.max_attempts} attempts exhausted"]


@dataclass(frozen=True)
class DesignRecord:
    id: int
    graph: OctantGraph
    lineage: str


def generate_designs(
    n: int,
    seeds: list[OctantGraph] | dict[str, OctantGraph],
    params: PerturbParams,
    rng: np.random.Generator,
    max_attempts: int | None = None,
) -> list[DesignRecord]:
    """Grow a population of ``n`` unique valid designs from the seed cells.

    Parents are drawn uniformly from the current population. If the attempt
    budget (default 200 n) runs out, the partial list is returned with a
    warning.
    """
    if isinstance(seeds, dict):
        named = list(seeds.items())
    else:
        named = [(f"seed{i}", g) for i, g in enumerate(seeds)]
    if not named:
        raise ValueError("need at least one seed design")
    out: list[DesignRecord] = []
    seen = set()
    for name, g in named:
        report = validate(g, params.min_strut_length)
        if not report.ok:
            raise ValidationError(f"seed {name}: {'; '.join(report.failures)}")
        key = design_key(g)
        if key in seen:
            continue
        seen.add(key)
        out.append(DesignRecord(len(out), g, f"seed:{name}"))
        if len(out) == n:
            return out
    budget = max_attempts if max_attempts is not None else 200 * n
    for _ in range(budget):
        if len(out) >= n:
            break
        parent = out[int(rng.integers(len(out)))]
        child, changes = perturb(parent.graph, params, rng)
        key = design_key(child)
        if key in seen:
            continue
        seen.add(key)
        out.append(DesignRecord(len(out), child, f"{parent.lineage}>{parent.id}"))
    if len(out) < n:
        log.warning("only %d of %d unique designs reached within budget", len(out), n)
    return out


# --------------------------------------------------------------------------
# designs file

DESIGNS_HEADER = "# trusslaw-designs v1"


def _adjacency_hex(graph: OctantGraph) -> str:
    bits = graph.adjacency[_TRIU].astype(int)
    value = int("".join(map(str, bits)), 2)
    return format(value, "027x")


def _adjacency_from_hex(text: str) -> np.ndarray:
    value = int(text, 16)
    bits = [(value >> (N_ADJ_FEATURES - 1 - k)) & 1 for k in range(N_ADJ_FEATURES)]
    adj = np.zeros((N_NODES, N_NODES), dtype=bool)
    adj[_TRIU] = np.array(bits, dtype=bool)
    return adj | adj.T


def write_designs(path, designs: list[DesignRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DESIGNS_HEADER + "\n")
        for d in designs:
            rec = {
                "id": d.id,
                "adjacency": _adjacency_hex(d.graph),
                "coords": [float(v) for v in d.graph.face_inplane().ravel()],
                "lineage": d.lineage,
            }
            fh.write(json.dumps(rec) + "\n")


def read_designs(path) -> list[DesignRecord]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != DESIGNS_HEADER:
            raise ValueError(f"{path}: unsupported designs header {header!r}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            feats = np.concatenate(
                [_adjacency_from_hex(rec["adjacency"])[_TRIU].astype(float), rec["coords"]]
            )
            out.append(DesignRecord(int(rec["id"]), decode(feats), rec["lineage"]))
    return out
