"""Finite-strain kinematics and the deformation-path families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Voigt order used for the 6 stored unique components of symmetric tensors
VOIGT = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_VI = np.array([p[0] for p in VOIGT])
_VJ = np.array([p[1] for p in VOIGT])

UC_RANGE = (-0.25, 0.0)
SS_RANGE = (0.0, 0.5)
EXTENDED_RANGE = (-0.3, 0.0)


class PathRangeError(ValueError):
    pass


def check_deformation_gradient(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape[-2:] != (3, 3):
        raise ValueError(f"deformation gradient must be 3x3, got {F.shape}")
    if np.any(np.linalg.det(F) <= 0):
        raise ValueError("det F must be positive")
    return F


def green_lagrange(F) -> np.ndarray:
    """E = (F^T F - I) / 2, exactly symmetric. Works on stacks (..., 3, 3)."""
    F = np.asarray(F, dtype=float)
    C = np.einsum("...ki,...kj->...ij", F, F)
    E = 0.5 * (C - np.eye(3))
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def strain_vector(E) -> np.ndarray:
    """Row-major 9-vector [E11, E12, E13, E21, ..., E33]."""
    E = np.asarray(E, dtype=float)
    return E.reshape(E.shape[:-2] + (9,))


def to_voigt(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return A[..., _VI, _VJ]


def from_voigt(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    A = np.zeros(v.shape[:-1] + (3, 3))
    A[..., _VI, _VJ] = v
    A[..., _VJ, _VI] = v
    return A


def tangent_to_voigt(C) -> np.ndarray:
    """Fourth-order (..., 3, 3, 3, 3) tangent to (..., 6, 6) storage."""
    C = np.asarray(C)
    return C[..., _VI[:, None], _VJ[:, None], _VI[None, :], _VJ[None, :]]


def tangent_from_voigt(D) -> np.ndarray:
    D = np.asarray(D)
    full = np.zeros(D.shape[:-2] + (3, 3, 3, 3))
    idx = {}
    for I, (i, j) in enumerate(VOIGT):
        idx[(i, j)] = idx[(j, i)] = I
    for i in range(3):
        for j in range(3):
            for k in range(3):
                for l in range(3):
                    full[..., i, j, k, l] = D[..., idx[(i, j)], idx[(k, l)]]
    return full


def invariants(F) -> np.ndarray:
    """(I1bar - 3, I2bar - 3, (J - 1)^2) from the right Cauchy-Green tensor."""
    F = check_deformation_gradient(F)
    C = np.einsum("...ki,...kj->...ij", F, F)
    trC = np.trace(C, axis1=-2, axis2=-1)
    trC2 = np.einsum("...ij,...ji->...", C, C)
    I1 = trC
    I2 = 0.5 * (trC**2 - trC2)
    J = np.sqrt(np.linalg.det(C))
    I1b = J ** (-2.0 / 3.0) * I1
    I2b = J ** (-4.0 / 3.0) * I2
    return np.stack([I1b - 3.0, I2b - 3.0, (J - 1.0) ** 2], axis=-1)


def random_rotation(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniformly distributed rotations via QR of Gaussian matrices."""
    shape = (3, 3) if n is None else (n, 3, 3)
    A = rng.standard_normal(shape)
    Q, R = np.linalg.qr(A)
    d = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    Q = Q * d[..., None, :]
    det = np.linalg.det(Q)
    Q[..., :, 0] *= np.sign(det)[..., None]
    return Q


def polar_rotation(F) -> np.ndarray:
    U, _, Vt = np.linalg.svd(F)
    return U @ Vt


# --------------------------------------------------------------------------
# deformation paths

KINDS = ("UC", "BC", "SS", "TC")


@dataclass(frozen=True)
class DeformationPath:
    """Straight loading path F(t) = I + (t / T) * (F(T) - I).

    ``axes`` are 0-based: UC uses one axis, BC two distinct axes, TC (0, 1, 2)
    and SS the fixed pair (0, 1) meaning F = I + lam e1 (x) e2. ``extended``
    paths may reach -0.3 in compression (extrapolation families).
    """

    kind: str
    axes: tuple
    params: tuple
    steps: int = 100
    extended: bool = False

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(int(a) for a in self.axes))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        self.check()

    def check(self):
        k, ax, lam = self.kind, self.axes, self.params
        if k not in KINDS:
            raise PathRangeError(f"unknown path kind {k!r}")
        expected = {"UC": 1, "BC": 2, "SS": 1, "TC": 3}[k]
        if len(lam) != expected:
            raise PathRangeError(f"{k} needs {expected} loading parameters")
        if k == "SS":
            if ax != (0, 1):
                raise PathRangeError("simple shear is defined on (e1, e2)")
            lo, hi = SS_RANGE
        else:
            if len(ax) != expected or len(set(ax)) != len(ax) or min(ax) < 0 or max(ax) > 2:
                raise PathRangeError(f"bad axes {ax} for {k}")
            lo, hi = EXTENDED_RANGE if self.extended else UC_RANGE
        for p in lam:
            if not lo <= p <= hi:
                raise PathRangeError(f"{k} parameter {p} outside [{lo}, {hi}]")
        if self.steps < 1:
            raise PathRangeError("steps must be positive")

    @property
    def family(self) -> str:
        return self.kind

    def endpoint(self) -> np.ndarray:
        F = np.eye(3)
        if self.kind == "SS":
            F[0, 1] += self.params[0]
        else:
            for a, p in zip(self.axes, self.params):
                F[a, a] += p
        return F

    def descriptor(self) -> str:
        ax = "".join(str(a + 1) for a in self.axes)
        lam = ",".join(repr(p) for p in self.params)
        ext = "x" if self.extended else ""
        return f"{self.kind}{ax}{ext}:{lam}/{self.steps}"

    @classmethod
    def parse(cls, text: str) -> "DeformationPath":
        head, rest = text.split(":", 1)
        lam, steps = rest.split("/")
        extended = head.endswith("x")
        head = head.rstrip("x")
        kind, ax = head[:2], head[2:]
        return cls(
            kind,
            tuple(int(c) - 1 for c in ax),
            tuple(float(v) for v in lam.split(",")),
            int(steps),
            extended,
        )


def path_F(path: DeformationPath, t: int | float) -> np.ndarray:
    """Deformation gradient at step ``t`` (0 <= t <= T) of a path."""
    if not 0 <= t <= path.steps:
        raise PathRangeError(f"step {t} outside [0, {path.steps}]")
    return np.eye(3) + (t / path.steps) * (path.endpoint() - np.eye(3))


def training_paths(steps: int = 100) -> list[DeformationPath]:
    """The fixed 14-path training family.

    Three UC (one per axis), three equi-biaxial BC, one SS, and seven BC with
    unequal endpoints from the grid {-0.25, -0.125, -0.0625}.
    """
    out = [DeformationPath("UC", (a,), (-0.25,), steps) for a in range(3)]
    out += [
        DeformationPath("BC", ax, (-0.25, -0.25), steps)
        for ax in ((0, 1), (0, 2), (1, 2))
    ]
    out.append(DeformationPath("SS", (0, 1), (0.5,), steps))
    extra = [
        ((0, 1), (-0.25, -0.125)),
        ((0, 1), (-0.125, -0.25)),
        ((0, 2), (-0.25, -0.125)),
        ((0, 2), (-0.125, -0.25)),
        ((1, 2), (-0.25, -0.125)),
        ((1, 2), (-0.125, -0.25)),
        ((0, 1), (-0.0625, -0.25)),
    ]
    out += [DeformationPath("BC", ax, lam, steps) for ax, lam in extra]
    return out


def unseen_load_paths(rng: np.random.Generator, steps: int = 100, k: int = 7) -> list[DeformationPath]:
    """Loading scenarios absent from the training family (test_L analog):
    BC with random unequal endpoints, SS to a random amplitude, and TC."""
    out = []
    kinds = ["BC", "BC", "SS"] + ["TC"] * max(k - 3, 0)
    for kind in kinds[:k]:
        if kind == "BC":
            ax = tuple(sorted(rng.choice(3, size=2, replace=False).tolist()))
            lam = tuple(rng.uniform(*UC_RANGE, size=2))
            out.append(DeformationPath("BC", ax, lam, steps))
        elif kind == "SS":
            out.append(DeformationPath("SS", (0, 1), (rng.uniform(0.1, 0.5),), steps))
        else:
            out.append(DeformationPath("TC", (0, 1, 2), tuple(rng.uniform(*UC_RANGE, size=3)), steps))
    return out


def extrapolation_paths(rng: np.random.Generator, k: int, steps: int = 100) -> list[DeformationPath]:
    """Random UC / BC / TC paths with parameters in [-0.3, 0] (test_GL analog)."""
    out = []
    for _ in range(k):
        kind = ("UC", "BC", "TC")[int(rng.integers(3))]
        n = {"UC": 1, "BC": 2, "TC": 3}[kind]
        ax = tuple(sorted(rng.choice(3, size=n, replace=False).tolist()))
        lam = tuple(rng.uniform(*EXTENDED_RANGE, size=n))
        out.append(DeformationPath(kind, ax, lam, steps, extended=True))
    return out
