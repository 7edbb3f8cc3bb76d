"""Corotational Euler-Bernoulli beam element.

The element is written as a scalar energy of its 12 dofs (end displacements
and total rotation vectors); internal force and consistent tangent are the
exact gradient and Hessian of that energy, so the tangent is symmetric by
construction. Rigid motions are removed by measuring the end rotations
relative to a chord-aligned element frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jax import bucket, jax, jnp

MIN_ELEMENT_LENGTH = 1e-12


class SingularElementError(ValueError):
    pass


@dataclass(frozen=True)
class BeamMaterial:
    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")

    @property
    def shear_modulus(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))


@dataclass(frozen=True)
class BeamSection:
    """Solid circular section."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("section radius must be positive")

    @property
    def area(self) -> float:
        return np.pi * self.radius**2

    @property
    def inertia(self) -> float:
        return np.pi * self.radius**4 / 4.0

    @property
    def torsion_constant(self) -> float:
        return np.pi * self.radius**4 / 2.0


def section_constants(radius, material: BeamMaterial, length) -> np.ndarray:
    """Per-element rows (EA, GJ, EI2, EI3, L0) for the energy kernel."""
    r = np.asarray(radius, dtype=float)
    E, G = material.youngs_modulus, material.shear_modulus
    A = np.pi * r**2
    I = np.pi * r**4 / 4.0
    J = np.pi * r**4 / 2.0
    return np.stack(np.broadcast_arrays(E * A, G * J, E * I, E * I, np.asarray(length, float)), axis=-1)


def reference_frame(Xa, Xb) -> np.ndarray:
    """Element frames (columns e1, e2, e3) with e1 along the chord.

    e2 is built from the global axis least aligned with e1, which makes the
    frame a deterministic function of the geometry.
    """
    Xa = np.atleast_2d(np.asarray(Xa, float))
    Xb = np.atleast_2d(np.asarray(Xb, float))
    d = Xb - Xa
    L = np.linalg.norm(d, axis=1)
    if np.any(L < MIN_ELEMENT_LENGTH):
        raise SingularElementError("element length below 1e-12")
    e1 = d / L[:, None]
    helper = np.eye(3)[np.argmin(np.abs(e1), axis=1)]
    e2 = helper - np.sum(helper * e1, axis=1)[:, None] * e1
    e2 /= np.linalg.norm(e2, axis=1)[:, None]
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=2)


# --------------------------------------------------------------------------
# jax kernel


def _rot_coeffs(t2):
    # sin(t)/t and (1 - cos t)/t^2 with a series near zero; the inner where
    # keeps the unused branch finite so gradients stay clean
    small = t2 < 1e-2
    t2s = jnp.where(small, 1.0, t2)
    t = jnp.sqrt(t2s)
    a = jnp.where(
        small,
        1 - t2 / 6 + t2**2 / 120 - t2**3 / 5040 + t2**4 / 362880,
        jnp.sin(t) / t,
    )
    b = jnp.where(
        small,
        0.5 - t2 / 24 + t2**2 / 720 - t2**3 / 40320 + t2**4 / 3628800,
        (1 - jnp.cos(t)) / t2s,
    )
    return a, b


def _skew(v):
    z = jnp.zeros_like(v[0])
    return jnp.array([[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]])


def expmap(theta):
    """Rodrigues rotation matrix of a rotation vector."""
    a, b = _rot_coeffs(theta @ theta)
    K = _skew(theta)
    return jnp.eye(3) + a * K + b * (K @ K)


def _local_rotation(Re, T):
    # rotation of T relative to Re as a vector, 2*tan(phi/2)*axis
    M = Re.T @ T
    ax = jnp.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return ax / (1.0 + jnp.trace(M))


def element_energy(q, Xa, Xb, R0, k):
    """Strain energy of one element.

    q  : 12 dofs (u_a, theta_a, u_b, theta_b), theta are total rotation vectors
    R0 : reference element frame, k = (EA, GJ, EI2, EI3, L0)
    """
    EA, GJ, EI2, EI3, L0 = k[0], k[1], k[2], k[3], k[4]
    xa = Xa + q[0:3]
    xb = Xb + q[6:9]
    Ta = expmap(q[3:6]) @ R0
    Tb = expmap(q[9:12]) @ R0
    d = xb - xa
    l = jnp.sqrt(d @ d)
    e1 = d / l
    t2 = 0.5 * (Ta[:, 1] + Tb[:, 1])
    e3 = jnp.cross(e1, t2)
    e3 = e3 / jnp.sqrt(e3 @ e3)
    e2 = jnp.cross(e3, e1)
    Re = jnp.stack([e1, e2, e3], axis=1)
    ta = 2.0 * _local_rotation(Re, Ta)
    tb = 2.0 * _local_rotation(Re, Tb)
    u = (l * l - L0 * L0) / (l + L0)
    return (
        0.5 * EA / L0 * u * u
        + 0.5 * GJ / L0 * (tb[0] - ta[0]) ** 2
        + 2.0 * EI3 / L0 * (ta[2] ** 2 + ta[2] * tb[2] + tb[2] ** 2)
        + 2.0 * EI2 / L0 * (ta[1] ** 2 + ta[1] * tb[1] + tb[1] ** 2)
    )


def _fgh(q, Xa, Xb, R0, k):
    return (
        element_energy(q, Xa, Xb, R0, k),
        jax.grad(element_energy)(q, Xa, Xb, R0, k),
        jax.hessian(element_energy)(q, Xa, Xb, R0, k),
    )


def _fg(q, Xa, Xb, R0, k):
    return element_energy(q, Xa, Xb, R0, k), jax.grad(element_energy)(q, Xa, Xb, R0, k)


_batched_fgh = jax.jit(jax.vmap(_fgh))
_batched_fg = jax.jit(jax.vmap(_fg))
_batched_e = jax.jit(jax.vmap(element_energy))


class ElementSet:
    """A fixed set of elements evaluated in one padded, jitted call.

    Padding rows are zero-stiffness copies of a unit element, so they add
    nothing; padding to power-of-two sizes bounds recompilation.
    """

    def __init__(self, Xa, Xb, k):
        Xa = np.asarray(Xa, float).reshape(-1, 3)
        Xb = np.asarray(Xb, float).reshape(-1, 3)
        k = np.asarray(k, float).reshape(-1, 5)
        self.n = len(Xa)
        size = bucket(max(self.n, 1))
        pad = size - self.n
        R0 = reference_frame(Xa, Xb) if self.n else np.zeros((0, 3, 3))
        self.Xa = np.concatenate([Xa, np.zeros((pad, 3))])
        self.Xb = np.concatenate([Xb, np.tile([1.0, 0.0, 0.0], (pad, 1))])
        self.R0 = np.concatenate([R0, np.tile(np.eye(3), (pad, 1, 1))])
        self.k = np.concatenate([k, np.tile([0.0, 0.0, 0.0, 0.0, 1.0], (pad, 1))])
        self._pad = pad

    def _q(self, q):
        q = np.asarray(q, float).reshape(self.n, 12)
        return np.concatenate([q, np.zeros((self._pad, 12))])

    def _check(self, q):
        d = self.Xb[: self.n] + q[: self.n, 6:9] - self.Xa[: self.n] - q[: self.n, 0:3]
        L = np.linalg.norm(d, axis=1)
        if self.n and np.min(L) < MIN_ELEMENT_LENGTH:
            raise SingularElementError(f"element {int(np.argmin(L))} collapsed")

    def energy(self, q) -> np.ndarray:
        qp = self._q(q)
        self._check(qp)
        e = _batched_e(qp, self.Xa, self.Xb, self.R0, self.k)
        return np.asarray(e)[: self.n]

    def energy_grad(self, q):
        qp = self._q(q)
        self._check(qp)
        e, g = _batched_fg(qp, self.Xa, self.Xb, self.R0, self.k)
        return np.asarray(e)[: self.n], np.asarray(g)[: self.n]

    def energy_grad_hess(self, q):
        qp = self._q(q)
        self._check(qp)
        e, g, H = _batched_fgh(qp, self.Xa, self.Xb, self.R0, self.k)
        return np.asarray(e)[: self.n], np.asarray(g)[: self.n], np.asarray(H)[: self.n]


def element_forces(Xa, Xb, radius, q, material: BeamMaterial = BeamMaterial()):
    """Internal force 12-vector, 12x12 tangent and strain energy of one beam."""
    Xa = np.asarray(Xa, float)
    Xb = np.asarray(Xb, float)
    L0 = np.linalg.norm(Xb - Xa)
    if L0 < MIN_ELEMENT_LENGTH:
        raise SingularElementError("element length below 1e-12")
    k = section_constants(radius, material, L0)
    e, g, H = ElementSet(Xa[None], Xb[None], k[None]).energy_grad_hess(np.asarray(q, float)[None])
    return g[0], H[0], float(e[0])
