"""Input-convex strain-energy network with exact derivatives.

Energy of the 9-vector y of Green-Lagrange strain components:

    z1 = phi(A1 y + b1)
    zi = phi(sigma(Wz_i) z_{i-1} + Wy_i y + bi)      i = 2, 3
    W  = sigma(Wz_out) . z3 + Wy_out . y + b_out

phi = alpha * softplus^2 is convex and non-decreasing and sigma = beta *
softplus keeps the hidden-to-hidden weights positive, so W is convex in y for
any parameter values. Linear correction terms make the model energy- and
stress-free at E = 0.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit

from .kinematics import check_deformation_gradient, green_lagrange, tangent_to_voigt

N_INPUT = 9


# --------------------------------------------------------------------------
# activations


def softplus(x):
    return np.logaddexp(0.0, x)


def phi(x, alpha=1.0):
    return alpha * softplus(x) ** 2


def dphi(x, alpha=1.0):
    return 2.0 * alpha * softplus(x) * expit(x)


def d2phi(x, alpha=1.0):
    s = expit(x)
    return 2.0 * alpha * (s * s + softplus(x) * s * (1.0 - s))


def sigma(x, beta=1.0):
    return beta * softplus(x)


# --------------------------------------------------------------------------
# shapes and parameter sets


@dataclass(frozen=True)
class IcnnShape:
    hidden: tuple = (20, 20, 20)

    def __post_init__(self):
        if len(self.hidden) != 3 or min(self.hidden) < 1:
            raise ValueError("the network has exactly three positive hidden widths")

    @property
    def fc_segments(self) -> tuple:
        h1, h2, h3 = self.hidden
        return (("A1", (h1, N_INPUT)), ("Wz2", (h2, h1)), ("Wz3", (h3, h2)), ("Wz_out", (h3,)))

    @property
    def pt_segments(self) -> tuple:
        _, h2, h3 = self.hidden
        return (("Wy2", (h2, N_INPUT)), ("Wy3", (h3, N_INPUT)), ("Wy_out", (N_INPUT,)))

    @property
    def n_fc(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.fc_segments)

    @property
    def n_pt(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.pt_segments)

    @property
    def n_bias(self) -> int:
        return sum(self.hidden) + 1

    def split_bias(self, b):
        h1, h2, h3 = self.hidden
        return b[..., :h1], b[..., h1 : h1 + h2], b[..., h1 + h2 : h1 + h2 + h3], b[..., -1]

    def layout_hash(self) -> bytes:
        text = ";".join(f"{n}{list(s)}" for n, s in self.fc_segments + self.pt_segments)
        text += f";b[{self.n_bias}]"
        return hashlib.sha256(text.encode()).digest()[:8]


DEFAULT_SHAPE = IcnnShape()


@dataclass(frozen=True, eq=False)
class IcnnWeights:
    """One design's network parameters (raw, before the positivity map)."""

    A1: np.ndarray
    Wz2: np.ndarray
    Wz3: np.ndarray
    Wz_out: np.ndarray
    Wy2: np.ndarray
    Wy3: np.ndarray
    Wy_out: np.ndarray
    b: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("A1", "Wz2", "Wz3", "Wz_out", "Wy2", "Wy3", "Wy_out", "b"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        s = self.shape
        expected = dict(s.fc_segments + s.pt_segments)
        for name, shp in expected.items():
            if getattr(self, name).shape != tuple(shp):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if self.b.shape != (s.n_bias,):
            raise ValueError(f"bias vector must have length {s.n_bias}")

    @property
    def shape(self) -> IcnnShape:
        return IcnnShape((self.A1.shape[0], self.Wz2.shape[0], self.Wz3.shape[0]))

    def __eq__(self, other):
        if not isinstance(other, IcnnWeights):
            return NotImplemented
        return self.alpha == other.alpha and self.beta == other.beta and np.array_equal(
            self.to_vector(), other.to_vector()
        )

    def to_vector(self) -> np.ndarray:
        """Flat packing: A1, Wz2, Wz3, Wz_out, Wy2, Wy3, Wy_out, b."""
        return np.concatenate(
            [np.ravel(getattr(self, n)) for n in ("A1", "Wz2", "Wz3", "Wz_out", "Wy2", "Wy3", "Wy_out", "b")]
        )

    @classmethod
    def from_vector(cls, vec, shape: IcnnShape = DEFAULT_SHAPE, alpha=1.0, beta=1.0) -> "IcnnWeights":
        vec = np.asarray(vec, dtype=np.float64)
        parts, k = {}, 0
        for name, shp in shape.fc_segments + shape.pt_segments + (("b", (shape.n_bias,)),):
            n = int(np.prod(shp))
            parts[name] = vec[k : k + n].reshape(shp)
            k += n
        if k != len(vec):
            raise ValueError(f"vector length {len(vec)} does not match layout ({k})")
        return cls(alpha=alpha, beta=beta, **parts)

    def serialize(self) -> bytes:
        return self.shape.layout_hash() + self.to_vector().astype("<f8").tobytes()

    @classmethod
    def deserialize(cls, data: bytes, shape: IcnnShape = DEFAULT_SHAPE, alpha=1.0, beta=1.0):
        if data[:8] != shape.layout_hash():
            raise ValueError("layout hash mismatch")
        return cls.from_vector(np.frombuffer(data[8:], dtype="<f8"), shape, alpha, beta)

    @classmethod
    def random(cls, rng: np.random.Generator, shape: IcnnShape = DEFAULT_SHAPE, scale=1.0,
               alpha=1.0, beta=1.0) -> "IcnnWeights":
        n = shape.n_fc + shape.n_pt + shape.n_bias
        return cls.from_vector(scale * rng.standard_normal(n), shape, alpha, beta)

    @classmethod
    def zeros(cls, shape: IcnnShape = DEFAULT_SHAPE, alpha=1.0, beta=1.0) -> "IcnnWeights":
        return cls.from_vector(np.zeros(shape.n_fc + shape.n_pt + shape.n_bias), shape, alpha, beta)


# --------------------------------------------------------------------------
# raw network and its derivatives (batched over leading axes of y)


def _forward(w: IcnnWeights, y):
    b1, b2, b3, bo = w.shape.split_bias(w.b)
    P2, P3, Po = sigma(w.Wz2, w.beta), sigma(w.Wz3, w.beta), sigma(w.Wz_out, w.beta)
    a1 = y @ w.A1.T + b1
    z1 = phi(a1, w.alpha)
    a2 = z1 @ P2.T + y @ w.Wy2.T + b2
    z2 = phi(a2, w.alpha)
    a3 = z2 @ P3.T + y @ w.Wy3.T + b3
    z3 = phi(a3, w.alpha)
    out = z3 @ Po + y @ w.Wy_out + bo
    return out, (a1, a2, a3, P2, P3, Po)


def energy_raw(w: IcnnWeights, y) -> np.ndarray:
    return _forward(w, np.asarray(y, float))[0]


def grad_raw(w: IcnnWeights, y):
    """(W, dW/dy) by reverse propagation through the three layers."""
    y = np.asarray(y, float)
    out, (a1, a2, a3, P2, P3, Po) = _forward(w, y)
    d3 = Po * dphi(a3, w.alpha)
    d2 = (d3 @ P3) * dphi(a2, w.alpha)
    d1 = (d2 @ P2) * dphi(a1, w.alpha)
    g = w.Wy_out + d3 @ w.Wy3 + d2 @ w.Wy2 + d1 @ w.A1
    return out, g


def hess_raw(w: IcnnWeights, y):
    """(W, gradient, Hessian) with the Hessian assembled layer by layer as
    sum_l J_l^T diag(mu_l * phi''(a_l)) J_l, J_l = da_l/dy, mu_l = dW/dz_l."""
    y = np.asarray(y, float)
    out, (a1, a2, a3, P2, P3, Po) = _forward(w, y)
    al = w.alpha
    g1, g2, g3 = dphi(a1, al), dphi(a2, al), dphi(a3, al)
    mu3 = np.broadcast_to(Po, a3.shape)
    d3 = mu3 * g3
    mu2 = d3 @ P3
    d2 = mu2 * g2
    mu1 = d2 @ P2
    d1 = mu1 * g1
    grad = w.Wy_out + d3 @ w.Wy3 + d2 @ w.Wy2 + d1 @ w.A1

    J1 = np.broadcast_to(w.A1, a1.shape + (N_INPUT,))
    J2 = np.einsum("jk,...k,...ki->...ji", P2, g1, J1) + w.Wy2
    J3 = np.einsum("jk,...k,...ki->...ji", P3, g2, J2) + w.Wy3
    H = (
        np.einsum("...ki,...k,...kj->...ij", J1, mu1 * d2phi(a1, al), J1)
        + np.einsum("...ki,...k,...kj->...ij", J2, mu2 * d2phi(a2, al), J2)
        + np.einsum("...ki,...k,...kj->...ij", J3, mu3 * d2phi(a3, al), J3)
    )
    return out, grad, H


# --------------------------------------------------------------------------
# corrected constitutive model


@dataclass(frozen=True)
class CorrectionTerms:
    W0: float
    H: np.ndarray


def corrections(w: IcnnWeights) -> CorrectionTerms:
    """Shift and linear term that make W(0) = 0 and S(0) = 0."""
    W_at0, g = grad_raw(w, np.zeros(N_INPUT))
    G = g.reshape(3, 3)
    H = -0.5 * (G + G.T)
    H.setflags(write=False)
    return CorrectionTerms(W0=-float(W_at0), H=H)


@dataclass(frozen=True)
class MaterialTangent:
    S: np.ndarray
    C: np.ndarray  # 6x6 Voigt storage


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


class ConstitutiveModel:
    """Hyperelastic law W(E) = scale * (W_raw(y) + H:E + W0).

    ``scale`` converts the network's normalized units to stress units.
    Energy, stress and tangent accept stacked inputs with leading axes.
    """

    def __init__(self, weights: IcnnWeights, scale: float = 1.0):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.weights = weights
        self.scale = float(scale)
        self.correction = corrections(weights)

    @cached_property
    def key(self) -> bytes:
        return self.weights.serialize() + np.float64(self.scale).tobytes()

    def energy_E(self, E) -> np.ndarray:
        E = np.asarray(E, float)
        y = E.reshape(E.shape[:-2] + (9,))
        lin = np.einsum("...ij,ij->...", E, self.correction.H)
        return self.scale * (energy_raw(self.weights, y) + lin + self.correction.W0)

    def energy(self, F) -> np.ndarray:
        return self.energy_E(green_lagrange(check_deformation_gradient(F)))

    def stress(self, E) -> np.ndarray:
        E = np.asarray(E, float)
        _, g = grad_raw(self.weights, E.reshape(E.shape[:-2] + (9,)))
        G = g.reshape(g.shape[:-1] + (3, 3))
        return self.scale * (_sym(G) + self.correction.H)

    def tangent_full(self, E) -> np.ndarray:
        """Fourth-order dS/dE with minor and major symmetries."""
        E = np.asarray(E, float)
        _, _, Hy = hess_raw(self.weights, E.reshape(E.shape[:-2] + (9,)))
        C = Hy.reshape(Hy.shape[:-2] + (3, 3, 3, 3))
        C = 0.5 * (C + np.swapaxes(C, -3, -4))
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
        return self.scale * C

    def tangent(self, E) -> MaterialTangent:
        return MaterialTangent(self.stress(E), tangent_to_voigt(self.tangent_full(E)))

    def stress_and_tangent(self, E):
        """S and the full fourth-order tangent in one pass."""
        E = np.asarray(E, float)
        _, g, Hy = hess_raw(self.weights, E.reshape(E.shape[:-2] + (9,)))
        G = g.reshape(g.shape[:-1] + (3, 3))
        S = self.scale * (_sym(G) + self.correction.H)
        C = Hy.reshape(Hy.shape[:-2] + (3, 3, 3, 3))
        C = 0.5 * (C + np.swapaxes(C, -3, -4))
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
        return S, self.scale * C

    def pk1(self, F) -> np.ndarray:
        F = check_deformation_gradient(F)
        return F @ self.stress(green_lagrange(F))


def energy(w: IcnnWeights, F):
    return ConstitutiveModel(w).energy(F)


def stress(w: IcnnWeights, E):
    return ConstitutiveModel(w).stress(E)


def tangent(w: IcnnWeights, E) -> MaterialTangent:
    return ConstitutiveModel(w).tangent(E)


def pk1(w: IcnnWeights, F):
    return ConstitutiveModel(w).pk1(F)
