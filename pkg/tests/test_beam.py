import numpy as np
import pytest

from trusslaw.beam import (BeamMaterial, BeamSection, SingularElementError, element_forces)
from trusslaw.kinematics import random_rotation
from scipy.spatial.transform import Rotation

Xa, Xb = np.zeros(3), np.array([1.0, 0.0, 0.0])
R = 0.05


def test_section_constants():
    s = BeamSection(0.1)
    assert s.area == pytest.approx(np.pi * 0.01, rel=1e-15)
    assert s.inertia == pytest.approx(np.pi * 1e-4 / 4, rel=1e-15)
    assert s.torsion_constant == pytest.approx(np.pi * 1e-4 / 2, rel=1e-15)
    assert BeamMaterial().shear_modulus == pytest.approx(1 / 2.6)
    with pytest.raises(ValueError):
        BeamMaterial(poisson_ratio=0.5)


def test_rigid_motion_is_free(rng):
    A = np.pi * R**2
    for _ in range(10):
        Q = random_rotation(rng)
        c = rng.standard_normal(3)
        rv = Rotation.from_matrix(Q).as_rotvec()
        q = np.concatenate([Q @ Xa - Xa + c, rv, Q @ Xb - Xb + c, rv])
        f, K, e = element_forces(Xa, Xb, R, q)
        assert abs(e) <= 1e-10 * A
        assert np.max(np.abs(f)) <= 1e-10 * A


def test_axial_bar():
    lam = 1e-4
    q = np.zeros(12)
    q[6] = lam
    f, _, _ = element_forces(Xa, Xb, R, q)
    assert abs(f[6] / (np.pi * R**2 * lam) - 1) <= 1e-6
    assert f[0] == pytest.approx(-f[6])


def test_tangent_matches_fd(rng):
    X2 = np.array([0.3, 0.8, -0.2])
    q = 0.05 * rng.standard_normal(12)
    _, K, _ = element_forces(Xa, X2, R, q)
    h = 1e-7
    Kfd = np.zeros((12, 12))
    for j in range(12):
        dq = np.zeros(12)
        dq[j] = h
        Kfd[:, j] = (element_forces(Xa, X2, R, q + dq)[0] - element_forces(Xa, X2, R, q - dq)[0]) / (2 * h)
    assert np.linalg.norm(K - Kfd) / np.linalg.norm(K) <= 1e-5
    assert np.linalg.norm(K - K.T) / np.linalg.norm(K) <= 1e-10


def test_collapsed_element():
    q = np.zeros(12)
    q[6] = -1.0
    with pytest.raises(SingularElementError):
        element_forces(Xa, Xb, R, q)
