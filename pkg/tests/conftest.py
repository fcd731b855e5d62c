import numpy as np
import pytest

from imufill import kinematics as kin


def random_rotations(rng, *shape):
    """Random rotation matrices (det +1) via sign-fixed QR."""
    a = rng.standard_normal(shape + (3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.einsum("...ii->...i", r))[..., None, :]
    neg = np.linalg.det(q) < 0
    if neg.any():
        q[neg, :, 0] *= -1
    return q


@pytest.fixture(scope="session")
def tree():
    return kin.default_tree()
