import numpy as np
import pytest

from meshtune.mesh import VolumetricMesh
from meshtune.synthetic import slab_template, three_plate_template, tube_template

import sys
import os

sys.path.insert(0, os.path.dirname(__file__))


def unit_cube() -> VolumetricMesh:
    verts = np.array([
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ], dtype=float)
    cells = np.arange(8, dtype=np.int64).reshape(1, 8)
    return VolumetricMesh(verts, cells, np.zeros(1, dtype=np.int64),
                          np.array([[0, 0, 0]]), ("cube",))


@pytest.fixture
def cube():
    return unit_cube()


@pytest.fixture(scope="session")
def tube():
    return tube_template()


@pytest.fixture(scope="session")
def slab():
    return slab_template()


@pytest.fixture(scope="session")
def three_plates():
    return three_plate_template()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a QR decomposition."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gradcheck(fun, x0: np.ndarray, grad: np.ndarray,
              rng: np.random.Generator, n: int = 25, h: float = 1e-5,
              rtol: float = 1e-5, atol_scale: float = 1e-8) -> None:
    """Compare an analytic gradient against central finite differences on a
    random subset of components.

    Passes when |analytic - fd| <= rtol*|fd| + atol_scale*max(1, max|fd|);
    the absolute guard covers components where central differences bottom out
    at double-precision cancellation noise.
    """
    flat_x = x0.ravel()
    flat_g = np.asarray(grad).ravel()
    assert flat_g.shape == flat_x.shape
    idx = rng.choice(flat_x.size, size=min(n, flat_x.size), replace=False)
    fds = np.empty(len(idx))
    for t, i in enumerate(idx):
        xp = flat_x.copy()
        xp[i] += h
        xm = flat_x.copy()
        xm[i] -= h
        fds[t] = (fun(xp.reshape(x0.shape)) - fun(xm.reshape(x0.shape))) / (2 * h)
    scale = max(1.0, np.abs(fds).max())
    err = np.abs(flat_g[idx] - fds)
    bound = rtol * np.abs(fds) + atol_scale * scale
    worst = (err - bound).argmax()
    assert (err <= bound).all(), (
        f"gradient mismatch at flat index {idx[worst]}: analytic "
        f"{flat_g[idx[worst]]:.12g}, fd {fds[worst]:.12g}")
