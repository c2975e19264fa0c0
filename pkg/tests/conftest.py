import math

import numpy as np
import pytest

from jetrec.kinematics import FourMomentum


def random_jet(rng, n, spread=0.4, pt_mean=20.0):
    """Massless particles scattered around a random axis."""
    eta0, phi0 = rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi)
    out = []
    for _ in range(n):
        pt = rng.exponential(pt_mean) + 0.01
        eta = eta0 + rng.normal(0, spread)
        phi = math.remainder(phi0 + rng.normal(0, spread), 2 * math.pi)
        px, py, pz = pt * math.cos(phi), pt * math.sin(phi), pt * math.sinh(eta)
        out.append(FourMomentum(math.sqrt(px * px + py * py + pz * pz), px, py, pz))
    return out


def massless(pt, eta, phi):
    px, py, pz = pt * math.cos(phi), pt * math.sin(phi), pt * math.sinh(eta)
    return FourMomentum(math.sqrt(px * px + py * py + pz * pz), px, py, pz)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
