"""Four-momentum arithmetic, collider coordinates and the per-node feature map."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ZeroMomentum

ETA_MAX = 10.0
N_FEATURES = 7
FEATURE_NAMES = ("pt", "eta", "phi", "E", "m", "E_frac", "pt_frac")


class FourMomentum(NamedTuple):
    E: float
    px: float
    py: float
    pz: float

    def __add__(self, other):  # type: ignore[override]
        return recombine(self, other)

    @property
    def m2(self) -> float:
        return self.E * self.E - (self.px * self.px + self.py * self.py + self.pz * self.pz)

    @property
    def pt(self) -> float:
        return math.hypot(self.px, self.py)


ZERO = FourMomentum(0.0, 0.0, 0.0, 0.0)


class KinVec(NamedTuple):
    pt: float
    eta: float
    phi: float
    E: float
    m: float
    # set when pt == 0 with pz != 0 and eta was clamped to +-ETA_MAX
    eta_clamped: bool = False


def to_kinvec(p: FourMomentum) -> KinVec:
    E, px, py, pz = p
    if E == 0.0 and px == 0.0 and py == 0.0 and pz == 0.0:
        raise ZeroMomentum("four-momentum has all components zero")
    pt = math.hypot(px, py)
    m = math.sqrt(max(E * E - (px * px + py * py + pz * pz), 0.0))
    clamped = False
    if pt > 0.0:
        eta = math.asinh(pz / pt)
        phi = math.atan2(py, px)
        if phi == -math.pi:
            phi = math.pi
    else:
        phi = 0.0
        if pz == 0.0:
            eta = 0.0
        else:
            eta = math.copysign(ETA_MAX, pz)
            clamped = True
    return KinVec(pt, eta, phi, E, m, clamped)


def to_fourmomentum(k: KinVec) -> FourMomentum:
    return FourMomentum(
        k.E, k.pt * math.cos(k.phi), k.pt * math.sin(k.phi), k.pt * math.sinh(k.eta)
    )


def wrap_phi(dphi: float) -> float:
    """Map an angle difference into (-pi, pi]."""
    if -math.pi < dphi <= math.pi:
        return dphi
    dphi = math.fmod(dphi, 2.0 * math.pi)
    if dphi > math.pi:
        dphi -= 2.0 * math.pi
    elif dphi <= -math.pi:
        dphi += 2.0 * math.pi
    return dphi


def delta_r2(eta_a: float, phi_a: float, eta_b: float, phi_b: float) -> float:
    deta = eta_a - eta_b
    dphi = wrap_phi(phi_a - phi_b)
    return deta * deta + dphi * dphi


def delta_r(a: KinVec, b: KinVec) -> float:
    return math.sqrt(delta_r2(a.eta, a.phi, b.eta, b.phi))


def recombine(a: FourMomentum, b: FourMomentum) -> FourMomentum:
    return FourMomentum(a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])


def momentum_sum(ps: Sequence[FourMomentum]) -> FourMomentum:
    total = ZERO
    for p in ps:
        total = recombine(total, p)
    return total


def node_features(node_p: FourMomentum, jet_totals: FourMomentum) -> np.ndarray:
    """(pt, eta, phi, E, m, E/E_jet, pt/pt_jet) of one tree node."""
    k = to_kinvec(node_p)
    jet_pt = jet_totals.pt
    e_frac = k.E / jet_totals.E if jet_totals.E != 0.0 else 0.0
    pt_frac = k.pt / jet_pt if jet_pt != 0.0 else 0.0
    return np.array([k.pt, k.eta, k.phi, k.E, k.m, e_frac, pt_frac], dtype=np.float64)


def jet_kinematics(p: FourMomentum) -> np.ndarray:
    """(pt, eta, phi, E, m) of a whole jet, the per-jet input of the event recurrence."""
    k = to_kinvec(p)
    return np.array([k.pt, k.eta, k.phi, k.E, k.m], dtype=np.float64)
