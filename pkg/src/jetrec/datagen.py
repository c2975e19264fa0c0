"""Toy two-prong vs one-prong jet generator and the JSONL dataset format.

Signal jets carry two collimated prongs separated by an opening angle drawn
per jet; background jets are a single broader core. All constituents are
massless. One JSON object per line::

    {"label": 1, "event_id": 3, "particles": [[E, px, py, pz], ...]}
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .kinematics import FourMomentum, delta_r2


@dataclass(frozen=True)
class JetRecord:
    label: int
    particles: tuple[FourMomentum, ...]
    event_id: Optional[int] = None


@dataclass
class GenConfig:
    n_jets: int = 1000
    n_min: int = 8
    n_max: int = 40
    prong_dr_min: float = 0.4
    prong_dr_max: float = 1.0
    signal_smear: float = 0.1
    background_smear: float = 0.2
    pt_mean: float = 20.0
    share_width: float = 0.2
    axis_eta_max: float = 1.0
    # >0 groups consecutive same-label jets into events of this size
    jets_per_event: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_jets < 0:
            raise ConfigError("n_jets: must be >= 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError("n_min/n_max: need 1 <= n_min <= n_max")
        if not 0 < self.prong_dr_min <= self.prong_dr_max:
            raise ConfigError("prong_dr_min/prong_dr_max: need 0 < min <= max")
        for key in ("signal_smear", "background_smear", "pt_mean"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be > 0")
        if not 0 <= self.share_width < 0.5:
            raise ConfigError("share_width: must be in [0, 0.5)")
        if self.jets_per_event < 0:
            raise ConfigError("jets_per_event: must be >= 0")


MIN_DR = 1e-6


def _massless(pt: float, eta: float, phi: float) -> FourMomentum:
    px, py, pz = pt * math.cos(phi), pt * math.sin(phi), pt * math.sinh(eta)
    return FourMomentum(math.sqrt(px * px + py * py + pz * pz), px, py, pz)


def _place(rng, axes, smear, n, taken):
    """Draw n (eta, phi) directions around ``axes``, resampling near-coincident ones."""
    out = []
    for k in range(n):
        eta0, phi0 = axes[k]
        while True:
            eta = eta0 + rng.normal(0.0, smear)
            phi = math.remainder(phi0 + rng.normal(0.0, smear), 2.0 * math.pi)
            if all(delta_r2(eta, phi, e, p) >= MIN_DR * MIN_DR for e, p in taken):
                break
        taken.append((eta, phi))
        out.append((eta, phi))
    return out


def gen_jet(label: int, cfg: GenConfig, rng: np.random.Generator) -> JetRecord:
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    eta0 = rng.uniform(-cfg.axis_eta_max, cfg.axis_eta_max)
    phi0 = rng.uniform(-math.pi, math.pi)
    pts = rng.exponential(cfg.pt_mean, size=n) + 1e-3
    if label == 1 and n >= 2:
        dr = rng.uniform(cfg.prong_dr_min, cfg.prong_dr_max)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        half = 0.5 * dr
        a1 = (eta0 + half * math.cos(theta), phi0 + half * math.sin(theta))
        a2 = (eta0 - half * math.cos(theta), phi0 - half * math.sin(theta))
        share = rng.uniform(0.5 - cfg.share_width, 0.5 + cfg.share_width)
        n1 = min(max(int(round(share * n)), 1), n - 1)
        total = pts.sum()
        pts[:n1] *= share * total / pts[:n1].sum()
        pts[n1:] *= (1.0 - share) * total / pts[n1:].sum()
        axes = [a1] * n1 + [a2] * (n - n1)
        smear = cfg.signal_smear
    else:
        axes = [(eta0, phi0)] * n
        smear = cfg.background_smear
    dirs = _place(rng, axes, smear, n, [])
    particles = tuple(_massless(float(pt), eta, phi) for pt, (eta, phi) in zip(pts, dirs))
    return JetRecord(int(label), particles)


def generate(cfg: GenConfig) -> list[JetRecord]:
    """Balanced, seeded dataset: labels alternate 0, 1, 0, 1, ..."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out = []
    k = cfg.jets_per_event
    for i in range(cfg.n_jets):
        if k:
            event = i // k
            label = event % 2
            rec = gen_jet(label, cfg, rng)
            rec = JetRecord(rec.label, rec.particles, event)
        else:
            rec = gen_jet(i % 2, cfg, rng)
        out.append(rec)
    return out


# JSONL -------------------------------------------------------------------------

def record_to_json(rec: JetRecord) -> str:
    obj = {"label": rec.label}
    if rec.event_id is not None:
        obj["event_id"] = rec.event_id
    obj["particles"] = [list(p) for p in rec.particles]
    # float repr is the shortest string that round-trips exactly (<= 17 digits)
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def record_from_json(line: str, lineno: int) -> JetRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(lineno, exc.msg) from None
    if not isinstance(obj, dict):
        raise ParseError(lineno, "record is not a JSON object")
    extra = set(obj) - {"label", "event_id", "particles"}
    if extra:
        raise SchemaError(f"line {lineno}: unknown keys {sorted(extra)}")
    label = obj.get("label")
    if label not in (0, 1) or isinstance(label, bool):
        raise SchemaError(f"line {lineno}: label must be 0 or 1")
    event_id = obj.get("event_id")
    if event_id is not None and (not isinstance(event_id, int) or isinstance(event_id, bool)):
        raise SchemaError(f"line {lineno}: event_id must be an integer")
    parts = obj.get("particles")
    if not isinstance(parts, list):
        raise SchemaError(f"line {lineno}: particles must be a list")
    particles = []
    for p in parts:
        if (
            not isinstance(p, list)
            or len(p) != 4
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in p)
        ):
            raise SchemaError(f"line {lineno}: each particle must be [E, px, py, pz]")
        particles.append(FourMomentum(*(float(x) for x in p)))
    return JetRecord(label, tuple(particles), event_id)


def write_jsonl(records: Iterable[JetRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def read_jsonl(path) -> list[JetRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(record_from_json(line, lineno))
    return out


# standardization --------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return standardize_apply(self, x)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Standardizer":
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64))


def standardize_fit(rows) -> Standardizer:
    """Per-column mean and population std over a stack of feature rows."""
    if isinstance(rows, np.ndarray):
        x = rows
    else:
        x = np.concatenate([np.atleast_2d(r) for r in rows], axis=0)
    if x.shape[0] == 0:
        raise ValueError("cannot fit standardization on zero rows")
    return Standardizer(x.mean(axis=0), x.std(axis=0))


def standardize_apply(stats: Standardizer, x: np.ndarray) -> np.ndarray:
    return (x - stats.mean) / np.maximum(stats.std, 1e-8)


def gen_config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
