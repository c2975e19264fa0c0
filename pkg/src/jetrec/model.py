"""Event recurrence, classifier head, loss, optimizer and the training loop."""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .clustering import ClusterTree, build_tree
from .datagen import JetRecord, Standardizer, standardize_fit
from .errors import ConfigError, DimMismatch, EmptyEvent, NonFiniteLoss, SchemaError, SingleClassDataset
from .evaluation import auc_mann_whitney
from .kinematics import jet_kinematics, momentum_sum
from .treenn import RecNNParams, embed_batched_var, glorot, init_params, levelize, tree_features

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
JET_KIN = 5
EVAL_BATCH = 256
CHECKPOINT_FORMAT = "jetrec-checkpoint/1"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    q: int = 16
    gated: bool = True
    topology: str = "kt"
    alpha: float = 1.0
    R: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    level: str = "jet"
    gru_hidden: int = 0
    head_hidden: int = 64
    activation: str = "relu"
    gate_input: str = "default"
    val_fraction: float = 0.2

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("lr: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.q < 1:
            raise ConfigError("q: must be >= 1")
        if self.level not in ("jet", "event"):
            raise ConfigError("level: must be 'jet' or 'event'")
        if self.gate_input not in ("default", "candidate"):
            raise ConfigError("gate_input: must be 'default' or 'candidate'")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"activation: must be one of {sorted(ad.ACTIVATIONS)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction: must be in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("beta1/beta2/eps: need 0 <= beta < 1 and eps > 0")

    @property
    def hidden(self) -> int:
        return self.gru_hidden or self.q


# GRU ----------------------------------------------------------------------------

GRU_KEYS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def init_gru(s: int, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for gate in "zrh":
        out[f"W_{gate}"] = glorot(rng, (s, d))
        out[f"U_{gate}"] = glorot(rng, (s, s))
        out[f"b_{gate}"] = np.zeros(s)
    return {k: out[k] for k in GRU_KEYS}


def gru_step(w: dict, x, h):
    z = ad.sigmoid(ad.matvec(w["W_z"], x) + ad.matvec(w["U_z"], h) + w["b_z"])
    r = ad.sigmoid(ad.matvec(w["W_r"], x) + ad.matvec(w["U_r"], h) + w["b_r"])
    h_tilde = ad.tanh(ad.matvec(w["W_h"], x) + ad.matvec(w["U_h"], r * h) + w["b_h"])
    return (1.0 - z) * h + z * h_tilde


def order_jets(jet_kins: Sequence[np.ndarray]) -> list[int]:
    """Descending jet pt, ties by input order."""
    return sorted(range(len(jet_kins)), key=lambda i: (-float(jet_kins[i][0]), i))


def event_embed_var(tape: ad.Tape, w: dict, xs: Sequence) -> ad.Var:
    if len(xs) == 0:
        raise EmptyEvent("event has no jets")
    s = w["U_z"].shape[0]
    h = tape.const(np.zeros(s))
    for x in xs:
        h = gru_step(w, x, h)
    return h


def event_embed(jets: Sequence[tuple[np.ndarray, np.ndarray]], gru: dict[str, np.ndarray]) -> np.ndarray:
    """Final hidden state over ``(embedding, jet_kin)`` pairs, hardest jet first."""
    if len(jets) == 0:
        raise EmptyEvent("event has no jets")
    d = gru["W_z"].shape[1]
    tape = ad.Tape()
    w = {k: tape.const(v) for k, v in gru.items()}
    order = order_jets([kin for _, kin in jets])
    xs = []
    for i in order:
        x = np.concatenate([jets[i][0], jets[i][1]])
        if x.shape != (d,):
            raise DimMismatch(f"GRU input has size {x.size}, expected {d}")
        xs.append(tape.const(x))
    return event_embed_var(tape, w, xs).value


def event_embed_batched_var(tape: ad.Tape, w: dict, x: ad.Var, rows: Sequence[Sequence[int]]) -> ad.Var:
    """GRU over many events at once; ``rows[e]`` indexes ``x`` in time order.

    Finished events are frozen by a 0/1 mask so all sequences advance together.
    """
    s = w["U_z"].shape[0]
    n_events = len(rows)
    if any(len(r) == 0 for r in rows):
        raise EmptyEvent("event has no jets")
    lengths = np.array([len(r) for r in rows])
    pad = tape.const(np.zeros((1, x.shape[-1])))
    h = tape.const(np.zeros((n_events, s)))
    for t in range(int(lengths.max())):
        idx = [(0, r[t]) if t < len(r) else (1, 0) for r in rows]
        x_t = ad.gather_rows([x, pad], idx)
        h_new = gru_step(w, x_t, h)
        if np.all(lengths > t):
            h = h_new
        else:
            m = (lengths > t).astype(np.float64)[:, None]
            h = m * h_new + (1.0 - m) * h
    return h


# head and loss ----------------------------------------------------------------------

def init_head(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": glorot(rng, (hidden, in_dim)),
        "b1": np.zeros(hidden),
        "W2": glorot(rng, (1, hidden)),
        "b2": np.zeros(1),
    }


def head_var(w: dict, h):
    a = ad.relu(ad.matvec(w["W1"], h) + w["b1"])
    out = ad.sigmoid(ad.matvec(w["W2"], a) + w["b2"])
    lead = out.shape[:-1]
    return ad.reshape(out, lead if lead else ())


def classify(h: np.ndarray, head: dict[str, np.ndarray]) -> float:
    if h.shape != (head["W1"].shape[1],):
        raise DimMismatch(f"head expects input of size {head['W1'].shape[1]}, got {h.shape}")
    tape = ad.Tape()
    w = {k: tape.const(v) for k, v in head.items()}
    return float(head_var(w, tape.const(h)).value)


def bce_var(p, y):
    p = ad.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))


def bce_loss(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


# optimizer ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update; returns fresh arrays and the updated state."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    out = {}
    for k, theta in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[k] = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out, state


# samples --------------------------------------------------------------------------------

@dataclass
class Sample:
    """One classification instance: a jet, or an event of jets ordered hardest first."""

    label: int
    trees: list[ClusterTree]
    node_features: list[np.ndarray]
    jet_kins: list[np.ndarray]


def content_seed(seed: int, particles) -> int:
    """Per-jet seed for random topologies, independent of the jet's position in a file."""
    data = np.asarray(particles, dtype="<f8").tobytes()
    return (seed & 0xFFFFFFFF) << 32 | zlib.crc32(data)


def _tree_job(args):
    particles, topology, alpha, R, seed = args
    return build_tree(particles, topology, alpha=alpha, R=R, seed=seed)


def build_trees(records: Sequence[JetRecord], cfg: TrainConfig, threads: int = 1) -> list[ClusterTree]:
    """Cluster every record; order of results follows ``records``."""
    jobs = [
        (rec.particles, cfg.topology, cfg.alpha, cfg.R, content_seed(cfg.seed, rec.particles))
        for rec in records
    ]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_tree_job, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    return [_tree_job(j) for j in jobs]


def make_samples(records: Sequence[JetRecord], trees: Sequence[ClusterTree], level: str) -> list[Sample]:
    if level == "jet":
        return [
            Sample(r.label, [t], [tree_features(t)], [jet_kinematics(momentum_sum(r.particles))])
            for r, t in zip(records, trees)
        ]
    groups: dict = {}
    for i, r in enumerate(records):
        key = ("event", r.event_id) if r.event_id is not None else ("jet", i)
        groups.setdefault(key, []).append(i)
    samples = []
    for key, idx in groups.items():
        labels = {records[i].label for i in idx}
        if len(labels) != 1:
            raise SchemaError(f"event {key[1]} mixes labels {sorted(labels)}")
        kins = [jet_kinematics(trees[i].nodes[trees[i].root].momentum) for i in idx]
        order = [idx[k] for k in order_jets(kins)]
        samples.append(
            Sample(
                labels.pop(),
                [trees[i] for i in order],
                [tree_features(trees[i]) for i in order],
                [jet_kinematics(trees[i].nodes[trees[i].root].momentum) for i in order],
            )
        )
    return samples


# model ---------------------------------------------------------------------------------------

@dataclass
class Model:
    config: TrainConfig
    recnn: RecNNParams
    head: dict[str, np.ndarray]
    node_stats: Standardizer
    jet_stats: Standardizer
    gru: Optional[dict[str, np.ndarray]] = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"recnn.{k}": v for k, v in self.recnn.arrays.items()}
        if self.gru is not None:
            out.update({f"gru.{k}": v for k, v in self.gru.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, v in arrays.items():
            part, key = name.split(".", 1)
            if part == "recnn":
                self.recnn.arrays[key] = v
            elif part == "gru":
                self.gru[key] = v
            else:
                self.head[key] = v

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())


def init_model(cfg: TrainConfig, node_stats: Standardizer, jet_stats: Standardizer, f: int) -> Model:
    recnn = init_params(cfg.q, f, seed=cfg.seed, gated=cfg.gated,
                        activation=cfg.activation, gate_input=cfg.gate_input)
    rng = np.random.default_rng([cfg.seed, 1])
    gru = None
    head_in = cfg.q
    if cfg.level == "event":
        gru = init_gru(cfg.hidden, cfg.q + JET_KIN, rng)
        head_in = cfg.hidden
    head = init_head(head_in, cfg.head_hidden, rng)
    return Model(cfg, recnn, head, node_stats, jet_stats, gru)


def _standardized(model: Model, samples: Sequence[Sample]):
    trees, feats, kins, rows = [], [], [], []
    for s in samples:
        r = []
        for t, f, k in zip(s.trees, s.node_features, s.jet_kins):
            r.append(len(trees))
            trees.append(t)
            feats.append(model.node_stats.apply(f))
            kins.append(model.jet_stats.apply(k))
        rows.append(r)
    return trees, feats, np.array(kins).reshape(-1, JET_KIN), rows


def forward_var(tape: ad.Tape, w: dict, model: Model, samples: Sequence[Sample]) -> ad.Var:
    """Signal probabilities for a batch of samples; one entry per sample."""
    trees, feats, kins, rows = _standardized(model, samples)
    schedule = levelize(trees, feats)
    emb = embed_batched_var(tape, w["recnn"], model.recnn, schedule)
    if model.config.level == "event":
        x = ad.concat([emb, tape.const(kins)])
        h = event_embed_batched_var(tape, w["gru"], x, rows)
    else:
        h = emb
    return head_var(w["head"], h)


def bind(tape: ad.Tape, model: Model, trainable: bool = True) -> dict:
    w: dict = {"recnn": {}, "gru": {}, "head": {}}
    for name, v in model.arrays().items():
        part, key = name.split(".", 1)
        w[part][key] = tape.param(name, v) if trainable else tape.const(v)
    return w


def batch_loss_var(tape, w, model, samples):
    p = forward_var(tape, w, model, samples)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return ad.mean(bce_var(p, y))


def predict(model: Model, samples: Sequence[Sample], batch: int = EVAL_BATCH) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch):
        tape = ad.Tape()
        w = bind(tape, model, trainable=False)
        out.append(np.atleast_1d(forward_var(tape, w, model, samples[i:i + batch]).value))
    return np.concatenate(out) if out else np.zeros(0)


def mean_loss(model: Model, samples: Sequence[Sample]) -> float:
    p = predict(model, samples)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return float(np.mean(bce_loss(p, y)))


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    train_idx: np.ndarray
    val_idx: np.ndarray


def split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([cfg.seed, 0]).permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    init: Optional[Model] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Minibatch Adam on mean binary cross-entropy.

    The split, initial weights and per-epoch shuffles are all derived from
    ``cfg.seed``, so the result is a pure function of (samples, cfg).
    """
    cfg.validate()
    labels = np.array([s.label for s in samples])
    if len(samples) == 0 or labels.min() == labels.max():
        raise SingleClassDataset("training data must contain both classes")
    train_idx, val_idx = split_indices(len(samples), cfg)
    tr = [samples[i] for i in train_idx]
    va = [samples[i] for i in val_idx]
    if len({s.label for s in va}) < 2:
        raise SingleClassDataset("validation split holds a single class; use more data")

    if init is None:
        node_stats = standardize_fit(np.concatenate([f for s in tr for f in s.node_features]))
        jet_stats = standardize_fit(np.stack([k for s in tr for k in s.jet_kins]))
        model = init_model(cfg, node_stats, jet_stats, tr[0].node_features[0].shape[1])
    else:
        model = init

    shuffle = np.random.default_rng([cfg.seed, 2])
    state = AdamState()
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(tr))
        for b in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = [tr[i] for i in order[b:b + cfg.batch_size]]
            step += 1
            # overflow is detected below and reported as NonFiniteLoss
            with np.errstate(over="ignore", invalid="ignore"):
                tape = ad.Tape()
                w = bind(tape, model)
                loss = batch_loss_var(tape, w, model, batch)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise NonFiniteLoss(step, value)
                grads = ad.backward(tape, loss)
            # the clamped loss can stay finite while the weights blow up
            bad = next((k for k, g in grads.items() if not np.all(np.isfinite(g))), None)
            if bad is not None:
                raise NonFiniteLoss(step, value, f"gradient of {bad}")
            new, state = adam_step(model.arrays(), grads, state, step, cfg)
            bad = next((k for k, v in new.items() if not np.all(np.isfinite(v))), None)
            if bad is not None:
                raise NonFiniteLoss(step, value, f"parameter {bad}")
            model.set_arrays(new)
        row = {
            "epoch": epoch,
            "loss": mean_loss(model, tr),
            "val_auc": auc_mann_whitney(predict(model, va), [s.label for s in va]),
        }
        history.append(row)
        log.info("epoch %d loss %.6f val_auc %.4f", epoch, row["loss"], row["val_auc"])
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(model, history, train_idx, val_idx)


# checkpoint ------------------------------------------------------------------------------------

def _array_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _array_from(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def checkpoint_dict(model: Model, history: Sequence[dict] = ()) -> dict:
    r = model.recnn
    return {
        "format": CHECKPOINT_FORMAT,
        "q": r.q,
        "f": r.f,
        "gated": r.gated,
        "activation": r.activation,
        "gate_input": r.gate_input,
        "seed": model.config.seed,
        "config": asdict(model.config),
        "arrays": {k: _array_json(v) for k, v in model.arrays().items()},
        "stats": {"node": model.node_stats.to_json(), "jet": model.jet_stats.to_json()},
        "history": list(history),
    }


def dumps_checkpoint(model: Model, history: Sequence[dict] = ()) -> str:
    return json.dumps(checkpoint_dict(model, history), allow_nan=False) + "\n"


def save_checkpoint(model: Model, path, history: Sequence[dict] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(model, history))


def load_checkpoint(path) -> tuple[Model, list[dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"format: not a checkpoint ({obj.get('format')!r})")
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in obj["config"].items() if k in known})
    arrays = {k: _array_from(v) for k, v in obj["arrays"].items()}
    recnn = RecNNParams(
        obj["q"], obj["f"], obj["gated"],
        {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("recnn.")},
        obj["activation"], obj["gate_input"],
    )
    recnn.validate()
    gru = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("gru.")} or None
    head = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("head.")}
    model = Model(
        cfg, recnn, head,
        Standardizer.from_json(obj["stats"]["node"]),
        Standardizer.from_json(obj["stats"]["jet"]),
        gru,
    )
    return model, obj.get("history", [])


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,val_auc\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['loss']!r},{row['val_auc']!r}\n")
