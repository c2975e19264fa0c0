"""Command-line front end: generate, cluster, train, evaluate, bench.

Exit codes: 0 ok, 2 config, 3 data, 4 training, 5 evaluation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import TOPOLOGIES, cluster, tree_stats
from .datagen import GenConfig, gen_jet, generate, read_jsonl, write_jsonl
from .errors import ConfigError, DataError, JetRecError, SingleClass
from .evaluation import NO_BACKGROUND, export_roc_csv, rejection_at, roc
from .model import (
    TrainConfig,
    build_trees,
    load_checkpoint,
    make_samples,
    predict,
    save_checkpoint,
    train,
    write_history_csv,
)
from .treenn import embed, embed_batched, init_params, levelize

log = logging.getLogger("jetrec")

SECTIONS = {"gen": GenConfig, "train": TrainConfig}
# informational sections: accepted on input, never read back
OTHER_SECTIONS = ("cluster", "evaluate", "bench", "paths")


def default_threads() -> int:
    env = os.environ.get("JETREC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"JETREC_THREADS: not an integer ({env!r})") from None
        if n < 1:
            raise ConfigError("JETREC_THREADS: must be >= 1")
        return n
    return os.cpu_count() or 1


def load_config_file(path) -> dict:
    """Read a run config; every key must belong to a known section."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be an object")
    for section, body in obj.items():
        if section == "command":
            continue
        if section not in SECTIONS and section not in OTHER_SECTIONS:
            raise ConfigError(f"{section}: unknown config key")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be an object")
        if section in SECTIONS:
            known = {f.name for f in fields(SECTIONS[section])}
            for key in body:
                if key not in known:
                    raise ConfigError(f"{section}.{key}: unknown config key")
    return obj


def _resolve(cls, file_cfg: dict, section: str, overrides: dict):
    values = dict(file_cfg.get(section, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    for f in fields(cls):
        v = getattr(cfg, f.name)
        if isinstance(f.default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{f.name}: expected a boolean")
        elif isinstance(f.default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{section}.{f.name}: expected an integer")
        elif isinstance(f.default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{section}.{f.name}: expected a number")
            setattr(cfg, f.name, float(v))
        elif isinstance(f.default, str) and not isinstance(v, str):
            raise ConfigError(f"{section}.{f.name}: expected a string")
    return cfg


def write_resolved(path: Path, resolved: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _read_records(path):
    try:
        return read_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


# subcommands -------------------------------------------------------------------

def cmd_generate(args, file_cfg):
    cfg = _resolve(GenConfig, file_cfg, "gen", {
        "n_jets": args.n_jets, "seed": args.seed, "n_min": args.n_min, "n_max": args.n_max,
        "prong_dr_min": args.prong_dr_min, "prong_dr_max": args.prong_dr_max,
        "signal_smear": args.signal_smear, "background_smear": args.background_smear,
        "pt_mean": args.pt_mean, "jets_per_event": args.jets_per_event,
    })
    cfg.validate()
    out = Path(args.out)
    write_jsonl(generate(cfg), out)
    write_resolved(_sibling(out, ".config.json"), {"command": "generate", "gen": asdict(cfg), "paths": {"out": str(out)}})
    print(f"wrote {cfg.n_jets} jets to {out}")
    return 0


def cmd_cluster(args, file_cfg):
    section = dict(file_cfg.get("cluster", {}))
    for k in ("topology", "alpha", "R", "seed"):
        v = getattr(args, k)
        if v is not None:
            section[k] = v
    unknown = set(section) - {"topology", "alpha", "R", "seed"}
    if unknown:
        raise ConfigError(f"cluster.{sorted(unknown)[0]}: unknown config key")
    alpha = float(section.get("alpha", 1.0))
    topology = section.get("topology", "genkt" if "alpha" in section else "kt")
    if topology not in TOPOLOGIES:
        raise ConfigError(f"topology: unknown value {topology!r}")
    R = float(section.get("R", 1.0))
    if R <= 0:
        raise ConfigError("R: must be > 0")
    seed = int(section.get("seed", 0))
    records = _read_records(args.input)
    for lineno, rec in enumerate(records, start=1):
        if len(rec.particles) == 0:
            raise DataError(f"line {lineno}: record has no particles and cannot be clustered")
    tcfg = TrainConfig(topology=topology, alpha=alpha, R=R, seed=seed)
    try:
        trees = build_trees(records, tcfg, threads=args.threads)
    except JetRecError as exc:
        raise DataError(f"clustering failed: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trees.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i, (rec, tree) in enumerate(zip(records, trees)):
            obj = {"index": i, "label": rec.label, **tree.to_json()}
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    with open(out / "tree_stats.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,label,n_leaves,depth,imbalance\n")
        for i, (rec, tree) in enumerate(zip(records, trees)):
            s = tree_stats(tree)
            fh.write(f"{i},{rec.label},{s['n_leaves']},{s['depth']},{s['imbalance']!r}\n")
    write_resolved(out / "config.json", {
        "command": "cluster", "cluster": {"topology": topology, "alpha": alpha, "R": R, "seed": seed},
        "paths": {"in": str(args.input), "out": str(out)},
    })
    print(f"clustered {len(trees)} jets into {out}")
    return 0


def cmd_train(args, file_cfg):
    cfg = _resolve(TrainConfig, file_cfg, "train", {
        "q": args.q, "gated": args.gated, "topology": args.topology, "alpha": args.alpha,
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size,
        "level": args.level, "gate_input": args.gate_input, "activation": args.activation,
    })
    cfg.validate()
    if cfg.topology not in TOPOLOGIES:
        raise ConfigError(f"topology: unknown value {cfg.topology!r}")
    records = _read_records(args.data)
    trees = build_trees(records, cfg, threads=args.threads)
    samples = make_samples(records, trees, cfg.level)
    result = train(samples, cfg, on_epoch=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['loss']:.6f}  val_auc {r['val_auc']:.6f}", flush=True))
    ckpt = Path(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt, result.history)
    write_history_csv(result.history, _sibling(ckpt, ".history.csv"))
    # validation records in split order, so `evaluate` can reproduce the final AUC
    val_records = _split_records(records, samples, result.val_idx, cfg.level)
    write_jsonl(val_records, _sibling(ckpt, ".val.jsonl"))
    write_resolved(_sibling(ckpt, ".config.json"), {
        "command": "train", "train": asdict(cfg),
        "paths": {"data": str(args.data), "out_checkpoint": str(ckpt)},
    })
    if result.history:
        print(f"final val_auc {result.history[-1]['val_auc']!r}")
    return 0


def _split_records(records, samples, idx, level):
    if level == "jet":
        return [records[i] for i in idx]
    by_event: dict = {}
    for i, r in enumerate(records):
        key = ("event", r.event_id) if r.event_id is not None else ("jet", i)
        by_event.setdefault(key, []).append(r)
    groups = list(by_event.values())
    return [r for i in idx for r in groups[i]]


def cmd_evaluate(args, file_cfg):
    model, _ = load_checkpoint(args.checkpoint)
    records = _read_records(args.data)
    labels = {r.label for r in records}
    if labels != {0, 1}:
        raise SingleClass("evaluation data must contain both signal and background")
    trees = build_trees(records, model.config, threads=args.threads)
    samples = make_samples(records, trees, model.config.level)
    scores = predict(model, samples)
    curve = roc(scores, [s.label for s in samples])
    out = Path(args.roc_out)
    export_roc_csv(curve, out)
    rej = rejection_at(curve, args.target_eff)
    write_resolved(_sibling(out, ".config.json"), {
        "command": "evaluate", "evaluate": {"target_eff": args.target_eff},
        "paths": {"data": str(args.data), "checkpoint": str(args.checkpoint), "roc_out": str(out)},
    })
    print(f"auc {curve.auc!r}")
    if rej == NO_BACKGROUND:
        print(f"rejection@{args.target_eff} inf (no background passes)")
    else:
        print(f"rejection@{args.target_eff} {rej!r}")
    return 0


def _timings(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    return np.array(out, dtype=np.float64)


def cmd_bench(args, file_cfg):
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.mode == "clustering":
        for n in args.n:
            c = GenConfig(n_min=n, n_max=n, seed=args.seed)
            jets = [gen_jet(i % 2, c, rng).particles for i in range(args.jets)]
            t = _timings(lambda: [cluster(j, 1.0) for j in jets], args.repeat) / len(jets)
            rows.append(("clustering", n, t))
    else:
        params = init_params(8, seed=args.seed, gated=args.gated)
        c = GenConfig(n_min=args.particles, n_max=args.particles, seed=args.seed)
        for n in args.n:
            trees = [cluster(gen_jet(i % 2, c, rng).particles, 1.0) for i in range(n)]
            schedule = levelize(trees)
            batched = embed_batched(schedule, params)
            naive = np.stack([embed(t, params) for t in trees])
            err = float(np.max(np.abs(batched - naive)))
            if err > 1e-12:
                raise JetRecError(f"batched forward differs from per-tree forward by {err}")
            print(f"# batched == per-tree within {err:.3e} on {n} trees", file=sys.stderr)
            rows.append(("batched-forward", n, _timings(lambda: embed_batched(schedule, params), args.repeat)))
            rows.append(("per-tree-forward", n, _timings(lambda: [embed(t, params) for t in trees], args.repeat)))
    lines = ["mode,n,mean_ns,p50,p95"]
    for mode, n, t in rows:
        lines.append(f"{mode},{n},{t.mean():.0f},{np.percentile(t, 50):.0f},{np.percentile(t, 95):.0f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        write_resolved(_sibling(out, ".config.json"), {
            "command": "bench", "bench": {"mode": args.mode, "n": args.n, "repeat": args.repeat,
                                          "seed": args.seed, "jets": args.jets,
                                          "particles": args.particles, "gated": args.gated}})
    else:
        sys.stdout.write(text)
    return 0


# parser ---------------------------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jetrec", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config; command-line flags take precedence")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes for clustering (default: $JETREC_THREADS or CPU count)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a toy JSONL dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-jets", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-min", type=int)
    g.add_argument("--n-max", type=int)
    g.add_argument("--prong-dr-min", type=float)
    g.add_argument("--prong-dr-max", type=float)
    g.add_argument("--signal-smear", type=float)
    g.add_argument("--background-smear", type=float)
    g.add_argument("--pt-mean", type=float)
    g.add_argument("--jets-per-event", type=int)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cluster", help="build trees and tree statistics")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--alpha", type=float)
    c.add_argument("--R", type=float)
    c.add_argument("--topology", choices=TOPOLOGIES)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="train an embedding + classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--q", type=int)
    t.add_argument("--gated", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--topology", choices=TOPOLOGIES)
    t.add_argument("--alpha", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--level", choices=("jet", "event"))
    t.add_argument("--gate-input", choices=("default", "candidate"))
    t.add_argument("--activation", choices=sorted(ad.ACTIVATIONS))
    t.add_argument("--out-checkpoint", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="ROC, AUC and rejection of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--roc-out", required=True)
    e.add_argument("--target-eff", type=float, default=0.5)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="time clustering or batched tree evaluation")
    b.add_argument("--mode", choices=("clustering", "batched-forward"), required=True)
    b.add_argument("--n", type=int, nargs="+", default=None,
                   help="particles per jet (clustering) or trees per batch (batched-forward)")
    b.add_argument("--repeat", type=_positive_int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--jets", type=_positive_int, default=100, help="jets per clustering timing")
    b.add_argument("--particles", type=_positive_int, default=30, help="particles per tree (batched-forward)")
    b.add_argument("--gated", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is None:
            args.threads = default_threads()
        if args.command == "bench" and args.n is None:
            args.n = [10, 20, 40] if args.mode == "clustering" else [1000]
        file_cfg = load_config_file(args.config) if args.config else {}
        return args.func(args, file_cfg)
    except JetRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
