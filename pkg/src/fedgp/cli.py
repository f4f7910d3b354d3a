"""
Command-line driver.

    fedgp gen-data   write (or validate) a Gaussian-blob dataset
    fedgp partition  split a dataset over clients into a run directory
    fedgp train      run the federation loop, checkpointing and resumable
    fedgp evaluate   score a checkpoint on every client
    fedgp bound      PAC-Bayes bounds for novel binary clients under frozen features
    fedgp report     mean +- SEM summary over results files

A run directory holds ``manifest.json`` (partition), ``config.json`` (the
resolved training config), ``checkpoint.json`` (latest state),
``checkpoints/`` (periodic states), ``rounds.jsonl`` (round records) and the
files written by ``evaluate`` and ``bound``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .deep_kernel import KernelConfig
from .federation import (
    FederationConfig,
    NoiseModel,
    PartitionConfig,
    apply_noise,
    client_bound,
    evaluate_federated,
    gaussian_blobs,
    init_server,
    load_dataset,
    partition,
    run_round,
    save_dataset,
    train_local,
    make_shard,
    stratified_split,
)
from .gp_tree import TreeConfig
from .gpc_node import GibbsConfig
from .io import (
    RESULTS_FORMAT,
    append_record,
    load_checkpoint,
    load_shards,
    read_json,
    read_records,
    save_checkpoint,
    save_shards,
    write_json,
)
from .metrics import reliability_export

SECTIONS = {"kernel": KernelConfig, "gibbs": GibbsConfig, "tree": TreeConfig, "federation": FederationConfig}
MODEL_DEFAULTS = {"hidden": [16], "embed_dim": 4, "activations": None, "inducing_per_class": 8}
RUN_DEFAULTS = {"mode": "federated", "checkpoint_every": 10}
# keys whose change does not invalidate a resumed run
RESUMABLE = {("federation", "rounds"), ("federation", "workers"), ("run", "checkpoint_every")}


class ConfigError(ValueError):
    pass


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------------- config


def default_config() -> dict:
    cfg = {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}
    cfg["model"] = dict(MODEL_DEFAULTS)
    cfg["run"] = dict(RUN_DEFAULTS)
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(cfg))
    for pair in pairs or ():
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r}: expected section.key=value")
        path, value = pair.split("=", 1)
        section, key = path.split(".", 1)
        out.setdefault(section, {})[key] = _parse_value(value)
    return out


def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def config_problems(cfg: dict) -> list:
    """Every offending key in a config, as ``section.key: reason`` lines."""
    out = []
    defaults = default_config()
    for section in cfg:
        if section not in defaults:
            out.append(f"{section}: unknown section")
    for section, base in defaults.items():
        given = cfg.get(section, {})
        if not isinstance(given, dict):
            out.append(f"{section}: expected a mapping")
            continue
        good = {}
        for key, value in given.items():
            if key not in base:
                out.append(f"{section}.{key}: unknown key")
            elif not _type_ok(base[key], value):
                out.append(f"{section}.{key}: expected {type(base[key]).__name__}, got {value!r}")
            else:
                good[key] = value
        cls = SECTIONS.get(section)
        if cls is None:
            continue
        single_bad = set()
        for key, value in good.items():
            try:
                cls(**{key: value})
            except ValueError as e:
                single_bad.add(key)
                out.append(f"{section}.{key}: {e}")
        rest = {k: v for k, v in good.items() if k not in single_bad}
        try:
            cls(**rest)
        except ValueError as e:
            out.append(f"{section}: {e}")
    model = cfg.get("model", {})
    if isinstance(model, dict):
        if "embed_dim" in model and _type_ok(1, model["embed_dim"]) and model["embed_dim"] < 1:
            out.append("model.embed_dim: must be >= 1")
        if "inducing_per_class" in model and _type_ok(1, model["inducing_per_class"]) and model["inducing_per_class"] < 0:
            out.append("model.inducing_per_class: must be >= 0")
        if "hidden" in model and isinstance(model["hidden"], list) and any(
                not isinstance(h, int) or h < 1 for h in model["hidden"]):
            out.append("model.hidden: expected positive integers")
    run = cfg.get("run", {})
    if isinstance(run, dict):
        if run.get("mode", "federated") not in ("federated", "local"):
            out.append("run.mode: expected federated or local")
        ce = run.get("checkpoint_every", 1)
        if _type_ok(1, ce) and ce < 1:
            out.append("run.checkpoint_every: must be >= 1")
    tree = {**defaults["tree"], **(cfg.get("tree") or {})}
    ipc = (cfg.get("model") or {}).get("inducing_per_class", MODEL_DEFAULTS["inducing_per_class"])
    if tree.get("variant") in ("ip-data", "ip-compute") and ipc == 0:
        out.append("model.inducing_per_class: inducing variants need at least one point per class")
    return out


def resolve_config(path=None, overrides=None) -> dict:
    """Defaults, then the config file, then overrides; raises listing every problem."""
    cfg = default_config()
    if path is not None:
        given = read_json(path)
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for section, values in given.items():
            if isinstance(values, dict) and isinstance(cfg.get(section), dict):
                cfg[section].update(values)
            else:
                cfg[section] = values
    cfg = apply_overrides(cfg, overrides)
    bad = config_problems(cfg)
    if bad:
        raise ConfigError("invalid config:\n  " + "\n  ".join(bad))
    return cfg


def build_objects(cfg: dict):
    return (KernelConfig(**cfg["kernel"]), GibbsConfig(**cfg["gibbs"]), TreeConfig(**cfg["tree"]),
            FederationConfig(**cfg["federation"]))


# ------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.validate:
        ds = load_dataset(args.validate)
        counts = np.bincount(ds.y, minlength=ds.n_classes)
        print(f"{args.validate}: ok, n={len(ds)} d={ds.X.shape[1]} classes={ds.n_classes} counts={counts.tolist()}")
        return 0
    if not args.out:
        raise CLIError("gen-data needs --out (or --validate PATH)")
    rng = np.random.default_rng(args.seed)
    ds = gaussian_blobs(args.classes, args.per_class, rng, args.dim, args.radius, args.sigma)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} rows to {args.out}")
    return 0


def _parse_noise(specs, seed):
    """``cid:kind:p1[,p2]`` strings -> {cid: NoiseModel}."""
    out = {}
    for spec in specs or ():
        try:
            cid, kind, params = spec.split(":")
            out[int(cid)] = NoiseModel(kind, tuple(float(v) for v in params.split(",")), seed + int(cid))
        except ValueError as e:
            raise CLIError(f"bad --noise {spec!r}: {e}") from e
    return out


def cmd_partition(args) -> int:
    run = Path(args.out)
    if (run / "manifest.json").exists() and not args.force:
        raise CLIError(f"{run} already holds a partition; pass --force to overwrite")
    ds = load_dataset(args.data)
    cfg = PartitionConfig(args.clients, args.classes_per_client, args.frac_low, args.frac_high,
                          args.val_fraction, args.test_fraction)
    rng = np.random.default_rng(args.seed)
    shards = partition(ds, cfg, rng)
    noise = _parse_noise(args.noise, args.seed)
    unknown = set(noise) - {s.cid for s in shards}
    if unknown:
        raise CLIError(f"--noise names unknown clients {sorted(unknown)}")
    shards = [apply_noise(s, noise[s.cid]) if s.cid in noise else s for s in shards]
    run.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "seed": args.seed, "data": str(Path(args.data).resolve()),
                "partition": dataclasses.asdict(cfg)}
    save_shards(run, shards, manifest)
    for s in shards:
        print(f"client {s.cid}: classes={list(s.classes)} train={s.n_train} val={len(s.y_val)} test={len(s.y_test)}")
    return 0


def _layer_sizes(model_cfg, input_dim):
    return [input_dim] + list(model_cfg["hidden"]) + [model_cfg["embed_dim"]]


def _init_state(cfg, shards, n_classes):
    kernel, gibbs, tree, fed = build_objects(cfg)
    model = cfg["model"]
    rng = np.random.default_rng([fed.seed, 0xF00D])
    ipc = model["inducing_per_class"] if tree.uses_inducing else 0
    acts = None if model["activations"] is None else tuple(model["activations"])
    return init_server(_layer_sizes(model, shards[0].X_train.shape[1]), shards, rng, ipc, n_classes, acts)


def _differs(a: dict, b: dict) -> list:
    out = []
    for section in sorted(set(a) | set(b)):
        sa, sb = a.get(section, {}), b.get(section, {})
        for key in sorted(set(sa) | set(sb)):
            if sa.get(key) != sb.get(key) and (section, key) not in RESUMABLE:
                out.append(f"{section}.{key}: {sa.get(key)!r} -> {sb.get(key)!r}")
    return out


def _n_classes(manifest, shards):
    try:
        return load_dataset(manifest["data"]).n_classes
    except (OSError, KeyError, ValueError):
        return 1 + max(max(s.classes) for s in shards)


def cmd_train(args) -> int:
    run = Path(args.run)
    shards, manifest = load_shards(run)
    overrides = list(args.set or [])
    for flag, key in ((args.rounds, "federation.rounds"), (args.variant, "tree.variant"),
                      (args.objective, "tree.objective"), (args.seed, "federation.seed"),
                      (args.workers, "federation.workers")):
        if flag is not None:
            overrides.append(f"{key}={json.dumps(flag)}")
    ckpt_path = run / "checkpoint.json"
    stored = run / "config.json"
    resume = ckpt_path.exists()
    if resume:
        base = read_json(stored)
        if args.config:
            cfg = resolve_config(args.config, overrides)
        else:
            # overrides apply on top of the stored config
            cfg = apply_overrides(base, overrides)
            bad = config_problems(cfg)
            if bad:
                raise ConfigError("invalid config:\n  " + "\n  ".join(bad))
        diff = _differs(base, cfg)
        if diff:
            raise CLIError("refusing to resume with a different config:\n  " + "\n  ".join(diff))
    else:
        cfg = resolve_config(args.config, overrides)
    kernel, gibbs, tree, fed = build_objects(cfg)
    bad = fed.problems(len(shards))
    if bad:
        raise ConfigError("invalid config:\n  " + "\n  ".join(bad))
    write_json(cfg, stored)
    (run / "checkpoints").mkdir(exist_ok=True)
    log_path = run / "rounds.jsonl"
    every = cfg["run"]["checkpoint_every"]

    if resume:
        state, _ = load_checkpoint(ckpt_path)
        done = min(s.round for s in state.values()) if isinstance(state, dict) else state.round
        logs = read_records(log_path)
        if any(r.get("round", -1) >= done for r in logs):
            # rounds after the last checkpoint are recomputed; drop their stale records
            with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
                for r in logs:
                    if r.get("round", -1) < done:
                        fh.write(json.dumps(r, sort_keys=True) + "\n")
        print(f"resuming from round {done}")
    else:
        state = _init_state(cfg, shards, _n_classes(manifest, shards))
        save_checkpoint(run / "checkpoints" / "round_00000.json", state, cfg)
        save_checkpoint(ckpt_path, state, cfg)

    if cfg["run"]["mode"] == "local":
        done = min(s.round for s in state.values()) if isinstance(state, dict) else state.round
        if done < fed.rounds:
            start = state if isinstance(state, dict) else {s.cid: state for s in shards}
            local = {}
            for s in shards:
                steps = fed.rounds - start[s.cid].round
                local.update(train_local(start[s.cid], [s], steps, fed, tree, kernel, gibbs))
            state = local
            save_checkpoint(ckpt_path, state, cfg)
            append_record({"round": fed.rounds - 1, "mode": "local", "clients": sorted(state)}, log_path)
        print(f"local baseline trained for {fed.rounds} steps per client")
        return 0

    while state.round < fed.rounds:
        state, log = run_round(state, shards, fed, tree, kernel, gibbs)
        append_record(log, log_path)
        if not args.quiet:
            obj = np.mean([v[-1] for v in log["objective"].values() if v]) if log["objective"] else float("nan")
            print(f"round {log['round']}: clients={log['clients']} objective={obj:.4f}")
        if state.round % every == 0 or state.round == fed.rounds:
            save_checkpoint(run / "checkpoints" / f"round_{state.round:05d}.json", state, cfg)
            save_checkpoint(ckpt_path, state, cfg)
    save_checkpoint(ckpt_path, state, cfg)
    print(f"done: {state.round} rounds")
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    shards, _ = load_shards(run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoint.json"
    state, cfg = load_checkpoint(ckpt)
    if cfg is None:
        cfg = read_json(run / "config.json")
    kernel, gibbs, tree, fed = build_objects(cfg)
    res = evaluate_federated(state, shards, tree, kernel, gibbs, seed=args.seed, split=args.split, n_bins=args.bins)
    out = Path(args.out) if args.out else run / f"results_{args.split}.json"
    label = args.label or f"{cfg['run']['mode']}/{tree.variant}/{tree.objective}"
    record = {
        "format": RESULTS_FORMAT,
        "version": __version__,
        "label": label,
        "checkpoint": ckpt.name,
        "round": min(s.round for s in state.values()) if isinstance(state, dict) else state.round,
        "seed": args.seed,
        "train_seed": fed.seed,
        "split": args.split,
        "federated": {k: res[k] for k in ("accuracy", "ece", "mce", "brier", "n")},
        "clients": res["clients"],
    }
    write_json(record, out)
    rel = out.with_name(out.stem + "_reliability.csv")
    reliability_export(res["confidence"], res["correct"], args.bins, rel)
    f = record["federated"]
    print(f"{label}: accuracy={f['accuracy']:.4f} ece={f['ece']:.4f} mce={f['mce']:.4f} brier={f['brier']:.4f} "
          f"(n={f['n']}) -> {out}")
    return 0


def _novel_binary_clients(ds, n_clients, n_train, n_test, rng, first_cid=20_000):
    shards = []
    n_classes = ds.n_classes
    for j in range(n_clients):
        pair = np.sort(rng.choice(n_classes, size=2, replace=False))
        pool = np.flatnonzero(np.isin(ds.y, pair))
        need = n_train + n_test
        if pool.size < need:
            raise CLIError(f"classes {pair.tolist()} have {pool.size} points, need {need}")
        idx = rng.choice(pool, size=need, replace=False)
        tr, _, te = stratified_split(idx, ds.y, 0.0, n_test / need, rng)
        shard = make_shard(first_cid + j, ds, tr, np.zeros(0, dtype=int), te)
        if len(shard.classes) != 2:
            continue
        shards.append(shard)
    return shards


def cmd_bound(args) -> int:
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoint.json"
    state, cfg = load_checkpoint(ckpt)
    if isinstance(state, dict):
        raise CLIError("the bound needs a shared (federated) checkpoint")
    if cfg is None:
        cfg = read_json(run / "config.json")
    kernel = KernelConfig(**cfg["kernel"])
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = load_dataset(read_json(run / "manifest.json")["data"])
    out = Path(args.out) if args.out else run / "bounds.jsonl"
    if out.exists():
        raise CLIError(f"{out} exists; bound records are append-only, choose another --out")
    sizes = [int(v) for v in args.sizes.split(",")]
    before = state.checksum()
    rng = np.random.default_rng([args.seed, 0xB0])
    print(f"{'client':>7} {'N':>5} {'emp_risk':>9} {'bound':>8} {'test_risk':>9} {'kl':>8}")
    for n in sizes:
        for shard in _novel_binary_clients(ds, args.clients, n, args.n_test, rng):
            rep = client_bound(state.params, shard, args.delta, rng, kernel,
                               n_kl_samples=args.kl_samples, n_risk_samples=args.risk_samples)
            append_record({"client": shard.cid, "classes": list(shard.classes), **rep.to_record()}, out)
            print(f"{shard.cid:>7} {n:>5} {rep.empirical_gibbs_risk:>9.4f} {rep.bound:>8.4f} "
                  f"{rep.test_gibbs_risk:>9.4f} {rep.kl:>8.3f}")
    if state.checksum() != before:
        raise CLIError("internal error: the bound protocol modified the frozen parameters")
    return 0


def summarize(values) -> tuple:
    """Mean and standard error of the mean (sample std with ddof=1 over sqrt(n))."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    sem = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), sem


def cmd_report(args) -> int:
    groups = {}
    for path in args.results:
        rec = read_json(path, RESULTS_FORMAT)
        groups.setdefault(rec["label"], []).append(rec["federated"])
    metrics = ("accuracy", "ece", "mce", "brier")
    rows = []
    for label in sorted(groups):
        row = {"label": label, "n_runs": len(groups[label])}
        for m in metrics:
            row[m], row[m + "_sem"] = summarize([g[m] for g in groups[label]])
        rows.append(row)
    head = f"{'label':<32} {'runs':>4} " + " ".join(f"{m:>17}" for m in metrics)
    print(head)
    for row in rows:
        cells = " ".join(f"{row[m]:>8.4f} +- {row[m + '_sem']:<6.4f}" for m in metrics)
        print(f"{row['label']:<32} {row['n_runs']:>4} {cells}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# format: fedgp-report/1\n")
            fh.write(",".join(["label", "n_runs"] + [f"{m},{m}_sem" for m in metrics]) + "\n")
            for row in rows:
                vals = [row["label"], str(row["n_runs"])]
                for m in metrics:
                    vals += [repr(row[m]), "" if np.isnan(row[m + "_sem"]) else repr(row[m + "_sem"])]
                fh.write(",".join(vals) + "\n")
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgp", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write or validate a dataset")
    g.add_argument("--out")
    g.add_argument("--validate", metavar="PATH")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=150)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--radius", type=float, default=3.0)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("partition", help="split a dataset over clients")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True, help="run directory")
    q.add_argument("--clients", type=int, default=10)
    q.add_argument("--classes-per-client", type=int, default=2)
    q.add_argument("--frac-low", type=float, default=0.4)
    q.add_argument("--frac-high", type=float, default=0.6)
    q.add_argument("--val-fraction", type=float, default=0.0)
    q.add_argument("--test-fraction", type=float, default=0.25)
    q.add_argument("--noise", action="append", metavar="CID:KIND:P1[,P2]",
                   help="per-client input noise, e.g. 3:gaussian:0.5 or 4:scale_shift:2,1")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="run (or resume) the federation loop")
    t.add_argument("--run", required=True)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    t.add_argument("--rounds", type=int)
    t.add_argument("--variant", choices=("exact", "ip-data", "ip-compute"))
    t.add_argument("--objective", choices=("marginal", "predictive"))
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--label")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bound", help="bounds for novel binary clients under frozen features")
    b.add_argument("--run", required=True)
    b.add_argument("--checkpoint")
    b.add_argument("--data", help="dataset to draw novel clients from (default: the run's)")
    b.add_argument("--clients", type=int, default=20)
    b.add_argument("--sizes", default="64", help="comma-separated training-set sizes")
    b.add_argument("--n-test", type=int, default=200)
    b.add_argument("--delta", type=float, default=0.01)
    b.add_argument("--kl-samples", type=int, default=200)
    b.add_argument("--risk-samples", type=int, default=2000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bound)

    r = sub.add_parser("report", help="summarize results files")
    r.add_argument("results", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CLIError, ValueError, FileNotFoundError) as e:
        print(f"fedgp {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
