"""Command-line harness: one run directory per invocation with a manifest, CSV tables
and checkpoints.  Exit codes: 0 success, 2 configuration error, 3 numeric abort."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- run directory

def config_hash(config: dict) -> str:
    """Git blob-style SHA-1 of the canonical JSON config."""
    body = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


class Run:
    """Single-writer run directory runs/<timestamp>-<hash>/ with a manifest index."""

    def __init__(self, root: Path, subcommand: str, config: dict, seed: Optional[int]):
        self.config = config
        self.hash = config_hash({"subcommand": subcommand, **config})
        stamp = time.strftime("%Y%m%d-%H%M%S")
        self.dir = Path(root) / f"{stamp}-{self.hash[:8]}"
        k = 1
        while self.dir.exists():
            self.dir = Path(root) / f"{stamp}-{self.hash[:8]}-{k}"
            k += 1
        self.dir.mkdir(parents=True)
        self.manifest = {"schema_version": SCHEMA_VERSION, "subcommand": subcommand, "config": config,
                         "seed": seed, "config_hash": self.hash, "start": time.time(), "end": None, "outputs": []}
        self._write_manifest()

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, rel: str) -> Path:
        p = self.dir / rel
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        self.manifest["outputs"] = [o for o in self.manifest["outputs"] if o["path"] != rel]
        self.manifest["outputs"].append({"path": rel, "sha256": digest, "bytes": p.stat().st_size})
        return p

    def write_csv(self, rel: str, rows: List[dict], fields: Optional[Sequence[str]] = None) -> Path:
        fields = list(fields or (rows[0].keys() if rows else []))
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _fmt(r.get(k, "")) for k in fields})
        self.path(rel).write_text(buf.getvalue())
        return self.register(rel)

    def write_json(self, rel: str, obj) -> Path:
        self.path(rel).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        return self.register(rel)

    def finish(self):
        self.manifest["end"] = time.time()
        self._write_manifest()

    def _write_manifest(self):
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def self_check(run_dir: Path) -> List[str]:
    """Problems with a run directory: missing/changed indexed files and orphans."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        return [f"{run_dir}: no manifest.json"]
    man = json.loads(mpath.read_text())
    problems = []
    listed = set()
    for o in man.get("outputs", []):
        p = run_dir / o["path"]
        listed.add(o["path"])
        if not p.exists():
            problems.append(f"missing {o['path']}")
        elif hashlib.sha256(p.read_bytes()).hexdigest() != o["sha256"]:
            problems.append(f"checksum mismatch {o['path']}")
    for p in sorted(run_dir.rglob("*")):
        rel = p.relative_to(run_dir).as_posix()
        if p.is_file() and rel != "manifest.json" and rel not in listed:
            problems.append(f"orphan {rel}")
    return problems


# ---------------------------------------------------------------- subcommands

def _ks(values: Sequence[str]) -> List[Optional[int]]:
    out = []
    for v in values:
        out.append(None if str(v).lower() in ("inf", "infinity") else int(v))
    return out


def cmd_gen_data(a, run: Run):
    from .markov_data import build_task_set, make_rng, save_sequences
    tasks = build_task_set(a.task_seed, a.k, a.c, a.alpha)
    states, idx = tasks.sample(a.batch, a.n, make_rng(a.seed, 1))
    save_sequences(run.path("sequences.bin"), states, a.c, a.seed)
    run.register("sequences.bin")
    run.register("sequences.bin.json")
    run.write_json("task_set.json", tasks.to_json())
    run.write_csv("tasks.csv", [{"sequence": i, "task": int(t)} for i, t in enumerate(idx)])


def cmd_eval_predictors(a, run: Run):
    from .bayes import predictor_loss_scan
    rows = predictor_loss_scan(a.kinds, a.k, a.n, a.trials, a.seed, a.c, a.alpha, a.alpha_prime)
    run.write_csv("tables/predictor_losses.csv", rows)
    for r in rows:
        if r["n"] == max(a.n) and "/" not in r["predictor"]:
            print(f"K={r['k']} N={r['n']} {r['predictor']}: {r['loss_mean']:.4f} +- {r['loss_sem']:.4f}")


def _transformer_from_args(a):
    from .transformer import Transformer, TransformerConfig
    nonauto = a.variant == "nonauto"
    cfg = TransformerConfig(c=a.c, d=a.d, n_max=a.n, heads=a.heads,
                            positional="relative" if nonauto else "rotary", mlp1=not nonauto,
                            task_injection=(a.k if a.task_injection else 0), reweight=a.reweight, float32=a.float32)
    return Transformer(cfg, a.seed), cfg


def _train_config(a, k):
    from .transformer import TrainConfig
    nonauto = getattr(a, "variant", "auto") == "nonauto"
    return TrainConfig(k=k, task_seed=a.task_seed, c=a.c, alpha=a.alpha, n=a.n, batch=a.batch, iters=a.iters,
                       lr=a.lr, weight_decay=a.weight_decay, optimizer="sgd" if nonauto else "adamw",
                       objective="final" if nonauto else "autoregressive", seed=a.seed,
                       eval_every=a.eval_every, eval_batch=a.eval_batch, checkpoints=True)


def _model_meta(cfg) -> dict:
    from dataclasses import asdict
    return {"model": "transformer", "config": asdict(cfg)}


def cmd_train(a, run: Run):
    from .autodiff import save_checkpoint
    from .markov_data import build_task_set
    from .transformer import METRIC_FIELDS, train
    k = _ks([a.k])[0]
    if a.task_injection and k is None:
        raise ConfigError("task injection needs a finite task set")
    model, mcfg = _transformer_from_args(a)
    tasks = build_task_set(a.task_seed, k, a.c, a.alpha) if k is not None else None
    tcfg = _train_config(a, k)
    rows = train(model, tcfg, tasks, run_dir=run.dir, readouts=not a.no_readouts)
    for p in sorted((run.dir / "checkpoints").glob("*.micl")):
        _stamp_meta(p, mcfg, k, a)
        run.register(p.relative_to(run.dir).as_posix())
    save_checkpoint(run.path("checkpoints/final.micl"), model.state(), {**_model_meta(mcfg), "k": k, "task_seed": a.task_seed,
                                                                        "iter": a.iters})
    run.register("checkpoints/final.micl")
    run.write_csv("metrics.csv", rows, METRIC_FIELDS)
    print(f"final loss_train={rows[-1]['loss_train']:.4f} loss_gen={rows[-1]['loss_gen']:.4f}")


def _stamp_meta(path: Path, mcfg, k, a):
    from .autodiff import load_checkpoint, save_checkpoint
    tensors, meta = load_checkpoint(path)
    save_checkpoint(path, tensors, {**meta, **_model_meta(mcfg), "k": k, "task_seed": a.task_seed})


def load_model(path: str):
    """Rebuild a transformer or minimal model from a MICL1 checkpoint written by this harness."""
    import torch
    from .autodiff import load_checkpoint
    from .minimal_mem import MinimalMem, MinimalMemConfig
    from .transformer import Transformer, TransformerConfig
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ConfigError(f"{path} has no model metadata")
    if meta["model"] == "transformer":
        model = Transformer(TransformerConfig(**meta["config"]))
    elif meta["model"] == "minimal":
        model = MinimalMem(MinimalMemConfig(**meta["config"]))
    else:
        raise ConfigError(f"unknown model kind {meta['model']}")
    with torch.no_grad():
        named = dict(model.named_parameters())
        named.update(dict(model.named_buffers()))
        for k, v in tensors.items():
            named[k].copy_(v)
    return model, meta


def _eval_batch(meta, a):
    from .markov_data import EnsembleSampler, build_task_set, make_rng
    k = meta.get("k")
    c = meta["config"]["c"]
    if k is None:
        _, _, s = EnsembleSampler(c, a.alpha, a.seed + 17).batch(0, a.batch, a.n, target=False)
        return s, None, None
    tasks = build_task_set(meta.get("task_seed", 0), k, c, a.alpha)
    s, ti = tasks.sample(a.batch, a.n, make_rng(a.seed, 501))
    return s, ti, tasks


def cmd_readouts(a, run: Run):
    from . import diagnostics
    rows = []
    for ck in a.checkpoint:
        model, meta = load_model(ck)
        s, ti, tasks = _eval_batch(meta, a)
        r = diagnostics.readout(model, s, int(meta.get("iter", 0)), ti)
        for layer in (1, 2):
            rows.append({"K": meta.get("k"), "iter": r.iter, "metric": f"phi_delta{layer}", "value": r.phi_delta[layer - 1]})
            rows.append({"K": meta.get("k"), "iter": r.iter, "metric": f"phi_beta{layer}", "value": r.phi_beta[layer - 1]})
            rows.append({"K": meta.get("k"), "iter": r.iter, "metric": f"nA{layer}", "value": r.n_attend[layer - 1]})
        if tasks is not None and a.behavioral:
            rows += diagnostics.behavioral_grid([(r.iter, model)], tasks, a.n, train_batch=a.batch,
                                                ood_batch=a.batch, seed=a.seed)
    run.write_csv("tables/readouts.csv", rows, ["K", "iter", "metric", "value"])


def cmd_trace(a, run: Run):
    from .circuits import trace
    model, meta = load_model(a.checkpoint)
    s, ti, _ = _eval_batch(meta, a)
    imp = trace(model, s, task_idx=ti)
    run.write_csv("tables/importance.csv", imp.rows(), ["source", "target", "kl_nats"])


def cmd_patch(a, run: Run):
    from .circuits import patch_task_vector
    from .markov_data import build_task_set, make_rng
    model, meta = load_model(a.checkpoint)
    k = meta.get("k")
    if k is None or k < 2:
        raise ConfigError("patching needs a model trained on at least two tasks")
    c = meta["config"]["c"]
    tasks = build_task_set(meta.get("task_seed", 0), k, c, a.alpha)
    rng = make_rng(a.seed, 601)
    ta = rng.integers(0, k, a.batch)
    tb = (ta + rng.integers(1, k, a.batch)) % k
    sa, _ = tasks.sample(a.batch, a.n, rng, tasks=ta)
    sb, _ = tasks.sample(a.batch, a.n, rng, tasks=tb)
    site = "phi" if meta["model"] == "minimal" else a.site
    table = patch_task_vector(model, sa, sb, tasks, site, ta, tb)
    run.write_json("tables/patch.json", table)


def cmd_landscape(a, run: Run):
    from .markov_data import EnsembleSampler
    from .sa_transformer import landscape_scan
    _, _, s = EnsembleSampler(a.c, a.alpha, a.seed).batch(0, a.batch, a.n, ablate=a.data == "bias_ablated",
                                                         law="stationary")
    betas = np.linspace(0.0, a.beta_max, a.grid)
    deltas = np.linspace(0, a.delta_max, a.grid)
    rows = landscape_scan(betas, deltas, s, a.c, a.steps)
    run.write_csv("tables/landscape.csv", rows)


def cmd_train_sa(a, run: Run):
    from .autodiff import save_checkpoint
    from .sa_transformer import SATrainConfig, sa_train, transition_summary
    summary = []
    for seed in range(a.seed, a.seed + a.seeds):
        cfg = SATrainConfig(n=a.n, batch=a.batch, lr=a.lr, iters=a.iters, seed=seed, variant=a.variant,
                            data=a.data, c=a.c, alpha=a.alpha, eval_every=a.eval_every, float32=a.float32)
        log, params = sa_train(cfg)
        rows = [dict(zip(log.keys(), vals)) for vals in zip(*log.values())]
        run.write_csv(f"tables/sa_log_seed{seed}.csv", rows)
        ts = transition_summary(log)
        summary.append({"n": a.n, "seed": seed, "variant": a.variant, "data": a.data,
                        "tau": -1 if ts.tau is None else ts.tau, "plateau_len": ts.plateau_len,
                        "final_gap": ts.final_gap, "wA_500": ts.wA_at,
                        "l1gen": float(np.mean(log["l1gen"])), "l2gen": float(np.mean(log["l2gen"]))})
        save_checkpoint(run.path(f"checkpoints/sa_seed{seed}.micl"),
                        {f"t{i}": t.detach() for i, t in enumerate(params.tensors())}, {"model": "sa", "config": cfg.__dict__})
        run.register(f"checkpoints/sa_seed{seed}.micl")
        print(f"seed {seed}: tau={ts.tau} plateau={ts.plateau_len} final_gap={ts.final_gap:.4f}")
    run.write_csv("tables/sa_summary.csv", summary)


def cmd_scaling(a, run: Run):
    from .theory import harmonic, tau_prediction
    taus: Dict[int, List[int]] = {}
    for d in a.runs:
        p = Path(d) / "tables" / "sa_summary.csv"
        if not p.exists():
            raise ConfigError(f"{d} is not a train-sa run directory")
        with open(p) as f:
            for r in csv.DictReader(f):
                if int(r["tau"]) >= 0:
                    taus.setdefault(int(r["n"]), []).append(int(r["tau"]))
    if len(taus) < 2:
        raise ConfigError("scaling needs transitions at two or more sequence lengths")
    rows = []
    for n in sorted(taus):
        rows.append({"n": n, "seeds": len(taus[n]), "tau_median": float(np.median(taus[n])),
                     "n_over_hn": tau_prediction(n, "nonauto"), "n_over_logn": n / math.log(n)})
    x = np.array([r["n_over_hn"] for r in rows])
    y = np.array([r["tau_median"] for r in rows])
    r_val = float(np.corrcoef(x, y)[0, 1]) if len(rows) > 2 else float("nan")
    slope, icpt = np.polyfit(x, y, 1)
    run.write_csv("tables/scaling.csv", rows)
    run.write_json("tables/scaling_fit.json", {"pearson_r": r_val, "slope": float(slope), "intercept": float(icpt)})
    print(f"pearson r = {r_val:.4f}")


def cmd_theory(a, run: Run):
    from .theory import EnsembleStats, f1_analytic
    ens = EnsembleStats(a.c, a.alpha, a.samples, a.seed)
    rows = ens.rows(a.d_max)
    if a.f1:
        exact = f1_analytic(a.c, a.alpha)
        e, s = ens.f_d(1)
        print(f"F1 analytic = {exact} ({float(exact):.6f}); Monte-Carlo = {e:.6f} +- {s:.6f}")
        rows.append({"quantity": "F1_analytic", "n_or_d": 1, "estimate": float(exact), "sem": 0.0,
                     "samples": 0, "seed": a.seed})
    run.write_csv("tables/theory.csv", rows, ["quantity", "n_or_d", "estimate", "sem", "samples", "seed"])


def cmd_minimal_mem(a, run: Run):
    from dataclasses import asdict
    from .autodiff import save_checkpoint
    from .markov_data import build_task_set
    from .minimal_mem import MinimalMem, MinimalMemConfig, minimal_train
    from .transformer import TrainConfig
    k = _ks([a.k])[0]
    mcfg = MinimalMemConfig(c=a.c, d_emb=a.d_emb, d_phi=a.d_phi, mlp1_layers=a.mlp1_layers, mlp2_layers=a.mlp2_layers)
    model = MinimalMem(mcfg, a.seed)
    tasks = build_task_set(a.task_seed, k, a.c, a.alpha) if k is not None else None
    tcfg = TrainConfig(k=k, task_seed=a.task_seed, c=a.c, alpha=a.alpha, n=a.n, batch=a.batch, iters=a.iters, lr=a.lr,
                       seed=a.seed, eval_every=a.eval_every, eval_batch=a.eval_batch)
    rows = minimal_train(model, tcfg, tasks)
    run.write_csv("metrics.csv", rows)
    state = {k_: v.detach() for k_, v in list(model.named_parameters()) + list(model.named_buffers())}
    save_checkpoint(run.path("checkpoints/final.micl"), state,
                    {"model": "minimal", "config": asdict(mcfg), "k": k, "task_seed": a.task_seed, "iter": a.iters})
    run.register("checkpoints/final.micl")
    r = rows[-1]
    print(f"loss_train={r['loss_train']:.4f} loss_gen={r['loss_gen']:.4f} l2gen={r['l2gen_train']:.4f}")


def cmd_k1_search(a, run: Run):
    from .diagnostics import k1_search
    from .markov_data import build_task_set
    from .transformer import train
    logs = []

    def probe(k):
        model, _ = _transformer_from_args(argparse.Namespace(**{**vars(a), "k": k, "task_injection": False,
                                                                 "variant": "auto", "heads": 1, "float32": False}))
        rows = train(model, _train_config(a, k), build_task_set(a.task_seed, k, a.c, a.alpha))
        logs.extend({**r, "K": k} for r in rows)
        return max(r["phi_beta2"] for r in rows)

    res = k1_search(probe, a.k_lo, a.k_hi, a.phi_threshold, a.max_probes)
    run.write_csv("tables/k1_probes.csv", [{"K": k, "max_phi_beta2": v, "met": m} for k, v, m in res.probes])
    run.write_csv("tables/k1_logs.csv", logs)
    run.write_json("tables/k1_result.json", {"lo": res.lo, "hi": res.hi, "midpoint": res.midpoint, "flag": res.flag})
    print(f"K1* bracket [{res.lo}, {res.hi}] ({res.flag})")


def cmd_k2_search(a, run: Run):
    from .minimal_mem import MinimalMemConfig, k2_search
    from .transformer import TrainConfig
    arch = MinimalMemConfig(c=a.c, d_emb=a.d_emb, d_phi=a.d_phi, mlp1_layers=a.mlp1_layers, mlp2_layers=a.mlp2_layers)
    tcfg = TrainConfig(k=1, task_seed=a.task_seed, c=a.c, alpha=a.alpha, n=a.n, batch=a.batch, iters=a.iters, lr=a.lr,
                       seed=a.seed, eval_every=a.eval_every, eval_batch=a.eval_batch)
    res = k2_search(arch, tcfg, a.k_lo, a.k_hi, a.window, a.max_probes, a.task_seed)
    run.write_csv("tables/k2_probes.csv", [{"K": k, "margin": v, "memorized": m} for k, v, m in res.probes])
    run.write_json("tables/k2_result.json", {"lo": res.lo, "hi": res.hi, "midpoint": res.midpoint, "flag": res.flag})
    print(f"K2-hat bracket [{res.lo}, {res.hi}] ({res.flag})")


def bootstrap_ci(values: np.ndarray, resamples: int = 1000, seed: int = 0, level: float = 0.95):
    rng = np.random.default_rng(seed)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), float(v[0])
    meds = np.median(v[rng.integers(0, v.size, (resamples, v.size))], 1)
    lo, hi = np.quantile(meds, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def cmd_report(a, run: Run):
    if not a.runs:
        raise ConfigError("report needs at least one run directory")
    tables = []
    header = None
    for d in a.runs:
        p = Path(d) / "metrics.csv"
        if not p.exists():
            raise ConfigError(f"{d} has no metrics.csv")
        with open(p) as f:
            rd = csv.DictReader(f)
            if header is None:
                header = rd.fieldnames
            elif rd.fieldnames != header:
                raise ConfigError(f"schema mismatch in {d}")
            tables.append(list(rd))
    key = header[0]
    metrics = [h for h in header[1:] if h != "wall_time"]
    merged: Dict[str, Dict[str, List[float]]] = {}
    for t in tables:
        for r in t:
            slot = merged.setdefault(r[key], {m: [] for m in metrics})
            for m in metrics:
                if r[m] not in ("", None):
                    slot[m].append(float(r[m]))
    rows = []
    for it in sorted(merged, key=float):
        row = {key: it}
        for m in metrics:
            v = np.array(merged[it][m])
            v = v[np.isfinite(v)]
            if v.size == 0:
                row.update({f"{m}_median": "", f"{m}_ci_lo": "", f"{m}_ci_hi": ""})
                continue
            lo, hi = bootstrap_ci(v, 1000, a.seed)
            row.update({f"{m}_median": float(np.median(v)), f"{m}_ci_lo": lo, f"{m}_ci_hi": hi})
        rows.append(row)
    run.write_csv("tables/report.csv", rows)
    spec = {"data": "tables/report.csv", "x": {"field": key, "scale": "log"},
            "series": [{"y": f"{m}_median", "band": [f"{m}_ci_lo", f"{m}_ci_hi"], "label": m} for m in metrics]}
    run.write_json("tables/plot_spec.json", spec)


# ---------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--config", help="TOML file with option values (flags override)")
    p.add_argument("--out", default="runs", help="root of run directories")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _data(p, n=256):
    p.add_argument("--c", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--n", type=int, default=n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="micl", description="Markov-chain in-context learning experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample sequences from a task set")
    _common(p); _data(p)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval-predictors", help="Monte-Carlo losses of the four Bayes predictors")
    _common(p)
    p.add_argument("--c", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--alpha-prime", type=float, default=1.0)
    p.add_argument("--k", type=int, nargs="+", default=[8])
    p.add_argument("--n", type=int, nargs="+", default=[256])
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--kinds", nargs="+", default=["1-Gen", "2-Gen", "1-Mem", "2-Mem"])
    p.set_defaults(func=cmd_eval_predictors)

    def model_opts(p):
        p.add_argument("--k", default="8", help="task count or 'inf' for fresh tasks")
        p.add_argument("--task-seed", type=int, default=0)
        p.add_argument("--d", type=int, default=64)
        p.add_argument("--heads", type=int, default=1)
        p.add_argument("--batch", type=int, default=128)
        p.add_argument("--iters", type=int, default=1000)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--weight-decay", type=float, default=1e-3)
        p.add_argument("--eval-every", type=int, default=50)
        p.add_argument("--eval-batch", type=int, default=256)
        p.add_argument("--float32", action="store_true")

    p = sub.add_parser("train", help="train the two-layer transformer")
    _common(p); _data(p); model_opts(p)
    p.add_argument("--variant", choices=["auto", "nonauto"], default="auto")
    p.add_argument("--reweight", type=float, default=1.0)
    p.add_argument("--task-injection", action="store_true")
    p.add_argument("--no-readouts", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, fn, help_ in (("readouts", cmd_readouts, "order parameters and divergences of checkpoints"),
                            ("trace", cmd_trace, "mean-ablation edge importance"),
                            ("patch", cmd_patch, "task-vector patching")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--checkpoint", nargs="+" if name == "readouts" else None, required=True)
        p.add_argument("--alpha", type=float, default=1.0)
        p.add_argument("--n", type=int, default=256)
        p.add_argument("--batch", type=int, default=512 if name == "trace" else 256)
        if name == "readouts":
            p.add_argument("--behavioral", action="store_true")
        if name == "patch":
            p.add_argument("--site", choices=["Att2", "Att1"], default="Att2")
        p.set_defaults(func=fn)

    p = sub.add_parser("train-sa", help="train the SA-transformer")
    _common(p); _data(p, n=128)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--variant", choices=["full", "constrained", "reduced"], default="full")
    p.add_argument("--data", choices=["control", "bias_ablated"], default="control")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--float32", action="store_true")
    p.set_defaults(func=cmd_train_sa)

    p = sub.add_parser("landscape", help="SA loss landscape over (beta, delta)")
    _common(p); _data(p, n=128)
    p.add_argument("--batch", type=int, default=2048)
    p.add_argument("--grid", type=int, default=9)
    p.add_argument("--beta-max", type=float, default=8.0)
    p.add_argument("--delta-max", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--data", choices=["control", "bias_ablated"], default="control")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("scaling", help="transition time vs N/H_N from train-sa runs")
    _common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("theory", help="ensemble statistics F_d, I and asymptotic losses")
    _common(p)
    p.add_argument("--c", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--d-max", type=int, default=6)
    p.add_argument("--f1", action="store_true")
    p.set_defaults(func=cmd_theory)

    def minimal_opts(p):
        p.add_argument("--task-seed", type=int, default=0)
        p.add_argument("--d-emb", type=int, default=64)
        p.add_argument("--d-phi", type=int, default=64)
        p.add_argument("--mlp1-layers", type=int, choices=[1, 2], default=1)
        p.add_argument("--mlp2-layers", type=int, choices=[1, 2], default=2)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--iters", type=int, default=2000)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--eval-every", type=int, default=50)
        p.add_argument("--eval-batch", type=int, default=128)

    p = sub.add_parser("minimal-mem", help="train the minimal memorization network")
    _common(p); _data(p); minimal_opts(p)
    p.add_argument("--k", default="8")
    p.set_defaults(func=cmd_minimal_mem)

    p = sub.add_parser("k1-search", help="binary search for the memorization-to-generalization threshold")
    _common(p); _data(p); model_opts(p)
    p.add_argument("--k-lo", type=int, default=1)
    p.add_argument("--k-hi", type=int, default=256)
    p.add_argument("--phi-threshold", type=float, default=0.45)
    p.add_argument("--max-probes", type=int, default=8)
    p.add_argument("--reweight", type=float, default=1.0)
    p.set_defaults(func=cmd_k1_search)

    p = sub.add_parser("k2-search", help="binary search for the minimal-model memorization capacity")
    _common(p); _data(p); minimal_opts(p)
    p.add_argument("--k-lo", type=int, default=2)
    p.add_argument("--k-hi", type=int, default=1024)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--max-probes", type=int, default=8)
    p.set_defaults(func=cmd_k2_search)

    p = sub.add_parser("report", help="merge metric logs across runs with bootstrap intervals")
    _common(p)
    p.add_argument("--runs", nargs="*", default=[])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("self-check", help="verify a run directory against its manifest")
    p.add_argument("run_dir")
    p.set_defaults(func=None)
    return ap


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def parse(argv: Sequence[str]) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = _load_toml(args.config)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}")
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**values)
        args = ap.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as e:  # argparse usage errors
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "self-check":
        problems = self_check(Path(args.run_dir))
        for p in problems:
            print(p)
        print("ok" if not problems else f"{len(problems)} problem(s)")
        return EXIT_OK if not problems else EXIT_CONFIG

    import torch
    from .autodiff import ContractError, NumericAbort
    threads = os.environ.get("MICL_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print("config error: MICL_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "config")}
    if args.command == "report" and not args.runs:
        print("config error: report needs at least one run directory", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(Path(args.out), args.command, config, getattr(args, "seed", None))
    try:
        args.func(args, run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        run.finish()
        return EXIT_CONFIG
    except (ValueError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        run.finish()
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        run.finish()
        return EXIT_NUMERIC
    run.finish()
    print(f"run directory: {run.dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
