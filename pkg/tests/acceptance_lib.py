"""Experiment drivers behind the acceptance suite.

Long runs are cached under ``artifacts/acceptance`` keyed by a hash of their configuration,
so repeated test sessions reuse finished runs. Delete the directory to recompute.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from micl.theory import harmonic

CACHE = Path(os.environ.get("MICL_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / "artifacts" / "acceptance"))

SA_SEEDS = (0, 1, 2, 3)
SCALING_NS = (32, 64, 128, 256)


def _key(name: str, cfg: dict) -> Path:
    h = hashlib.sha1(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
    return CACHE / f"{name}-{h}"


def cached_json(name: str, cfg: dict, fn):
    p = _key(name, cfg).with_suffix(".json")
    if p.exists():
        return json.loads(p.read_text())
    out = fn()
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".tmp")
    tmp.write_text(json.dumps({"config": cfg, "result": out}, indent=1))
    tmp.replace(p)
    return json.loads(p.read_text())


# ---------------------------------------------------------------- SA transformer

def sa_iters(n: int) -> int:
    """Enough steps to pass the transition with a settled tail at lr 1, batch 256."""
    return int(170 * n / harmonic(n)) + 600


def sa_run(n: int, data: str, seed: int, variant: str = "full") -> dict:
    from micl.sa_transformer import SATrainConfig, sa_train
    cfg = dict(n=n, data=data, seed=seed, variant=variant, iters=sa_iters(n), batch=256, lr=1.0)
    p = _key("sa", cfg).with_suffix(".npz")
    if not p.exists():
        torch.set_num_threads(1)
        log, _ = sa_train(SATrainConfig(**cfg))
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.stem + ".tmp.npz")
        np.savez(tmp, **log)
        tmp.replace(p)
    return dict(np.load(p))


def exponent_window(tau: int) -> tuple:
    """Pre-transition fit window: after the w_A relaxation, before the drop."""
    return tau // 8, (3 * tau) // 4


# ---------------------------------------------------------------- minimal memorizing model

MINIMAL_BATCH = 32


def minimal_run(k, d_phi: int, iters: int, seed: int = 0, n: int = 256):
    """Train (or load) a float32 minimal model; returns (metric rows, model, task set or None)."""
    from micl.minimal_mem import MinimalMem, MinimalMemConfig, minimal_train
    from micl.markov_data import build_task_set
    from micl.transformer import TrainConfig
    cfg = dict(k=k, d_phi=d_phi, iters=iters, seed=seed, n=n, batch=MINIMAL_BATCH)
    base = _key("minimal", cfg)
    arch = MinimalMemConfig(d_phi=d_phi, float32=True)
    model = MinimalMem(arch, seed=seed)
    tasks = None if k is None else build_task_set(seed, k, 10)
    if not base.with_suffix(".pt").exists():
        torch.set_num_threads(1)
        tc = TrainConfig(k=k, task_seed=seed, c=10, n=n, batch=MINIMAL_BATCH, iters=iters, seed=seed,
                         eval_every=max(1, iters // 20), eval_batch=256)
        log = base.with_suffix(".log")
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(log, "w") as f:
            rows = minimal_train(model, tc, tasks, callback=lambda r: print(json.dumps(r), file=f, flush=True))
        tmp = base.with_suffix(".tmp")
        torch.save({"rows": rows, "state": model.state_dict()}, tmp)
        tmp.replace(base.with_suffix(".pt"))
    blob = torch.load(base.with_suffix(".pt"))
    model.load_state_dict(blob["state"])
    return blob["rows"], model, tasks


MINIMAL_MEM = dict(k=8, d_phi=64, iters=600)
MINIMAL_FRESH = dict(k=None, d_phi=128, iters=3000)


# ---------------------------------------------------------------- desk transformer perturbations

DESK = dict(d=32, n=64, batch=32, iters=2000, eval_every=100)
PERTURB_SEEDS = (0, 1, 2, 3, 4, 5)


def desk_run(k: int, seed: int, reweight: float = 1.0, inject: bool = False) -> list:
    """Metric rows of one desk-scale transformer run on the task set with seed 0."""
    from micl.markov_data import build_task_set
    from micl.transformer import (TrainConfig, Transformer, TransformerConfig, apply_gradient_reweight,
                                  enable_task_injection, train)

    def run():
        torch.set_num_threads(1)
        model = Transformer(TransformerConfig(c=10, d=DESK["d"], n_max=DESK["n"]), seed=seed)
        if reweight != 1.0:
            apply_gradient_reweight(model, reweight)
        if inject:
            enable_task_injection(model, k)
        tc = TrainConfig(k=k, c=10, n=DESK["n"], batch=DESK["batch"], iters=DESK["iters"], seed=seed,
                         eval_every=DESK["eval_every"], eval_batch=128)
        return train(model, tc, build_task_set(0, k, 10))
    cfg = dict(DESK, k=k, seed=seed, reweight=reweight, inject=inject)
    return cached_json("desk", cfg, run)["result"]


def max_phi_beta(rows) -> float:
    return max(r["phi_beta2"] for r in rows)


def k1_bracket(k_lo: int = 4, k_hi: int = 1024, max_probes: int = 8) -> dict:
    from micl.diagnostics import k1_search

    def search():
        r = k1_search(lambda k: max_phi_beta(desk_run(k, 0)), k_lo, k_hi, max_probes=max_probes)
        return {"lo": r.lo, "hi": r.hi, "flag": r.flag, "probes": [list(p) for p in r.probes]}
    return cached_json("k1", dict(DESK, k_lo=k_lo, k_hi=k_hi, max_probes=max_probes), search)["result"]


def perturbation_runs() -> dict:
    k = k1_bracket()["hi"]
    out = {"k": k}
    for seed in PERTURB_SEEDS:
        out[seed] = {"control": desk_run(k, seed), "reweight": desk_run(k, seed, reweight=0.1),
                     "inject": desk_run(k, seed, inject=True)}
    return out


if __name__ == "__main__":
    import sys
    what = sys.argv[1:] or ["sa"]
    if "sa" in what:
        for seed in SA_SEEDS:
            for data in ("control", "bias_ablated"):
                sa_run(128, data, seed)
                print("done", 128, data, seed, flush=True)
    if "minimal" in what:
        minimal_run(**MINIMAL_MEM)
        print("done minimal mem", flush=True)
        minimal_run(**MINIMAL_FRESH)
        print("done minimal fresh", flush=True)
    if "desk" in what:
        print("k1 bracket", k1_bracket(), flush=True)
        perturbation_runs()
        print("done desk", flush=True)
    if "scaling" in what:
        for n in SCALING_NS:
            for seed in SA_SEEDS:
                sa_run(n, "control", seed)
                print("done", n, "control", seed, flush=True)
