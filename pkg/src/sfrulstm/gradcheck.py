"""Catalogue of small models whose analytic gradients are checked against
central finite differences."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import Model, ModelConfig
from .numerics import finite_diff_grad, rel_error
from .slowfast import build_clock, build_multi_clock, single_clock
from .train import loss_and_grad

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCase:
    name: str
    config: ModelConfig
    batch: int = 2
    keep: float = 1.0  # < 1 runs dropout with a fixed mask
    aux_weight: float = 0.0
    spread: float = 1.0  # parameters drawn from uniform(-spread, spread)


def catalogue(seed: int = 0) -> list[GradCase]:
    sf = build_clock(0.5, 0.25, 1.0, 1.0)  # T = 8
    two = dict(hidden=4, classes=5, clock=sf, head_hidden=6, seed=seed, keep=1.0)
    # width 2 keeps the multimodal graphs small enough that few gradient entries
    # land near the finite-difference round-off floor (~1e-11)
    mm = dict(modalities=("rgb", "flow"), dims=(3, 2), hidden=2, classes=4, clock=sf,
              head_hidden=5, seed=seed, keep=1.0)
    return [
        GradCase("branch d4 D3 C5 S3+4",
                 ModelConfig(("rgb",), (3,), 4, 5, single_clock(0.25, 0.75, 1.0),
                             scheme="single", seed=seed, keep=1.0)),
        GradCase("slowfast attention", ModelConfig(("rgb",), (3,), scheme="attention", **two)),
        GradCase("slowfast concat", ModelConfig(("rgb",), (3,), scheme="concat", **two)),
        GradCase("slowfast ensemble literal-unroll dropout+aux",
                 ModelConfig(("rgb",), (3,), scheme="ensemble",
                             **{**two, "literal_unroll": True, "keep": 0.5}),
                 keep=0.5, aux_weight=0.3),
        GradCase("3-branch attention T12",
                 ModelConfig(("rgb",), (2,), 3, 4, build_multi_clock([0.5, 0.25, 0.125], 0.5, 1.0),
                             scheme="attention", head_hidden=5, seed=seed, keep=1.0)),
        GradCase("modsf M2", ModelConfig(order="modsf", **mm)),
        GradCase("sfmod M2 weighted", ModelConfig(order="sfmod", **mm)),
        GradCase("sfmod M2 raw", ModelConfig(order="sfmod", matt_input="raw", **mm)),
        GradCase("concat-all M2", ModelConfig(order="concat-all", **mm)),
    ]


def check_case(case: GradCase, seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    cfg = case.config
    model = Model(cfg)
    draw = np.random.default_rng(seed + 1)
    for n in sorted(model.store):
        p = model.store[n]
        p[...] = draw.uniform(-case.spread, case.spread, size=p.shape)
    rng = np.random.default_rng(seed)
    feats = {m: rng.normal(size=(case.batch, cfg.clock.T, D))
             for m, D in zip(cfg.modalities, cfg.dims)}
    labels = rng.integers(0, cfg.classes, size=case.batch)
    train = case.keep < 1.0

    def objective(store):
        m = Model(cfg, store)
        store.zero_grad()
        return loss_and_grad(m, feats, labels, train=train,
                             rng=np.random.default_rng(seed + 7), aux_weight=case.aux_weight)

    model.store.zero_grad()
    objective(model.store)
    analytic = {n: g.copy() for n, g in model.store.grads.items()}
    numeric = finite_diff_grad(objective, model.store, eps)
    return max(float(rel_error(analytic[n], numeric[n]).max()) for n in analytic)


def run(seed: int = 0, verbose: bool = True,
        eps: float = 1e-5) -> list[tuple[str, float, float]]:
    results = []
    for case in catalogue(seed):
        t0 = time.perf_counter()
        err = check_case(case, seed, eps)
        results.append((case.name, err, time.perf_counter() - t0))
        if verbose:
            status = "ok" if err <= TOLERANCE else "FAIL"
            print(f"{case.name:48s} max rel err {err:.3e}  {status}", flush=True)
    return results
