"""Modality attention and its two composition orders with scale fusion.

``modsf``: per scale, modality attention fuses logits and encoder states;
the scale head then weighs the fused per-scale states.
``sfmod``: per modality, a scale head fuses logits and states; modality
attention then weighs the per-modality results.
``concat-all``: one head over every (modality, scale) encoder state.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .numerics import ParamStore
from .rulstm import BranchParams
from .slowfast import (ClockConfig, ClockError, FusedResult, Gathered, MlpParams,
                       combine, combine_backward, fuse_logits, gather, run_branch,
                       weights_backward, weights_forward)

ORDERS = ("modsf", "sfmod", "concat-all")
MATT_INPUTS = ("weighted", "raw")

MattParams = MlpParams


def matt_weights(states: Sequence, p: MattParams) -> np.ndarray:
    """Modality weights from the concatenated per-modality encoder states."""
    if len(states) != p.n_out:
        raise ValueError(f"{len(states)} modality states for a {p.n_out}-modality head")
    x = np.concatenate([s.concat() if hasattr(s, "concat") else np.asarray(s, float)
                        for s in states], axis=-1)
    return weights_forward(x, p)[0]


def matt_fuse(logits: Sequence, w) -> np.ndarray:
    return fuse_logits(logits, w)


def _split(x, n):
    return np.split(x, n, axis=-1)


# ---------------------------------------------------------------- heads

def modsf_head_forward(Gs: Sequence[Gathered], matt: Sequence[MattParams], sf: MlpParams):
    M, B = len(Gs), Gs[0].logits.shape[0]
    wms, wcs, Lms, Rms, lsig, rsig = [], [], [], [], [], []
    for b in range(B):
        Lm = np.stack([G.logits[b] for G in Gs])
        Rm = np.stack([G.r[b] for G in Gs])
        wm, wc = weights_forward(np.concatenate(list(Rm), axis=-1), matt[b])
        wms.append(wm), wcs.append(wc), Lms.append(Lm), Rms.append(Rm)
        lsig.append(combine(wm, Lm))
        rsig.append(combine(wm, Rm))
    lsig = np.stack(lsig)
    ws, sc = weights_forward(np.concatenate(rsig, axis=-1), sf)
    fused = combine(ws, lsig)
    weights = {"scale": ws, "modality": np.stack(wms, axis=-2)}  # (F,N,B,M)
    return fused, weights, (wms, wcs, Lms, Rms, lsig, ws, sc, M, B)


def modsf_head_backward(dfused, cache, store: ParamStore, matt_prefixes, sf_prefix):
    wms, wcs, Lms, Rms, lsig, ws, sc, M, B = cache
    dws, dlsig = combine_backward(dfused, ws, lsig)
    drsig = _split(weights_backward(dws, sc, store if sf_prefix else None, sf_prefix), B)
    dlog = [[None] * B for _ in range(M)]
    dr = [[None] * B for _ in range(M)]
    for b in range(B):
        dw1, dLm = combine_backward(dlsig[b], wms[b], Lms[b])
        dw2, dRm = combine_backward(drsig[b], wms[b], Rms[b])
        dx = _split(weights_backward(dw1 + dw2, wcs[b], store, matt_prefixes[b]), M)
        for m in range(M):
            dlog[m][b] = dLm[m]
            dr[m][b] = dRm[m] + dx[m]
    return dlog, dr


def sfmod_head_forward(Gs: Sequence[Gathered], sf: Sequence[MlpParams], matt: MattParams,
                       matt_input: str = "weighted"):
    if matt_input not in MATT_INPUTS:
        raise ValueError(f"matt_input must be one of {MATT_INPUTS}")
    M, B = len(Gs), Gs[0].logits.shape[0]
    wss, scs, lm, sm, xs = [], [], [], [], []
    for m, G in enumerate(Gs):
        x = np.concatenate(list(G.r), axis=-1)
        ws, sc = weights_forward(x, sf[m])
        wss.append(ws), scs.append(sc), xs.append(x)
        lm.append(combine(ws, G.logits))
        sm.append(combine(ws, G.r))
    lm = np.stack(lm)
    xin = np.concatenate(sm if matt_input == "weighted" else xs, axis=-1)
    wm, mc = weights_forward(xin, matt)
    fused = combine(wm, lm)
    weights = {"modality": wm, "scale": np.stack(wss, axis=-2)}  # (F,N,M,B)
    return fused, weights, (wss, scs, lm, wm, mc, matt_input, M, B)


def sfmod_head_backward(dfused, cache, Gs, store: ParamStore, sf_prefixes, matt_prefix):
    wss, scs, lm, wm, mc, matt_input, M, B = cache
    dwm, dlm = combine_backward(dfused, wm, lm)
    dxin = _split(weights_backward(dwm, mc, store, matt_prefix), M)
    dlog, dr = [], []
    for m, G in enumerate(Gs):
        dws, dL = combine_backward(dlm[m], wss[m], G.logits)
        dR = np.zeros_like(G.r)
        if matt_input == "weighted":
            dws2, dR = combine_backward(dxin[m], wss[m], G.r)
            dws = dws + dws2
        else:
            dR = dR + np.stack(_split(dxin[m], B))
        dx = weights_backward(dws, scs[m], store, sf_prefixes[m])
        dR = dR + np.stack(_split(dx, B))
        dlog.append(list(dL))
        dr.append(list(dR))
    return dlog, dr


def concat_all_head_forward(Gs: Sequence[Gathered], head: MlpParams):
    M, B = len(Gs), Gs[0].logits.shape[0]
    x = np.concatenate([G.r[b] for G in Gs for b in range(B)], axis=-1)
    stack = np.stack([G.logits[b] for G in Gs for b in range(B)])
    w, wc = weights_forward(x, head)
    return combine(w, stack), {"branch": w}, (w, wc, stack, M, B)


def concat_all_head_backward(dfused, cache, store: ParamStore, prefix):
    w, wc, stack, M, B = cache
    dw, dstack = combine_backward(dfused, w, stack)
    dx = _split(weights_backward(dw, wc, store, prefix), M * B)
    dlog = [[dstack[m * B + b] for b in range(B)] for m in range(M)]
    dr = [[dx[m * B + b] for b in range(B)] for m in range(M)]
    return dlog, dr


# ---------------------------------------------------------------- convenience forwards

def _run_all(features, clock: ClockConfig, params: Sequence[Sequence[BranchParams]], **kw):
    if len(clock.fused_steps) == 0:
        raise ClockError("branches share no anticipation step")
    traces, Gs = [], []
    for x, plist in zip(features, params):
        x = np.asarray(x, dtype=np.float64)
        x_tm = x[:, None, :] if x.ndim == 2 else x.transpose(1, 0, 2)
        if x_tm.shape[0] != clock.T:
            raise ValueError(f"sequence length {x_tm.shape[0]} != clock T={clock.T}")
        if len(plist) != clock.n_branches:
            raise ValueError("every modality needs one branch per scale")
        tr = [run_branch(x_tm, clock, b, p, "", **kw) for b, p in enumerate(plist)]
        traces.append(tr)
        Gs.append(gather(tr, clock))
    return traces, Gs


def modsf_forward(features: Sequence, clock: ClockConfig,
                  params: Sequence[Sequence[BranchParams]], matt: Sequence[MattParams],
                  sf: MlpParams, **kw) -> FusedResult:
    """``features[m]`` is modality m's fast-grid sequence; ``params[m][b]``
    its branch at scale b; ``matt[b]`` the modality head of scale b."""
    traces, Gs = _run_all(features, clock, params, **kw)
    fused, w, _ = modsf_head_forward(Gs, matt, sf)
    return FusedResult(clock, fused, w["scale"], traces, {"weights": w})


def sfmod_forward(features: Sequence, clock: ClockConfig,
                  params: Sequence[Sequence[BranchParams]], sf: Sequence[MlpParams],
                  matt: MattParams, matt_input: str = "weighted", **kw) -> FusedResult:
    traces, Gs = _run_all(features, clock, params, **kw)
    fused, w, _ = sfmod_head_forward(Gs, sf, matt, matt_input)
    return FusedResult(clock, fused, w["modality"], traces, {"weights": w})


def concat_all_forward(features: Sequence, clock: ClockConfig,
                       params: Sequence[Sequence[BranchParams]], head: MlpParams,
                       **kw) -> FusedResult:
    traces, Gs = _run_all(features, clock, params, **kw)
    fused, w, _ = concat_all_head_forward(Gs, head)
    return FusedResult(clock, fused, w["branch"], traces, {"weights": w})
