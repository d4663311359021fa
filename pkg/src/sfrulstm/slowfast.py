"""Clock arithmetic for several time scales, and the slow-fast fusion heads.

Fast-grid indices are 1-based throughout: frame ``t`` of the finest grid
sits ``alpha_f * (T - t + 1)`` seconds before the action start. A branch
with step ``alpha_b = r * alpha_f`` sees fast frames ``1, 1 + r, 1 + 2r, ...``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import (ParamStore, ShapeError, affine, affine_backward,
                       mlp_backward, mlp_forward, relu, softmax,
                       softmax_backward)
from .rulstm import (BranchParams, BranchState, BranchTrace, StepPrediction,
                     branch_backward, branch_forward)

SCHEMES = ("single", "attention", "ensemble", "concat")
_TOL = 1e-9


class ClockError(ValueError):
    pass


def _integral(x: float) -> int | None:
    n = round(x)
    return int(n) if abs(x - n) <= _TOL * max(1.0, abs(x)) else None


@dataclass(frozen=True)
class ClockConfig:
    """Time steps of every branch (coarsest first) and the window horizons."""
    alphas: tuple[float, ...]
    tau_e: float
    tau_span: float

    @property
    def alpha_s(self) -> float:
        return self.alphas[0]

    @property
    def alpha_f(self) -> float:
        return self.alphas[-1]

    @property
    def n_branches(self) -> int:
        return len(self.alphas)

    @property
    def ratios(self) -> tuple[int, ...]:
        return tuple(_integral(a / self.alpha_f) for a in self.alphas)

    @property
    def R(self) -> int:
        return self.ratios[0]

    @property
    def T(self) -> int:
        return _integral((self.tau_e + self.tau_span) / self.alpha_f)

    @property
    def s_enc_fast(self) -> int:
        return _integral(self.tau_e / self.alpha_f)

    @property
    def s_ant_fast(self) -> int:
        return self.T - self.s_enc_fast

    def branch_steps(self, b: int) -> tuple[int, int]:
        """(S_enc, S_ant) on branch ``b``'s own grid."""
        r = self.ratios[b]
        return self.s_enc_fast // r, self.s_ant_fast // r

    def branch_indices(self, b: int) -> np.ndarray:
        """Fast-grid indices of the frames branch ``b`` consumes."""
        return np.arange(1, self.T + 1, self.ratios[b])

    @property
    def slow_indices(self) -> np.ndarray:
        return self.branch_indices(0)

    @property
    def fused_steps(self) -> np.ndarray:
        common = self.branch_indices(0)
        for b in range(1, self.n_branches):
            common = np.intersect1d(common, self.branch_indices(b))
        return common[common > self.s_enc_fast]

    def tau_of(self, t) -> np.ndarray:
        return self.alpha_f * (self.T - np.asarray(t) + 1)

    @property
    def fused_taus(self) -> np.ndarray:
        return self.tau_of(self.fused_steps)

    def to_dict(self) -> dict:
        return {"alphas": list(self.alphas), "tau_e": self.tau_e, "tau_span": self.tau_span}

    @classmethod
    def from_dict(cls, d: dict) -> "ClockConfig":
        return build_multi_clock(d["alphas"], d["tau_e"], d["tau_span"])


def build_multi_clock(alphas: Sequence[float], tau_e: float, tau_span: float) -> ClockConfig:
    """Validated clock for any number of scales; ``alphas`` in any order."""
    alphas = tuple(sorted((float(a) for a in alphas), reverse=True))
    if not alphas:
        raise ClockError("at least one time step is required")
    for name, v in [("tau_e", tau_e), ("tau_span", tau_span)] + [("alpha", a) for a in alphas]:
        if not v > 0:
            raise ClockError(f"{name}={v} must be positive")
    a_f = alphas[-1]
    for a in alphas:
        if _integral(a / a_f) is None:
            raise ClockError(f"alpha={a} / alpha_f={a_f} is not an integer ratio")
        if _integral(alphas[0] / a) is None:
            raise ClockError(f"alpha_s={alphas[0]} / alpha={a} is not an integer ratio")
    for a in alphas:
        for name, v in (("tau_e", tau_e), ("tau_span", tau_span)):
            if _integral(v / a) is None:
                raise ClockError(f"{name}={v} is not a multiple of alpha={a}")
    return ClockConfig(alphas, float(tau_e), float(tau_span))


def build_clock(alpha_s: float, alpha_f: float, tau_e: float, tau_span: float) -> ClockConfig:
    """Two-branch clock. ``alpha_s == alpha_f`` is allowed (R = 1)."""
    if alpha_s < alpha_f:
        raise ClockError(f"alpha_s={alpha_s} must be >= alpha_f={alpha_f}")
    if alpha_s > 0 and alpha_f > 0 and _integral(alpha_s / alpha_f) is None:
        raise ClockError(f"alpha_s={alpha_s} / alpha_f={alpha_f} is not an integer ratio")
    clk = build_multi_clock([alpha_s, alpha_f], tau_e, tau_span)
    return ClockConfig((float(alpha_s), float(alpha_f)), clk.tau_e, clk.tau_span)


def single_clock(alpha: float, tau_e: float, tau_span: float) -> ClockConfig:
    return build_multi_clock([alpha], tau_e, tau_span)


def snap_tau_e(alpha: float, tau_e: float) -> float:
    """Smallest multiple of ``alpha`` covering ``tau_e``."""
    return math.ceil(tau_e / alpha - _TOL) * alpha


# ---------------------------------------------------------------- heads

class MlpParams(NamedTuple):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]


SfAttnParams = MlpParams


def add_mlp_params(store: ParamStore, prefix: str, n_in: int, hidden: int, n_out: int,
                   seed: int, zero_last: bool = True) -> None:
    store.add_uniform(prefix + "W1", (hidden, n_in), n_in, seed)
    store.add_uniform(prefix + "b1", (hidden,), n_in, seed)
    if zero_last:
        store.add(prefix + "W2", np.zeros((n_out, hidden)))
        store.add(prefix + "b2", np.zeros(n_out))
    else:
        store.add_uniform(prefix + "W2", (n_out, hidden), hidden, seed)
        store.add_uniform(prefix + "b2", (n_out,), hidden, seed)


def mlp_params(store: ParamStore, prefix: str) -> MlpParams:
    return MlpParams(*(store[prefix + k] for k in ("W1", "b1", "W2", "b2")))


def weights_forward(x, p: MlpParams):
    """Softmax of the head's scores. Returns (weights, cache)."""
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"attention head expects width {p.n_in}, got {x.shape[-1]}")
    lam, mc = mlp_forward(x, *p)
    w = softmax(lam)
    return w, (mc, w)


def weights_backward(dw, cache, store: ParamStore | None = None, prefix: str = ""):
    """Returns d(input); accumulates head gradients into ``store`` if given."""
    mc, w = cache
    dlam = softmax_backward(dw, w)
    dx, dW1, db1, dW2, db2 = mlp_backward(dlam, mc)
    if store is not None:
        for k, g in zip(("W1", "b1", "W2", "b2"), (dW1, db1, dW2, db2)):
            store.accumulate(prefix + k, g)
    return dx


def combine(w, stack):
    """``sum_b w[..., b] * stack[b]``; ``stack`` is (B, ..., K)."""
    return np.einsum("...b,b...k->...k", w, stack)


def combine_backward(dout, w, stack):
    """Returns (dw, dstack)."""
    dw = np.einsum("...k,b...k->...b", dout, stack)
    dstack = np.einsum("...b,...k->b...k", w, dout)
    return dw, dstack


# ---------------------------------------------------------------- single-instance ops

def _state_vec(s) -> np.ndarray:
    return s.concat() if isinstance(s, BranchState) else np.asarray(s, dtype=np.float64)


def sf_attention(branch_states: Sequence, p: SfAttnParams) -> np.ndarray:
    """Fusion weights from the concatenated branch (encoder) states."""
    if len(branch_states) != p.n_out:
        raise ValueError(f"{len(branch_states)} states for a {p.n_out}-branch head")
    x = np.concatenate([_state_vec(s) for s in branch_states], axis=-1)
    return weights_forward(x, p)[0]


def fuse_logits(logits: Sequence, w) -> np.ndarray:
    logits = [np.asarray(l, dtype=np.float64) for l in logits]
    w = np.asarray(w, dtype=np.float64)
    if len(logits) != w.shape[-1] or len({l.shape for l in logits}) != 1:
        raise ShapeError(f"cannot fuse {[l.shape for l in logits]} with weights {w.shape}")
    return combine(w, np.stack(logits))


def ensemble_fuse(logits: Sequence) -> np.ndarray:
    logits = [np.asarray(l, dtype=np.float64) for l in logits]
    if not logits or len({l.shape for l in logits}) != 1:
        raise ShapeError(f"cannot average logits of shapes {[l.shape for l in logits]}")
    return np.mean(np.stack(logits), axis=0)


def concat_predict(branch_states: Sequence, W, b) -> np.ndarray:
    """Class scores straight from the concatenated decoder states."""
    x = np.concatenate([_state_vec(s) for s in branch_states], axis=-1)
    return affine(W, b, x)


# ---------------------------------------------------------------- batched pipeline

def gather_indices(clock: ClockConfig, b: int) -> tuple[np.ndarray, np.ndarray]:
    """For branch ``b``: (anticipation-step index, encoder-step index) of each
    fused step, both 0-based into the branch trace arrays."""
    r = clock.ratios[b]
    k = (clock.fused_steps - 1) // r  # 0-based branch step
    s_enc, _ = clock.branch_steps(b)
    return k - s_enc, k


def run_branch(x_tm, clock: ClockConfig, b: int, p: BranchParams, prefix: str, *,
               literal_unroll: bool = False, train: bool = False, rng=None,
               record: bool = False) -> BranchTrace:
    r = clock.ratios[b]
    s_enc, _ = clock.branch_steps(b)
    return branch_forward(x_tm[::r], s_enc, p, clock.alphas[b],
                          unroll_ratio=r if literal_unroll else 1, train=train,
                          rng=rng, record=record, prefix=prefix, time_major=True)


@dataclass
class Gathered:
    """Per-branch quantities at the fused steps, each (F, N, .)."""
    logits: np.ndarray  # (B, F, N, C)
    r: np.ndarray       # (B, F, N, 2d) encoder states
    u: np.ndarray       # (B, F, N, 2d) decoder outputs


def gather(traces: Sequence[BranchTrace], clock: ClockConfig) -> Gathered:
    L, R, U = [], [], []
    for b, tr in enumerate(traces):
        pi, ei = gather_indices(clock, b)
        L.append(tr.logits_tm[pi])
        R.append(np.concatenate([tr.enc_h[ei], tr.enc_c[ei]], axis=-1))
        U.append(tr.u[pi])
    return Gathered(np.stack(L), np.stack(R), np.stack(U))


def scatter_backward(traces: Sequence[BranchTrace], clock: ClockConfig, store: ParamStore,
                     dlogits=None, dr=None, du=None) -> None:
    """Route gradients wrt gathered quantities back through every branch."""
    for b, tr in enumerate(traces):
        pi, ei = gather_indices(clock, b)
        N = tr.enc_h.shape[1]
        d = tr.enc_h.shape[2]
        dl_full = None
        if dlogits is not None:
            dl_full = np.zeros_like(tr.logits_tm)
            dl_full[pi] = dlogits[b]
        dEh = dEc = None
        if dr is not None:
            dEh = np.zeros((tr.length, N, d))
            dEc = np.zeros((tr.length, N, d))
            dEh[ei] = dr[b][..., :d]
            dEc[ei] = dr[b][..., d:]
        du_full = None
        if du is not None:
            du_full = np.zeros_like(tr.u)
            du_full[pi] = du[b]
        branch_backward(tr, store, dl_full, du=du_full, d_enc_h=dEh, d_enc_c=dEc)


def fusion_head_forward(g: Gathered, scheme: str, head=None):
    """Fuse gathered branch outputs. Returns (fused (F,N,C), weights (F,N,B), cache)."""
    B, F, N, _ = g.logits.shape
    if scheme == "single":
        if B != 1:
            raise ValueError("scheme 'single' needs exactly one branch")
        return g.logits[0], np.ones((F, N, 1)), None
    if scheme == "ensemble":
        w = np.full((F, N, B), 1.0 / B)
        return combine(w, g.logits), w, None
    if scheme == "attention":
        x = np.concatenate(list(g.r), axis=-1)
        w, wc = weights_forward(x, head)
        return combine(w, g.logits), w, (x, w, wc)
    if scheme == "concat":
        W, b = head
        x = np.concatenate(list(g.u), axis=-1)
        if W.shape[1] != x.shape[-1]:
            raise ShapeError(f"concat head width {W.shape[1]} != {x.shape[-1]}")
        return x @ W.T + b, np.full((F, N, B), np.nan), x
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def fusion_head_backward(dfused, g: Gathered, scheme: str, head, cache,
                         store: ParamStore, head_prefix: str):
    """Returns (dlogits, dr, du) stacks (entries may be None)."""
    B = g.logits.shape[0]
    if scheme == "single":
        return dfused[None], None, None
    if scheme == "ensemble":
        return np.broadcast_to(dfused / B, g.logits.shape).copy(), None, None
    if scheme == "attention":
        x, w, wc = cache
        dw, dlogits = combine_backward(dfused, w, g.logits)
        dx = weights_backward(dw, wc, store, head_prefix)
        dr = np.stack(np.split(dx, B, axis=-1))
        return dlogits, dr, None
    if scheme == "concat":
        W, _ = head
        dx, dW, db = affine_backward(dfused, W, cache)
        store.accumulate(head_prefix + "W", dW)
        store.accumulate(head_prefix + "b", db)
        return None, None, np.stack(np.split(dx, B, axis=-1))
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class FusedResult:
    """Fused predictions at the clock's fused steps."""
    clock: ClockConfig
    logits_tm: np.ndarray          # (F, N, C)
    weights_tm: np.ndarray         # (F, N, B) or per-order layout
    traces: list
    extra: dict | None = None

    @property
    def steps(self) -> np.ndarray:
        return self.clock.fused_steps

    @property
    def taus(self) -> np.ndarray:
        return self.clock.fused_taus

    @property
    def logits(self) -> np.ndarray:
        return self.logits_tm.transpose(1, 0, 2)

    @property
    def weights(self) -> np.ndarray:
        return self.weights_tm.transpose(1, 0, 2)

    def predictions(self, sample: int = 0) -> list[StepPrediction]:
        return [StepPrediction(int(t), float(tau), self.logits_tm[i, sample].copy())
                for i, (t, tau) in enumerate(zip(self.steps, self.taus))]


def multi_scale_forward(seq, clock: ClockConfig, branch_params: Sequence[BranchParams],
                        scheme: str = "attention", head=None, *, literal_unroll: bool = False,
                        train: bool = False, rng=None, record: bool = False,
                        prefixes: Sequence[str] | None = None) -> FusedResult:
    """Run every scale branch over a fast-grid sequence and fuse.

    ``seq`` is (T, D) or (N, T, D) on the finest grid; ``branch_params`` are
    ordered like ``clock.alphas`` (coarsest first). ``head`` is the
    attention MLP, or (W, b) for ``concat``.
    """
    x = np.asarray(seq, dtype=np.float64)
    x_tm = x[:, None, :] if x.ndim == 2 else x.transpose(1, 0, 2)
    if x_tm.shape[0] != clock.T:
        raise ValueError(f"sequence length {x_tm.shape[0]} != clock T={clock.T}")
    if len(branch_params) != clock.n_branches:
        raise ValueError(f"{len(branch_params)} branches for a {clock.n_branches}-scale clock")
    if len(clock.fused_steps) == 0:
        raise ClockError("branches share no anticipation step")
    prefixes = prefixes or [""] * clock.n_branches
    traces = [run_branch(x_tm, clock, b, p, prefixes[b], literal_unroll=literal_unroll,
                         train=train, rng=rng, record=record)
              for b, p in enumerate(branch_params)]
    g = gather(traces, clock)
    fused, w, cache = fusion_head_forward(g, scheme, head)
    return FusedResult(clock, fused, w, traces, {"gathered": g, "cache": cache})


def slowfast_forward(seq, clock: ClockConfig, slow: BranchParams, fast: BranchParams,
                     scheme: str = "attention", head=None, **kw) -> FusedResult:
    if clock.n_branches != 2:
        raise ValueError("slowfast_forward needs a two-branch clock")
    return multi_scale_forward(seq, clock, [slow, fast], scheme, head, **kw)
