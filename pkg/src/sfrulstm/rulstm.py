"""Single-branch rolling/unrolling encoder-decoder.

Gate blocks inside every 4d-wide LSTM tensor are ordered
input / forget / candidate / output.

The scalar-level ops (``lstm_step``, ``roll_encode``, ``unroll_decode``,
``classify``) operate on one sample and are kept deliberately simple.
``branch_forward`` / ``branch_backward`` are the batched, trace-recording
versions used for training; they run every anticipation step's decoder
chain in one stacked recurrence (chains join the stack as they start and
all finish on the same iteration).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numerics import (ParamStore, ShapeError, affine, affine_backward,
                       dropout_mask, sigmoid)

GATES = ("input", "forget", "candidate", "output")


class LstmParams(NamedTuple):
    Wx: np.ndarray  # (4d, D)
    Wh: np.ndarray  # (4d, d)
    b: np.ndarray   # (4d,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]


class BranchParams(NamedTuple):
    enc: LstmParams
    dec: LstmParams
    clf_W: np.ndarray  # (C, 2d)
    clf_b: np.ndarray  # (C,)
    keep: float = 1.0  # dropout keep probability on the classifier input


@dataclass(frozen=True)
class BranchState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "BranchState":
        return cls(np.zeros(d), np.zeros(d))

    def concat(self) -> np.ndarray:
        return np.concatenate([self.h, self.c], axis=-1)


@dataclass(frozen=True)
class StepPrediction:
    t: int          # 1-based step on the branch's own grid
    tau_a: float    # seconds before the action start
    logits: np.ndarray


def add_lstm_params(store: ParamStore, prefix: str, D: int, d: int, seed: int) -> None:
    store.add_uniform(prefix + "Wx", (4 * d, D), D + d, seed)
    store.add_uniform(prefix + "Wh", (4 * d, d), D + d, seed)
    b = store.add_uniform(prefix + "b", (4 * d,), D + d, seed)
    b[d:2 * d] = 1.0  # forget-gate bias


def add_branch_params(store: ParamStore, prefix: str, D: int, d: int, C: int,
                      seed: int) -> None:
    """Register encoder, decoder and classifier tensors under ``prefix``."""
    add_lstm_params(store, prefix + "enc.", D, d, seed)
    add_lstm_params(store, prefix + "dec.", D, d, seed)
    store.add_uniform(prefix + "clf.W", (C, 2 * d), 2 * d, seed)
    store.add_uniform(prefix + "clf.b", (C,), 2 * d, seed)


def lstm_params(store: ParamStore, prefix: str) -> LstmParams:
    return LstmParams(store[prefix + "Wx"], store[prefix + "Wh"], store[prefix + "b"])


def branch_params(store: ParamStore, prefix: str, keep: float = 1.0) -> BranchParams:
    return BranchParams(lstm_params(store, prefix + "enc."),
                        lstm_params(store, prefix + "dec."),
                        store[prefix + "clf.W"], store[prefix + "clf.b"], keep)


# ---------------------------------------------------------------- single-sample ops

def lstm_step(z, s: BranchState, p: LstmParams) -> BranchState:
    z = np.asarray(z, dtype=np.float64)
    d = p.hidden
    if z.shape != (p.Wx.shape[1],) or s.h.shape != (d,) or s.c.shape != (d,):
        raise ShapeError(f"lstm_step: z{z.shape}, h{s.h.shape}, c{s.c.shape} "
                         f"vs Wx{p.Wx.shape}, Wh{p.Wh.shape}")
    a = affine(np.hstack([p.Wx, p.Wh]), p.b, np.concatenate([z, s.h]))
    i, f = sigmoid(a[:d]), sigmoid(a[d:2 * d])
    g, o = np.tanh(a[2 * d:3 * d]), sigmoid(a[3 * d:])
    c = f * s.c + i * g
    return BranchState(o * np.tanh(c), c)


def roll_encode(seq, p: LstmParams) -> list[BranchState]:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ValueError(f"roll_encode needs a non-empty (T, D) sequence, got {seq.shape}")
    s = BranchState.zeros(p.hidden)
    out = []
    for z in seq:
        s = lstm_step(z, s, p)
        out.append(s)
    return out


def unroll_decode(z_anchor, r: BranchState, n: int, p: LstmParams) -> BranchState:
    if n < 1:
        raise ValueError(f"unroll count must be >= 1, got {n}")
    s = r
    for _ in range(n):
        s = lstm_step(z_anchor, s, p)
    return s


def classify(u: BranchState, clf_W, clf_b, dropout_active: bool = False,
             keep: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    x = u.concat()
    if clf_W.shape[1] != x.shape[-1]:
        raise ShapeError(f"classifier width {clf_W.shape[1]} != state width {x.shape[-1]}")
    if dropout_active and keep < 1.0:
        x = x * dropout_mask(x.shape, keep, rng or np.random.default_rng())
    return affine(clf_W, clf_b, x)


# ---------------------------------------------------------------- batched cell

def _cell_forward(xp, h, c, Wh, b):
    """One LSTM step given the precomputed input projection ``xp``."""
    d = h.shape[-1]
    a = xp + h @ Wh.T + b
    i = sigmoid(a[..., :d])
    f = sigmoid(a[..., d:2 * d])
    g = np.tanh(a[..., 2 * d:3 * d])
    o = sigmoid(a[..., 3 * d:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    return o * tc, c2, (h, c, i, f, g, o, tc)


def _cell_backward(dh2, dc2, cache):
    """Returns (da, dc_prev); caller handles the linear parts."""
    h, c, i, f, g, o, tc = cache
    dc = dc2 + dh2 * o * (1.0 - tc * tc)
    da = np.concatenate([dc * g * i * (1.0 - i),
                         dc * c * f * (1.0 - f),
                         dc * i * (1.0 - g * g),
                         dh2 * tc * o * (1.0 - o)], axis=-1)
    return da, dc * f


def _flat(a):
    return a.reshape(-1, a.shape[-1])


@dataclass
class BranchTrace:
    """Forward record of one branch over a batch (arrays are time-major)."""
    alpha: float
    s_enc: int
    unroll_ratio: int
    enc_h: np.ndarray      # (L, N, d)
    enc_c: np.ndarray      # (L, N, d)
    u: np.ndarray          # (S, N, 2d) decoder outputs, pre-dropout
    logits_tm: np.ndarray  # (S, N, C)
    prefix: str = ""
    caches: dict | None = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.enc_h.shape[0]

    @property
    def s_ant(self) -> int:
        return self.length - self.s_enc

    @property
    def steps(self) -> np.ndarray:
        """1-based branch-grid indices of the anticipation steps."""
        return np.arange(self.s_enc + 1, self.length + 1)

    @property
    def taus(self) -> np.ndarray:
        return self.alpha * (self.length - self.steps + 1)

    @property
    def logits(self) -> np.ndarray:
        """(N, S, C) batch-first view."""
        return self.logits_tm.transpose(1, 0, 2)

    def predictions(self, sample: int = 0) -> list[StepPrediction]:
        return [StepPrediction(int(t), float(tau), self.logits_tm[k, sample].copy())
                for k, (t, tau) in enumerate(zip(self.steps, self.taus))]


def _to_time_major(seq) -> tuple[np.ndarray, bool]:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        return seq[:, None, :], True
    if seq.ndim == 3:
        return seq.transpose(1, 0, 2), False
    raise ShapeError(f"expected (L, D) or (N, L, D) features, got {seq.shape}")


def branch_forward(seq, s_enc: int, p: BranchParams, alpha: float = 1.0, *,
                   unroll_ratio: int = 1, train: bool = False,
                   rng: np.random.Generator | None = None, record: bool = True,
                   prefix: str = "", time_major: bool = False) -> BranchTrace:
    """Encode, unroll and classify at every anticipation step.

    ``seq`` is (L, D) or (N, L, D) on this branch's grid, L = S_enc + S_ant.
    The decoder for step t runs ``unroll_ratio * (L - t + 1)`` cell steps
    fed with frame t. With ``unroll_ratio=1`` it unrolls on the branch's own
    grid; the ratio to the finest grid reproduces the literal fast-grid count.
    """
    x = np.asarray(seq, dtype=np.float64) if time_major else _to_time_major(seq)[0]
    L, N, D = x.shape
    S = L - s_enc
    if s_enc < 0 or S < 1:
        raise ValueError(f"need at least one anticipation step: L={L}, S_enc={s_enc}")
    if unroll_ratio < 1:
        raise ValueError("unroll_ratio must be >= 1")
    enc, dec = p.enc, p.dec
    d = enc.hidden
    if enc.Wx.shape[1] != D or dec.Wx.shape[1] != D or dec.hidden != d:
        raise ShapeError(f"branch input width {D} vs Wx{enc.Wx.shape}/{dec.Wx.shape}")

    # rolling encoder
    xp = x @ enc.Wx.T
    enc_h = np.zeros((L, N, d))
    enc_c = np.zeros((L, N, d))
    h = np.zeros((N, d))
    c = np.zeros((N, d))
    enc_caches = []
    for t in range(L):
        h, c, cache = _cell_forward(xp[t], h, c, enc.Wh, enc.b)
        enc_h[t], enc_c[t] = h, c
        if record:
            enc_caches.append(cache)

    # unrolling decoder: chain j anchors on frame s_enc + j and starts at
    # iteration m*j, so every chain ends on the last iteration
    m = unroll_ratio
    anchors = x[s_enc:]
    dxp_in = anchors @ dec.Wx.T
    H = np.zeros((S, N, d))
    Cs = np.zeros((S, N, d))
    dec_caches = []
    for it in range(m * S):
        k = it // m + 1
        if it % m == 0:
            H[k - 1] = enc_h[s_enc + k - 1]
            Cs[k - 1] = enc_c[s_enc + k - 1]
        hn, cn, cache = _cell_forward(dxp_in[:k], H[:k].copy(), Cs[:k].copy(), dec.Wh, dec.b)
        H[:k], Cs[:k] = hn, cn
        if record:
            dec_caches.append(cache)
    u = np.concatenate([H, Cs], axis=-1)

    mask = None
    u_in = u
    if train and p.keep < 1.0:
        mask = dropout_mask(u.shape, p.keep, rng if rng is not None else np.random.default_rng())
        u_in = u * mask
    if p.clf_W.shape[1] != 2 * d:
        raise ShapeError(f"classifier width {p.clf_W.shape[1]} != 2d = {2 * d}")
    logits = u_in @ p.clf_W.T + p.clf_b

    caches = None
    if record:
        caches = dict(x=x, anchors=anchors, enc=enc_caches, dec=dec_caches,
                      mask=mask, u_in=u_in, params=p)
    return BranchTrace(alpha, s_enc, m, enc_h, enc_c, u, logits, prefix, caches)


def branch_backward(trace: BranchTrace, store: ParamStore, dlogits=None, *,
                    du=None, d_enc_h=None, d_enc_c=None) -> None:
    """Accumulate exact reverse-mode gradients into ``store.grads``.

    ``dlogits`` is (S, N, C) time-major; ``du`` (S, N, 2d) is extra gradient
    on the decoder outputs (used by heads that read them directly), and
    ``d_enc_h`` / ``d_enc_c`` (L, N, d) are extra gradients on encoder
    states (attention heads read those).
    """
    if trace is None or trace.caches is None:
        raise RuntimeError("branch_backward needs a trace recorded with record=True")
    cc = trace.caches
    p: BranchParams = cc["params"]
    pre = trace.prefix
    L, N, d = trace.enc_h.shape
    S, s_enc, m = trace.s_ant, trace.s_enc, trace.unroll_ratio

    du_total = np.zeros_like(trace.u) if du is None else np.array(du, dtype=np.float64)
    if dlogits is not None:
        dlogits = np.asarray(dlogits, dtype=np.float64)
        du_in, dW, db = affine_backward(dlogits, p.clf_W, cc["u_in"])
        store.accumulate(pre + "clf.W", dW)
        store.accumulate(pre + "clf.b", db)
        if cc["mask"] is not None:
            du_in = du_in * cc["mask"]
        du_total += du_in

    dEh = np.zeros((L, N, d)) if d_enc_h is None else np.array(d_enc_h, dtype=np.float64)
    dEc = np.zeros((L, N, d)) if d_enc_c is None else np.array(d_enc_c, dtype=np.float64)

    # decoder staircase, reversed
    dH = du_total[..., :d].copy()
    dC = du_total[..., d:].copy()
    dxp = np.zeros((S, N, 4 * d))
    dWh = np.zeros_like(p.dec.Wh)
    db = np.zeros_like(p.dec.b)
    for it in reversed(range(m * S)):
        k = it // m + 1
        cache = cc["dec"][it]
        da, dc_prev = _cell_backward(dH[:k], dC[:k], cache)
        dxp[:k] += da
        dWh += _flat(da).T @ _flat(cache[0])
        db += _flat(da).sum(axis=0)
        dH[:k] = da @ p.dec.Wh
        dC[:k] = dc_prev
        if it % m == 0:
            dEh[s_enc + k - 1] += dH[k - 1]
            dEc[s_enc + k - 1] += dC[k - 1]
    store.accumulate(pre + "dec.Wx", _flat(dxp).T @ _flat(cc["anchors"]))
    store.accumulate(pre + "dec.Wh", dWh)
    store.accumulate(pre + "dec.b", db)

    # encoder, reversed
    dh = np.zeros((N, d))
    dc = np.zeros((N, d))
    dxp_e = np.zeros((L, N, 4 * d))
    dWh = np.zeros_like(p.enc.Wh)
    db = np.zeros_like(p.enc.b)
    for t in reversed(range(L)):
        cache = cc["enc"][t]
        da, dc = _cell_backward(dh + dEh[t], dc + dEc[t], cache)
        dxp_e[t] = da
        dWh += da.T @ cache[0]
        db += da.sum(axis=0)
        dh = da @ p.enc.Wh
    store.accumulate(pre + "enc.Wx", _flat(dxp_e).T @ _flat(cc["x"]))
    store.accumulate(pre + "enc.Wh", dWh)
    store.accumulate(pre + "enc.b", db)
