"""Losses, SGD with momentum, two-stage training, top-k evaluation and
attention traces."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import Dataset, _atomic_write
from .model import Model, ModelConfig
from .numerics import ParamStore, cross_entropy, cross_entropy_batch
from .slowfast import ClockConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ["model", "scheme", "modalities", "alphas", "tau_a", "k", "accuracy", "n"]
TRACE_HEADER = ["sample_id", "t", "tau_a", "w_slow", "w_fast"]


# ---------------------------------------------------------------- losses

def anticipation_loss(predictions: Sequence, label: int) -> float:
    """Mean cross entropy over the anticipation steps of one sample."""
    if not predictions:
        raise ValueError("anticipation_loss needs at least one prediction")
    return float(np.mean([cross_entropy(p.logits, label) for p in predictions]))


def fused_loss(logits_tm, labels):
    """Mean CE over (steps, samples) and its gradient wrt the logits."""
    losses, grad = cross_entropy_batch(logits_tm, np.asarray(labels)[None, :])
    return float(losses.mean()), grad / losses.size


def loss_and_grad(model: Model, features, labels, *, train: bool = False, rng=None,
                  aux_weight: float = 0.0) -> float:
    """Forward, loss, and backward into ``model.store.grads`` (accumulated)."""
    out = model.forward(features, train=train, rng=rng, record=True)
    loss, dfused = fused_loss(out.logits_tm, labels)
    aux = None
    if aux_weight > 0 and model.config.scheme != "single":
        aux = []
        for Gm in out.extra["gathered"]:
            per_branch = []
            for lb in Gm.logits:
                l_aux, g_aux = fused_loss(lb, labels)
                loss += aux_weight * l_aux / (Gm.logits.shape[0] * len(out.extra["gathered"]))
                per_branch.append(aux_weight * g_aux / (Gm.logits.shape[0] * len(out.extra["gathered"])))
            aux.append(np.stack(per_branch))
    model.backward(out, dfused, aux=aux)
    return loss


# ---------------------------------------------------------------- optimizer

class SGDMomentum:
    """``v <- mu v + g``; ``theta <- theta - lr * mult * v``.

    Only names present in ``lr_mults`` are updated; velocities persist
    across calls.
    """

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9,
                 lr_mults: dict[str, float] | None = None):
        if lr < 0 or not 0 <= momentum < 1:
            raise ValueError(f"need lr >= 0 and 0 <= momentum < 1, got {lr}, {momentum}")
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.lr_mults = dict(lr_mults) if lr_mults is not None else {n: 1.0 for n in store}
        self.velocity = {n: np.zeros_like(store[n]) for n in self.lr_mults}

    def step(self) -> None:
        for n, mult in self.lr_mults.items():
            p, g, v = self.store[n], self.store.grads[n], self.velocity[n]
            if g.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"shape drift on {n}: param {p.shape}, grad {g.shape}, "
                                 f"velocity {v.shape}")
            v *= self.momentum
            v += g
            if self.lr * mult != 0.0:
                p -= (self.lr * mult) * v


def sgd_momentum_step(store: ParamStore, lr: float, momentum: float,
                      velocity: dict | None = None) -> dict:
    """Functional single step; returns the (updated) velocity dict."""
    opt = SGDMomentum(store, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity


# ---------------------------------------------------------------- training

@dataclass
class Hyper:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    finetune_lr_mult: float = 0.1
    freeze_branches: bool = False
    freeze_heads: bool = False
    freeze_matt: bool | None = None  # None: frozen for modsf, trainable otherwise
    aux_weight: float = 0.0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid hyper-parameters: lr={self.lr}, epochs={self.epochs}, "
                             f"batch_size={self.batch_size}")


@dataclass
class Samples:
    """Pre-sampled fast-grid windows: {modality: (N, T, D)} and labels."""
    features: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Samples":
        return Samples({m: x[idx] for m, x in self.features.items()}, self.labels[idx])


def as_samples(data, clock: ClockConfig, modalities: Sequence[str], *,
               strict: bool = False) -> Samples:
    if isinstance(data, Samples):
        return data
    if not isinstance(data, Dataset):
        raise TypeError(f"expected Dataset or Samples, got {type(data).__name__}")
    if strict:
        window = clock.alpha_f * clock.T
        short = data.short_videos(window)
        if short:
            raise ValueError(f"{len(short)} videos shorter than the {window:g}s window: "
                             f"{', '.join(short[:10])}")
    return Samples(data.windows(clock.alpha_f, clock.T, modalities), data.labels)


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    val_top1: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def _train_loop(model: Model, data: Samples, hyper: Hyper, lr_mults: dict,
                val: Samples | None) -> TrainResult:
    rng = np.random.default_rng(hyper.seed)
    opt = SGDMomentum(model.store, hyper.lr, hyper.momentum, lr_mults)
    losses, vals = [], []
    best, best_epoch, best_acc = None, None, -1.0
    N = len(data)
    for epoch in range(hyper.epochs):
        perm = rng.permutation(N)
        total = 0.0
        for s in range(0, N, hyper.batch_size):
            idx = perm[s:s + hyper.batch_size]
            batch = data.take(idx)
            model.store.zero_grad()
            loss = loss_and_grad(model, batch.features, batch.labels, train=True, rng=rng,
                                 aux_weight=hyper.aux_weight)
            opt.step()
            total += loss * len(idx)
        losses.append(total / max(N, 1))
        if val is not None and len(val):
            acc = float(top1(model, val).mean())
            vals.append(acc)
            if acc > best_acc:
                best_acc, best_epoch, best = acc, epoch, model.store.copy()
        log.info("epoch %d loss %.4f%s", epoch, losses[-1],
                 f" val top1 {vals[-1]:.4f}" if vals else "")
    if best is not None:
        model.store.update_from(best)
    return TrainResult(model, losses, vals, best_epoch)


def train_branch(data, model: Model, hyper: Hyper, val=None) -> TrainResult:
    """Shuffled minibatch SGD on one branch's mean anticipation loss.

    Parameters are updated in place. With a validation set the parameters of
    the best-Top-1 epoch are kept.
    """
    if model.config.scheme != "single":
        raise ValueError("train_branch expects a single-branch model")
    mods = model.config.modalities
    samples = as_samples(data, model.clock, mods, strict=True)
    if len(samples) == 0:
        raise ValueError("training set is empty")
    v = as_samples(val, model.clock, mods) if val is not None else None
    return _train_loop(model, samples, hyper, {n: 1.0 for n in model.store}, v)


def assemble_fusion(branch_models: Sequence[Model], scheme: str = "attention",
                    order: str = "modsf", head_hidden: int = 128, seed: int = 0,
                    **config) -> Model:
    """Build a fusion model around pre-trained single-branch models.

    Every branch must share hidden size, class count and window horizons.
    """
    if not branch_models:
        raise ValueError("no branch models given")
    cfgs = [m.config for m in branch_models]
    ref = cfgs[0]
    for c in cfgs[1:]:
        if (c.clock.tau_e, c.clock.tau_span) != (ref.clock.tau_e, ref.clock.tau_span):
            raise ValueError(f"clock mismatch between branches: tau_e/tau_span "
                             f"{ref.clock.tau_e}/{ref.clock.tau_span} vs "
                             f"{c.clock.tau_e}/{c.clock.tau_span}")
        if (c.hidden, c.classes) != (ref.hidden, ref.classes):
            raise ValueError("branches differ in hidden size or class count")
    from .slowfast import build_multi_clock

    alphas = sorted({a for c in cfgs for a in c.clock.alphas}, reverse=True)
    mods = []
    dims = {}
    for c in cfgs:
        for m, D in zip(c.modalities, c.dims):
            if m not in dims:
                mods.append(m)
                dims[m] = D
    clock = build_multi_clock(alphas, ref.clock.tau_e, ref.clock.tau_span)
    cfg = ModelConfig(tuple(mods), tuple(dims[m] for m in mods), ref.hidden, ref.classes,
                      clock, scheme=scheme if len(mods) == 1 else "attention", order=order,
                      head_hidden=head_hidden, keep=ref.keep,
                      literal_unroll=config.pop("literal_unroll", ref.literal_unroll),
                      seed=seed, **config)
    fused = Model(cfg)
    have = set()
    for bm in branch_models:
        names = bm.branch_names()
        fused.store.update_from(bm.store, names)
        have.update(names)
    missing = sorted(set(fused.branch_names()) - have)
    if missing:
        raise ValueError(f"no pre-trained branch for {sorted({n.split('.')[0] for n in missing})}")
    return fused


def _freeze_matt(model: Model, hyper: Hyper) -> bool:
    if hyper.freeze_matt is not None:
        return hyper.freeze_matt
    return model.config.multimodal and model.config.order == "modsf"


def finetune_lr_mults(model: Model, hyper: Hyper) -> dict[str, float]:
    mults = {}
    matt = set(model.matt_names())
    freeze_matt = _freeze_matt(model, hyper)
    for n in model.store:
        if n in matt:
            if not freeze_matt:
                mults[n] = 1.0
        elif n in model.head_names():
            if not hyper.freeze_heads:
                mults[n] = 1.0
        elif not hyper.freeze_branches:
            mults[n] = hyper.finetune_lr_mult
    return mults


def finetune_fusion(pretrained, data, hyper: Hyper, val=None, *, scheme: str = "attention",
                    order: str = "modsf", **config) -> TrainResult:
    """Optimise the fused anticipation loss.

    ``pretrained`` is a fusion ``Model`` or a list of single-branch models
    (assembled with :func:`assemble_fusion`). Branches train at
    ``lr * finetune_lr_mult``, heads at full rate.
    """
    if isinstance(pretrained, Model):
        model = pretrained
    else:
        model = assemble_fusion(pretrained, scheme, order, **config)
    mods = model.config.modalities
    samples = as_samples(data, model.clock, mods, strict=True)
    v = as_samples(val, model.clock, mods) if val is not None else None
    return _train_loop(model, samples, hyper, finetune_lr_mults(model, hyper), v)


def pretrain_matt(model: Model, data, hyper: Hyper, val=None) -> TrainResult:
    """Train only the modality-attention heads (branches and scale heads frozen)."""
    samples = as_samples(data, model.clock, model.config.modalities, strict=True)
    v = as_samples(val, model.clock, model.config.modalities) if val is not None else None
    return _train_loop(model, samples, hyper, {n: 1.0 for n in model.matt_names()}, v)


# ---------------------------------------------------------------- evaluation

def topk_hit(scores, label: int, k: int) -> bool:
    """Label among the k highest scores; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} outside [1, {scores.size}]")
    return bool(_label_rank(scores, label) < k)


def _label_rank(scores, labels):
    """0-based rank of each label under (score desc, index asc) ordering."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    s_lab = np.take_along_axis(scores, labels[..., None], axis=-1)
    idx = np.arange(scores.shape[-1])
    ahead = (scores > s_lab) | ((scores == s_lab) & (idx < labels[..., None]))
    return ahead.sum(axis=-1)


def predict(model, features, batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """(N, F, C) fused logits with dropout off; batches reduced in index order."""
    if not isinstance(model, Model):
        return np.asarray(model.predict(features))
    first = next(iter(features.values())) if isinstance(features, dict) else features
    N = len(first)

    def run(s):
        sl = slice(s, s + batch_size)
        feats = {m: x[sl] for m, x in features.items()} if isinstance(features, dict) else first[sl]
        return model.forward(feats).logits

    starts = list(range(0, N, batch_size))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.zeros((0, len(model.clock.fused_steps), model.config.classes))
    return np.concatenate(parts)


def top1(model, data: Samples) -> np.ndarray:
    """Top-1 accuracy per fused step."""
    logits = predict(model, data.features)
    return (_label_rank(logits, data.labels[:, None]) < 1).mean(axis=0)


@dataclass(frozen=True)
class MetricRow:
    model: str
    scheme: str
    modalities: str
    alphas: str
    tau_a: float | None
    k: int | None
    accuracy: float | None
    n: int
    error: str = ""

    def as_csv(self) -> list[str]:
        if self.error:
            return [self.model, self.scheme, self.modalities, self.alphas, "", "",
                    f"failed: {self.error}", str(self.n)]
        return [self.model, self.scheme, self.modalities, self.alphas, f"{self.tau_a:.4g}",
                str(self.k), f"{self.accuracy:.6f}", str(self.n)]


@dataclass
class MetricsTable:
    rows: list[MetricRow] = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow(r.as_csv())
        text = buf.getvalue()
        if path is not None:
            _atomic_write(path, text)
        return text

    def accuracy(self, tau_a: float, k: int, model: str | None = None) -> float:
        for r in self.rows:
            if (not r.error and abs(r.tau_a - tau_a) < 1e-9 and r.k == k
                    and (model is None or r.model == model)):
                return r.accuracy
        raise KeyError(f"no row for tau_a={tau_a}, k={k}")

    def extend(self, other: "MetricsTable") -> None:
        self.rows.extend(other.rows)


def _fmt_alphas(alphas) -> str:
    return "+".join(f"{a:g}" for a in sorted(alphas))


def model_taus(model) -> np.ndarray:
    return model.clock.fused_taus if isinstance(model, Model) else np.asarray(model.taus)


def check_taus(model, taus: Sequence[float]) -> list[int]:
    """Column index of each requested anticipation time in the model output."""
    emitted = model_taus(model)
    cols = []
    for tau in taus:
        hit = np.flatnonzero(np.abs(emitted - tau) < 1e-9)
        if not hit.size:
            raise ValueError(f"anticipation time {tau:g}s is not emitted; available: "
                             f"{', '.join(f'{t:g}' for t in emitted)}")
        cols.append(int(hit[0]))
    return cols


def evaluate(model, data, taus: Sequence[float], ks: Sequence[int] = (1, 5), *,
             name: str | None = None, threads: int = 1, batch_size: int = 256) -> MetricsTable:
    """Top-k accuracy at each requested anticipation time (dropout off)."""
    cols = check_taus(model, taus)
    if not taus:
        return MetricsTable()
    if isinstance(model, Model):
        cfg = model.config
        scheme, mods, alphas = cfg.tag, "+".join(cfg.modalities), _fmt_alphas(cfg.clock.alphas)
        samples = as_samples(data, model.clock, cfg.modalities)
        C = cfg.classes
    else:
        scheme, mods, alphas = getattr(model, "scheme", "external"), "", ""
        samples = data
        C = model.classes
    for k in ks:
        if not 1 <= k <= C:
            raise ValueError(f"k={k} outside [1, {C}]")
    logits = predict(model, samples.features, batch_size, threads)
    ranks = _label_rank(logits, samples.labels[:, None])
    n = len(samples)
    table = MetricsTable()
    for tau, col in zip(taus, cols):
        for k in ks:
            acc = float((ranks[:, col] < k).mean()) if n else float("nan")
            table.rows.append(MetricRow(name or scheme, scheme, mods, alphas, float(tau),
                                        int(k), acc, n))
    return table


class RandomLogitModel:
    """Scores drawn i.i.d. standard normal; a chance-level reference."""
    scheme = "random"

    def __init__(self, classes: int, taus, seed: int = 0):
        self.classes = classes
        self.taus = np.asarray(taus, dtype=np.float64)
        self.seed = seed

    def predict(self, features) -> np.ndarray:
        first = next(iter(features.values())) if isinstance(features, dict) else features
        rng = np.random.default_rng(self.seed)
        return rng.normal(size=(len(first), len(self.taus), self.classes))


@dataclass
class TraceTable:
    header: list[str]
    rows: list[tuple]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([r[0], r[1], f"{r[2]:.4g}"] + [f"{x:.9f}" for x in r[3:]])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(path, text)
        return text


def attention_trace(model: Model, data, sample_ids: Sequence[str] | None = None) -> TraceTable:
    """Fusion weights at every fused step, one row per (sample, step).

    Scale weights for single-modality attention and Mod-SF models, modality
    weights for SF-Mod, all-branch weights for concat-all.
    """
    cfg = model.config
    if cfg.scheme != "attention":
        raise ValueError(f"attention_trace needs an attention model, got scheme {cfg.scheme!r}")
    samples = as_samples(data, model.clock, cfg.modalities)
    if sample_ids is None:
        sample_ids = ([a.video_id for a in data.annotations] if isinstance(data, Dataset)
                      else [str(i) for i in range(len(samples))])
    out = model.forward(samples.features)
    w = out.weights  # (N, F, W)
    if not cfg.multimodal or cfg.order == "modsf":
        if w.shape[-1] == 2:
            header = list(TRACE_HEADER)
        else:
            header = TRACE_HEADER[:3] + [f"w_{a:g}" for a in model.clock.alphas]
    elif cfg.order == "sfmod":
        header = TRACE_HEADER[:3] + [f"w_{m}" for m in cfg.modalities]
    else:
        header = TRACE_HEADER[:3] + [f"w_{m}@{a:g}" for m in cfg.modalities
                                     for a in model.clock.alphas]
    rows = []
    for i, sid in enumerate(sample_ids):
        for j, (t, tau) in enumerate(zip(out.steps, out.taus)):
            rows.append((sid, int(t), float(tau), *map(float, w[i, j])))
    return TraceTable(header, rows)
