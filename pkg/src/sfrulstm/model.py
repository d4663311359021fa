"""A complete anticipation model: branches per (modality, scale), a fusion
head, one ParamStore, forward and exact backward over a batch."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from .multimodal import (MATT_INPUTS, ORDERS, concat_all_head_backward,
                         concat_all_head_forward, modsf_head_backward,
                         modsf_head_forward, sfmod_head_backward,
                         sfmod_head_forward)
from .numerics import ParamStore
from .rulstm import add_branch_params, branch_params
from .slowfast import (SCHEMES, ClockConfig, FusedResult, MlpParams, add_mlp_params,
                       fusion_head_backward, fusion_head_forward, gather,
                       mlp_params, run_branch, scatter_backward)


def branch_prefix(modality: str, alpha: float) -> str:
    return f"{modality}@{alpha:g}."


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...]
    dims: tuple[int, ...]
    hidden: int
    classes: int
    clock: ClockConfig
    scheme: str = "attention"      # single | attention | ensemble | concat
    order: str = "modsf"           # modsf | sfmod | concat-all (several modalities)
    head_hidden: int = 128
    keep: float = 0.2
    literal_unroll: bool = False
    matt_input: str = "weighted"
    seed: int = 0

    def __post_init__(self):
        if len(self.modalities) != len(self.dims) or not self.modalities:
            raise ValueError("one input width per modality is required")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modality in {self.modalities}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.matt_input not in MATT_INPUTS:
            raise ValueError(f"matt_input must be one of {MATT_INPUTS}")
        if (self.scheme == "single") != (self.clock.n_branches == 1):
            raise ValueError("scheme 'single' is for exactly one time scale")
        if self.multimodal and self.scheme not in ("attention", "single"):
            raise ValueError("several modalities need the attention scheme")
        if not 0.0 < self.keep <= 1.0:
            raise ValueError(f"keep must be in (0, 1], got {self.keep}")

    @property
    def multimodal(self) -> bool:
        return len(self.modalities) > 1

    @property
    def tag(self) -> str:
        if self.multimodal:
            return self.order if self.clock.n_branches > 1 else "matt"
        return self.scheme

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clock"] = self.clock.to_dict()
        d["modalities"] = list(self.modalities)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["clock"] = ClockConfig.from_dict(d["clock"])
        d["modalities"] = tuple(d["modalities"])
        d["dims"] = tuple(d["dims"])
        return cls(**d)


class Model:
    """Branch and head parameters under one store, named

    ``<modality>@<alpha>.{enc,dec}.{Wx,Wh,b}``, ``<modality>@<alpha>.clf.{W,b}``
    and head prefixes ``sf.``, ``concat.``, ``matt@<alpha>.``, ``sf.<modality>.``,
    ``matt.``, ``all.``.
    """

    def __init__(self, config: ModelConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            self._init_params(store)
        self.store = store

    # ------------------------------------------------------------ layout
    @property
    def clock(self) -> ClockConfig:
        return self.config.clock

    def prefixes(self, m: int) -> list[str]:
        return [branch_prefix(self.config.modalities[m], a) for a in self.clock.alphas]

    def head_prefixes(self) -> list[str]:
        cfg = self.config
        B = self.clock.n_branches
        if not cfg.multimodal:
            return {"single": [], "ensemble": [], "attention": ["sf."],
                    "concat": ["concat."]}[cfg.scheme]
        if cfg.order == "modsf":
            return [f"matt@{a:g}." for a in self.clock.alphas] + (["sf."] if B > 1 else [])
        if cfg.order == "sfmod":
            return [f"sf.{m}." for m in cfg.modalities] + ["matt."]
        return ["all."]

    def matt_names(self) -> list[str]:
        return [n for n in self.store if n.startswith("matt")]

    def branch_names(self) -> list[str]:
        return [n for n in self.store if "@" in n.split(".")[0] and not n.startswith("matt")]

    def head_names(self) -> list[str]:
        return [n for n in self.store if n not in set(self.branch_names())]

    def _init_params(self, store: ParamStore) -> None:
        cfg = self.config
        d, C, Hh, seed = cfg.hidden, cfg.classes, cfg.head_hidden, cfg.seed
        B, M = self.clock.n_branches, len(cfg.modalities)
        for m, D in enumerate(cfg.dims):
            for pre in self.prefixes(m):
                add_branch_params(store, pre, D, d, C, seed)
        if not cfg.multimodal:
            if cfg.scheme == "attention":
                add_mlp_params(store, "sf.", 2 * d * B, Hh, B, seed)
            elif cfg.scheme == "concat":
                store.add_uniform("concat.W", (C, 2 * d * B), 2 * d * B, seed)
                store.add_uniform("concat.b", (C,), 2 * d * B, seed)
        elif cfg.order == "modsf":
            for a in self.clock.alphas:
                add_mlp_params(store, f"matt@{a:g}.", 2 * d * M, Hh, M, seed)
            if B > 1:
                add_mlp_params(store, "sf.", 2 * d * B, Hh, B, seed)
        elif cfg.order == "sfmod":
            for name in cfg.modalities:
                add_mlp_params(store, f"sf.{name}.", 2 * d * B, Hh, B, seed)
            width = 2 * d * M if cfg.matt_input == "weighted" else 2 * d * B * M
            add_mlp_params(store, "matt.", width, Hh, M, seed)
        else:
            add_mlp_params(store, "all.", 2 * d * B * M, Hh, B * M, seed)

    def randomize_heads(self, seed: int) -> None:
        """Replace every head tensor with a fresh uniform draw (zero-initialized
        output layers otherwise make the weights constant)."""
        for n in self.head_names():
            rng = np.random.default_rng([seed, zlib.crc32(n.encode())])
            p = self.store[n]
            scale = 1.0 / np.sqrt(p.shape[1]) if p.ndim == 2 else 0.5
            p[...] = rng.uniform(-scale, scale, size=p.shape)

    # ------------------------------------------------------------ forward / backward
    def _features(self, features) -> list[np.ndarray]:
        cfg = self.config
        if isinstance(features, Mapping):
            missing = [m for m in cfg.modalities if m not in features]
            if missing:
                raise KeyError(f"missing features for modalities {missing}")
            xs = [features[m] for m in cfg.modalities]
        elif len(cfg.modalities) == 1:
            xs = [features]
        else:
            xs = list(features)
        out = []
        for m, x in enumerate(xs):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            if x.shape[1] != self.clock.T or x.shape[2] != cfg.dims[m]:
                raise ValueError(f"{cfg.modalities[m]} features have shape {x.shape}; "
                                 f"expected (N, {self.clock.T}, {cfg.dims[m]})")
            out.append(x.transpose(1, 0, 2))
        return out

    def forward(self, features, *, train: bool = False, rng=None,
                record: bool = False) -> FusedResult:
        """``features``: (N, T, D) array, or {modality: array} on the fast grid."""
        cfg, st, clk = self.config, self.store, self.clock
        xs = self._features(features)
        traces, Gs = [], []
        for m, x_tm in enumerate(xs):
            pres = self.prefixes(m)
            tr = [run_branch(x_tm, clk, b, branch_params(st, pre, cfg.keep), pre,
                             literal_unroll=cfg.literal_unroll, train=train, rng=rng,
                             record=record)
                  for b, pre in enumerate(pres)]
            traces.append(tr)
            Gs.append(gather(tr, clk))

        if not cfg.multimodal:
            head = None
            if cfg.scheme == "attention":
                head = mlp_params(st, "sf.")
            elif cfg.scheme == "concat":
                head = (st["concat.W"], st["concat.b"])
            fused, w, cache = fusion_head_forward(Gs[0], cfg.scheme, head)
            weights = {"scale": w}
        elif cfg.order == "modsf":
            matt = [mlp_params(st, p) for p in self.head_prefixes()[:clk.n_branches]]
            if clk.n_branches > 1:
                sf = mlp_params(st, "sf.")
            else:
                sf = _trivial_head(2 * cfg.hidden)
            fused, weights, cache = modsf_head_forward(Gs, matt, sf)
            head = sf
            w = weights["scale"]
        elif cfg.order == "sfmod":
            sf = [mlp_params(st, f"sf.{m}.") for m in cfg.modalities]
            fused, weights, cache = sfmod_head_forward(Gs, sf, mlp_params(st, "matt."),
                                                       cfg.matt_input)
            head = sf
            w = weights["modality"]
        else:
            fused, weights, cache = concat_all_head_forward(Gs, mlp_params(st, "all."))
            head = None
            w = weights["branch"]
        return FusedResult(clk, fused, w, traces,
                           {"gathered": Gs, "cache": cache, "head": head, "weights": weights})

    def backward(self, out: FusedResult, dfused, aux=None) -> None:
        """Accumulate gradients of ``sum(dfused * fused logits)``; ``dfused``
        is time-major (F, N, C). ``aux[m]`` (B, F, N, C), if given, is extra
        gradient on each branch's own logits at the fused steps."""
        cfg, st, clk = self.config, self.store, self.clock
        Gs, cache = out.extra["gathered"], out.extra["cache"]
        dfused = np.asarray(dfused, dtype=np.float64)
        if not cfg.multimodal:
            prefix = {"attention": "sf.", "concat": "concat."}.get(cfg.scheme, "")
            dl, dr, du = fusion_head_backward(dfused, Gs[0], cfg.scheme, out.extra["head"],
                                              cache, st, prefix)
            if aux is not None:
                dl = aux[0] if dl is None else dl + aux[0]
            scatter_backward(out.traces[0], clk, st, dl, dr, du)
            return
        if cfg.order == "modsf":
            B = clk.n_branches
            dlog, dr = modsf_head_backward(dfused, cache, st, self.head_prefixes()[:B],
                                           "sf." if B > 1 else None)
        elif cfg.order == "sfmod":
            dlog, dr = sfmod_head_backward(dfused, cache, Gs, st,
                                           [f"sf.{m}." for m in cfg.modalities], "matt.")
        else:
            dlog, dr = concat_all_head_backward(dfused, cache, st, "all.")
        for m, traces in enumerate(out.traces):
            dl = np.stack(dlog[m])
            if aux is not None:
                dl = dl + aux[m]
            scatter_backward(traces, clk, st, dl, np.stack(dr[m]))

    def copy(self) -> "Model":
        return Model(self.config, self.store.copy())

    def with_config(self, **changes) -> "Model":
        return Model(replace(self.config, **changes), self.store)


def _trivial_head(n_in: int) -> MlpParams:
    return MlpParams(np.zeros((1, n_in)), np.zeros(1), np.zeros((1, 1)), np.zeros(1))
