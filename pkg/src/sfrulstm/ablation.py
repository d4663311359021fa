"""Ablation grid: time step, encoding length, scale-fusion scheme and
modality-fusion order. Each cell trains and evaluates under one seed policy
and contributes one metrics row per (anticipation time, k)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .dataio import Dataset
from .model import Model, ModelConfig
from .slowfast import build_multi_clock, single_clock, snap_tau_e
from .train import (Hyper, MetricRow, MetricsTable, _fmt_alphas, evaluate,
                    finetune_fusion, pretrain_matt, train_branch)

log = logging.getLogger(__name__)

FUSION_SCHEMES = ("concat", "ensemble", "attention", "attention-3-branch")


@dataclass
class AblationGrid:
    alphas: Sequence[float] = (0.1, 0.125, 0.2, 0.25, 0.5, 1.0)
    tau_es: Sequence[float] = (1.5, 3.0)
    schemes: Sequence[str] = FUSION_SCHEMES
    orders: Sequence[str] = ()
    alpha_slow: float = 0.5
    alpha_fast: float = 0.125
    alpha_mid: float = 0.25
    tau_span: float = 2.0
    ks: Sequence[int] = (1, 5)
    hidden: int = 32
    head_hidden: int = 32
    keep: float = 0.2


@dataclass(frozen=True)
class Cell:
    kind: str                  # single | scheme | order
    alphas: tuple[float, ...]
    tau_e: float
    scheme: str
    modalities: tuple[str, ...] = ("rgb",)

    @property
    def effective_tau_e(self) -> float:
        # a single branch needs tau_e on its own grid; round up to cover it
        return snap_tau_e(self.alphas[0], self.tau_e) if self.kind == "single" else self.tau_e

    @property
    def label(self) -> str:
        base = "rulstm" if self.kind == "single" else "sf-rulstm"
        eff = self.effective_tau_e
        if abs(eff - self.tau_e) > 1e-9:
            return f"{base}(tau_e={self.tau_e:g};used={eff:g})"
        return f"{base}(tau_e={self.tau_e:g})"


def grid_cells(grid: AblationGrid, modalities: Sequence[str]) -> list[Cell]:
    first = (modalities[0],)
    cells = []
    for te in grid.tau_es:
        for a in grid.alphas:
            cells.append(Cell("single", (a,), te, "single", first))
        for s in grid.schemes:
            if s == "attention-3-branch":
                alphas = (grid.alpha_slow, grid.alpha_mid, grid.alpha_fast)
                cells.append(Cell("scheme", alphas, te, "attention", first))
            else:
                cells.append(Cell("scheme", (grid.alpha_slow, grid.alpha_fast), te, s, first))
        for o in grid.orders:
            cells.append(Cell("order", (grid.alpha_slow, grid.alpha_fast), te, o,
                              tuple(modalities)))
    seen, out = set(), []
    for c in cells:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def _failed(cell: Cell, msg: str) -> MetricsTable:
    return MetricsTable([MetricRow(cell.label, cell.scheme, "+".join(cell.modalities),
                                   _fmt_alphas(cell.alphas), None, None, None, 0, msg)])


class _BranchCache:
    """Single-branch models trained once per (modality, alpha, tau_e)."""

    def __init__(self, train: Dataset, val: Dataset | None, grid: AblationGrid,
                 hyper: Hyper, classes: int):
        self.train, self.val, self.grid, self.hyper, self.classes = train, val, grid, hyper, classes
        self.models: dict = {}

    def get(self, modality: str, alpha: float, tau_e: float, tau_span: float,
            snap: bool) -> Model:
        te = snap_tau_e(alpha, tau_e) if snap else tau_e
        key = (modality, round(alpha, 12), round(te, 12))
        if key not in self.models:
            clock = single_clock(alpha, te, tau_span)
            cfg = ModelConfig((modality,), (self.train.dim(modality),), self.grid.hidden,
                              self.classes, clock, scheme="single", keep=self.grid.keep,
                              seed=self.hyper.seed)
            model = Model(cfg)
            train_branch(self.train, model, self.hyper, self.val)
            self.models[key] = model
        return self.models[key]


def run_cell(cell: Cell, cache: _BranchCache, test: Dataset, grid: AblationGrid,
             hyper: Hyper, ft_hyper: Hyper) -> MetricsTable:
    if cell.kind == "single":
        model = cache.get(cell.modalities[0], cell.alphas[0], cell.tau_e, grid.tau_span, True)
    else:
        build_multi_clock(cell.alphas, cell.tau_e, grid.tau_span)  # validate first
        branches = [cache.get(m, a, cell.tau_e, grid.tau_span, False)
                    for m in cell.modalities for a in cell.alphas]
        order = cell.scheme if cell.kind == "order" else "modsf"
        scheme = "attention" if cell.kind == "order" else cell.scheme
        from .train import assemble_fusion

        model = assemble_fusion(branches, scheme, order, head_hidden=grid.head_hidden,
                                seed=hyper.seed)
        if cell.kind == "order" and order == "modsf":
            pretrain_matt(model, cache.train, ft_hyper, cache.val)
        finetune_fusion(model, cache.train, ft_hyper, cache.val)
    taus = list(model.clock.fused_taus)
    return evaluate(model, test, taus, grid.ks, name=cell.label)


def ablate(train: Dataset, test: Dataset, grid: AblationGrid, hyper: Hyper,
           finetune_hyper: Hyper | None = None, val: Dataset | None = None) -> MetricsTable:
    """Train and evaluate every grid cell. Failing cells become a single
    ``failed`` row and the run continues."""
    ft = finetune_hyper or hyper
    cache = _BranchCache(train, val, grid, hyper, len(train.classes))
    table = MetricsTable()
    for cell in grid_cells(grid, train.modalities):
        log.info("ablation cell %s %s %s", cell.label, cell.scheme, cell.alphas)
        try:
            table.extend(run_cell(cell, cache, test, grid, hyper, ft))
        except (ValueError, KeyError) as exc:
            log.warning("cell %s failed: %s", cell, exc)
            table.extend(_failed(cell, str(exc)))
    return table
