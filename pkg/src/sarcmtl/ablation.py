"""Five-model ablation grid with per-seed results, seed means and best-value flags."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Record
from .metrics import CONVENTIONS, MetricsReport, evaluate, write_matrices
from .model import VariantKind
from .training import TrainConfig, train

log = logging.getLogger(__name__)

V = VariantKind
# Single-task rows need one model per task.
ROWS: dict[str, tuple[VariantKind, ...]] = {
    "ST": (V.ST_sarc, V.ST_sent),
    "ST_ATT": (V.ST_ATT_sarc, V.ST_ATT_sent),
    "MTL": (V.MTL,),
    "MTL_ATT": (V.MTL_ATT,),
    "MTL_ATTINTER": (V.MTL_ATTINTER,),
}
SPLITS = ("dev", "test")


def _run_cell(args):
    variant, seed, train_records, test_records, cfg = args
    res = train(train_records, dataclasses.replace(cfg, variant=variant, seed=seed))
    return (variant, seed, res.history.epochs[-1].dev, evaluate(res.model, test_records),
            res.history.losses())


@dataclass
class AblationResult:
    rows: list[str]
    seeds: list[int]
    # (row, split, seed) -> report
    cells: dict[tuple[str, str, int], MetricsReport]
    losses: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def per_seed(self, row: str, split: str) -> np.ndarray:
        return np.array([[np.nan if x is None else x for x in self.cells[(row, split, s)].row()]
                         for s in self.seeds], dtype=float)

    def mean(self, row: str, split: str) -> np.ndarray:
        return self.per_seed(row, split).mean(axis=0)

    def best(self) -> dict[str, set[int]]:
        """Column indices where each (row, split) holds the best mean, per split."""
        flags: dict[str, set[int]] = {}
        for split in SPLITS:
            means = np.array([self.mean(r, split) for r in self.rows])
            for j in range(means.shape[1]):
                col = means[:, j]
                if np.all(np.isnan(col)):
                    continue
                top = np.nanmax(col)
                for i, r in enumerate(self.rows):
                    if col[i] == top:
                        flags.setdefault(f"{r}/{split}", set()).add(j)
        return flags

    def table_tsv(self) -> str:
        cols = MetricsReport.column_names()
        best = self.best()
        lines = ["\t".join(["model", "split", "n_seeds", *cols, "best"])]
        for r in self.rows:
            for split in SPLITS:
                m = self.mean(r, split)
                flagged = sorted(best.get(f"{r}/{split}", ()))
                lines.append("\t".join([r, split, str(len(self.seeds)),
                                        *[f"{x:.4f}" for x in m],
                                        ",".join(cols[j] for j in flagged)]))
        return "\n".join(lines) + "\n"

    def per_seed_tsv(self) -> str:
        cols = MetricsReport.column_names()
        lines = ["\t".join(["model", "split", "seed", *cols])]
        for r in self.rows:
            for split in SPLITS:
                for s, vals in zip(self.seeds, self.per_seed(r, split)):
                    lines.append("\t".join([r, split, str(s), *[f"{x:.4f}" for x in vals]]))
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        """Markdown table; best dev mean in italics, best test mean in bold."""
        cols = MetricsReport.column_names()
        best = self.best()
        lines = [f"<!-- seeds={self.seeds}; {CONVENTIONS} -->",
                 "| Model | Split | " + " | ".join(cols) + " |",
                 "|---|---|" + "---:|" * len(cols)]
        for r in self.rows:
            for split in SPLITS:
                flagged = best.get(f"{r}/{split}", set())
                cells = []
                for j, x in enumerate(self.mean(r, split)):
                    s = f"{x:.4f}"
                    if j in flagged:
                        s = f"_{s}_" if split == "dev" else f"**{s}**"
                    cells.append(s)
                lines.append(f"| {r} | {split.capitalize()} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def ablation_run(train_records: Sequence[Record], test_records: Sequence[Record],
                 seeds: Sequence[int], cfg: TrainConfig,
                 rows: Sequence[str] = tuple(ROWS), jobs: int = 1) -> AblationResult:
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    unknown = [r for r in rows if r not in ROWS]
    if unknown:
        raise ValueError(f"unknown ablation rows {unknown}; choose from {list(ROWS)}")
    jobs_args = [(v, s, list(train_records), list(test_records), cfg)
                 for r in rows for v in ROWS[r] for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            outputs = list(pool.map(_run_cell, jobs_args))
    else:
        outputs = [_run_cell(a) for a in jobs_args]
    by_variant = {(v, s): (dev, test, losses) for v, s, dev, test, losses in outputs}

    cells, losses = {}, {}
    for r in rows:
        for s in seeds:
            parts = [by_variant[(v, s)] for v in ROWS[r]]
            if len(parts) == 2:
                cells[(r, "dev", s)] = MetricsReport.merge(parts[0][0], parts[1][0])
                cells[(r, "test", s)] = MetricsReport.merge(parts[0][1], parts[1][1])
            else:
                cells[(r, "dev", s)], cells[(r, "test", s)] = parts[0][0], parts[0][1]
            for v in ROWS[r]:
                losses[(v.value, s)] = by_variant[(v, s)][2]
        log.info("ablation row %s done", r)
    return AblationResult(list(rows), list(seeds), cells, losses)


def write_ablation(result: AblationResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.tsv").write_text(result.table_tsv(), encoding="utf-8")
    (out_dir / "table.md").write_text(result.table_text(), encoding="utf-8")
    (out_dir / "per_seed.tsv").write_text(result.per_seed_tsv(), encoding="utf-8")
    for (r, split, s), rep in result.cells.items():
        write_matrices(rep, out_dir / "matrices", prefix=f"{r}_{split}_seed{s}_")
    return out_dir
