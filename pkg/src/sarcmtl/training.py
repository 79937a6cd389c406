"""Seeded Adam training for any model variant."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .data import DEFAULT_NMAX, Record, Vocab, make_batches, split_train_dev
from .metrics import MetricsReport, evaluate
from .model import Model, ModelConfig, VariantKind, forward, save_checkpoint

log = logging.getLogger(__name__)

# The learning rate used for fine-tuning a pretrained encoder; far too small
# for the from-scratch encoders here, which default to DESK_LR.
PRETRAINED_FINETUNE_LR = 5e-6
DESK_LR = 1e-3


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: VariantKind = VariantKind.MTL_ATTINTER
    learning_rate: float = DESK_LR
    batch_size: int = 64
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dev_ratio: float = 0.2
    # model shape
    encoder: str = "transformer"
    d: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int | None = None
    n_max: int = DEFAULT_NMAX
    min_freq: int = 1

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.dev_ratio < 1.0:
            raise ValueError(f"dev_ratio must lie in (0, 1), got {self.dev_ratio}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam needs 0 <= beta < 1 and eps > 0")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(variant=VariantKind(self.variant), vocab_size=vocab_size,
                           n_max=self.n_max, d=self.d, encoder=self.encoder,
                           layers=self.layers, heads=self.heads, d_ff=self.d_ff,
                           seed=self.seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = VariantKind(self.variant).value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["variant"] = VariantKind(d["variant"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, t: int, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place. ``t`` counts from 1."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.learning_rate:
            p.value -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    state.t = t


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_bce: float | None
    loss_ce: float | None
    dev: MetricsReport


@dataclass
class TrainHistory:
    epochs: list[EpochLog] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def losses(self) -> list[float]:
        return [e.loss_total for e in self.epochs]

    def to_tsv(self) -> str:
        metric_cols = MetricsReport.column_names()
        lines = ["\t".join(["epoch", "loss_total", "loss_bce", "loss_ce",
                            *[f"dev {c}" for c in metric_cols]])]
        for e in self.epochs:
            cells = [str(e.epoch), _fmt(e.loss_total), _fmt(e.loss_bce), _fmt(e.loss_ce)]
            cells += [_fmt(x) for x in e.dev.row()]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return "NA" if x is None else repr(float(x))


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    train_records: list[Record]
    dev_records: list[Record]


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (split, shuffle) generators derived from one seed.

    Parameter initialisation uses its own per-group streams (see
    ``model.group_rng``), so the split is the same for every variant.
    """
    split_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(split_ss), np.random.default_rng(shuffle_ss)


def train(records: Sequence[Record], cfg: TrainConfig,
          vocab: Vocab | None = None) -> TrainResult:
    cfg.validate()
    if vocab is None:
        vocab = Vocab.build((r.text for r in records), min_freq=cfg.min_freq)
    model = Model.create(cfg.model_config(len(vocab)), vocab)
    split_rng, shuffle_rng = seed_streams(cfg.seed)
    train_recs, dev_recs = split_train_dev(records, 1.0 - cfg.dev_ratio, split_rng)
    log.info("%s: %d train / %d dev, %d parameters", cfg.variant, len(train_recs),
             len(dev_recs), model.n_parameters())

    state = AdamState()
    history = TrainHistory()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_recs, vocab, cfg.batch_size, cfg.n_max, shuffle_rng)
        sums = np.zeros(3)
        seen = 0
        for batch in batches:
            model.zero_grad()
            out = forward(batch, model, grad=True)
            if not np.isfinite(out.loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step + 1}")
            step += 1
            adam_step(model.params, {n: p.grad for n, p in model.params.items()},
                      state, step, cfg)
            n = len(batch)
            sums += n * np.array([out.loss, out.loss_bce or 0.0, out.loss_ce or 0.0])
            seen += n
        model.zero_grad()
        means = sums / seen
        tasks = model.config.variant.tasks
        dev = evaluate(model, dev_recs)
        history.epochs.append(EpochLog(
            epoch, float(means[0]),
            float(means[1]) if "sarc" in tasks else None,
            float(means[2]) if "sent" in tasks else None, dev))
        log.info("epoch %d: loss %.4f | dev %s", epoch, means[0], dev.summary())
    return TrainResult(model, history, train_recs, dev_recs)


def write_run_dir(result: TrainResult, cfg: TrainConfig, run_dir,
                  extra: dict | None = None) -> Path:
    """Write ``config.snapshot``, ``history.tsv`` and ``checkpoint.final``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"train": cfg.to_dict(), "seed": cfg.seed,
                "notes": {"pretrained_finetune_lr": PRETRAINED_FINETUNE_LR,
                          "lr_note": "from-scratch encoders default to 1e-3; "
                                     "5e-6 assumes a pretrained encoder"}}
    if extra:
        snapshot.update(extra)
    (run_dir / "config.snapshot").write_text(json.dumps(snapshot, indent=2, sort_keys=True)
                                             + "\n", encoding="utf-8")
    (run_dir / "history.tsv").write_text(f"# seed={cfg.seed}\n" + result.history.to_tsv(),
                                         encoding="utf-8")
    save_checkpoint(result.model, run_dir / "checkpoint.final", extra={"seed": cfg.seed})
    return run_dir
