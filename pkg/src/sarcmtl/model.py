"""Joint sarcasm / sentiment model with task attention and a sigmoid interaction gate.

Pipeline for the full variant (``MTL_ATTINTER``), per example::

    h_cls, H      = encode(tokens)
    v_sarc, v_sent = task_attention(H) for each task
    v'_sarc = v_sarc * sigmoid(W_i v_sent + b_i)
    v'_sent = v_sent * sigmoid(W_i v_sarc + b_i)
    logits_t = classifier_t([h_cls, v'_t])
    loss = BCE(sarcasm) + CE(sentiment)

The ablated variants drop the interaction gate, the attention layers, or one of
the two tasks.
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import RESERVED, Batch, DataError, Vocab
from .encoder import EncoderConfig, encode, init_encoder, xavier

TASKS = ("sarc", "sent")
N_CLASSES = {"sarc": 1, "sent": 3}


class VariantKind(str, enum.Enum):
    ST_sent = "ST_sent"
    ST_sarc = "ST_sarc"
    ST_ATT_sent = "ST_ATT_sent"
    ST_ATT_sarc = "ST_ATT_sarc"
    MTL = "MTL"
    MTL_ATT = "MTL_ATT"
    MTL_ATTINTER = "MTL_ATTINTER"

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.value.endswith("_sent"):
            return ("sent",)
        if self.value.endswith("_sarc"):
            return ("sarc",)
        return TASKS

    @property
    def attention(self) -> bool:
        return "ATT" in self.value

    @property
    def interaction(self) -> bool:
        return self is VariantKind.MTL_ATTINTER


class ParamMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: VariantKind = VariantKind.MTL_ATTINTER
    vocab_size: int = 1000
    n_max: int = 64
    d: int = 64
    encoder: str = "transformer"
    layers: int = 2
    heads: int = 4
    d_ff: int | None = None
    d_hidden: int | None = None  # classifier hidden width, defaults to d
    seed: int = 0

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder, self.d, self.layers, self.heads, self.d_ff,
                             self.vocab_size, self.n_max)

    @property
    def hidden_width(self) -> int:
        return self.d_hidden or self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["variant"] = VariantKind(d["variant"])
        return cls(**d)


# Each parameter group draws from its own seeded stream so that, for a given
# seed, shared groups start identical across variants.
_GROUP_STREAM = {"enc": 0, "att_sarc": 1, "att_sent": 2, "inter": 3,
                 "clf_sarc": 4, "clf_sent": 5}


def group_rng(seed: int, group: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_GROUP_STREAM[group],)))


@functools.lru_cache(maxsize=64)
def expected_param_names(cfg: ModelConfig) -> tuple[str, ...]:
    names = list(init_encoder(cfg.encoder_config, np.random.default_rng(0)))
    v = cfg.variant
    for t in v.tasks:
        if v.attention:
            names += [f"att_{t}.W_a", f"att_{t}.W_alpha"]
    if v.interaction:
        names += ["inter.W_i", "inter.b_i"]
    for t in v.tasks:
        names += [f"clf_{t}.W_h", f"clf_{t}.b_h", f"clf_{t}.W_o", f"clf_{t}.b_o"]
    return tuple(names)


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    v, d, dh = cfg.variant, cfg.d, cfg.hidden_width
    params = dict(init_encoder(cfg.encoder_config, group_rng(cfg.seed, "enc")))
    raw = {}
    for t in v.tasks:
        if v.attention:
            rng = group_rng(cfg.seed, f"att_{t}")
            raw[f"att_{t}.W_a"] = xavier(rng, d, 1)
            raw[f"att_{t}.W_alpha"] = xavier(rng, cfg.n_max, cfg.n_max)
    if v.interaction:
        raw["inter.W_i"] = xavier(group_rng(cfg.seed, "inter"), d, d)
        raw["inter.b_i"] = np.zeros((1, d))
    width = 2 * d if v.attention else d
    for t in v.tasks:
        rng = group_rng(cfg.seed, f"clf_{t}")
        k = N_CLASSES[t]
        raw[f"clf_{t}.W_h"] = xavier(rng, width, dh)
        raw[f"clf_{t}.b_h"] = np.zeros((1, dh))
        raw[f"clf_{t}.W_o"] = xavier(rng, dh, k)
        raw[f"clf_{t}.b_o"] = np.zeros((1, k))
    params.update({name: Tensor.param(val, name) for name, val in raw.items()})
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    vocab: Vocab | None = None

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocab | None = None) -> "Model":
        return cls(config, init_params(config), vocab)

    def check(self) -> None:
        want = expected_param_names(self.config)
        if tuple(self.params) != want:
            missing = sorted(set(want) - set(self.params))
            extra = sorted(set(self.params) - set(want))
            raise ParamMismatchError(
                f"parameters do not match variant {self.config.variant.value}: "
                f"missing {missing}, unexpected {extra}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())


# ---------------------------------------------------------------------------
# building blocks

@dataclass
class AttentionTrace:
    C: np.ndarray  # L x 1, zero at padding
    alpha: np.ndarray  # L
    v: np.ndarray  # 1 x d


def task_attention(H: Tensor, mask, W_a: Tensor, W_alpha: Tensor):
    """Attention pooling of ``H`` into one task-specific row vector.

    ``C = tanh(H W_a)`` (padding rows zeroed), ``alpha = softmax(C^T W_alpha)``
    over unmasked positions, ``v = alpha H``. Only the leading ``L x L`` block
    of ``W_alpha`` is used for an ``L``-row ``H``.
    """
    L = H.shape[0]
    mask = np.asarray(mask, dtype=bool)
    C = ad.tanh(ad.matmul(H, W_a))
    if not mask.all():
        C = ad.mul(C, Tensor(mask.astype(float).reshape(L, 1)))
    if W_alpha.shape[0] != L:
        W_alpha = ad.take(W_alpha, slice(0, L), slice(0, L))
    alpha = ad.softmax_masked(ad.matmul(ad.transpose(C), W_alpha), mask)
    v = ad.matmul(alpha, H)
    return v, AttentionTrace(C.value.copy(), alpha.value[0].copy(), v.value.copy())


def task_interaction(v_sarc: Tensor, v_sent: Tensor, W_i: Tensor, b_i: Tensor):
    """Gate each task vector by a sigmoid of the other, through one shared W_i, b_i."""
    if v_sarc.shape != v_sent.shape:
        raise ad.DimensionError(f"task vectors differ in shape: {v_sarc.shape} vs {v_sent.shape}")
    Wt = ad.transpose(W_i)
    gate_sarc = ad.sigmoid(ad.add(ad.matmul(v_sent, Wt), b_i))
    gate_sent = ad.sigmoid(ad.add(ad.matmul(v_sarc, Wt), b_i))
    return ad.mul(v_sarc, gate_sarc), ad.mul(v_sent, gate_sent)


def classify(h_cls: Tensor, v_prime: Tensor | None, W_h: Tensor, b_h: Tensor,
             W_o: Tensor, b_o: Tensor) -> Tensor:
    x = h_cls if v_prime is None else ad.concat_cols([h_cls, v_prime])
    if x.shape[1] != W_h.shape[0]:
        raise ad.DimensionError(f"classifier expects width {W_h.shape[0]}, got {x.shape[1]}")
    hidden = ad.relu(ad.add_row(ad.matmul(x, W_h), b_h))
    return ad.add_row(ad.matmul(hidden, W_o), b_o)


def joint_loss(sarc_logit: Tensor | None, y_sarc: int | None,
               sent_logits: Tensor | None, y_sent: int | None):
    """Unweighted sum of sarcasm BCE and sentiment CE for one example.

    Either task may be ``None`` (single-task variants); its component is then
    returned as ``None`` and contributes nothing.
    """
    bce = ad.bce_with_logits(sarc_logit, int(y_sarc)) if sarc_logit is not None else None
    ce = ad.cross_entropy(sent_logits, int(y_sent)) if sent_logits is not None else None
    if bce is None and ce is None:
        raise ValueError("joint_loss needs at least one task")
    if bce is None:
        return ce, None, ce
    if ce is None:
        return bce, bce, None
    return ad.add(bce, ce), bce, ce


# ---------------------------------------------------------------------------
# forward

@dataclass
class ExampleOutput:
    loss: Tensor
    loss_bce: Tensor | None
    loss_ce: Tensor | None
    sarc_logit: Tensor | None = None
    sent_logits: Tensor | None = None
    traces: dict[str, AttentionTrace] = field(default_factory=dict)


def forward_example(model: Model, token_ids, mask, y_sarc: int, y_sent: int) -> ExampleOutput:
    cfg, p = model.config, model.params
    variant = cfg.variant
    enc = encode(token_ids, mask, p, cfg.encoder_config)
    pooled: dict[str, Tensor | None] = {t: None for t in variant.tasks}
    traces = {}
    if variant.attention:
        for t in variant.tasks:
            pooled[t], traces[t] = task_attention(enc.H, mask, p[f"att_{t}.W_a"],
                                                  p[f"att_{t}.W_alpha"])
    if variant.interaction:
        pooled["sarc"], pooled["sent"] = task_interaction(
            pooled["sarc"], pooled["sent"], p["inter.W_i"], p["inter.b_i"])
    logits = {t: classify(enc.h_cls, pooled[t], p[f"clf_{t}.W_h"], p[f"clf_{t}.b_h"],
                          p[f"clf_{t}.W_o"], p[f"clf_{t}.b_o"]) for t in variant.tasks}
    L, bce, ce = joint_loss(logits.get("sarc"), y_sarc, logits.get("sent"), y_sent)
    return ExampleOutput(L, bce, ce, logits.get("sarc"), logits.get("sent"), traces)


@dataclass
class TaskOutputs:
    sarc_prob: np.ndarray | None  # B
    sent_prob: np.ndarray | None  # B x 3
    sarc_logit: np.ndarray | None
    sent_logits: np.ndarray | None
    loss: float
    loss_bce: float | None
    loss_ce: float | None
    traces: list[dict[str, AttentionTrace]] | None = None


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward(batch: Batch, model: Model, grad: bool = False, keep_traces: bool = False,
            trim: bool = True) -> TaskOutputs:
    """Run every example of ``batch``; losses are means over the batch.

    With ``grad=True`` each example is differentiated on its own tape and its
    gradient, scaled by ``1/B``, is accumulated into the parameters' ``.grad``
    in example order. ``trim`` drops trailing padding before encoding, which is
    exact because padding is inert.
    """
    model.check()
    variant = model.config.variant
    B = len(batch)
    sarc = np.zeros(B) if "sarc" in variant.tasks else None
    sent = np.zeros((B, 3)) if "sent" in variant.tasks else None
    tot = bce = ce = 0.0
    traces = [] if keep_traces else None
    for i in range(B):
        ids, mask = batch.row(i, trim=trim)
        ys, yt = int(batch.y_sarc[i]), int(batch.y_sent[i])
        if grad:
            with Tape() as tape:
                out = forward_example(model, ids, mask, ys, yt)
            ad.backward(tape, out.loss, weight=1.0 / B)
        else:
            out = forward_example(model, ids, mask, ys, yt)
        tot += out.loss.item()
        if out.loss_bce is not None:
            bce += out.loss_bce.item()
        if out.loss_ce is not None:
            ce += out.loss_ce.item()
        if sarc is not None:
            sarc[i] = out.sarc_logit.item()
        if sent is not None:
            sent[i] = out.sent_logits.value[0]
        if keep_traces:
            traces.append(out.traces)
    return TaskOutputs(
        sarc_prob=ad._sigmoid(sarc) if sarc is not None else None,
        sent_prob=_softmax_rows(sent) if sent is not None else None,
        sarc_logit=sarc, sent_logits=sent,
        loss=tot / B,
        loss_bce=bce / B if "sarc" in variant.tasks else None,
        loss_ce=ce / B if "sent" in variant.tasks else None,
        traces=traces)


def batch_loss(model: Model, batch: Batch) -> Tensor:
    """Mean joint loss over ``batch`` as one graph (used by gradient checks)."""
    total = None
    for i in range(len(batch)):
        ids, mask = batch.row(i)
        out = forward_example(model, ids, mask, int(batch.y_sarc[i]), int(batch.y_sent[i]))
        total = out.loss if total is None else ad.add(total, out.loss)
    return ad.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SARCMTL-CHECKPOINT 1\n"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write manifest plus every parameter as raw little-endian float64."""
    manifest = {"config": model.config.to_dict(),
                "variant": model.config.variant.value,
                "d": model.config.d, "n_max": model.config.n_max,
                "vocab_size": model.config.vocab_size, "seed": model.config.seed,
                "params": [[n, list(t.shape)] for n, t in model.params.items()],
                "vocab": model.vocab.itos if model.vocab is not None else None}
    if extra:
        manifest["extra"] = extra
    chunks = [MAGIC, json.dumps(manifest, sort_keys=True).encode("utf-8"), b"\n"]
    for t in model.params.values():
        chunks.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    nl = blob.index(b"\n", len(MAGIC))
    manifest = json.loads(blob[len(MAGIC):nl].decode("utf-8"))
    cfg = ModelConfig.from_dict(manifest["config"])
    pos = nl + 1
    params = {}
    for name, shape in manifest["params"]:
        n = shape[0] * shape[1] * 8
        arr = np.frombuffer(blob[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor.param(arr, name)
        pos += n
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    vocab = Vocab(manifest["vocab"][len(RESERVED):]) if manifest.get("vocab") else None
    model = Model(cfg, params, vocab)
    model.check()
    return model
