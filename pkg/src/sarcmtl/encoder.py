"""Small trainable encoders producing a [CLS] vector and a contextual matrix.

Two kinds are provided: ``bag`` (token embedding plus a learned position
vector, nothing contextual) and ``transformer`` (post-norm self-attention
blocks). Both return ``EncoderOutput(h_cls, H)`` where ``H`` has one row per
input position and ``h_cls`` is row 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import RESERVED, UNK, DataError, Vocab

KINDS = ("bag", "transformer")
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "transformer"
    d: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int | None = None  # defaults to 2 * d
    vocab_size: int = 1000
    n_max: int = 64

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        if self.d < 1 or self.vocab_size < 3 or self.n_max < 1:
            raise ValueError(f"bad encoder sizes: {self}")
        if self.kind == "transformer":
            if self.layers < 1:
                raise ValueError("transformer encoder needs layers >= 1")
            if self.heads < 1 or self.d % self.heads:
                raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 2 * self.d


@dataclass
class EncoderOutput:
    h_cls: Tensor  # 1 x d
    H: Tensor  # L x d


def xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    d = cfg.d
    p = {
        "enc.tok_emb": xavier(rng, cfg.vocab_size, d),
        "enc.pos_emb": xavier(rng, cfg.n_max, d),
    }
    if cfg.kind == "transformer":
        f = cfg.ff_width
        for layer in range(cfg.layers):
            pre = f"enc.l{layer}."
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + w] = xavier(rng, d, d)
                # a key bias only shifts each query's scores by a constant, which
                # the softmax ignores, so it would never receive a gradient
                if w != "Wk":
                    p[pre + "b" + w[1]] = np.zeros((1, d))
            p[pre + "ln1_g"] = np.ones((1, d))
            p[pre + "ln1_b"] = np.zeros((1, d))
            p[pre + "W1"] = xavier(rng, d, f)
            p[pre + "b1"] = np.zeros((1, f))
            p[pre + "W2"] = xavier(rng, f, d)
            p[pre + "b2"] = np.zeros((1, d))
            p[pre + "ln2_g"] = np.ones((1, d))
            p[pre + "ln2_b"] = np.zeros((1, d))
    return {name: Tensor.param(v, name) for name, v in p.items()}


def self_attention_block(X: Tensor, mask: np.ndarray, params: dict[str, Tensor],
                         prefix: str, heads: int) -> Tensor:
    """Masked multi-head self-attention with the residual added: ``X + MHA(X)``."""
    L, d = X.shape
    if len(mask) != L:
        raise ad.DimensionError(f"mask length {len(mask)} does not match {L} positions")
    dk = d // heads
    Q = ad.add_row(ad.matmul(X, params[prefix + "Wq"]), params[prefix + "bq"])
    K = ad.matmul(X, params[prefix + "Wk"])
    V = ad.add_row(ad.matmul(X, params[prefix + "Wv"]), params[prefix + "bv"])
    Q = ad.scale(Q, 1.0 / math.sqrt(dk))
    if heads == 1:
        outs = [ad.matmul(ad.softmax_masked(ad.matmul(Q, ad.transpose(K)), mask), V)]
    else:
        outs = []
        for h in range(heads):
            cols = slice(h * dk, (h + 1) * dk)
            q, k, v = ad.take(Q, cols=cols), ad.take(K, cols=cols), ad.take(V, cols=cols)
            attn = ad.softmax_masked(ad.matmul(q, ad.transpose(k)), mask)
            outs.append(ad.matmul(attn, v))
    merged = outs[0] if heads == 1 else ad.concat_cols(outs)
    out = ad.add_row(ad.matmul(merged, params[prefix + "Wo"]), params[prefix + "bo"])
    return ad.add(X, out)


def _transformer_layer(X, mask, params, prefix, heads):
    X = ad.layer_norm(self_attention_block(X, mask, params, prefix, heads),
                      params[prefix + "ln1_g"], params[prefix + "ln1_b"], LN_EPS)
    hidden = ad.gelu(ad.add_row(ad.matmul(X, params[prefix + "W1"]), params[prefix + "b1"]))
    ff = ad.add_row(ad.matmul(hidden, params[prefix + "W2"]), params[prefix + "b2"])
    return ad.layer_norm(ad.add(X, ff), params[prefix + "ln2_g"], params[prefix + "ln2_b"], LN_EPS)


def encode(token_ids, mask, params: dict[str, Tensor], cfg: EncoderConfig) -> EncoderOutput:
    """Encode one sequence of ``L <= n_max`` positions (trailing padding optional)."""
    ids = np.asarray(token_ids)
    mask = np.asarray(mask, dtype=bool)
    L = len(ids)
    if L > cfg.n_max:
        raise ad.DimensionError(f"sequence of {L} positions exceeds n_max={cfg.n_max}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside vocabulary of {cfg.vocab_size}")
    if not mask[0]:
        raise ad.InvalidMaskError("position 0 ([CLS]) must be unmasked")
    pos = params["enc.pos_emb"]
    if L < cfg.n_max:
        pos = ad.take(pos, rows=slice(0, L))
    X = ad.add(ad.gather_rows(params["enc.tok_emb"], ids), pos)
    if cfg.kind == "transformer":
        for layer in range(cfg.layers):
            X = _transformer_layer(X, mask, params, f"enc.l{layer}.", cfg.heads)
    return EncoderOutput(ad.take(X, rows=slice(0, 1)), X)


def load_pretrained_embeddings(path, vocab: Vocab, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` (vocab x d) from a text embedding file.

    The file starts with a ``vocab_size d`` header, then one token followed by
    ``d`` floats per line. Vocabulary tokens missing from the file take the
    file's ``[UNK]`` vector when it has one, else the table's current UNK row.
    Reserved rows absent from the file are left as they are.
    Returns the number of tokens found in the file.
    """
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    try:
        n, d = (int(x) for x in lines[0].split())
    except ValueError:
        raise DataError(f"{path}: header must be 'vocab_size d', got {lines[0]!r}") from None
    if d != table.shape[1]:
        raise DataError(f"{path}: embedding width {d} does not match model d={table.shape[1]}")
    vectors = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d + 1:
            raise DataError(f"{path}: line {lineno} has {len(parts) - 1} values, expected {d}")
        vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
    if len(vectors) != n:
        raise DataError(f"{path}: header announces {n} vectors, found {len(vectors)}")
    unk = vectors.get(vocab.itos[UNK], table[UNK].copy())
    hits = 0
    for i, tok in enumerate(vocab.itos):
        if tok in vectors:
            table[i] = vectors[tok]
            hits += 1
        elif i >= len(RESERVED):
            table[i] = unk
    return hits
