"""Dataset files, tokenization, splitting, batching and the synthetic generator.

Files are UTF-8 TSV with header ``text<TAB>sentiment<TAB>sarcasm<TAB>dialect``.
Sentiment labels are ``NEG|NEU|POS``; sarcasm labels ``TRUE|FALSE`` (any case).
Files ending in ``.csv`` are read as quoted comma-separated values, and a
``tweet`` column stands in for ``text`` when the header has no ``text``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SENTIMENTS = ("NEG", "NEU", "POS")
SENTIMENT_NAMES = ("Negative", "Neutral", "Positive")
SARCASM = ("FALSE", "TRUE")
COLUMNS = ("text", "sentiment", "sarcasm", "dialect")

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")
DEFAULT_NMAX = 64

# Row counts of the official ArSarcasm-v2 distribution.
ARSARCASM_TRAIN_SIZE = 12548
ARSARCASM_TEST_SIZE = 3000


class DataError(ValueError):
    """Malformed dataset file or invalid data-pipeline argument."""


@dataclass(frozen=True)
class Record:
    text: str
    sentiment: int  # index into SENTIMENTS
    sarcasm: int  # 0 / 1
    dialect: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise DataError("record text is empty")
        if self.sentiment not in (0, 1, 2):
            raise DataError(f"sentiment index {self.sentiment!r} not in 0..2")
        if self.sarcasm not in (0, 1):
            raise DataError(f"sarcasm index {self.sarcasm!r} not in 0..1")


@dataclass(frozen=True)
class FormatSpec:
    """Column names of a dataset file, in the order they appear in the header."""

    text: str = "text"
    sentiment: str = "sentiment"
    sarcasm: str = "sarcasm"
    dialect: str | None = "dialect"

    def required(self) -> list[str]:
        return [self.text, self.sentiment, self.sarcasm]


def _read_rows(path: Path) -> list[tuple[int, list[str]]]:
    """(line number, fields) for every non-empty row, header first."""
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".csv":
        reader = csv.reader(text.splitlines(keepends=True))
        rows, start = [], 1
        for fields in reader:
            if fields:
                rows.append((start, fields))
            start = reader.line_num + 1
        return rows
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [(i, line.rstrip("\r").split("\t")) for i, line in enumerate(lines, start=1)]


def parse_dataset(path, format_spec: FormatSpec | None = None,
                  expected_count: int | None = None) -> list[Record]:
    fmt = format_spec or FormatSpec()
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0][1]]
    if format_spec is None and "text" not in header and "tweet" in header:
        fmt = FormatSpec(text="tweet")
    missing = [c for c in fmt.required() if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing} (header: {header})")
    col = {name: header.index(name) for name in header}
    di = col.get(fmt.dialect) if fmt.dialect else None

    records, bad = [], []
    for lineno, fields in rows[1:]:
        if len(fields) != len(header):
            bad.append(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
            continue
        sent = fields[col[fmt.sentiment]].strip().upper()
        sarc = fields[col[fmt.sarcasm]].strip().upper()
        if sent not in SENTIMENTS:
            bad.append(f"line {lineno}: unknown sentiment label {sent!r}")
            continue
        if sarc not in SARCASM:
            bad.append(f"line {lineno}: unknown sarcasm label {sarc!r}")
            continue
        text = fields[col[fmt.text]]
        if not text.strip():
            bad.append(f"line {lineno}: empty text")
            continue
        dialect = fields[di] if di is not None and fields[di] != "" else None
        records.append(Record(text, SENTIMENTS.index(sent), SARCASM.index(sarc), dialect))
    if bad:
        shown = "; ".join(bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise DataError(f"{path}: {len(bad)} rejected rows: {shown}{more}")
    if not records:
        raise DataError(f"{path}: no data rows")
    log.info("parsed %d records from %s", len(records), path)
    if expected_count is not None and len(records) != expected_count:
        raise DataError(f"{path}: expected {expected_count} records, found {len(records)}")
    return records


def write_dataset(records: Iterable[Record], path) -> None:
    out = ["\t".join(COLUMNS)]
    for r in records:
        if "\t" in r.text or "\n" in r.text:
            raise DataError(f"text contains a tab or newline: {r.text!r}")
        out.append("\t".join([r.text, SENTIMENTS[r.sentiment], SARCASM[r.sarcasm],
                              r.dialect or ""]))
    Path(path).write_bytes(("\n".join(out) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# vocabulary and tokenization

class Vocab:
    """Token to id map; ids 0, 1, 2 are PAD, UNK and CLS."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def get(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1,
              max_size: int | None = None) -> "Vocab":
        counts = Counter(tok for t in texts for tok in t.split())
        # frequency descending, ties broken by token for determinism
        ranked = sorted((tok for tok, c in counts.items() if c >= min_freq),
                        key=lambda tok: (-counts[tok], tok))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - len(RESERVED))]
        return cls(ranked)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        if tuple(lines[:len(RESERVED)]) != RESERVED:
            raise DataError(f"{path}: vocabulary must start with {RESERVED}")
        v = cls()
        for t in lines[len(RESERVED):]:
            v.add(t)
        return v


def tokenize(text: str, vocab: Vocab, n_max: int = DEFAULT_NMAX) -> list[int]:
    ids = [CLS] + [vocab.get(tok) for tok in text.split()]
    return ids[:n_max]


# ---------------------------------------------------------------------------
# splitting and batching

def split_train_dev(records: Sequence[Record], ratio: float = 0.8,
                    seed: int | np.random.Generator = 0):
    """Stratified split on the joint (sentiment, sarcasm) label."""
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split, got {len(records)}")
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    strata: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        strata[(r.sentiment, r.sarcasm)].append(i)
    keys = sorted(strata)
    small = [k for k in keys if len(strata[k]) < 2]
    for k in small:
        log.warning("stratum %s has %d member(s); kept entirely in train", k, len(strata[k]))
    eligible = [k for k in keys if k not in small]
    # largest-remainder allocation: each stratum within one of its exact share,
    # and the dev total equals the rounded overall share
    share = {k: len(strata[k]) * (1.0 - ratio) for k in eligible}
    n_dev = {k: math.floor(share[k]) for k in eligible}
    target = int(round(sum(len(strata[k]) for k in eligible) * (1.0 - ratio)))
    by_remainder = sorted(eligible, key=lambda k: (-(share[k] - n_dev[k]), k))
    for k in by_remainder[:max(0, target - sum(n_dev.values()))]:
        n_dev[k] += 1

    train_idx, dev_idx = [], []
    for key in keys:
        members = strata[key]
        if key in small:
            train_idx.extend(members)
            continue
        perm = [members[j] for j in rng.permutation(len(members))]
        dev_idx.extend(perm[:n_dev[key]])
        train_idx.extend(perm[n_dev[key]:])
    train_idx.sort()
    dev_idx.sort()
    return [records[i] for i in train_idx], [records[i] for i in dev_idx]


@dataclass
class Batch:
    token_ids: np.ndarray  # B x n_max, int
    mask: np.ndarray  # B x n_max, bool
    y_sent: np.ndarray  # B
    y_sarc: np.ndarray  # B

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def row(self, i: int, trim: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Token ids and mask for one example, optionally without trailing padding."""
        ids, m = self.token_ids[i], self.mask[i]
        if trim:
            n = int(m.sum())
            return ids[:n], m[:n]
        return ids, m


def encode_records(records: Sequence[Record], vocab: Vocab, n_max: int) -> Batch:
    B = len(records)
    ids = np.full((B, n_max), PAD, dtype=np.int64)
    mask = np.zeros((B, n_max), dtype=bool)
    for i, r in enumerate(records):
        toks = tokenize(r.text, vocab, n_max)
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = True
    return Batch(ids, mask,
                 np.array([r.sentiment for r in records], dtype=np.int64),
                 np.array([r.sarcasm for r in records], dtype=np.int64))


def make_batches(records: Sequence[Record], vocab: Vocab, batch_size: int,
                 n_max: int = DEFAULT_NMAX,
                 shuffle_seed: int | np.random.Generator | None = None) -> list[Batch]:
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        rng = (shuffle_seed if isinstance(shuffle_seed, np.random.Generator)
               else np.random.default_rng(shuffle_seed))
        order = rng.permutation(len(records))
    return [encode_records([records[j] for j in order[s:s + batch_size]], vocab, n_max)
            for s in range(0, len(records), batch_size)]


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthConfig:
    """Planted-correlation generator settings.

    Token ``tok{i}`` for ``i < 5 * indicators_per_class`` is an indicator: the
    first block belongs to NEG, then NEU, POS, FALSE, TRUE. The layout does not
    depend on ``seed``, so datasets drawn with different seeds share it.
    """

    vocab_size: int = 400
    n_examples: int = 1000
    max_len: int = 16
    p_sarcastic: float = 0.25
    p_neg_given_sarc: float = 0.7
    signal_strength: float = 0.6
    seed: int = 0
    min_len: int = 4
    indicators_per_class: int = 8
    n_max: int = DEFAULT_NMAX

    def validate(self) -> None:
        for name in ("p_sarcastic", "p_neg_given_sarc"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise DataError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        if not 2 <= self.min_len <= self.max_len:
            raise DataError(f"need 2 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        # tokenized length is max_len + 1 with CLS
        if self.max_len + 1 > self.n_max:
            raise DataError(f"max_len {self.max_len} (+CLS) exceeds n_max {self.n_max}")
        if self.indicators_per_class < 1:
            raise DataError("indicators_per_class must be >= 1")
        if self.vocab_size <= 5 * self.indicators_per_class:
            raise DataError(f"vocab_size {self.vocab_size} leaves no noise tokens")
        if self.n_examples < 1:
            raise DataError("n_examples must be >= 1")

    def indicator_ids(self, block: int) -> range:
        """Token indices for block 0..2 (sentiment) or 3..4 (sarcasm FALSE/TRUE)."""
        k = self.indicators_per_class
        return range(block * k, (block + 1) * k)


def synth_generate(cfg: SynthConfig) -> list[Record]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.indicators_per_class
    noise_lo = 5 * k
    records = []
    for _ in range(cfg.n_examples):
        sarc = int(rng.random() < cfg.p_sarcastic)
        if sarc:
            if rng.random() < cfg.p_neg_given_sarc:
                sent = 0
            else:
                sent = 1 + int(rng.integers(2))
        else:
            sent = int(rng.integers(3))
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        toks = rng.integers(noise_lo, cfg.vocab_size, size=length)
        slots = rng.permutation(length)[:2]
        has_sent = rng.random() < cfg.signal_strength
        has_sarc = rng.random() < cfg.signal_strength
        if has_sent:
            toks[slots[0]] = cfg.indicator_ids(sent)[int(rng.integers(k))]
        if has_sarc:
            toks[slots[1]] = cfg.indicator_ids(3 + sarc)[int(rng.integers(k))]
        records.append(Record(" ".join(f"tok{t}" for t in toks), sent, sarc, "synthetic"))
    return records


def label_counts(records: Sequence[Record]) -> dict[str, Counter]:
    return {"sentiment": Counter(SENTIMENTS[r.sentiment] for r in records),
            "sarcasm": Counter(SARCASM[r.sarcasm] for r in records)}


def binomial_tolerance(n: int, p: float, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(p * (1 - p) / n)
