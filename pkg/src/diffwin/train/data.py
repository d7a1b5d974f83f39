"""Desk-scale task generators: sequence copy, toy subject-verb agreement, char LM.

Train and held-out examples are separated twice: each split draws from its
own seed stream, and every example is assigned to exactly one split by a
content hash, so the two streams can never share an example.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ..model import BOS, EOS, PAD

log = logging.getLogger(__name__)

SPLITS = ("train", "eval")
EVAL_SHARE = 10  # one example in EVAL_SHARE lands in the held-out split
_SPLIT_TAG = {"train": 0, "eval": 1}


@dataclass
class TaskBatch:
    inputs: np.ndarray  # (batch, length) int64, PAD-padded
    targets: np.ndarray  # same shape as inputs, or (batch,) class labels
    pad_mask: np.ndarray  # True on padding positions of ``inputs``

    def __post_init__(self):
        if self.pad_mask.shape != self.inputs.shape:
            raise ValueError("pad_mask must match inputs")


def split_of(key: bytes) -> str:
    """Deterministic hash partition of an example (or window) key."""
    return "eval" if hashlib.blake2b(key, digest_size=8).digest()[0] % EVAL_SHARE == 0 else "train"


def _key(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.int64).tobytes()


def stream_rng(seed: int, split: str, salt: int) -> np.random.Generator:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _SPLIT_TAG[split], salt]))


def pad_rows(rows, width: int | None = None) -> np.ndarray:
    width = width or max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------------------
# copy


def gen_copy(seed: int, batch: int, len_range=(4, 16), vocab: int = 12, split: str = "train") -> Iterator[TaskBatch]:
    """Endless batches of uniformly random sequences; targets equal inputs."""
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"empty length range {len_range}")
    if vocab < 4:
        raise ValueError("copy needs vocab >= 4 (pad, bos, eos and one symbol)")
    rng = stream_rng(seed, split, 11)
    while True:
        rows = []
        while len(rows) < batch:
            row = rng.integers(3, vocab, size=int(rng.integers(lo, hi + 1)))
            if split_of(_key(row)) == split:
                rows.append(row)
        x = pad_rows(rows)
        yield TaskBatch(inputs=x, targets=x.copy(), pad_mask=x == PAD)


def copy_decoder_arrays(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing input ``BOS + y`` and output ``y + EOS`` for padded targets."""
    B, T = targets.shape
    lengths = (targets != PAD).sum(axis=1)
    dec_in = np.full((B, T + 1), PAD, dtype=np.int64)
    dec_out = np.full((B, T + 1), PAD, dtype=np.int64)
    dec_in[:, 0] = BOS
    dec_in[:, 1:] = targets
    dec_out[:, :T] = targets
    dec_out[np.arange(B), lengths] = EOS
    return dec_in, dec_out


# ---------------------------------------------------------------------------
# toy subject-verb agreement


@dataclass(frozen=True)
class SvaVocab:
    nouns: int = 8
    attrs: int = 8
    verbs: int = 4

    @property
    def noun_sg(self) -> np.ndarray:
        return np.arange(3, 3 + self.nouns)

    @property
    def noun_pl(self) -> np.ndarray:
        return self.noun_sg + self.nouns

    @property
    def attr(self) -> np.ndarray:
        return np.arange(3 + 2 * self.nouns, 3 + 2 * self.nouns + self.attrs)

    @property
    def verb_sg(self) -> np.ndarray:
        start = 3 + 2 * self.nouns + self.attrs
        return np.arange(start, start + self.verbs)

    @property
    def verb_pl(self) -> np.ndarray:
        return self.verb_sg + self.verbs

    @property
    def size(self) -> int:
        return 3 + 2 * self.nouns + self.attrs + 2 * self.verbs

    def flip_verb(self, token: int) -> int:
        if token in self.verb_sg:
            return int(token + self.verbs)
        if token in self.verb_pl:
            return int(token - self.verbs)
        raise ValueError(f"{token} is not a verb")


SVA_VOCAB = SvaVocab()


def sva_sentence(rng: np.random.Generator, depth: int, agree: bool, v: SvaVocab = SVA_VOCAB,
                 max_attrs: int = 2) -> list[int]:
    """``SUBJ ATTR* DISTRACTOR^depth VERB``; distractors draw their number at random."""
    subj_pl = bool(rng.integers(2))
    subj = int(rng.choice(v.noun_pl if subj_pl else v.noun_sg))
    attrs = [int(t) for t in rng.choice(v.attr, size=int(rng.integers(0, max_attrs + 1)))]
    distractors = [int(rng.choice(v.noun_pl if rng.integers(2) else v.noun_sg)) for _ in range(depth)]
    verb_pl = subj_pl if agree else not subj_pl
    verb = int(rng.choice(v.verb_pl if verb_pl else v.verb_sg))
    return [subj, *attrs, *distractors, verb]


def sva_label(tokens, v: SvaVocab = SVA_VOCAB) -> int:
    """1 when the first noun and the final verb agree in number."""
    subj_pl = tokens[0] in v.noun_pl
    verb_pl = tokens[-1] in v.verb_pl
    return int(subj_pl == verb_pl)


def gen_toy_sva(seed: int, batch: int, grammar_depth: int = 2, split: str = "train",
                v: SvaVocab = SVA_VOCAB) -> Iterator[TaskBatch]:
    """Endless label-balanced batches (exactly half agree when ``batch`` is even)."""
    if grammar_depth < 0:
        raise ValueError("grammar_depth must be >= 0")
    rng = stream_rng(seed, split, 23)
    while True:
        wanted = np.array([i % 2 for i in range(batch)])
        rng.shuffle(wanted)
        rows = []
        for agree in wanted:
            while True:
                row = sva_sentence(rng, grammar_depth, bool(agree), v)
                if split_of(_key(row)) == split:
                    break
            rows.append(row)
        x = pad_rows(rows)
        yield TaskBatch(inputs=x, targets=wanted.astype(np.int64), pad_mask=x == PAD)


# ---------------------------------------------------------------------------
# character language modelling


class CharCorpus:
    """A UTF-8 text file as a stream of character ids (ids start after pad/bos/eos)."""

    def __init__(self, path, min_chars: int = 0):
        self.path = Path(path)
        raw = self.path.read_bytes()
        text = raw.decode("utf-8", errors="replace")
        self.replaced = text.count("�") - raw.count("�".encode("utf-8"))
        if self.replaced:
            log.warning("%s: replaced %d undecodable byte sequences", self.path, self.replaced)
        if len(text) < min_chars:
            raise ValueError(f"{self.path}: corpus has {len(text)} characters, need at least {min_chars}")
        self.text = text
        self.chars = sorted(set(text))
        self.index = {c: i + 3 for i, c in enumerate(self.chars)}
        self.ids = np.fromiter((self.index[c] for c in text), dtype=np.int64, count=len(text))
        self._windows: dict[tuple[int, str], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 3

    def decode(self, ids) -> str:
        return "".join(self.chars[i - 3] for i in ids if i >= 3)

    def window_count(self, seq_len: int) -> int:
        return (len(self.ids) - 1) // seq_len

    def windows(self, seq_len: int, split: str) -> np.ndarray:
        """Start offsets of the non-overlapping windows assigned to ``split``."""
        key = (seq_len, split)
        if key not in self._windows:
            ks = [k for k in range(self.window_count(seq_len)) if split_of(f"window:{k}".encode()) == split]
            self._windows[key] = np.asarray(ks, dtype=np.int64) * seq_len
        return self._windows[key]

    def unigram_logprobs(self, seq_len: int) -> np.ndarray:
        """Add-one smoothed log-frequencies estimated on the train windows."""
        counts = np.ones(self.vocab_size)
        counts[:3] = 0.0
        for start in self.windows(seq_len, "train"):
            np.add.at(counts, self.ids[start + 1: start + seq_len + 1], 1.0)
        with np.errstate(divide="ignore"):
            return np.log(counts / counts.sum())


def gen_char_lm(corpus: CharCorpus | str | Path, seed: int, batch: int, seq_len: int = 64,
                split: str = "train") -> Iterator[TaskBatch]:
    """Epochs over shuffled contiguous windows; ``targets[t] == inputs[t + 1]`` in the text."""
    if not isinstance(corpus, CharCorpus):
        corpus = CharCorpus(corpus, min_chars=10 * seq_len)
    elif len(corpus.ids) < 10 * seq_len:
        raise ValueError(f"corpus too small for seq_len={seq_len}")
    starts = corpus.windows(seq_len, split)
    if starts.size == 0:
        raise ValueError(f"no {split} windows in corpus")
    rng = stream_rng(seed, split, 37)
    offs = np.arange(seq_len)
    while True:
        order = starts[rng.permutation(starts.size)]
        for i in range(0, max(order.size - batch + 1, 1), batch):
            s = order[i: i + batch]
            x = corpus.ids[s[:, None] + offs]
            y = corpus.ids[s[:, None] + offs + 1]
            yield TaskBatch(inputs=x, targets=y, pad_mask=np.zeros_like(x, dtype=bool))
