"""Task adapters: how each toy task builds its model, loss and held-out metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path

import numpy as np

from ..model import EOS, PAD, Model, ModelConfig, forward_classify, forward_lm, forward_seq2seq, greedy_decode
from ..model import parse_site_string
from ..tensor import Tensor, cross_entropy
from .data import SVA_VOCAB, CharCorpus, TaskBatch, copy_decoder_arrays, gen_char_lm, gen_copy, gen_toy_sva

TASKS = ("copy", "toy_sva", "char_lm")


def token_accuracy(predictions, references, max_len: int) -> float:
    """Position-wise accuracy against ``reference + EOS``.

    A prediction shorter than ``max_len`` stopped on EOS, so EOS is appended
    before comparing; missing positions count as errors.
    """
    correct = total = 0
    for pred, ref in zip(predictions, references):
        pred = list(pred) + ([EOS] if len(pred) < max_len else [])
        ref = list(ref) + [EOS]
        total += len(ref)
        correct += sum(int(a == b) for a, b in zip(pred, ref))
    if total == 0:
        raise ValueError("empty split")
    return correct / total


class Task:
    name: str
    kind: str
    metric: str
    higher_is_better: bool = True

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    def model_config(self, sites: str = "global", segment_size: int = 5, **kw) -> ModelConfig:
        raise NotImplementedError

    def batches(self, seed: int, batch: int, split: str = "train"):
        raise NotImplementedError

    def loss(self, model: Model, batch: TaskBatch) -> Tensor:
        raise NotImplementedError

    def evaluate(self, model: Model, seed: int, split: str = "eval", n_examples: int = 256) -> dict:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def meets(self, value: float, target: float) -> bool:
        return value >= target if self.higher_is_better else value <= target


def _config(kind, vocab, sites, segment_size, layers=(1, 2, 3), **kw) -> ModelConfig:
    base = dict(d=128, heads=4, ffn_dim=512)
    if kind == "seq2seq":
        base.update(encoder_layers=2, decoder_layers=2)
    elif kind == "classifier":
        base.update(encoder_layers=2, decoder_layers=0, num_classes=2)
    else:
        base.update(encoder_layers=0, decoder_layers=2)
    base.update(kw)
    return ModelConfig(vocab_size=vocab, kind=kind, site_specs=parse_site_string(sites, segment_size, layers), **base)


@dataclass
class CopyTask(Task):
    vocab: int = 12
    min_len: int = 4
    max_len: int = 16
    name: str = field(default="copy", init=False)
    kind: str = field(default="seq2seq", init=False)
    metric: str = field(default="token_accuracy", init=False)

    @property
    def vocab_size(self) -> int:
        return self.vocab

    def model_config(self, sites="global", segment_size=5, **kw):
        return _config("seq2seq", self.vocab, sites, segment_size, max_positions=64, **kw)

    def batches(self, seed, batch, split="train"):
        return gen_copy(seed, batch, (self.min_len, self.max_len), self.vocab, split)

    def loss(self, model, batch):
        dec_in, dec_out = copy_decoder_arrays(batch.targets)
        return cross_entropy(forward_seq2seq(model, batch.inputs, dec_in), dec_out, ignore_index=PAD)

    def evaluate(self, model, seed, split="eval", n_examples=256):
        batch = next(self.batches(seed, n_examples, split))
        refs = [row[row != PAD] for row in batch.inputs]
        limit = self.max_len + 1
        preds = greedy_decode(model, batch.inputs, limit)
        exact = float(np.mean([len(p) == len(r) and np.array_equal(p, r) for p, r in zip(preds, refs)]))
        return {"token_accuracy": token_accuracy(preds, refs, limit), "sequence_accuracy": exact,
                "examples": len(refs)}

    def describe(self):
        return {"task": self.name, "vocab": self.vocab, "min_len": self.min_len, "max_len": self.max_len}


@dataclass
class SvaTask(Task):
    depth: int = 2
    name: str = field(default="toy_sva", init=False)
    kind: str = field(default="classifier", init=False)
    metric: str = field(default="accuracy", init=False)

    @property
    def vocab_size(self) -> int:
        return SVA_VOCAB.size

    def model_config(self, sites="global", segment_size=5, **kw):
        return _config("classifier", self.vocab_size, sites, segment_size, max_positions=64, **kw)

    def batches(self, seed, batch, split="train"):
        return gen_toy_sva(seed, batch, self.depth, split)

    def loss(self, model, batch):
        return cross_entropy(forward_classify(model, batch.inputs), batch.targets)

    def evaluate(self, model, seed, split="eval", n_examples=256):
        batch = next(self.batches(seed, n_examples, split))
        pred = forward_classify(model, batch.inputs).data.argmax(axis=-1)
        labels = batch.targets
        majority = max(labels.mean(), 1.0 - labels.mean())
        return {"accuracy": float((pred == labels).mean()), "majority_baseline": float(majority),
                "examples": int(labels.size)}

    def describe(self):
        return {"task": self.name, "depth": self.depth}


@dataclass
class CharLMTask(Task):
    corpus_path: str = ""
    seq_len: int = 64
    name: str = field(default="char_lm", init=False)
    kind: str = field(default="lm", init=False)
    metric: str = field(default="perplexity", init=False)
    higher_is_better: bool = field(default=False, init=False)

    def __post_init__(self):
        if not self.corpus_path:
            raise ValueError("char_lm needs a corpus file")
        self.corpus = CharCorpus(self.corpus_path, min_chars=10 * self.seq_len)
        self._unigram = None

    @property
    def vocab_size(self) -> int:
        return self.corpus.vocab_size

    def model_config(self, sites="global", segment_size=5, **kw):
        return _config("lm", self.vocab_size, sites, segment_size, max_positions=max(64, self.seq_len), **kw)

    def batches(self, seed, batch, split="train"):
        return gen_char_lm(self.corpus, seed, batch, self.seq_len, split)

    def loss(self, model, batch):
        return cross_entropy(forward_lm(model, batch.inputs), batch.targets)

    def unigram_perplexity(self, split: str = "eval") -> float:
        if self._unigram is None:
            self._unigram = self.corpus.unigram_logprobs(self.seq_len)
        starts = self.corpus.windows(self.seq_len, split)
        offs = np.arange(1, self.seq_len + 1)
        ids = self.corpus.ids[starts[:, None] + offs]
        return float(math.exp(-self._unigram[ids].mean()))

    def evaluate(self, model, seed, split="eval", n_examples=256, batch=64):
        starts = self.corpus.windows(self.seq_len, split)[:n_examples]
        if starts.size == 0:
            raise ValueError("empty split")
        offs = np.arange(self.seq_len)
        nll = 0.0
        for i in range(0, starts.size, batch):
            s = starts[i: i + batch]
            x = self.corpus.ids[s[:, None] + offs]
            y = self.corpus.ids[s[:, None] + offs + 1]
            nll += cross_entropy(forward_lm(model, x), y).item() * y.size
        mean = nll / (starts.size * self.seq_len)
        return {"perplexity": math.exp(mean), "nll": mean, "unigram_perplexity": self.unigram_perplexity(split),
                "windows": int(starts.size)}

    def describe(self):
        return {"task": self.name, "corpus": str(Path(self.corpus_path)), "seq_len": self.seq_len,
                "chars": "".join(self.corpus.chars)}


def make_task(name: str, corpus: str | None = None, **kw) -> Task:
    if name == "copy":
        return CopyTask(**kw)
    if name == "toy_sva":
        return SvaTask(**kw)
    if name == "char_lm":
        return CharLMTask(corpus_path=corpus or "", **kw)
    raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")


def task_from_description(desc: dict) -> Task:
    desc = dict(desc)
    name = desc.pop("task")
    desc.pop("chars", None)
    if name == "char_lm":
        return CharLMTask(corpus_path=desc["corpus"], seq_len=desc["seq_len"])
    return make_task(name, **desc)
