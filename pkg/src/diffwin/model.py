"""Tiny pre-norm Transformer with per-site, per-layer attention variants."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .attention import AttentionParams, AttentionSiteSpec, InvalidSiteSpec, multi_head
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_constant,
    dropout,
    embedding_lookup,
    layer_norm,
    masked_mean,
    matmul,
    relu,
    reshape,
    scale,
)

KINDS = ("seq2seq", "classifier", "lm")
PAD, BOS, EOS = 0, 1, 2

_VARIANT_CODES = {"AW": "additive_window", "MW": "multiplicative_window"}
_SITE_CODES = {"Enc": "encoder_self", "Dec": "decoder_self", "Cr": "cross"}
_CODE_RE = re.compile(r"^(Enc|Dec|Cr)\s*\(\s*(AW|MW)\s*(?:,\s*(Seg)\s*)?\)$")

NAMED_SITE_STRINGS = ("global", "Enc(AW)", "Dec(MW)", "Cr(AW,Seg)", "Enc(AW)-Dec(MW)", "Cr(AW,Seg)-Dec(MW)",
                      "Enc(AW)-Cr(AW,Seg)-Dec(MW)", "Enc(MW)", "Dec(AW)")


def parse_site_string(text: str, segment_size: int = 5, layers=(1, 2, 3)) -> tuple[AttentionSiteSpec, ...]:
    """Parse names like ``"Enc(AW)-Cr(AW,Seg)-Dec(MW)"``; ``"global"`` gives no windowed sites."""
    text = text.strip()
    if text.lower() == "global":
        return ()
    specs, seen = [], set()
    for part in text.split("-"):
        match = _CODE_RE.match(part.strip())
        if not match:
            raise InvalidSiteSpec(f"cannot parse site spec {part!r} in {text!r}")
        site, variant, seg = match.groups()
        site = _SITE_CODES[site]
        if site in seen:
            raise InvalidSiteSpec(f"site {site} given twice in {text!r}")
        seen.add(site)
        specs.append(AttentionSiteSpec(site=site, variant=_VARIANT_CODES[variant],
                                       masking="segment" if seg else "token",
                                       segment_size=segment_size, applies_to_layers=frozenset(layers)))
    return tuple(specs)


def format_site_string(specs) -> str:
    if not specs:
        return "global"
    inv_site = {v: k for k, v in _SITE_CODES.items()}
    inv_var = {v: k for k, v in _VARIANT_CODES.items()}
    order = {"encoder_self": 0, "cross": 1, "decoder_self": 2}
    parts = []
    for s in sorted(specs, key=lambda s: order[s.site]):
        inner = inv_var[s.variant] + (",Seg" if s.masking == "segment" else "")
        parts.append(f"{inv_site[s.site]}({inner})")
    return "-".join(parts)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    kind: str = "seq2seq"
    d: int = 128
    heads: int = 4
    ffn_dim: int = 512
    encoder_layers: int = 2
    decoder_layers: int = 2
    site_specs: tuple = ()
    dropout: float = 0.0
    max_positions: int = 512
    num_classes: int = 0
    share_embeddings: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.vocab_size < 3:
            raise ValueError("vocabulary must hold at least pad, bos and eos")
        if self.d % self.heads:
            raise ShapeError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.kind == "classifier" and self.num_classes < 2:
            raise ValueError("classifier needs num_classes >= 2")
        if self.kind == "lm" and self.encoder_layers:
            object.__setattr__(self, "encoder_layers", 0)
        if self.kind == "classifier" and self.decoder_layers:
            object.__setattr__(self, "decoder_layers", 0)
        object.__setattr__(self, "site_specs", tuple(self.site_specs))
        present = {"encoder_self": self.encoder_layers, "decoder_self": self.decoder_layers,
                   "cross": self.decoder_layers if self.kind == "seq2seq" else 0}
        sites = set()
        for s in self.site_specs:
            if not isinstance(s, AttentionSiteSpec):
                raise InvalidSiteSpec(f"site spec entries must be AttentionSiteSpec, got {s!r}")
            if s.site in sites:
                raise InvalidSiteSpec(f"site {s.site} specified twice")
            sites.add(s.site)
            if present[s.site] == 0:
                raise InvalidSiteSpec(f"{self.kind} model has no {s.site} attention")

    def layers_for(self, site: str) -> int:
        return {"encoder_self": self.encoder_layers, "decoder_self": self.decoder_layers,
                "cross": self.decoder_layers}[site]

    def site_for(self, site: str, layer: int) -> AttentionSiteSpec:
        """Spec governing ``site`` in 1-based ``layer``; global when none applies."""
        for s in self.site_specs:
            if s.site == site and layer in s.applies_to_layers:
                return s
        return AttentionSiteSpec(site=site)

    @property
    def site_string(self) -> str:
        return format_site_string(self.site_specs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["site_specs"] = [
            {"site": s.site, "variant": s.variant, "masking": s.masking, "segment_size": s.segment_size,
             "applies_to_layers": sorted(s.applies_to_layers)}
            for s in self.site_specs
        ]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        specs = tuple(
            AttentionSiteSpec(site=s["site"], variant=s["variant"], masking=s["masking"],
                              segment_size=int(s["segment_size"]),
                              applies_to_layers=frozenset(int(i) for i in s["applies_to_layers"]))
            for s in raw.pop("site_specs", [])
        )
        return cls(site_specs=specs, **raw)


def with_sites(config: ModelConfig, site_string: str, segment_size: int = 5, layers=(1, 2, 3)) -> ModelConfig:
    return replace(config, site_specs=parse_site_string(site_string, segment_size, layers))


def tiny_classifier(vocab_size: int, num_classes: int = 2, sites: str = "global", **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, kind="classifier", d=128, heads=4, ffn_dim=512,
                       encoder_layers=2, decoder_layers=0, num_classes=num_classes,
                       site_specs=parse_site_string(sites, kw.pop("segment_size", 5)), **kw)


def tiny_seq2seq(vocab_size: int, sites: str = "global", **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, kind="seq2seq", d=128, heads=4, ffn_dim=512,
                       encoder_layers=2, decoder_layers=2,
                       site_specs=parse_site_string(sites, kw.pop("segment_size", 5)), **kw)


def tiny_lm(vocab_size: int, sites: str = "global", **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, kind="lm", d=128, heads=4, ffn_dim=512,
                       encoder_layers=0, decoder_layers=2,
                       site_specs=parse_site_string(sites, kw.pop("segment_size", 5)), **kw)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class Model:
    """Parameters plus forward passes; all tensors live in ``self.params``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.attn: dict[str, AttentionParams] = {}
        for prefix, site in self._attention_sites():
            variant = config.site_for(site, int(prefix.split(".")[1]) + 1).variant
            names = [k for k in params if k.startswith(prefix + ".")]
            weights = {k[len(prefix) + 1:]: params[k] for k in names}
            self.attn[prefix] = AttentionParams(weights, variant, config.heads)
        self._pe = sinusoidal_positions(config.max_positions, config.d)
        self.training = False
        self.rng: np.random.Generator | None = None

    def _attention_sites(self) -> Iterator[tuple[str, str]]:
        c = self.config
        for i in range(c.encoder_layers):
            yield f"enc.{i}.self", "encoder_self"
        for i in range(c.decoder_layers):
            yield f"dec.{i}.self", "decoder_self"
            if c.kind == "seq2seq":
                yield f"dec.{i}.cross", "cross"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise KeyError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data[...] = arrays[k]

    # -- building blocks ----------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout, self.rng) if self.training else x

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        h = relu(add(matmul(x, self._p(prefix + ".w1")), self._p(prefix + ".b1")))
        return add(matmul(h, self._p(prefix + ".w2")), self._p(prefix + ".b2"))

    def _embed(self, ids: np.ndarray, table: str) -> Tensor:
        t = ids.shape[-1]
        if t > self.config.max_positions:
            raise ShapeError(f"sequence length {t} exceeds max positions {self.config.max_positions}")
        x = scale(embedding_lookup(self._p(table), ids), math.sqrt(self.config.d))
        return self._drop(add_constant(x, self._pe[:t]))

    def _attend(self, prefix: str, site: str, layer: int, xq: Tensor, xkv: Tensor, causal: bool,
                key_mask, traces) -> Tensor:
        spec = self.config.site_for(site, layer + 1)
        trace = {} if traces is not None else None
        out = multi_head(xq, xkv, self.attn[prefix], spec, causal=causal, key_mask=key_mask, trace=trace,
                         dropout_p=self.config.dropout if self.training else 0.0, rng=self.rng)
        if traces is not None:
            traces[(site, layer + 1)] = trace
        return out

    # -- stacks -------------------------------------------------------------

    def encode(self, src: np.ndarray, src_keep: np.ndarray, traces: dict | None = None) -> Tensor:
        x = self._embed(src, "embed" if self.config.share_embeddings else "src_embed")
        for i in range(self.config.encoder_layers):
            p = f"enc.{i}"
            h = self._ln(x, p + ".ln1")
            x = add(x, self._drop(self._attend(p + ".self", "encoder_self", i, h, h, False, src_keep, traces)))
            x = add(x, self._drop(self._ffn(self._ln(x, p + ".ln2"), p + ".ffn")))
        return self._ln(x, "enc.ln_f")

    def decode(self, tgt: np.ndarray, tgt_keep: np.ndarray, memory: Tensor | None = None,
               src_keep: np.ndarray | None = None, traces: dict | None = None) -> Tensor:
        x = self._embed(tgt, "embed")
        for i in range(self.config.decoder_layers):
            p = f"dec.{i}"
            h = self._ln(x, p + ".ln1")
            x = add(x, self._drop(self._attend(p + ".self", "decoder_self", i, h, h, True, tgt_keep, traces)))
            if memory is not None:
                h = self._ln(x, p + ".ln2")
                x = add(x, self._drop(self._attend(p + ".cross", "cross", i, h, memory, False, src_keep, traces)))
            x = add(x, self._drop(self._ffn(self._ln(x, p + ".ln3"), p + ".ffn")))
        return self._ln(x, "dec.ln_f")

    def project(self, h: Tensor) -> Tensor:
        return add(matmul(h, self._p("out.w")), self._p("out.b"))


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministically initialise every parameter from ``seed``.

    Weights are uniform in ``±1/sqrt(fan_in)``; the output read-out uses
    ``±1/fan_in`` so initial predictions are close to uniform.
    """
    rng = np.random.default_rng(seed)
    c = config
    d, f = c.d, c.ffn_dim
    params: dict[str, Tensor] = {}

    def new(name, data):
        params[name] = Tensor(data, requires_grad=True, name=name)

    def ln(prefix):
        new(prefix + ".g", np.ones(d))
        new(prefix + ".b", np.zeros(d))

    def attn(prefix, site, layer):
        variant = c.site_for(site, layer + 1).variant
        for k, t in AttentionParams.init(d, c.heads, variant, rng).weights.items():
            new(f"{prefix}.{k}", t.data)

    def ffn(prefix):
        new(prefix + ".w1", _init(rng, (d, f), d))
        new(prefix + ".b1", np.zeros(f))
        new(prefix + ".w2", _init(rng, (f, d), f))
        new(prefix + ".b2", np.zeros(d))

    new("embed", _init(rng, (c.vocab_size, d), d))
    if c.kind == "seq2seq" and not c.share_embeddings:
        new("src_embed", _init(rng, (c.vocab_size, d), d))
    for i in range(c.encoder_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self", "encoder_self", i)
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    if c.encoder_layers:
        ln("enc.ln_f")
    for i in range(c.decoder_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self", "decoder_self", i)
        if c.kind == "seq2seq":
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross", "cross", i)
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    if c.decoder_layers:
        ln("dec.ln_f")
    if c.kind == "classifier":
        new("cls.w", rng.uniform(-1.0 / d, 1.0 / d, (d, c.num_classes)))
        new("cls.b", np.zeros(c.num_classes))
    else:
        new("out.w", rng.uniform(-1.0 / d, 1.0 / d, (d, c.vocab_size)))
        new("out.b", np.zeros(c.vocab_size))
    return Model(config, params)


def parameter_census(config: ModelConfig) -> int:
    """Parameter count as a pure function of the configuration."""
    c = config
    d, f, V = c.d, c.ffn_dim, c.vocab_size
    per_variant = {"global": 4, "multiplicative_window": 8, "additive_window": 10}
    total = V * d + (V * d if c.kind == "seq2seq" and not c.share_embeddings else 0)
    block = 2 * d * f + f + d
    for i in range(c.encoder_layers):
        total += 4 * d + per_variant[c.site_for("encoder_self", i + 1).variant] * d * d + block
    total += 2 * d if c.encoder_layers else 0
    for i in range(c.decoder_layers):
        total += 4 * d + per_variant[c.site_for("decoder_self", i + 1).variant] * d * d + block
        if c.kind == "seq2seq":
            total += 2 * d + per_variant[c.site_for("cross", i + 1).variant] * d * d
    total += 2 * d if c.decoder_layers else 0
    out = c.num_classes if c.kind == "classifier" else V
    return total + d * out + out


# ---------------------------------------------------------------------------
# forward passes


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids, False


def forward_classify(model: Model, token_ids, traces: dict | None = None) -> Tensor:
    """Class logits from the mean of encoder states over non-padding positions."""
    ids, single = _as_batch(token_ids)
    if ids.shape[1] == 0:
        raise ValueError("empty input sequence")
    keep = ids != PAD
    if not keep.any(axis=1).all():
        raise ValueError("a sequence in the batch is all padding")
    h = model.encode(ids, keep, traces)
    logits = add(matmul(masked_mean(h, keep), model.params["cls.w"]), model.params["cls.b"])
    return _unbatch(logits, single)


def forward_lm(model: Model, token_ids, traces: dict | None = None) -> Tensor:
    """Next-token logits at every position of a causal decoder-only stack."""
    ids, single = _as_batch(token_ids)
    if ids.shape[1] < 2:
        raise ValueError("language modelling needs sequences of length >= 2")
    logits = model.project(model.decode(ids, ids != PAD, traces=traces))
    return _unbatch(logits, single)


def forward_seq2seq(model: Model, source_ids, target_ids, traces: dict | None = None) -> Tensor:
    """Teacher-forced logits; ``target_ids`` is the decoder input (BOS-prefixed)."""
    src, single = _as_batch(source_ids)
    tgt, _ = _as_batch(target_ids)
    if src.shape[0] != tgt.shape[0]:
        raise ShapeError("source and target batch sizes differ")
    src_keep = src != PAD
    memory = model.encode(src, src_keep, traces)
    logits = model.project(model.decode(tgt, tgt != PAD, memory, src_keep, traces))
    return _unbatch(logits, single)


def greedy_decode(model: Model, source_ids, max_len: int) -> list[np.ndarray]:
    """Argmax decoding; the decoder (and its masks) is recomputed over the prefix each step.

    Returns one array per source sequence, without BOS and cut at the first
    EOS (which is not included).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src, _ = _as_batch(source_ids)
    src_keep = src != PAD
    memory = model.encode(src, src_keep)
    B = src.shape[0]
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        h = model.decode(prefix, np.ones_like(prefix, dtype=bool), memory, src_keep)
        logits = model.project(h).data[:, -1, :]
        nxt = np.where(done, PAD, logits.argmax(axis=-1))
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in prefix[:, 1:]:
        stop = np.nonzero(row == EOS)[0]
        out.append(row[: stop[0]] if stop.size else row)
    return out


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if single else t
