"""Command-line entry point: ``diffwin {train,eval,gradcheck,maskdump}``.

Machine-readable results (JSON, CSV, NDJSON) go to standard output or files;
progress and errors go to standard error.  Exit codes: 0 success, 1 invalid
configuration, 2 I/O or checkpoint problem, 3 numeric failure, 4 gradient
check violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import verify
from .attention import SITES, InvalidSiteSpec
from .checkpoint import CheckpointError, load_checkpoint
from .model import BOS, ModelConfig, build, forward_classify, forward_lm, forward_seq2seq, greedy_decode
from .tensor import NonFiniteError
from .train.loop import NumericFailure, TrainConfig, train_loop
from .train.tasks import CharLMTask, make_task, task_from_description
from .windowmask import write_matrix_csv

log = logging.getLogger("diffwin")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Everything a training run needs: model shape, task, optimizer, output location."""

    preset: str | None = None
    task: str = "copy"
    model: str = "global"
    segment_size: int = 5
    window_layers: list = field(default_factory=lambda: [1, 2, 3])
    d: int = 128
    heads: int = 4
    ffn_dim: int = 512
    encoder_layers: int | None = None
    decoder_layers: int | None = None
    dropout: float = 0.0
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    warmup: int = 400
    seed: int = 1
    checkpoint_interval: int = 100
    eval_interval: int = 250
    average_last_k: int = 5
    clip_norm: float = 1.0
    eval_examples: int = 256
    stop_at: float | None = None
    out: str | None = None
    corpus: str | None = None
    copy_vocab: int = 12
    min_len: int = 4
    max_len: int = 16
    depth: int = 2
    seq_len: int = 64

    def task_options(self) -> dict:
        if self.task == "copy":
            return {"vocab": self.copy_vocab, "min_len": self.min_len, "max_len": self.max_len}
        if self.task == "toy_sva":
            return {"depth": self.depth}
        return {"seq_len": self.seq_len}

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def model_overrides(self) -> dict:
        kw = {"d": self.d, "heads": self.heads, "ffn_dim": self.ffn_dim, "dropout": self.dropout}
        if self.encoder_layers is not None:
            kw["encoder_layers"] = self.encoder_layers
        if self.decoder_layers is not None:
            kw["decoder_layers"] = self.decoder_layers
        return kw


PRESETS: dict[str, dict] = {
    "copy-tiny": {"task": "copy", "model": "Cr(AW,Seg)-Dec(MW)", "steps": 3000},
    "sva-tiny": {"task": "toy_sva", "model": "Enc(AW)", "steps": 3000, "depth": 2},
    "charlm-tiny": {"task": "char_lm", "model": "Dec(MW)", "steps": 10000, "seq_len": 64},
}

_FIELD_TYPES = {
    "preset": (str, type(None)), "task": (str,), "model": (str,), "window_layers": (list,),
    "dropout": (float, int), "lr": (float, int), "clip_norm": (float, int),
    "stop_at": (float, int, type(None)), "out": (str, type(None)), "corpus": (str, type(None)),
    "encoder_layers": (int, type(None)), "decoder_layers": (int, type(None)),
}


def _check_types(values: dict, origin: str) -> None:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{origin}: unknown configuration key(s): {', '.join(unknown)}")
    for key, value in values.items():
        allowed = _FIELD_TYPES.get(key, (int,))
        if isinstance(value, bool) or not isinstance(value, allowed):
            raise ConfigError(f"{origin}: {key} has invalid value {value!r}")
    layers = values.get("window_layers")
    if layers is not None and not all(isinstance(x, int) and x >= 1 for x in layers):
        raise ConfigError(f"{origin}: window_layers must be a list of positive layer numbers")


def resolve_config(preset: str | None, file_values: dict | None, flag_values: dict) -> RunConfig:
    """Merge preset defaults, then config file values, then command-line flags."""
    merged: dict = {}
    preset = flag_values.get("preset") or (file_values or {}).get("preset") or preset
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(sorted(PRESETS))}")
        merged.update(PRESETS[preset], preset=preset)
    if file_values:
        _check_types(file_values, "config file")
        merged.update(file_values)
    flags = {k: v for k, v in flag_values.items() if v is not None}
    _check_types(flags, "flags")
    merged.update(flags)
    cfg = RunConfig(**merged)
    if cfg.task == "char_lm" and not cfg.corpus:
        raise ConfigError("char_lm needs --corpus pointing at a UTF-8 text file")
    return cfg


def _read_config_file(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _progress(rec: dict) -> None:
    print(f"step {rec['step']:>6}  loss {rec['loss']:.4f}  {rec['metric_name']} {rec['metric_value']:.4f}"
          f"  ({rec['wall_ms'] / 1000:.1f}s)", file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    flags = {
        "preset": args.preset, "model": args.model, "steps": args.steps, "seed": args.seed, "batch": args.batch,
        "segment_size": args.segment_size, "out": args.out, "corpus": args.corpus, "task": args.task,
        "lr": args.lr, "stop_at": args.stop_at,
    }
    cfg = resolve_config(None, _read_config_file(args.config), flags)
    task = make_task(cfg.task, corpus=cfg.corpus, **cfg.task_options())
    mcfg = task.model_config(cfg.model, cfg.segment_size, layers=tuple(cfg.window_layers), **cfg.model_overrides())
    tcfg = cfg.train_config()
    out = Path(cfg.out or f"runs/{cfg.preset or cfg.task}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    print(f"training {cfg.task} with {mcfg.site_string} for up to {tcfg.steps} steps -> {out}", file=sys.stderr)
    result = train_loop(build(mcfg, seed=cfg.seed), task, tcfg, out, progress=_progress)
    summary = {"out": str(out), "steps_run": result.steps_run, "skipped_steps": result.skipped,
               "metrics": result.final_metrics}
    print(json.dumps(summary))
    return EXIT_OK


def _load_model(path: str):
    arrays, meta = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        model = build(config, seed=0)
        model.load_arrays(arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its model description ({exc})") from exc
    return model, meta


def _task_for(meta: dict, name: str | None, corpus: str | None):
    desc = dict(meta.get("task") or {})
    if not desc:
        raise CheckpointError("checkpoint carries no task description")
    if name is not None and name != desc["task"]:
        raise ConfigError(f"checkpoint was trained on {desc['task']!r}, not {name!r}")
    if corpus is not None and desc["task"] == "char_lm":
        desc["corpus"] = corpus
    return task_from_description(desc)


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    task = _task_for(meta, args.task, args.corpus)
    seed = args.seed if args.seed is not None else meta.get("train_config", {}).get("seed", 1)
    metrics = task.evaluate(model, seed, args.split, args.examples)
    print(json.dumps({"task": task.name, "split": args.split, **metrics}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failing, units = [], []
    runner = verify.run_scope(args.scope, seed=args.seed, fraction=args.fraction) if args.scope == "model" else None
    results = runner if runner is not None else (
        verify.run_unit(name, args.scope, make, args.seed)
        for name, make in (verify.OPS_UNITS if args.scope == "ops" else verify.ATTENTION_UNITS).items())
    for res in results:
        units.append(res.as_dict())
        flag = "ok" if res.passed else "FAIL"
        print(f"{res.name:<28} {res.max_error:.3e}  (<= {res.threshold:g})  {flag}", file=sys.stderr, flush=True)
        if not res.passed:
            failing.append(res.name)
    print(json.dumps({"scope": args.scope, "units": units, "failing": failing}))
    if failing:
        print(f"gradcheck: threshold violated in {', '.join(failing)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


_SITE_ALIASES = {"enc": "encoder_self", "dec": "decoder_self", "cr": "cross"}


def _encode_input(task, text: str) -> np.ndarray:
    if isinstance(task, CharLMTask):
        missing = sorted({c for c in text if c not in task.corpus.index})
        if missing:
            raise ConfigError(f"characters not in the model vocabulary: {missing}")
        return np.array([task.corpus.index[c] for c in text], dtype=np.int64)
    try:
        ids = np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError("input must be whitespace-separated token ids") from exc
    if ids.size == 0 or ids.min() < 3 or ids.max() >= task.vocab_size:
        raise ConfigError(f"token ids must lie in [3, {task.vocab_size - 1}]")
    return ids


def cmd_maskdump(args) -> int:
    site = _SITE_ALIASES.get(args.site.lower(), args.site)
    if site not in SITES:
        raise ConfigError(f"unknown site {args.site!r}; expected one of {', '.join(SITES)}")
    model, meta = _load_model(args.checkpoint)
    task = _task_for(meta, None, args.corpus)
    cfg = model.config
    if cfg.layers_for(site) == 0:
        raise ConfigError(f"a {cfg.kind} model has no {site} attention")
    if not 1 <= args.layer <= cfg.layers_for(site):
        raise ConfigError(f"layer must be in 1..{cfg.layers_for(site)} for {site}")
    if not 1 <= args.head <= cfg.heads:
        raise ConfigError(f"head must be in 1..{cfg.heads}")
    spec = cfg.site_for(site, args.layer)
    if not spec.windowed:
        raise ConfigError(f"{site} layer {args.layer} uses global attention, so there is no mask to dump; "
                          f"this model windows: {cfg.site_string}")
    ids = _encode_input(task, args.input)
    traces: dict = {}
    if cfg.kind == "seq2seq":
        target = greedy_decode(model, ids, max_len=ids.size + 1)[0]
        forward_seq2seq(model, ids, np.concatenate([[BOS], target]).astype(np.int64), traces)
    elif cfg.kind == "lm":
        forward_lm(model, ids, traces)
    else:
        forward_classify(model, ids, traces)
    trace = traces[(site, args.layer)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = args.head - 1
    written = {}
    for key in ("mask", "attention", "weights"):
        path = out / f"{key}.csv"
        write_matrix_csv(path, trace[key][0, h])
        written[key] = str(path)
    m, n = trace["mask"].shape[-2:]
    print(json.dumps({"site": site, "layer": args.layer, "head": args.head, "shape": [int(m), int(n)],
                      "files": written}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffwin", description="Differentiable window attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a tiny model on a toy task")
    t.add_argument("--config", help="JSON file of RunConfig values")
    t.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    t.add_argument("--task", choices=("copy", "toy_sva", "char_lm"))
    t.add_argument("--model", help='window sites, e.g. "Enc(AW)-Cr(AW,Seg)-Dec(MW)" or "global"')
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--segment-size", type=int, dest="segment_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--stop-at", type=float, dest="stop_at", help="stop once the held-out metric reaches this")
    t.add_argument("--out", help="output directory")
    t.add_argument("--corpus", help="UTF-8 text file for char_lm")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print held-out metrics of a checkpoint as JSON")
    e.add_argument("checkpoint")
    e.add_argument("--task", choices=("copy", "toy_sva", "char_lm"))
    e.add_argument("--split", choices=("train", "eval"), default="eval")
    e.add_argument("--examples", type=int, default=256)
    e.add_argument("--seed", type=int)
    e.add_argument("--corpus")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("scope", choices=("ops", "attention", "model"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fraction", type=float, default=0.01, help="sampled share of model coordinates")
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("maskdump", help="write mask, attention and weight matrices as CSV")
    m.add_argument("checkpoint")
    m.add_argument("--input", required=True, help="token ids (space separated) or raw text for char_lm")
    m.add_argument("--site", default="decoder_self", help="encoder_self|decoder_self|cross (or Enc|Dec|Cr)")
    m.add_argument("--layer", type=int, default=1)
    m.add_argument("--head", type=int, default=1)
    m.add_argument("--corpus")
    m.add_argument("--out", default="maskdump")
    m.set_defaults(func=cmd_maskdump)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSiteSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
