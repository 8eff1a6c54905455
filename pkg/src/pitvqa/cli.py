"""Command-line entry point: ``pitvqa <subcommand> [flags]``.

Configuration is one flat JSON object.  Values resolve as
defaults < profile < ``--config`` file < command-line flags, and every
run writes the fully resolved values to ``resolved_config.json`` in its
output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import TAXONOMY, generate_corpus, read_dataset, split_by_procedure, write_dataset
from .data.corpus import Corpus
from .gradsuite import TOLERANCE, run_suite
from .metrics import ABLATION_SCHEMA, HEADLINE, REPORT_SCHEMA, format_csv, format_table, validate_report
from .model import PROFILES, ConfigError, ModelConfig, init_parameters
from .training import TrainConfig, ablation_run, default_vocab, encode_corpus, evaluate, train

log = logging.getLogger("pitvqa")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DATA_DEFAULTS = {"procedures": 25, "frames": 400, "train_fraction": 0.8}
RUN_DEFAULTS = {"profile": "desk", "seed": 0}
_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "seed"}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "use_eb")}
_TYPES = {
    **{k: type(ModelConfig.__dataclass_fields__[k].default) for k in _MODEL_KEYS},
    **{k: type(TrainConfig.__dataclass_fields__[k].default) for k in _TRAIN_KEYS},
    "procedures": int, "frames": int, "train_fraction": float, "profile": str, "seed": int,
}
KNOWN_KEYS = frozenset(_TYPES)


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict
    profile: str
    seed: int

    def to_dict(self) -> dict:
        flat = {k: getattr(self.model, k) for k in _MODEL_KEYS}
        flat.update({k: getattr(self.train, k) for k in _TRAIN_KEYS})
        flat.update(self.data)
        flat.update(profile=self.profile, seed=self.seed)
        return dict(sorted(flat.items()))


def _check_type(key: str, value):
    want = _TYPES[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool) or not isinstance(value, want):
        raise UsageError(f"config key {key!r}: expected {want.__name__}, got {type(value).__name__}")
    return value


def load_config(path) -> dict:
    """Parse and type-check a flat JSON config file (unknown keys rejected)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    for key in doc:
        if key not in KNOWN_KEYS:
            raise UsageError(f"config {path}: unknown key {key!r}")
    return {k: _check_type(k, v) for k, v in doc.items()}


def resolve(file_values: dict, flag_values: dict) -> RunConfig:
    values = {**RUN_DEFAULTS, **DATA_DEFAULTS}
    merged = {**file_values, **flag_values}
    profile = merged.get("profile", values["profile"])
    if profile not in PROFILES:
        raise UsageError(f"config key 'profile': unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values.update(PROFILES[profile])
    values.update(merged)
    try:
        model = ModelConfig(**{k: values[k] for k in _MODEL_KEYS if k in values}, seed=values["seed"])
        tr = TrainConfig(**{k: values[k] for k in _TRAIN_KEYS if k in values}, seed=values["seed"])
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    data = {k: values[k] for k in DATA_DEFAULTS}
    if data["procedures"] < 1 or data["frames"] < 1:
        raise UsageError("config keys 'procedures' and 'frames' must be >= 1")
    if not 0.0 < data["train_fraction"] < 1.0:
        raise UsageError("config key 'train_fraction' must lie in (0, 1)")
    return RunConfig(model, tr, data, profile, values["seed"])


# argument parsing -----------------------------------------------------------

_S = argparse.SUPPRESS


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", metavar="PATH", default=None, help="flat JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=_S, help="master seed for data, init, batches and dropout (default 0)")
    p.add_argument("--profile", choices=sorted(PROFILES), default=_S, help="model size profile (default desk)")
    p.add_argument("--out", metavar="DIR", default=None, help=out_help + " (default $PITVQA_OUT or ./pitvqa-out)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-model", dest="d_model", type=int, default=_S, help="hidden width")
    g.add_argument("--n-heads", dest="n_heads", type=int, default=_S, help="attention heads")
    g.add_argument("--decoder-layers", dest="n_decoder_layers", type=int, default=_S, help="causal decoder blocks")
    g.add_argument("--dropout", dest="dropout_p", type=float, default=_S, help="head dropout probability")
    eb = g.add_mutually_exclusive_group()
    eb.add_argument("--eb", dest="use_eb", action="store_const", const=True, default=_S, help="use the excitation block")
    eb.add_argument("--no-eb", dest="use_eb", action="store_const", const=False, default=_S, help="skip the excitation block")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", dest="max_steps", type=int, default=_S, help="optimisation steps (max_steps)")
    g.add_argument("--lr", dest="learning_rate", type=float, default=_S, help="Adam learning rate (default 1e-5)")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=_S, help="samples per step (default 16)")
    g.add_argument("--eval-every", dest="eval_every", type=int, default=_S, help="checkpoint every N steps, 0 = never")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pitvqa", description="PitVQA-Net on a synthetic surgical VQA corpus.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus", description="Generate frames and QA pairs.")
    _common(p, "dataset directory")
    p.add_argument("--procedures", type=int, default=_S, help="number of synthetic procedures (default 25)")
    p.add_argument("--frames", type=int, default=_S, help="frames per procedure (default 400)")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=_S,
                   help="share of procedures in the train split (default 0.8)")

    p = sub.add_parser("train", help="train a model", description="Train on the train split of a dataset.")
    _common(p, "run directory")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset written by gen-data")
    p.add_argument("--resume", metavar="CKPT", default=None, help="continue from a checkpoint")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint", description="Score a checkpoint on one split.")
    _common(p, "directory for metrics.json")
    p.add_argument("--checkpoint", metavar="CKPT", required=True, help="checkpoint file to evaluate")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset written by gen-data")
    p.add_argument("--split", choices=("train", "val"), default="val", help="which split to score (default val)")

    p = sub.add_parser("gradcheck", help="run the gradient-check suite",
                       description="Central-difference checks of every layer type and the full model.")
    _common(p, "directory for gradcheck.json")
    p.add_argument("--coords", type=int, default=4, help="coordinates sampled per parameter tensor (default 4)")
    p.add_argument("--batch", type=int, default=2, help="samples in the model loss (default 2)")
    _model_flags(p)

    p = sub.add_parser("ablate", help="EB on/off comparison",
                       description="Train matched-seed models with and without the excitation block.")
    _common(p, "directory for the two reports and the delta")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset written by gen-data")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("report", help="render a metrics JSON file", description="Print a metrics or ablation report.")
    p.add_argument("metrics", metavar="FILE", help="metrics.json or ablation.json")
    p.add_argument("--format", choices=("text", "csv"), default="text", help="output format (default text)")
    return parser


# subcommands ----------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("PITVQA_OUT") or "pitvqa-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _flags(args) -> dict:
    skip = {"command", "config", "out", "verbose", "data", "resume", "checkpoint", "split", "coords", "batch",
            "metrics", "format"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _setup(args) -> tuple[RunConfig, Path]:
    file_values = load_config(args.config) if args.config else {}
    cfg = resolve(file_values, _flags(args))
    out = _out_dir(args)
    _write_json(out / "resolved_config.json", {"command": args.command, **cfg.to_dict()})
    return cfg, out


def _split(corpus: Corpus, split: str) -> Corpus:
    samples = [s for s in corpus.samples if s.split == split]
    paths = {s.frame_path for s in samples}
    return Corpus(samples, {k: v for k, v in corpus.images.items() if k in paths})


def _encode(corpus: Corpus, cfg: ModelConfig):
    vocab = default_vocab()
    if len(vocab) > cfg.vocab_size:
        raise UsageError(f"config key 'vocab_size': {cfg.vocab_size} is below the vocabulary size {len(vocab)}")
    return encode_corpus(corpus, vocab, cfg.max_question_len)


def cmd_gen_data(args) -> int:
    cfg, out = _setup(args)
    d = cfg.data
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.seed, d["procedures"], d["frames"])
    if d["procedures"] >= 2:
        tr, va = split_by_procedure(corpus, d["train_fraction"], cfg.seed)
        corpus = Corpus(tr.samples + va.samples, corpus.images, corpus.frames)
    write_dataset(out, corpus)
    counts = {}
    for s in corpus.samples:
        counts[s.category] = counts.get(s.category, 0) + 1
    n_frames = len(corpus.images)
    stats = {
        "procedures": d["procedures"],
        "frames": n_frames,
        "samples": len(corpus.samples),
        "qa_per_frame": len(corpus.samples) / n_frames,
        "train_samples": sum(s.split == "train" for s in corpus.samples),
        "val_samples": sum(s.split == "val" for s in corpus.samples),
        "per_category": dict(sorted(counts.items())),
        "seconds": round(time.perf_counter() - t0, 2),
    }
    _write_json(out / "stats.json", stats)
    print(f"wrote {stats['samples']} samples over {n_frames} frames to {out}")
    print(f"qa/frame {stats['qa_per_frame']:.3f}  train {stats['train_samples']}  val {stats['val_samples']}")
    for cat, n in stats["per_category"].items():
        print(f"  {cat:<12}{n:>8}")
    return EXIT_OK


def _write_loss_log(path: Path, losses) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in losses:
            w.writerow([step, repr(loss), repr(lr)])


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    corpus = read_dataset(args.data)
    train_set = _encode(_split(corpus, "train"), cfg.model)
    if len(train_set) == 0:
        raise ValueError(f"{args.data}: train split is empty")
    if args.resume:
        ck = load_checkpoint(args.resume, cfg.model)
        net, adam, start = ck.net(), ck.adam, ck.step
    else:
        net, adam, start = init_parameters(cfg.model), None, 0
    every = max(1, cfg.train.max_steps // 20)
    result = train(
        net, train_set, cfg.train, checkpoint_dir=out / "checkpoints", adam=adam, start_step=start,
        on_step=lambda s, l: log.info("step %d loss %.4f", s, l) if s % every == 0 else None,
    )
    save_checkpoint(out / "final.ckpt", Checkpoint(net.config, cfg.train, net.params, net.buffers, result.adam, result.step))
    _write_loss_log(out / "loss_log.csv", result.losses)
    last = f"{result.losses[-1][1]:.4f}" if result.losses else "n/a"
    print(f"trained steps {start}..{result.step} final loss {last}; checkpoint {out / 'final.ckpt'}")
    val = _split(corpus, "val")
    if val.samples:
        rep = evaluate(net, _encode(val, cfg.model))
        _write_json(out / "metrics.json", rep.to_dict())
        print(f"val balanced accuracy {rep.balanced_accuracy:.4f}  accuracy {rep.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, out = _setup(args)
    ck = load_checkpoint(args.checkpoint)
    part = _split(read_dataset(args.data), args.split)
    if not part.samples:
        raise ValueError(f"{args.data}: split {args.split!r} is empty")
    rep = evaluate(ck.net(), _encode(part, ck.model_config))
    _write_json(out / "metrics.json", rep.to_dict())
    print(format_table(rep.to_dict()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, out = _setup(args)
    t0 = time.perf_counter()
    results = run_suite(cfg.model, seed=cfg.seed, batch_size=args.batch, coords_per_tensor=args.coords)
    seconds = time.perf_counter() - t0
    _write_json(out / "gradcheck.json", {"max_relative_error": results, "tolerance": TOLERANCE, "seconds": seconds})
    width = max(len(k) for k in results)
    bad = 0
    for name, err in results.items():
        flag = "ok" if err <= TOLERANCE else "FAIL"
        bad += flag == "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    print(f"max {max(results.values()):.3e} over {len(results)} checks in {seconds:.1f}s (tolerance {TOLERANCE:g})")
    return EXIT_FAILURE if bad else EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = _setup(args)
    corpus = read_dataset(args.data)
    tr = _encode(_split(corpus, "train"), cfg.model)
    val = _split(corpus, "val")
    ev = _encode(val, cfg.model) if val.samples else tr
    if len(tr) == 0:
        raise ValueError(f"{args.data}: train split is empty")
    doc = ablation_run(tr, ev, cfg.model, cfg.train)
    validate_report(doc, ABLATION_SCHEMA)
    _write_json(out / "eb_on.json", doc["eb_on"])
    _write_json(out / "eb_off.json", doc["eb_off"])
    _write_json(out / "ablation.json", doc)
    print(_delta_table(doc))
    return EXIT_OK


def _delta_table(doc: dict) -> str:
    lines = [f"{'metric':<20}{'eb_on':>10}{'eb_off':>10}{'delta':>10}"]
    for k in HEADLINE:
        lines.append(f"{k:<20}{doc['eb_on'][k]:>10.4f}{doc['eb_off'][k]:>10.4f}{doc['delta'][k]:>+10.4f}")
    lines.append(f"seed {doc['seed']}, {doc['steps']} steps")
    if doc.get("neutral_gap") is not None:
        lines.append(f"neutralized EB vs EB off: max logit gap {doc['neutral_gap']:.2e}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    path = Path(args.metrics)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg})") from None
    if isinstance(doc, dict) and "eb_on" in doc:
        validate_report(doc, ABLATION_SCHEMA)
        if args.format == "csv":
            print("metric,eb_on,eb_off,delta")
            for k in HEADLINE:
                print(f"{k},{doc['eb_on'][k]!r},{doc['eb_off'][k]!r},{doc['delta'][k]!r}")
        else:
            print(_delta_table(doc))
        return EXIT_OK
    validate_report(doc, REPORT_SCHEMA)
    names = [TAXONOMY.class_name(i) for i in range(TAXONOMY.n_classes)] if len(doc["per_class"]) == TAXONOMY.n_classes else None
    print(format_csv(doc) if args.format == "csv" else format_table(doc, names), end="\n" if args.format == "text" else "")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help -> 0, bad flags -> 2
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pitvqa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # one-line diagnostic for any runtime failure
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pitvqa {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
