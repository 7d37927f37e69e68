"""Command-line entry point: ``simmt <command> ...``.

Experiment config files are flat-sectioned ``key = value`` text::

    [experiment]
    task = mmt            ; nmt | mmt
    output_dir = runs/toy
    [data]
    dir = data/synthetic  ; {split}.src/.tgt/.idx/.gold.feat/.det.feat/.ann.jsonl
    feature_source = gold
    [model]
    num_layers = 2
    [train]
    seed = 0
    regime = waitk
    k = 1
    [supervision]
    mode = none

``--set section.key=value`` overrides any entry. Exit codes: 0 success,
1 usage or configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (SyntheticCorpusSpec, Vocabulary, generate_synthetic_corpus,
                   load_synthetic_split, read_lines, write_synthetic_corpus)
from .errors import ConfigError, DataError, NumericalError
from .evaluation import bleu, corpus_token_f1, load_embeddings, prefix_accuracy, report_line
from .experiments import grounding_report, vocabs_from_corpus
from .multimodal import SupervisionConfig, read_features
from .simultaneous import greedy_waitk_decode, write_traces
from .training import (Checkpoint, TrainConfig, TrainRegime, evaluate_model,
                       finetune_supervised, train)
from .transformer import ModelConfig, Transformer

log = logging.getLogger("simmt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("experiment", "data", "model", "train", "supervision")
TASKS = ("nmt", "mmt")


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    task: str = "nmt"
    output_dir: str = "runs/default"
    data_dir: str = ""
    feature_source: str = "gold"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    supervision: dict = field(default_factory=dict)
    init_checkpoint: Optional[str] = None
    # section.key -> "path:line" for diagnostics
    origins: dict = field(default_factory=dict, repr=False)

    def where(self, key: str) -> str:
        return self.origins.get(key, "command line")

    def model_config(self, src_vocab: int, tgt_vocab: int, region_dim: int) -> ModelConfig:
        values = dict(self.model, src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab,
                      region_dim=region_dim if self.task == "mmt" else 0)
        return _build(ModelConfig, values, "model", self)

    def supervision_config(self) -> SupervisionConfig:
        return _build(SupervisionConfig, self.supervision, "supervision", self)

    def train_config(self) -> TrainConfig:
        values = dict(self.train)
        regime = {key: values.pop(key) for key in ("regime", "k", "truncation_probability")
                  if key in values}
        if "regime" in regime:
            regime["kind"] = regime.pop("regime")
        values["regime"] = _build(TrainRegime, regime, "train", self)
        values["supervision"] = self.supervision_config()
        return _build(TrainConfig, values, "train", self)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"{self.where('experiment.task')}: task must be one of {TASKS}")
        if not self.data_dir:
            raise ConfigError("data.dir is required")
        if self.feature_source not in ("gold", "detector"):
            raise ConfigError(f"{self.where('data.feature_source')}: "
                              "feature_source must be gold or detector")
        sup = self.supervision_config()
        self.train_config()
        if sup.mode != "none" and self.task != "mmt":
            raise ConfigError(f"{self.where('supervision.mode')}: supervision needs task = mmt")
        if sup.mode != "none":
            ann = Path(self.data_dir) / "train.ann.jsonl"
            if self.feature_source != "gold" or not ann.exists():
                raise ConfigError(f"{self.where('supervision.mode')}: supervision needs "
                                  f"gold features and annotations ({ann})")
        if sup.mode == "finetune" and not self.init_checkpoint:
            raise ConfigError("supervision mode finetune needs --init-checkpoint")

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser["experiment"] = {"task": self.task, "output_dir": self.output_dir}
        if self.init_checkpoint:
            parser["experiment"]["init_checkpoint"] = self.init_checkpoint
        parser["data"] = {"dir": self.data_dir, "feature_source": self.feature_source}
        for name in ("model", "train", "supervision"):
            parser[name] = {k: json.dumps(v) if not isinstance(v, str) else v
                            for k, v in getattr(self, name).items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)


def _parse_value(text: str):
    """JSON-ish scalars: numbers, booleans, null; anything else stays a string."""
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    if low.lower() == "null":
        return None
    try:
        return json.loads(low)
    except json.JSONDecodeError:
        return low


def _build(cls, values: dict, section: str, cfg: ExperimentConfig):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{cfg.where(f'{section}.{key}')}: unknown key {section}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        keys = ", ".join(f"{section}.{k} ({cfg.origins[f'{section}.{k}']})" for k in values
                         if f"{section}.{k}" in cfg.origins)
        raise ConfigError(f"invalid [{section}] settings: {err}; set at {keys or 'defaults'}") \
            from None


def _key_lines(path: Path) -> dict:
    origins, section = {}, None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and "=" in s and not s.startswith((";", "#")):
            origins[f"{section}.{s.split('=', 1)[0].strip()}"] = f"{path}:{lineno}"
    return origins


def load_experiment_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    cfg = ExperimentConfig(origins=_key_lines(path))
    entries = {(s, k): v for s in parser.sections() for k, v in parser[s].items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        entries[(section, name)] = value
        cfg.origins[f"{section}.{name}"] = f"--set {item}"
    for (section, key), raw in entries.items():
        if section not in SECTIONS:
            raise ConfigError(f"{cfg.where(f'{section}.{key}')}: unknown section [{section}]")
        value = _parse_value(raw)
        if section == "experiment":
            if key not in ("task", "output_dir", "init_checkpoint"):
                raise ConfigError(f"{cfg.where(f'{section}.{key}')}: unknown key experiment.{key}")
            setattr(cfg, key, str(value) if value is not None else None)
        elif section == "data":
            if key not in ("dir", "feature_source"):
                raise ConfigError(f"{cfg.where(f'{section}.{key}')}: unknown key data.{key}")
            setattr(cfg, "data_dir" if key == "dir" else key, str(value))
        else:
            getattr(cfg, section)[key] = value
    return cfg


# ---------------------------------------------------------------------------
# commands


def _load_split(data_dir, split, feature_source, vocabs):
    return load_synthetic_split(data_dir, split, feature_source,
                                src_vocab=vocabs[0], tgt_vocab=vocabs[1])


def _train_one(cfg: ExperimentConfig, seed: int, out: Path) -> Checkpoint:
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(cfg.train_config(), seed=seed)
    source = cfg.feature_source if cfg.task == "mmt" else "none"
    if cfg.init_checkpoint:
        base = Checkpoint.load(cfg.init_checkpoint)
        vocabs = (Vocabulary.from_list(base.vocabs["src"]), Vocabulary.from_list(base.vocabs["tgt"]))
    else:
        base, vocabs = None, vocabs_from_corpus(cfg.data_dir)
    train_set = _load_split(cfg.data_dir, "train", source, vocabs)
    valid_set = _load_split(cfg.data_dir, "valid", source, vocabs)
    snapshot = dataclasses.replace(cfg, train=dict(cfg.train, seed=seed))
    (out / "config.cfg").write_text(snapshot.to_text(), encoding="utf-8")
    log_path, ckpt_path = out / "train.log", out / "model.ckpt"
    log_path.unlink(missing_ok=True)
    if tcfg.supervision.mode == "finetune":
        return finetune_supervised(base, tcfg, train_set, valid_set, log_path=log_path,
                                   checkpoint_path=ckpt_path)
    region_dim = train_set[0].regions.features.shape[1] if source != "none" else 0
    mcfg = cfg.model_config(len(vocabs[0]), len(vocabs[1]), region_dim)
    model = Transformer(mcfg, seed) if base is None else base.to_model()
    return train(tcfg, model, train_set, valid_set, log_path=log_path, checkpoint_path=ckpt_path,
                 vocabs={"src": vocabs[0].to_list(), "tgt": vocabs[1].to_list()})


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.task:
        overrides.append(f"experiment.task={args.task}")
    if args.supervision:
        overrides.append(f"supervision.mode={args.supervision}")
        if args.supervision != "none":
            overrides.append("supervision.beta=1.0")
    if args.output_dir:
        overrides.append(f"experiment.output_dir={args.output_dir}")
    cfg = load_experiment_config(args.config, overrides)
    if args.init_checkpoint:
        cfg.init_checkpoint = args.init_checkpoint
    cfg.validate()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train_config().seed]
    out = Path(cfg.output_dir)
    scores = []
    for seed in seeds:
        run_dir = out / f"seed{seed}" if len(seeds) > 1 else out
        ckpt = _train_one(cfg, seed, run_dir)
        best = ckpt.history[[h["epoch"] for h in ckpt.history].index(ckpt.epoch)]
        scores.append(best["val_f1"])
        print(json.dumps({"seed": seed, "best_epoch": ckpt.epoch, "val_f1": best["val_f1"],
                          "val_bleu": best["val_bleu"], "checkpoint": str(run_dir / "model.ckpt")}))
    if len(seeds) > 1:
        print(json.dumps({"seeds": seeds, "val_f1_mean": float(np.mean(scores)),
                          "val_f1_sd": float(np.std(scores, ddof=1))}))
    return EXIT_OK


def _schedule_k(args, src_len: int) -> int:
    return max(1, src_len) if args.consecutive else args.k


def cmd_translate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.to_model()
    src_vocab = Vocabulary.from_list(ckpt.vocabs["src"])
    tgt_vocab = Vocabulary.from_list(ckpt.vocabs["tgt"])
    lines = read_lines(args.input)
    store = None
    if model.multimodal:
        if not args.features:
            raise ConfigError("this checkpoint is multimodal: --features is required")
        store = read_features(args.features)
        if store.region_dim != model.config.region_dim:
            raise DataError(f"feature dim {store.region_dim} does not match the model's "
                            f"{model.config.region_dim}")
    ids = list(range(len(lines)))
    if args.index:
        ids = [int(v) for v in read_lines(args.index)]
        if len(ids) != len(lines):
            raise DataError(f"{args.index} has {len(ids)} lines, {args.input} has {len(lines)}")
    traces, outputs = [], []
    for line, image in zip(lines, ids):
        src = src_vocab.encode(line)
        kw = {}
        if store is not None:
            reg = store.get(image)
            kw = {"regions": reg.features[None], "region_mask": reg.valid_mask[None]}
        trace = greedy_waitk_decode(model, src, _schedule_k(args, len(src)), **kw)
        traces.append(trace)
        outputs.append(" ".join(tgt_vocab.decode(trace.tokens)))
    text = "".join(o + "\n" for o in outputs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.dump_trace:
        write_traces(args.dump_trace, traces)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    hyps = [line.split() for line in read_lines(args.hyp)]
    refs = [line.split() for line in read_lines(args.ref)]
    if len(hyps) != len(refs):
        raise DataError(f"line count mismatch: {args.hyp} has {len(hyps)}, "
                        f"{args.ref} has {len(refs)}")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    lines = []
    for metric in metrics:
        if metric == "bleu":
            lines.append(report_line("bleu", bleu(hyps, refs), len(refs)))
        elif metric == "f1":
            lines.append(report_line("f1", corpus_token_f1(hyps, refs), len(refs)))
        elif metric == "prefix-acc":
            for n in args.n.split(","):
                n_val = math.inf if n.strip() in ("inf", "all") else int(n)
                lines.append(report_line("prefix-acc", prefix_accuracy(hyps, refs, n_val),
                                         len(refs), n=n.strip()))
        else:
            raise ConfigError(f"unknown metric {metric!r} (bleu, f1, prefix-acc)")
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    return EXIT_OK


def _checkpoint_model(path):
    ckpt = Checkpoint.load(path)
    vocabs = (Vocabulary.from_list(ckpt.vocabs["src"]), Vocabulary.from_list(ckpt.vocabs["tgt"]))
    return ckpt.to_model(), vocabs


def cmd_ground_eval(args) -> int:
    model, vocabs = _checkpoint_model(args.checkpoint)
    if not model.multimodal:
        raise ConfigError("grounding evaluation needs a multimodal checkpoint (no CMI layer)")
    examples = _load_split(args.data_dir, args.split, args.feature_source, vocabs)
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    report = grounding_report(model, examples, args.k, emb, args.iou_threshold)
    count = report["count"]
    cfg = {"feature_source": args.feature_source, "k": args.k, "split": args.split}
    lines = [report_line("mean_iou", report["mean_iou"], count, **cfg),
             report_line(f"accuracy@{args.iou_threshold:g}", report["accuracy_at_threshold"],
                         count, **cfg),
             report_line("mean_peak", report["mean_peak"], count, **cfg)]
    for key in ("cosine", "exact_match"):
        if key in report:
            lines.append(report_line(key, report[key], count, **cfg))
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    return EXIT_OK


def attention_dump(model, vocabs, examples, example_id: int, k: int) -> dict:
    if not model.multimodal:
        raise ConfigError("attention dump needs a multimodal checkpoint")
    if not 0 <= example_id < len(examples):
        raise DataError(f"unknown example id {example_id} (split has {len(examples)})")
    ex = examples[example_id]
    att = evaluate_model(model, [ex], k)["attention"][0]
    r = ex.regions.num_regions
    tokens = vocabs[0].decode(ex.src) + ["<eos>"]
    return {"example": example_id, "k": k, "tokens": tokens,
            "regions": [{"box": b.as_list() if b else None,
                         "label": ex.regions.labels[i] if ex.regions.labels else None}
                        for i, b in enumerate(ex.regions.boxes or [None] * r)],
            "attention": att[: len(tokens), :r].tolist()}


def cmd_attention_dump(args) -> int:
    model, vocabs = _checkpoint_model(args.checkpoint)
    examples = _load_split(args.data_dir, args.split, args.feature_source, vocabs)
    text = json.dumps(attention_dump(model, vocabs, examples, args.example, args.k)) + "\n"
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    values = {}
    names = {f.name: f.type for f in dataclasses.fields(SyntheticCorpusSpec)}
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if key not in names:
            raise ConfigError(f"unknown corpus setting {key!r}")
        values[key] = _parse_value(raw)
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = SyntheticCorpusSpec(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    out = write_synthetic_corpus(generate_synthetic_corpus(spec), args.out)
    print(json.dumps({"out": str(out), "spec": dataclasses.asdict(spec)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simmt", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--supervision", choices=("none", "scratch", "finetune"))
    t.add_argument("--init-checkpoint")
    t.add_argument("--seeds", help="comma-separated seeds; reports mean and sd")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="greedy wait-k or consecutive decoding")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--features")
    tr.add_argument("--index", help="image id per input line")
    sched = tr.add_mutually_exclusive_group(required=True)
    sched.add_argument("--k", type=int)
    sched.add_argument("--consecutive", action="store_true")
    tr.add_argument("--dump-trace")
    tr.add_argument("--output")
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="score hypotheses against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--metrics", default="bleu,prefix-acc")
    e.add_argument("--n", default="1,2,3")
    e.add_argument("--output")
    e.set_defaults(func=cmd_evaluate)

    for name, func, help_text in (("ground-eval", cmd_ground_eval, "grounding IoU report"),
                                  ("attention-dump", cmd_attention_dump,
                                   "per-word region attention for one example")):
        g = sub.add_parser(name, help=help_text)
        g.add_argument("--checkpoint", required=True)
        g.add_argument("--data-dir", required=True)
        g.add_argument("--split", default="test")
        g.add_argument("--feature-source", choices=("gold", "detector"), default="gold")
        g.add_argument("--k", type=int, default=1)
        g.add_argument("--output")
        if name == "ground-eval":
            g.add_argument("--embeddings")
            g.add_argument("--iou-threshold", type=float, default=0.5)
        else:
            g.add_argument("--example", type=int, required=True)
        g.set_defaults(func=func)

    s = sub.add_parser("gen-synthetic", help="write the synthetic grounding corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="FIELD=VALUE")
    s.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
