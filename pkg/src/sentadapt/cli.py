"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import adapters as A
from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .encoder import BaseParameters, ConfigError, EncoderConfig, SentenceEncoder, base_parameter_shapes
from .evaluation import EvaluationError, compare, evaluate, triplets_to_tasks, write_report
from .objectives import LossConfig
from .trainer import (
    ADAPTER_ONLY,
    FROZEN_EVAL,
    FULL_FINETUNE,
    DomainRegistry,
    ModeError,
    TrainConfig,
    TrainingError,
    train,
)

log = logging.getLogger("sentadapt")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seeds(seed: int, n: int) -> list[int]:
    """Child seeds drawn from the single per-invocation generator."""
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def _write_json(obj, path) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# corpus and triplets
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    profile_kwargs = {f.name: getattr(args, f.name) for f in fields(D.CorpusProfile)
                      if getattr(args, f.name, None) is not None}
    profile = D.CorpusProfile(**profile_kwargs)
    docs = D.generate_synthetic_corpus(args.topics, args.docs_per_topic, profile, seed=args.seed)
    D.write_documents(args.output, docs)
    n_cites = sum(len(d.cites) for d in docs)
    print(f"wrote {len(docs)} documents with {n_cites} citations to {args.output}")
    return 0


def cmd_build_triplets(args) -> int:
    if bool(args.documents) == bool(args.pairs):
        raise UsageError("give exactly one of --documents or --pairs")
    if args.documents:
        docs = D.read_documents(_require_file(args.documents, "documents file"))
        triplets = D.build_citation_triplets(docs, args.seed)
    else:
        pairs = D.read_pairs(_require_file(args.pairs, "pairs file"))
        if args.texts:
            texts = D.read_texts(_require_file(args.texts, "texts file"))
        else:
            texts = [t for p in pairs for t in (p.text_a, p.text_b)]
        triplets = D.build_pair_triplets(pairs, texts, args.seed)
    D.write_triplets(args.output, triplets)
    print(f"wrote {len(triplets)} triplets to {args.output}")
    return 0


def cmd_split(args) -> int:
    triplets = D.read_triplets(_require_file(args.triplets, "triplets file"))
    train_set, test_set = D.split(triplets, args.ratio, args.seed)
    D.write_triplets(args.train_out, train_set)
    D.write_triplets(args.test_out, test_set)
    print(f"split {len(triplets)} triplets into {len(train_set)} train / {len(test_set)} test")
    return 0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def load_run_config(args) -> dict:
    """Merge precedence: command-line flag > config file > built-in default."""
    cfg: dict = {}
    if args.config:
        cfg = json.loads(_require_file(args.config, "config file").read_text(encoding="utf-8"))
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    train_cfg = dict(cfg.get("train") or {})
    for flag, key in (("epochs", "epochs"), ("learning_rate", "learning_rate"), ("batch_size", "batch_size"),
                      ("loss", "loss"), ("mode", "mode"), ("domain_label", "domain_label")):
        if getattr(args, flag) is not None:
            train_cfg[key] = getattr(args, flag)
    adapter_cfg = cfg.get("adapter")
    adapter_cfg = dict(adapter_cfg) if adapter_cfg else None
    if args.adapter_kind is not None:
        adapter_cfg = {**(adapter_cfg or {}), "kind": args.adapter_kind}
    if args.bottleneck_dim is not None:
        adapter_cfg = {**(adapter_cfg or {}), "bottleneck_dim": args.bottleneck_dim}
    data_cfg = dict(cfg.get("data") or {})
    if args.train_data is not None:
        data_cfg["train"] = args.train_data
    output = dict(cfg.get("output") or {})
    for flag, key in (("checkpoint_out", "checkpoint"), ("report_out", "report"),
                      ("base_out", "base_checkpoint"), ("registry", "registry")):
        if getattr(args, flag) is not None:
            output[key] = getattr(args, flag)
    merged = {
        "seed": args.seed if args.seed is not None else cfg.get("seed"),
        "encoder": dict(cfg.get("encoder") or {}),
        "adapter": adapter_cfg,
        "train": train_cfg,
        "loss": dict(cfg.get("loss") or {}),
        "data": data_cfg,
        "base_checkpoint": args.base_checkpoint or cfg.get("base_checkpoint"),
        "output": output,
    }
    validate_run_config(merged)
    return merged


def validate_run_config(cfg: dict) -> None:
    if cfg["seed"] is None:
        raise UsageError("a seed is required (--seed or \"seed\" in the config)")
    if not isinstance(cfg["seed"], int):
        raise UsageError(f"seed must be an integer, got {cfg['seed']!r}")
    if "train" not in cfg["data"]:
        raise UsageError("no training triplets given (--train or data.train)")
    _require_file(cfg["data"]["train"], "training triplets")
    if cfg["base_checkpoint"]:
        _require_file(cfg["base_checkpoint"], "base checkpoint")
    unknown = set(cfg["train"]) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise UsageError(f"unknown train option(s): {sorted(unknown)}")


def _build_adapter_from(cfg: dict | None, encoder_config: EncoderConfig, seed: int, label: str):
    if not cfg:
        return None
    cfg = dict(cfg)
    kind = A.AdapterKind(cfg.pop("kind", "houlsby"))
    if kind is A.AdapterKind.K_ADAPTER:
        defaults = A.KAdapterConfig.default(encoder_config, cfg.pop("adapter_d_model", None)).to_dict()
        adapter_config = A.KAdapterConfig(**{**defaults, **cfg})
    else:
        adapter_config = A.BottleneckConfig.for_kind(kind, encoder_config, cfg.pop("bottleneck_dim", None),
                                                     cfg.pop("nonlinearity", "gelu"))
        if cfg:
            raise UsageError(f"unknown adapter option(s): {sorted(cfg)}")
    return A.build_adapter(kind, encoder_config, adapter_config, seed=seed, domain_label=label)


def cmd_train(args) -> int:
    run = load_run_config(args)
    base_seed, adapter_seed, shuffle_seed = _seeds(run["seed"], 3)
    train_config = TrainConfig(**{**run["train"], "seed": shuffle_seed})
    mode = train_config.mode
    if run["base_checkpoint"]:
        base = BaseParameters.load(run["base_checkpoint"], frozen=mode != FULL_FINETUNE)
    else:
        base = BaseParameters.initialize(EncoderConfig.from_dict(run["encoder"]), base_seed,
                                         frozen=mode != FULL_FINETUNE)
        if run["output"].get("base_checkpoint"):
            base.save(run["output"]["base_checkpoint"], {"seed": run["seed"]})
    adapter_cfg = run["adapter"] if mode != FULL_FINETUNE else None
    if mode == ADAPTER_ONLY and not adapter_cfg:
        raise UsageError("adapter_only mode needs an adapter section (or --adapter-kind)")
    adapters = _build_adapter_from(adapter_cfg, base.config, adapter_seed, train_config.domain_label)
    triplets = D.read_triplets(run["data"]["train"])
    ckpt = run["output"].get("checkpoint") if mode != FROZEN_EVAL else None
    if mode != FROZEN_EVAL and not ckpt:
        raise UsageError("an output checkpoint path is required (--checkpoint-out or output.checkpoint)")
    result = train(base, adapters, triplets, train_config, LossConfig(**run["loss"]), checkpoint_path=ckpt)
    report = result.report.to_dict()
    report["seed"] = run["seed"]
    if mode == ADAPTER_ONLY and run["output"].get("registry"):
        reg_path = Path(run["output"]["registry"])
        registry = DomainRegistry.load(reg_path) if reg_path.exists() else DomainRegistry()
        registry.register(train_config.domain_label, ckpt, overwrite=True)
        registry.save(reg_path)
    _write_json(report, run["output"].get("report"))
    return 0


# ---------------------------------------------------------------------------
# evaluation and inference
# ---------------------------------------------------------------------------


def _geometry(cfg: EncoderConfig) -> str:
    return f"d_model={cfg.d_model}, n_layers={cfg.n_layers}"


def load_model(base_path, adapter_path=None, label: str | None = None) -> SentenceEncoder:
    base = BaseParameters.load(_require_file(base_path, "base checkpoint"), frozen=True)
    stack = None
    if adapter_path:
        adapters = A.AdapterParameters.load(_require_file(adapter_path, "adapter checkpoint"))
        ours, theirs = base.config, adapters.encoder_config
        if (ours.d_model, ours.n_layers) != (theirs.d_model, theirs.n_layers):
            raise UsageError(f"geometry mismatch: base has {_geometry(ours)}, adapter expects {_geometry(theirs)}")
        stack = A.inject(base, adapters)
    return SentenceEncoder(base, stack, label)


def _protocol(args) -> dict:
    return {"pool": "own positive + own negative + k positives of other anchors", "k": args.k, "seed": args.seed}


def cmd_evaluate(args) -> int:
    test = D.read_triplets(_require_file(args.triplets, "triplets file"))
    tasks = triplets_to_tasks(test, args.k, args.seed)
    models = [("out-of-the-box", load_model(args.base, None, "out-of-the-box"))]
    if args.adapter:
        kind = read_header(args.adapter)["config"].get("adapter_kind", "adapter")
        models.append((f"adapter ({kind})", load_model(args.base, args.adapter)))
    if args.finetuned:
        models.append(("full fine-tune", load_model(args.finetuned)))
    dims = {label: m.dim for label, m in models}
    if len(set(dims.values())) > 1:
        raise UsageError(f"geometry mismatch between models: {dims}")
    if len(models) == 1:
        label, model = models[0]
        report = evaluate(model, tasks, label=label, protocol=_protocol(args), descriptor={"mode": FROZEN_EVAL})
    else:
        report = compare(models, {Path(args.triplets).stem: tasks}, protocol=_protocol(args))
    write_report(report, args.json, args.markdown)
    if args.json is None:
        sys.stdout.write(report.to_json() + "\n")
    if args.markdown is None:
        sys.stdout.write(report.to_markdown())
    return 0


def cmd_compare(args) -> int:
    models = []
    for spec in args.model:
        if len(spec) not in (2, 3):
            raise UsageError("--model takes LABEL BASE [ADAPTER]")
        models.append((spec[0], load_model(spec[1], spec[2] if len(spec) == 3 else None, spec[0])))
    task_sets = {}
    for spec in args.tasks:
        name, _, path = spec.partition("=")
        if not path:
            raise UsageError("--tasks takes NAME=TRIPLETS_PATH")
        task_sets[name] = triplets_to_tasks(D.read_triplets(_require_file(path, "triplets file")), args.k, args.seed)
    table = compare(models, task_sets, protocol=_protocol(args))
    write_report(table, args.json, args.markdown)
    sys.stdout.write(table.to_markdown())
    return 0


def cmd_count_params(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        counted = A.count_parameters(ckpt.tensors)
        out = {"kind": ckpt.kind, "total": counted.total}
        if args.breakdown:
            out["breakdown"] = counted.breakdown
        _write_json(out, args.output)
        return 0
    enc = EncoderConfig(d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads,
                        d_ff=args.d_ff or 4 * args.d_model, vocab_size=args.vocab_size, max_len=args.max_len)
    kind = A.AdapterKind(args.kind)
    config = A.default_config(kind, enc, args.bottleneck_dim)
    adapters = A.build_adapter(kind, enc, config, seed=0)
    counted = A.count_parameters(adapters)
    if kind is A.AdapterKind.K_ADAPTER:
        analytic = A.k_adapter_parameter_count(enc, config)
    else:
        analytic = A.bottleneck_parameter_count(kind, enc.d_model, enc.n_layers, config.bottleneck_dim)
    base_count = args.base_count or sum(int(np.prod(s)) for s in base_parameter_shapes(enc).values())
    out = {
        "kind": kind.value,
        "adapter_config": config.to_dict(),
        "total": counted.total,
        "analytic": analytic,
        "base_count": base_count,
        "ratio": A.trainable_ratio(counted.total, base_count),
    }
    if args.breakdown:
        out["breakdown"] = counted.breakdown
    _write_json(out, args.output)
    return 0


def cmd_embed(args) -> int:
    texts = D.read_texts(_require_file(args.input, "input file"))
    if not texts:
        raise UsageError(f"input file is empty: {args.input}")
    model = load_model(args.base, args.adapter)
    vectors = model.embed(texts)
    D.write_jsonl(args.output, ({"id": i, "vector": [float(x) for x in v]} for i, v in enumerate(vectors)))
    print(f"wrote {len(texts)} embeddings to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sentadapt", description="Adapter-based domain adaptation of toy sentence encoders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic citation corpus")
    g.add_argument("--topics", type=int, required=True)
    g.add_argument("--docs-per-topic", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    for f in fields(D.CorpusProfile):
        g.add_argument("--" + f.name.replace("_", "-"), type=float if f.type == "float" else int)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    b = sub.add_parser("build-triplets", help="mine triplets from documents or similar pairs")
    b.add_argument("--documents")
    b.add_argument("--pairs")
    b.add_argument("--texts", help="negative pool for --pairs, one text per line")
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(func=cmd_build_triplets)

    s = sub.add_parser("split", help="anchor-level train/test split")
    s.add_argument("--triplets", required=True)
    s.add_argument("--ratio", type=float, default=0.9)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train adapters (or the full base) on triplets")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--train", dest="train_data")
    t.add_argument("--base-checkpoint")
    t.add_argument("--mode", choices=(ADAPTER_ONLY, FULL_FINETUNE, FROZEN_EVAL))
    t.add_argument("--adapter-kind", choices=[k.value for k in A.AdapterKind])
    t.add_argument("--bottleneck-dim", type=int)
    t.add_argument("--loss", choices=("l1", "l2"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--domain-label")
    t.add_argument("--checkpoint-out")
    t.add_argument("--base-out", help="also save the freshly initialized base")
    t.add_argument("--report-out")
    t.add_argument("--registry", help="domain registry JSON to update")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="MAP of a base (+ adapter, + fine-tuned) model")
    e.add_argument("--base", required=True)
    e.add_argument("--adapter")
    e.add_argument("--finetuned")
    e.add_argument("--triplets", required=True)
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json")
    e.add_argument("--markdown")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="comparison table over several models and task sets")
    c.add_argument("--model", nargs="+", action="append", required=True, metavar="LABEL BASE [ADAPTER]")
    c.add_argument("--tasks", action="append", required=True, metavar="NAME=TRIPLETS")
    c.add_argument("--k", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--json")
    c.add_argument("--markdown")
    c.set_defaults(func=cmd_compare)

    n = sub.add_parser("count-params", help="trainable-parameter accounting")
    n.add_argument("--checkpoint")
    n.add_argument("--kind", default="houlsby", choices=[k.value for k in A.AdapterKind])
    n.add_argument("--d-model", type=int, default=768)
    n.add_argument("--n-layers", type=int, default=12)
    n.add_argument("--n-heads", type=int, default=12)
    n.add_argument("--d-ff", type=int)
    n.add_argument("--vocab-size", type=int, default=30522)
    n.add_argument("--max-len", type=int, default=512)
    n.add_argument("--bottleneck-dim", type=int)
    n.add_argument("--base-count", type=int, help="reference base size for the ratio")
    n.add_argument("--breakdown", action="store_true")
    n.add_argument("-o", "--output")
    n.set_defaults(func=cmd_count_params)

    m = sub.add_parser("embed", help="embed one text per line")
    m.add_argument("--base", required=True)
    m.add_argument("--adapter")
    m.add_argument("--input", required=True)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_embed)
    return p


_VALIDATION_ERRORS = (UsageError, ConfigError, D.DataError, CheckpointError, EvaluationError, ModeError,
                      ValueError, KeyError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
