"""``saml`` command line: data generation, the three stages, evaluation, pruning, sweeps.

Configuration comes from built-in defaults, then an optional JSON file
(``--config``), then flags; later sources win.  Every leaf field of
:class:`RunConfig` has a flag.  Corpus, model and top-level fields use their
own names (``--block-size``, ``--master-seed``, ``--collapse-threshold``);
the training sections are prefixed (``--pretrain-steps``, ``--adapt-lr``).

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericError, SamlError, ValidationError, ConfigError, StageOrderError
from .model import ModelConfig, TinyTransformer, count_params, load_checkpoint, save_checkpoint
from .pipeline import (MetricsLog, PipelineConfig, SyntheticCorpus, eval_records,
                       evaluate, export_embeddings, format_sweep, generate_corpus_from_config, prune_model, stage1,
                       stage2_pretrain, stage3_adapt, sweep_experts, train_base)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
PRUNE_ALIASES = {"collapse": "collapse_prune", "collapse_prune": "collapse_prune",
                 "top1_with_router": "top1_with_router", "top1_no_router": "top1_no_router"}
# Sections whose fields get flags without a prefix; their names do not collide.
FLAT_SECTIONS = ("corpus", "model")


@dataclass
class RunConfig(PipelineConfig):
    collapse_threshold: float = 0.99
    imbalance_threshold: float = 0.90
    output_dir: str = "runs"
    sweep_counts: list[int] = field(default_factory=lambda: [1, 4, 10])
    noise_seed: int = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config plumbing


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _leaves(cls, prefix: tuple[str, ...] = ()):
    """``(path, type)`` for every non-dataclass field, depth first."""
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            yield from _leaves(tp, prefix + (f.name,))
        else:
            yield prefix + (f.name,), tp


def _flag(path: tuple[str, ...]) -> str:
    parts = path[1:] if path[0] in FLAT_SECTIONS else path
    return "--" + "-".join(parts).replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (every RunConfig field)")
    for path, tp in _leaves(RunConfig):
        base, optional = _unwrap_optional(tp)
        kw: dict = {"dest": "cfg:" + ".".join(path), "default": argparse.SUPPRESS, "metavar": path[-1].upper()}
        origin = typing.get_origin(base)
        if base is bool:
            kw["action"] = argparse.BooleanOptionalAction
        elif origin in (list, tuple):
            kw["nargs"] = "+"
            kw["type"] = typing.get_args(base)[0]
        else:
            kw["type"] = base
        g.add_argument(_flag(path), **kw)


def _merge(into: dict, overrides: dict, where: str) -> None:
    for k, v in overrides.items():
        if k not in into:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(into[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            _merge(into[k], v, f"{where}{k}.")
        else:
            into[k] = v


def _build(cls, d: dict):
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        v = d[f.name]
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            v = _build(tp, v)
        elif typing.get_origin(tp) is tuple:
            v = tuple(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    d = asdict(RunConfig())
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config file: {exc}") from None
        try:
            file_cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        _merge(d, file_cfg, "")
    for key, value in vars(args).items():
        if key.startswith("cfg:"):
            *parents, leaf = key[4:].split(".")
            node = d
            for part in parents:
                node = node[part]
            node[leaf] = value
    cfg = _build(RunConfig, d)
    cfg.corpus.validate()
    for tc in (cfg.pretrain, cfg.adapt, cfg.donor):
        tc.validate()
    return cfg


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["model"]["saml_targets"] = list(d["model"]["saml_targets"])
    return d


# ---------------------------------------------------------------------------
# file helpers


def _run_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "resolved_run_dir", None):
        return args.resolved_run_dir
    if getattr(args, "run_dir", None):
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg.output_dir) / f"{stamp}-seed{cfg.corpus.master_seed}"
    path.mkdir(parents=True, exist_ok=True)
    args.resolved_run_dir = path
    return path


def _out_path(args, cfg: RunConfig, default_name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else _run_dir(args, cfg) / default_name
    if out.exists() and not args.overwrite:
        raise ValidationError(f"{out} already exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path, command: str) -> None:
    payload = {"command": command, "config": config_dict(cfg)}
    out.with_name(out.name + ".config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {what} {path}: {exc}") from None


def _load_model(path) -> TinyTransformer:
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _load_corpus(path) -> SyntheticCorpus:
    return SyntheticCorpus.from_dict(_read_json(path, "corpus"))


def _adapted_models(paths) -> dict[int, TinyTransformer]:
    out = {}
    for p in paths or []:
        m = _load_model(p)
        if m.meta.get("stage") != "stage3" or m.meta.get("speaker_id") is None:
            raise StageOrderError(f"{p} is not a speaker-adapted (stage-3) checkpoint")
        out[int(m.meta["speaker_id"])] = m
    return out


def _emit(obj, stream=None) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True), file=stream or sys.stdout)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    run = _run_dir(args, cfg)
    corpus_path, base_path = run / "corpus.json", run / "base.ckpt"
    for p in (corpus_path, base_path):
        if p.exists() and not args.overwrite:
            raise ValidationError(f"{p} already exists; pass --overwrite to replace it")
    corpus = generate_corpus_from_config(cfg.corpus)
    model_cfg = ModelConfig.from_dict({**cfg.model.to_dict(), "vocab_size": cfg.corpus.vocab,
                                       "max_len": max(cfg.model.max_len, cfg.corpus.seq_len)})
    base = train_base(corpus, model_cfg, cfg.base_steps, cfg.base_batch_size, cfg.base_lr)
    corpus.save(corpus_path)
    save_checkpoint(base, base_path)
    _write_config(cfg, corpus_path, "gen-data")
    _emit({"run_dir": str(run), "corpus": str(corpus_path), "base": str(base_path),
           "pretrain_speakers": corpus.pretrain_speakers, "target_speakers": corpus.target_speakers})
    return EXIT_OK


def cmd_quantize(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    out = _out_path(args, cfg, "stage1.ckpt")
    q = stage1(m, cfg.model.block_size)
    save_checkpoint(q, out)
    _write_config(cfg, out, "quantize")
    comp = {k: v for k, v in q.meta["compression"].items() if k != "tensors"}
    _emit({"out": str(out), **comp})
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    corpus = _load_corpus(args.corpus)
    out = _out_path(args, cfg, "stage2.ckpt")
    log = MetricsLog(out.with_name(out.name + ".metrics.jsonl"), echo=args.echo_metrics)
    donors = None
    if cfg.donor_init:
        from .pipeline import fit_donors
        donors = fit_donors(m, corpus, cfg.donor, m.cfg.n_experts)
    m_p = stage2_pretrain(m, corpus, cfg.pretrain, fp32_mode=cfg.fp32_mode, log_=log, donors=donors)
    save_checkpoint(m_p, out)
    _write_config(cfg, out, "pretrain")
    _emit({"out": str(out), **m_p.meta["pretrain_summary"]})
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    if m.meta.get("stage") != "stage2":
        raise StageOrderError(f"adapt needs a stage-2 (pretrained) checkpoint; {args.inp} is at stage "
                              f"{m.meta.get('stage')!r}")
    corpus = _load_corpus(args.corpus)
    if args.all_speakers:
        speakers = corpus.target_speakers
    elif args.speaker is not None:
        speakers = [args.speaker]
    else:
        raise UsageError("adapt: pass --speaker ID or --all-speakers")
    if args.out and len(speakers) > 1:
        raise UsageError("adapt: --out names a single checkpoint; omit it with --all-speakers")
    outs = {s: _out_path(args, cfg, f"stage3-speaker{s}.ckpt") for s in speakers}
    log = MetricsLog(next(iter(outs.values())).with_name("adapt.metrics.jsonl"), echo=args.echo_metrics)
    written = {}
    for s in speakers:  # sequential; each speaker only reads the shared stage-2 model
        adapted = stage3_adapt(m, corpus, s, cfg.adapt, log)
        save_checkpoint(adapted, outs[s])
        _write_config(cfg, outs[s], "adapt")
        written[str(s)] = {"out": str(outs[s]), **adapted.meta["adapt_summary"]}
    _emit(written)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    corpus = _load_corpus(args.corpus)
    adapted = _adapted_models(args.adapted)
    speakers = args.speakers or (sorted(adapted) if adapted else None)
    report = evaluate(m, corpus, args.split, speakers, adapters=not args.no_adapters, models=adapted)
    stage = "baseline" if args.no_adapters else ("stage3" if adapted else m.meta.get("stage"))
    out = _out_path(args, cfg, f"eval-{stage}-{args.split}.json")
    body = {**report.as_dict(), "stage": stage}
    out.write_text(json.dumps(body, indent=2, sort_keys=True))
    log = MetricsLog(out.with_name(out.name + ".metrics.jsonl"), echo=args.echo_metrics)
    for rec in eval_records(report, body["stage"], corpus.config.master_seed):
        log.emit(rec)
    _write_config(cfg, out, "eval")
    _emit({"out": str(out), "stage": body["stage"], "split": args.split, "mean_loss": report.mean_loss,
           "mean_token_error_rate": report.mean_token_error_rate})
    return EXIT_OK


def _calibration_tokens(m: TinyTransformer, corpus: SyntheticCorpus, split: str) -> np.ndarray:
    speakers = m.meta.get("pretrain_speakers") or corpus.pretrain_speakers
    if m.meta.get("speaker_id") is not None:
        speakers = [m.meta["speaker_id"]]
    return corpus.arrays(split, speakers)[0]


def cmd_prune(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    corpus = _load_corpus(args.corpus)
    if args.mode not in PRUNE_ALIASES:
        raise UsageError(f"prune: --mode must be one of {sorted(PRUNE_ALIASES)}")
    out = _out_path(args, cfg, "pruned.ckpt")
    pruned, report = prune_model(m, _calibration_tokens(m, corpus, args.split), PRUNE_ALIASES[args.mode],
                                 cfg.collapse_threshold, cfg.imbalance_threshold)
    save_checkpoint(pruned, out)
    _write_config(cfg, out, "prune")
    body = {"out": str(out), **report.as_dict(), "params_before": count_params(m)["total"],
            "params_after": count_params(pruned)["total"]}
    out.with_name(out.name + ".report.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    _emit(body)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    corpus = _load_corpus(args.corpus)
    out = _out_path(args, cfg, "sweep.json")
    result = sweep_experts(m, corpus, cfg.sweep_counts, cfg.pretrain, noise_seed=cfg.noise_seed)
    out.write_text(json.dumps(result, indent=2, sort_keys=True))
    _write_config(cfg, out, "sweep")
    print(format_sweep(result))
    return EXIT_OK


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    m = _load_model(args.inp)
    corpus = _load_corpus(args.corpus)
    out = _out_path(args, cfg, f"embeddings-{args.split}.csv")
    export_embeddings(m, corpus, args.split, out, args.speakers, _adapted_models(args.adapted))
    _write_config(cfg, out, "export-embeddings")
    _emit({"out": str(out)})
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    """Collect evaluation, prune and sweep results of a run directory into one summary."""
    run = Path(args.run_dir) if args.run_dir else None
    if run is None or not run.is_dir():
        raise ValidationError("report needs an existing --run-dir")
    summary: dict = {"run_dir": str(run), "evaluations": [], "prune": [], "sweep": None}
    for p in sorted(run.glob("eval-*.json")):
        if p.name.endswith(".config.json"):
            continue
        body = _read_json(p, "evaluation")
        summary["evaluations"].append({"file": p.name, "stage": body.get("stage"), "split": body["split"],
                                       "mean_loss": body["mean_loss"],
                                       "mean_token_error_rate": body["mean_token_error_rate"]})
    for p in sorted(run.glob("*.report.json")):
        body = _read_json(p, "prune report")
        summary["prune"].append({k: body[k] for k in ("out", "layers_collapsed", "layers_imbalanced",
                                                      "params_removed")})
    if (run / "sweep.json").exists():
        summary["sweep"] = _read_json(run / "sweep.json", "sweep")["rows"]
    out = _out_path(args, cfg, "report.json")
    out.write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(summary)
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus and train the FP32 base model"),
    "quantize": (cmd_quantize, "stage 1: NF4-quantise the base weights"),
    "pretrain": (cmd_pretrain, "stage 2: pretrain mixture-of-LoRA adapters on many speakers"),
    "adapt": (cmd_adapt, "stage 3: adapt the pretrained adapters to target speakers"),
    "eval": (cmd_eval, "per-speaker loss and token error rate"),
    "prune": (cmd_prune, "prune layers whose routing collapsed onto one expert"),
    "sweep": (cmd_sweep, "stage 2 for several expert counts"),
    "export-embeddings": (cmd_export_embeddings, "mean-pooled representations per utterance as CSV"),
    "report": (cmd_report, "summarise a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saml", description="Quantised speaker adaptation with mixtures of LoRA experts.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file with RunConfig fields (nested by section)")
        p.add_argument("--run-dir", help="directory for outputs (default: <output-dir>/<timestamp>-seed<seed>)")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if name not in ("gen-data", "report"):
            p.add_argument("--in", dest="inp", required=True, help="input checkpoint")
        if name not in ("gen-data", "quantize", "report"):
            p.add_argument("--corpus", required=True, help="corpus JSON written by gen-data")
        if name != "gen-data":
            p.add_argument("--out", help="output path (default: inside the run directory)")
        if name in ("pretrain", "adapt", "eval"):
            p.add_argument("--echo-metrics", action="store_true", help="also print metric records")
        if name == "adapt":
            p.add_argument("--speaker", type=int)
            p.add_argument("--all-speakers", action="store_true")
        if name in ("eval", "prune", "export-embeddings"):
            p.add_argument("--split", choices=("train", "dev", "test"), default="dev" if name == "prune" else "test")
        if name in ("eval", "export-embeddings"):
            p.add_argument("--speakers", type=int, nargs="+")
            p.add_argument("--adapted", nargs="+", help="stage-3 checkpoints used for their own speakers")
        if name == "eval":
            p.add_argument("--no-adapters", action="store_true", help="score the frozen base alone")
        if name == "prune":
            p.add_argument("--mode", default="collapse", help=f"one of {sorted(PRUNE_ALIASES)}")
        _add_config_flags(p)
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, CheckpointError, SamlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
