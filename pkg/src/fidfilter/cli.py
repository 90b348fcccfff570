"""Command-line entry point: ``fidfilter <subcommand>``.

Every flag can also come from ``--config file.json`` (keys are the flag
destinations, e.g. ``max_new_tokens``) or from an environment variable
``FIDF_<DEST>`` (e.g. ``FIDF_BEAMS=1``). Precedence: command line, then
environment, then config file. Logs go to stderr as JSON lines.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Sequence

from .analysis import CurveAccumulator, TraceBudgetExceeded, emit_analysis, gold_ratio, passage_distribution, record_trace
from .container import ContainerError
from .early_exit import ExitConfig
from .filtering import FilterConfig
from .metrics import f1, rouge_l
from .model import ModelConfig, WeightsError, load_weights
from .runtime import MIN_ANSWER_LENGTH, DecodeSettings, generate, load_dataset, profile_decoder_share, write_results
from .sweep import SweepGrid, build_max_curve, best_settings_per_interval, export_curve, run_sweep
from .toy import make_toy_model, synthetic_input

ENV_PREFIX = "FIDF_"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("fidfilter")


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": _dt.datetime.fromtimestamp(record.created, _dt.timezone.utc).isoformat(),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _tool_version() -> str:
    try:
        return version("fidfilter")
    except PackageNotFoundError:
        return "0+unknown"


# --- argument types -------------------------------------------------------

def _percent(s: str) -> float:
    v = float(s)
    if not 0 < v <= 100:
        raise argparse.ArgumentTypeError(f"must be in (0, 100], got {s}")
    return v


def _unit(s: str) -> float:
    v = float(s)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {s}")
    return v


def _coef(s: str) -> float:
    v = float(s)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {s}")
    return v


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
    return v


def _nonneg(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _int_list(s: str) -> list[int]:
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {s!r}")
    return vals


def _layers(s: str) -> list[int] | None:
    return None if s == "all" else _int_list(s)


# --- parser ---------------------------------------------------------------

def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoding")
    g.add_argument("--passages", type=_positive, default=None, help="number of top-ranked passages to read (default: all)")
    g.add_argument("--beams", type=_positive, default=4, help="beam width (default 4)")
    g.add_argument("--max-new-tokens", type=_positive, default=300, help="answer length cap (default 300)")
    g.add_argument("--min-new-tokens", type=_nonneg, default=None, help="EOS is suppressed until this many tokens exist")
    g.add_argument("--dataset-preset", choices=sorted(MIN_ANSWER_LENGTH),
                   help="set --min-new-tokens to the per-dataset minimum answer length")
    g.add_argument("--max-passage-tokens", type=_positive, default=235, help="per-passage truncation (default 235)")
    f = p.add_argument_group("token filtering")
    f.add_argument("--filter-p", type=_percent, default=None, help="keep the top P%% input tokens (enables filtering)")
    f.add_argument("--filter-token", type=_positive, default=1, help="generated-token index that triggers filtering")
    f.add_argument("--filter-layer", type=_positive, default=1, help="decoder layer (1-based) whose cross-attention is scored")
    f.add_argument("--filter-value-norm", action="store_true", help="scale scores by value-row L2 norms")
    f.add_argument("--filter-mean-layers", action="store_true", help="average scores over layers 1..filter-layer")
    e = p.add_argument_group("early exit")
    e.add_argument("--exit-threshold", type=_unit, default=None, help="base confidence threshold (enables early exit)")
    e.add_argument("--exit-coef", type=_coef, default=1.0, help="threshold floor as a fraction of the base (default 1.0)")
    e.add_argument("--exit-decay", type=_positive, default=4, help="threshold decay constant in tokens (default 4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fidfilter", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON file with default flag values")
    parser.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="answer every query of a JSONL dataset")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--gold-first", action="store_true", help="move the gold passage to rank 1")
    p.add_argument("--limit", type=_positive, default=None, help="only the first N queries")
    _add_decode_flags(p)

    p = sub.add_parser("profile", help="encoder/decoder latency split vs generated tokens")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="take the first query from this dataset (default: synthetic)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--passage-counts", type=_int_list, default=[10, 50, 100])
    p.add_argument("--budgets", type=_int_list, default=[1, 15, 50, 150, 300])
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--warmup", type=_nonneg, default=2)
    p.add_argument("--words-per-passage", type=_positive, default=40)
    _add_decode_flags(p)

    p = sub.add_parser("analyze", help="gold-passage ratio and passage distribution of top-p tokens")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--p", type=_percent, nargs="+", default=[10.0, 30.0, 50.0])
    p.add_argument("--layers", type=_layers, default=None, help="'all' or comma-separated 1-based layers")
    p.add_argument("--dist-layer", type=_positive, default=2, help="layer for the passage distribution (default 2)")
    p.add_argument("--max-trace-mb", type=float, default=512.0)
    p.add_argument("--limit", type=_positive, default=None)
    p.add_argument("--plot", action="store_true", help="also render PNG figures (needs matplotlib)")
    _add_decode_flags(p)

    p = sub.add_parser("sweep", help="grid search, Max Curve and per-interval best settings")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--repeats", type=_positive, default=3)
    p.add_argument("--warmup", type=_nonneg, default=2)
    p.add_argument("--jobs", type=_positive, default=1, help="threads for the untimed metric pass")
    p.add_argument("--intervals", type=_positive, default=30)
    p.add_argument("--limit", type=_positive, default=None)

    p = sub.add_parser("score", help="mean ROUGE-L / F1 of predictions against references")
    p.add_argument("--pred", type=Path, required=True, help="JSONL with a 'text' (or 'answer') field")
    p.add_argument("--ref", type=Path, required=True, help="JSONL with an 'answer' (or 'text') field")
    p.add_argument("--out", type=Path, default=None, help="optional output directory")

    p = sub.add_parser("make-toy-model", help="write seeded random weights")
    p.add_argument("--out", type=Path, required=True, help="weight file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=_positive, default=64)
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--enc-layers", type=_positive, default=4)
    p.add_argument("--dec-layers", type=_positive, default=4)
    p.add_argument("--d-ff", type=_positive, default=128)
    p.add_argument("--d-kv", type=_positive, default=16)
    p.add_argument("--vocab", type=_positive, default=512)
    p.add_argument("--buckets", type=_positive, default=32)
    p.add_argument("--untied", action="store_true", help="separate LM head instead of tied embeddings")
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _apply_defaults(parser: argparse.ArgumentParser, config: dict[str, Any]) -> None:
    """Config-file values, overridden by FIDF_* environment variables."""
    for p in [parser, *_subparsers(parser).values()]:
        for action in p._actions:
            dest = action.dest
            if dest in ("help", "command", "config") or not action.option_strings:
                continue
            env_name = ENV_PREFIX + dest.upper()
            if env_name in os.environ:
                value: Any = os.environ[env_name]
                source = env_name
            elif dest in config:
                value = config[dest]
                source = f"config key {dest!r}"
            else:
                continue
            if action.nargs == 0:
                value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif action.type is not None and isinstance(value, str):
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    p.error(f"{source}: {exc}")
            p.set_defaults(**{dest: value})
            action.required = False


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    config = {}
    if known.config is not None:
        if not known.config.exists():
            raise FileNotFoundError(known.config)
        config = json.loads(known.config.read_text())
    parser = build_parser()
    _apply_defaults(parser, config)
    return parser.parse_args(argv)


# --- helpers --------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(*paths: Path | None) -> None:
    for p in paths:
        if p is not None and not p.exists():
            raise FileNotFoundError(p)


def _settings(args: argparse.Namespace) -> DecodeSettings:
    flt = None
    if args.filter_p is not None:
        flt = FilterConfig(args.filter_p, args.filter_token, args.filter_layer,
                           args.filter_value_norm, args.filter_mean_layers)
    ex = None
    if args.exit_threshold is not None:
        ex = ExitConfig(args.exit_threshold, args.exit_coef, args.exit_decay)
    min_new = args.min_new_tokens
    if min_new is None:
        min_new = MIN_ANSWER_LENGTH[args.dataset_preset] if args.dataset_preset else 0
    min_new = min(min_new, args.max_new_tokens)
    return DecodeSettings(n_passages=args.passages, beams=args.beams, max_new_tokens=args.max_new_tokens,
                          min_new_tokens=min_new, filter=flt, exit=ex,
                          max_passage_tokens=args.max_passage_tokens)


def _write_manifest(out: Path, args: argparse.Namespace, settings: Any, model: Path | None,
                    data: Path | None, started: str) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "settings": settings,
        "weights_sha256": _sha256(model) if model else None,
        "dataset_sha256": _sha256(data) if data else None,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "tool_version": _tool_version(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _text_field(row: dict[str, Any], prefer: str, fallback: str) -> str:
    v = row.get(prefer)
    if v is None:
        v = row.get(fallback)
    return v or ""


# --- commands -------------------------------------------------------------

def cmd_generate(args, started: str) -> int:
    _require(args.model, args.data)
    weights = load_weights(args.model)
    settings = _settings(args)
    dataset = load_dataset(args.data)[: args.limit]
    args.out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, inp in enumerate(dataset):
        if args.gold_first:
            inp = inp.gold_first()
        r = generate(weights, inp, settings)
        results.append(r)
        log.info("query %d: %d tokens, encoder %.4fs, decoder %.4fs", i, len(r.token_ids),
                 r.encoder_seconds, r.decoder_seconds)
    write_results(args.out / "results.jsonl", results)
    _write_manifest(args.out, args, settings.to_json(), args.model, args.data, started)
    return EXIT_OK


def cmd_profile(args, started: str) -> int:
    _require(args.model, args.data)
    weights = load_weights(args.model)
    settings = _settings(args)
    if args.data is not None:
        inp = load_dataset(args.data)[0]
        if max(args.passage_counts) > len(inp.passages):
            raise ValueError(f"first query has {len(inp.passages)} passages, need {max(args.passage_counts)}")
    else:
        inp = synthetic_input(max(args.passage_counts), args.words_per_passage)
    records = profile_decoder_share(weights, inp, settings, args.budgets, args.passage_counts,
                                    repeats=args.repeats, warmup=args.warmup)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "decoder_share.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
            log.info("passages=%d tokens=%d decoder_share=%.3f", r["n_passages"], r["tokens"], r["decoder_share"])
    _write_manifest(args.out, args, {**settings.to_json(), "budgets": args.budgets,
                                     "passage_counts": args.passage_counts, "repeats": args.repeats},
                    args.model, args.data, started)
    return EXIT_OK


def cmd_analyze(args, started: str) -> int:
    _require(args.model, args.data)
    weights = load_weights(args.model)
    settings = _settings(args)
    dataset = load_dataset(args.data)[: args.limit]
    budget = int(args.max_trace_mb * 2**20)
    gold_acc = {p: CurveAccumulator() for p in args.p}
    dist_acc = {p: CurveAccumulator() for p in args.p}
    layers = None if args.layers is None else set(args.layers) | {args.dist_layer}
    for i, inp in enumerate(dataset):
        trace = record_trace(weights, inp, settings, layers=layers, max_bytes=budget, gold_first=True)
        for p in args.p:
            if trace.gold_rank is not None:
                curve = gold_ratio(trace, p)
                if args.layers is not None:
                    curve.values = {k: v for k, v in curve.values.items() if k[0] in args.layers}
                gold_acc[p].add(curve.values)
            dist_acc[p].add(passage_distribution(trace, p, args.dist_layer).values)
        log.info("query %d traced: %d entries", i, len(trace))
    files = emit_analysis(args.out, gold={p: a.mean() for p, a in gold_acc.items() if a.sums},
                          distributions={p: (args.dist_layer, a.mean()) for p, a in dist_acc.items()},
                          plot=args.plot)
    _write_manifest(args.out, args, {**settings.to_json(), "p": args.p, "layers": args.layers,
                                     "dist_layer": args.dist_layer, "files": [f.name for f in files]},
                    args.model, args.data, started)
    return EXIT_OK


def cmd_sweep(args, started: str) -> int:
    _require(args.grid, args.data, args.model)
    weights = load_weights(args.model)
    grid = SweepGrid.load(args.grid)
    dataset = load_dataset(args.data)[: args.limit]
    points = run_sweep(grid, dataset, weights, repeats=args.repeats, out_dir=args.out,
                       warmup=args.warmup, jobs=args.jobs)
    if points:
        curve = build_max_curve(points, args.intervals)
        export_curve(curve, args.out / "max_curve.csv")
        best = [s.to_json() for s in best_settings_per_interval(curve)]
        (args.out / "best_settings.json").write_text(json.dumps(best, indent=2) + "\n")
    _write_manifest(args.out, args, {"grid": json.loads(args.grid.read_text()), "repeats": args.repeats,
                                     "intervals": args.intervals}, args.model, args.data, started)
    return EXIT_OK


def cmd_score(args, started: str) -> int:
    _require(args.pred, args.ref)
    preds = [json.loads(l) for l in args.pred.read_text().splitlines() if l.strip()]
    refs = [json.loads(l) for l in args.ref.read_text().splitlines() if l.strip()]
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} predictions vs {len(refs)} references")
    rl = [rouge_l(_text_field(p, "text", "answer"), _text_field(r, "answer", "text")) for p, r in zip(preds, refs)]
    fs = [f1(_text_field(p, "text", "answer"), _text_field(r, "answer", "text")) for p, r in zip(preds, refs)]
    n = len(rl)
    summary = {"n": n, "rouge_l": sum(rl) / n if n else 0.0, "f1": sum(fs) / n if n else 0.0}
    print(json.dumps(summary))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "scores.json").write_text(json.dumps(summary, indent=2) + "\n")
        _write_manifest(args.out, args, summary, None, args.ref, started)
    return EXIT_OK


def cmd_make_toy_model(args, started: str) -> int:
    cfg = ModelConfig(d_model=args.d_model, n_heads=args.heads, n_enc_layers=args.enc_layers,
                      n_dec_layers=args.dec_layers, d_ff=args.d_ff, d_kv=args.d_kv,
                      vocab_size=args.vocab, rel_pos_buckets=args.buckets, tie_embeddings=not args.untied)
    if args.out.parent and not args.out.parent.exists():
        raise FileNotFoundError(args.out.parent)
    make_toy_model(cfg, args.seed, args.out)
    log.info("wrote %s (sha256 %s)", args.out, _sha256(args.out))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "profile": cmd_profile,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "score": cmd_score,
    "make-toy-model": cmd_make_toy_model,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"fidfilter: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    _setup_logging(args.log_level)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        return COMMANDS[args.command](args, started)
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_MISSING
    except (ValueError, WeightsError, ContainerError, TraceBudgetExceeded) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
