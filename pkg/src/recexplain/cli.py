"""Command-line interface: one subcommand per pipeline stage plus utilities.

Stage subcommands run the pipeline up to and including that stage; completed
stages are reused through the digest cache, so invoking `retrieve` after
`embed` only does the new work. `--set section.key=value` overrides any
config file entry.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import evalkit, retrieval
from .config import ConfigError, PipelineConfig, load_config
from .mocks import HashTokenEmbedder, LengthRatioJudge
from .pipeline import STAGE_ORDER, PipelineError, StageError, run_pipeline

STAGE_COMMANDS = [
    "ingest",
    "train-gcn",
    "build-profiles",
    "embed",
    "finetune-adapter",
    "retrieve",
    "assemble",
    "generate",
    "evaluate",
]


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config entry (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recexplain",
        description="Retrieval-augmented recommendation explanation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        stage_parser = sub.add_parser(name, help=f"run the pipeline through {name}")
        _add_config_arguments(stage_parser)
        if name == "train-gcn":
            stage_parser.add_argument("--out", help="copy the checkpoint here")
        if name == "retrieve":
            stage_parser.add_argument("--query-type", choices=["latent", "profile"])
            stage_parser.add_argument("--top-q", type=int)
        if name == "evaluate":
            stage_parser.add_argument("--refs", help="reference explanations JSONL")
            stage_parser.add_argument("--cands", help="candidate explanations JSONL")
            stage_parser.add_argument("--report", help="report output path")

    split_parser = sub.add_parser("split", help="load, validate, and split the corpus")
    _add_config_arguments(split_parser)

    run_parser = sub.add_parser("run", help="run the full pipeline")
    _add_config_arguments(run_parser)

    bench = sub.add_parser("bench-retrieval", help="brute-force search latency benchmark")
    _add_config_arguments(bench)
    bench.add_argument("--rows", type=int, default=100_000)
    bench.add_argument("--dim", type=int, default=768)
    bench.add_argument("--queries", type=int, default=100)
    bench.add_argument("--top-q", type=int, default=8)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--report", help="write the latency report JSON here")
    return parser


def _load(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.overrides)
    if getattr(args, "query_type", None):
        overrides.append(f"retrieval.query_type={args.query_type}")
    if getattr(args, "top_q", None) and args.command == "retrieve":
        overrides.append(f"retrieval.top_q={args.top_q}")
    return load_config(args.config, overrides)


def _run_until(config: PipelineConfig, until: str) -> int:
    try:
        manifest = run_pipeline(config, until=until)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for stage in manifest.stages:
        print(f"{stage.name:18s} {stage.status:8s} {stage.detail}")
    print(f"manifest: {config.out_dir / 'manifest.json'}")
    return 0


def _cmd_stage(args: argparse.Namespace) -> int:
    config = _load(args)
    until = args.command if args.command in STAGE_ORDER else None
    code = _run_until(config, until)
    if code == 0 and args.command == "train-gcn" and getattr(args, "out", None):
        shutil.copyfile(config.out_dir / "gcn.rxge", args.out)
        print(f"checkpoint copied to {args.out}")
    return code


def _read_text_column(path: str, field_names: tuple[str, ...]) -> list[str]:
    texts = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            record = json.loads(line)
            for name in field_names:
                if name in record:
                    texts.append(record[name])
                    break
            else:
                raise PipelineError(
                    f"{path}: line {line_no} has none of the fields {field_names}"
                )
    return texts


def _cmd_evaluate(args: argparse.Namespace) -> int:
    if args.refs or args.cands:
        if not (args.refs and args.cands and args.report):
            print("error: --refs, --cands, and --report go together", file=sys.stderr)
            return 2
        config = _load(args)
        refs = _read_text_column(args.refs, ("explanation", "text"))
        cands = _read_text_column(args.cands, ("explanation", "text"))
        report = evalkit.score_pairs(
            refs,
            cands,
            HashTokenEmbedder(),
            LengthRatioJudge(),
            config.template_text(config.eval.judge_template),
            standard_orientation=config.eval.standard_orientation,
        )
        report.write(args.report)
        print(
            f"n={report.n} bert_p={report.bert_p.mean:.4f} "
            f"bert_r={report.bert_r.mean:.4f} bert_f1={report.bert_f1.mean:.4f}"
        )
        return 0
    return _cmd_stage(args)


def _cmd_bench(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    rows = rng.standard_normal((args.rows, args.dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    index = retrieval.VectorIndex(
        ids=np.arange(1, args.rows + 1),
        rows=rows,
        meta=[("", "")] * args.rows,
        zero_mask=np.zeros(args.rows, dtype=bool),
    )
    queries = rng.standard_normal((args.queries, args.dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    report = retrieval.bench_retrieval(index, list(queries), args.top_q)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench-retrieval":
            return _cmd_bench(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "split":
            return _run_until(_load(args), "ingest")
        if args.command == "run":
            return _run_until(_load(args), None)
        return _cmd_stage(args)
    except (ConfigError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
