"""Command-line driver: ingest, build, init-model, edit, eval, run-suite, compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bench_builder import KINDS, DatasetError, build_datasets, read_dataset, write_dataset
from .corpus import generate_corpus, write_tsv
from .editors import METHODS, EditLog, apply_edit
from .evaluation import MetricsReport, aggregate, compare_reports, dumps_report, eval_record
from .model import LamModel
from .questions import AliasTable, TemplateError, builtin_pack, load_alias_table, load_template_pack
from .suite import RunConfig, evaluate_cell, initialize_model_time, model_for_chains, run_meta, run_suite
from .temporal_kb import build_chains, dump_chains, load_chains, parse_facts

log = logging.getLogger("tkedit")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2


class InputError(Exception):
    """Unreadable or malformed input; maps to exit status 2."""


# ---------------------------------------------------------------- config


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then explicit command-line flags on top."""
    config = RunConfig()
    if args.config:
        try:
            config = RunConfig.from_json(json.loads(Path(args.config).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    top = {}
    for name in ("seed", "d", "lam", "alpha", "horizon", "fake_facts", "pack"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "extension_years", None) is not None:
        top["extension"] = args.extension_years
    if getattr(args, "methods", None):
        top["methods"] = tuple(args.methods)
    if getattr(args, "n_chains", None) is not None:
        top["corpus"] = replace(config.corpus, n_chains=args.n_chains)
    editor = {}
    for name in ("method", "steps", "learning_rate", "norm_budget", "ridge", "cov_weight"):
        if getattr(args, name, None) is not None:
            editor[name] = getattr(args, name)
    if getattr(args, "meto", False):
        editor["meto"] = True
    if editor:
        top["editor"] = replace(config.editor, **editor)
    try:
        return replace(config, **top)
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from exc


def _read_chains(path: str):
    try:
        with open(path, encoding="utf-8") as fp:
            return load_chains(fp)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read chains {path}: {exc}") from exc


def _read_dataset(path: str):
    try:
        records = read_dataset(path)
    except (OSError, DatasetError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    if not records:
        raise InputError(f"{path}: no records")
    return records


def _read_model(path: str) -> LamModel:
    try:
        return LamModel.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read model {path}: {exc}") from exc


def _read_aliases(path: str | None) -> AliasTable | None:
    if not path:
        return None
    try:
        with open(path, encoding="utf-8") as fp:
            return load_alias_table(fp)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read alias table {path}: {exc}") from exc


def _read_pack(args: argparse.Namespace, config: RunConfig):
    try:
        if getattr(args, "templates", None):
            with open(args.templates, encoding="utf-8") as fp:
                return load_template_pack(fp)
        return builtin_pack(config.pack)
    except (OSError, TemplateError, ValueError) as exc:
        raise InputError(f"template pack: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace) -> int:
    config = load_config(args)
    try:
        with open(args.facts, encoding="utf-8") as fp:
            parsed = parse_facts(fp)
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {args.facts}: {exc}") from exc
    for err in parsed.errors:
        print(f"{args.facts}:{err}", file=sys.stderr)
    if parsed.errors and not args.skip_bad_lines:
        raise InputError(f"{len(parsed.errors)} malformed line(s) in {args.facts}")
    year_range = tuple(args.year_range) if args.year_range else None
    chains, logs = build_chains(parsed.facts, year_range)
    for cl in logs:
        if not cl.empty:
            log.info("%s: merged %s clipped %s dropped %s", cl.chain_id, cl.merged, cl.clipped, cl.dropped)
    with open(args.out, "w", encoding="utf-8") as fp:
        dump_chains(chains, fp, **run_meta(config))
    print(f"{len(parsed.facts)} facts -> {len(chains)} chains -> {args.out}")
    return EXIT_OK


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    config = load_config(args)
    facts = generate_corpus(config.seed, config.corpus)
    with open(args.out, "w", encoding="utf-8") as fp:
        fp.write(f"# tkedit {__version__} seed={config.seed} config={config.fingerprint()}\n")
        write_tsv(facts, fp)
    print(f"{len(facts)} facts in {config.corpus.n_chains} chains -> {args.out}")
    return EXIT_OK


def cmd_build(args: argparse.Namespace) -> int:
    config = load_config(args)
    chains = _read_chains(args.chains)
    pack = _read_pack(args, config)
    aliases = _read_aliases(args.aliases)
    model = _read_model(args.model) if args.model else None
    built = build_datasets(
        chains,
        pack,
        model=model,
        seed=config.seed,
        horizon=config.horizon,
        fake_facts=config.fake_facts,
        extension=config.extension,
        aliases=aliases,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = run_meta(config)
    for kind in KINDS:
        write_dataset(built.datasets[kind], out / f"{kind.lower()}.jsonl", {**meta, "kind": kind})
    summary = built.summary()
    for reason, ids in built.skipped.items():
        if ids:
            print(f"skipped ({reason}): {len(ids)}", file=sys.stderr)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_init_model(args: argparse.Namespace) -> int:
    config = load_config(args)
    chains = _read_chains(args.chains)
    if not chains:
        raise InputError(f"{args.chains}: no chains")
    model = initialize_model_time(model_for_chains(chains, config), chains, config.horizon)
    model.meta = run_meta(config)
    model.save(args.out)
    print(f"model d={model.d} over {len(chains)} chains -> {args.out}")
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    config = load_config(args)
    model = _read_model(args.model)
    records = _read_dataset(args.dataset)
    elog = EditLog()
    for rec in records:
        for op in rec.edits:
            elog.extend(apply_edit(model, op, config.editor, horizon=config.horizon))
    for w in elog.warnings:
        print(f"warning: {w}", file=sys.stderr)
    model.meta = {**run_meta(config), "editor": config.editor.fingerprint(), "edit_log_sha256": elog.digest()}
    model.save(args.out)
    if args.edit_log:
        Path(args.edit_log).write_text(elog.to_jsonl())
    print(f"{len(elog.entries)} targets from {len(records)} records -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args)
    model = _read_model(args.model)
    records = _read_dataset(args.dataset)
    aliases = _read_aliases(args.aliases)
    fp = {**run_meta(config), "model_sha256": model.state_hash()}
    if args.no_edit:
        report = aggregate([eval_record(model, rec, aliases) for rec in records], records[0].kind, fp)
    else:
        fp["editor"] = config.editor.fingerprint()
        report, _ = evaluate_cell(model, records, config.editor, config.horizon, fp)
    text = dumps_report(report)
    if args.out:
        Path(args.out).write_text(text)
    label = config.editor.method + ("+" if config.editor.meto else "")
    print(report.to_markdown("as-is" if args.no_edit else label))
    return EXIT_OK


def cmd_run_suite(args: argparse.Namespace) -> int:
    config = load_config(args)
    result = run_suite(config, out_dir=args.out_dir)
    print(result.to_markdown())
    print(f"{result.seconds:.1f}s -> {args.out_dir}", file=sys.stderr)
    if result.summary.get("errors"):
        for e in result.summary["errors"]:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _read_report(path: str) -> MetricsReport:
    try:
        doc = json.loads(Path(path).read_text())
        counts = {k: (v["asked"], v["correct"]) for k, v in doc.get("counts", {}).items()}
        return MetricsReport(
            doc["dataset_kind"], doc["metrics"], counts, doc.get("per_edit_breakdown", []), doc.get("config_fingerprint", {})
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read report {path}: {exc}") from exc


def cmd_compare(args: argparse.Namespace) -> int:
    a, b = _read_report(args.baseline), _read_report(args.enhanced)
    try:
        table = compare_reports(a, b)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.out:
        Path(args.out).write_text(dumps_report(table))
    print(table.to_markdown(args.label))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _editor_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("editor")
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--meto", action="store_true", help="wrap the editor with the multi-edit framework")
    g.add_argument("--steps", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--norm-budget", type=float, help="Frobenius radius for cft")
    g.add_argument("--ridge", type=float, help="ridge term for batch")
    g.add_argument("--cov-weight", type=float, help="weight of the stored-key covariance")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, help="embedding dimension")
    p.add_argument("--lam", type=float, help="ridge term of the initial solve")
    p.add_argument("--alpha", type=float, help="span bonus for explicit-year queries")


def _bench_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--horizon", type=int)
    p.add_argument("--fake-facts", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--extension-years", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file mirroring the run configuration")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="tkedit", description=__doc__, parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="timestamped facts TSV -> chains JSON")
    p.add_argument("facts")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--year-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--skip-bad-lines", action="store_true", help="report malformed lines but keep going")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a seeded synthetic facts TSV")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--n-chains", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build", parents=[common], help="chains -> se/me/ee datasets")
    p.add_argument("chains")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", help="locate model time against this model")
    p.add_argument("--templates", help="template pack TSV (default: built-in)")
    p.add_argument("--pack", help="name of a built-in template pack")
    p.add_argument("--aliases", help="alias table TSV")
    _bench_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("init-model", parents=[common], help="store each chain's first fact in a fresh model")
    p.add_argument("chains")
    p.add_argument("-o", "--out", required=True)
    _model_flags(p)
    _bench_flags(p)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("edit", parents=[common], help="apply every edit of a dataset to a model")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--edit-log", help="write the JSONL edit log here")
    p.add_argument("--horizon", type=int)
    _editor_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", parents=[common], help="edit a copy per record and score it")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("-o", "--out", help="report JSON")
    p.add_argument("--aliases")
    p.add_argument("--no-edit", action="store_true", help="score the model as given")
    p.add_argument("--horizon", type=int)
    _editor_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-suite", parents=[common], help="every editor with and without the wrapper")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-chains", type=int)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    _model_flags(p)
    _bench_flags(p)
    _editor_flags(p)
    p.set_defaults(func=cmd_run_suite)

    p = sub.add_parser("compare", parents=[common], help="signed per-metric change between two reports")
    p.add_argument("baseline")
    p.add_argument("enhanced")
    p.add_argument("-o", "--out")
    p.add_argument("--label", default="")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"tkedit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
