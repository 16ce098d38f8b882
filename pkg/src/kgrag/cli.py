"""Command-line interface.

Every subcommand loads a graph (``--graph``: a triples TSV, a JSON property
graph or an ingested snapshot), calls one library function and prints the
result as text or, with ``--json``, as a single JSON document.

Settings resolve as config file < ``KGRAG_*`` environment variables <
command-line flags. Exit status: 0 success, 1 user error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import pickle
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .cypher import QueryFailure, run_query_text
from .eval import DatasetError, evaluate_batch
from .graph_store import GraphStore, IngestionError, load_graph_json, load_triples_tsv, render_triplets
from .linking import LinkingConfigError, link, resolve_names
from .llm import HttpLLM, ScriptedLLM, ScriptError, UnscriptedPromptError
from .models import TransportError
from .orchestrator import ConfigError, Pipeline, PipelineConfig
from .paths import RelationPath, follow_paths, shortest_paths
from .retrieval import agentic_retrieve, rerank_retrieve, text_retrieve

logger = logging.getLogger("kgrag")

ENV_PREFIX = "KGRAG_"
CLI_KEYS = ("llm_script", "llm_url", "llm_model", "cache_dir")
SNAPSHOT_SUFFIX = ".kgsnap"
SNAPSHOT_VERSION = 1


class UserError(Exception):
    """Bad input from the user; exit status 1."""


class PipelineFailure(Exception):
    """The pipeline ran but failed; exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# settings -------------------------------------------------------------------


def _coerce(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_settings(config_path: str | None, overrides: Sequence[str], env: dict[str, str]) -> dict[str, Any]:
    allowed = set(PipelineConfig.keys()) | set(CLI_KEYS)
    settings: dict[str, Any] = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UserError(f"cannot read config {config_path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise UserError(f"config {config_path} is not valid YAML/JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UserError(f"config {config_path} must be a mapping of keys to values")
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise UserError(f"config {config_path}: unknown keys {', '.join(unknown)}")
        settings.update(data)
    for key in sorted(allowed):
        name = ENV_PREFIX + key.upper()
        if name in env:
            settings[key] = _coerce(env[name])
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in allowed:
            raise UserError(f"--set expects KEY=VALUE with KEY in: {', '.join(sorted(allowed))}")
        settings[key] = _coerce(value)
    return settings


def pipeline_config(settings: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.from_mapping({k: v for k, v in settings.items() if k not in CLI_KEYS})
    except (ConfigError, TypeError) as exc:
        raise UserError(f"invalid configuration: {exc}") from None


# graph loading ------------------------------------------------------------------


def _digest(*paths: str | None) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            h.update(b"\0none")
            continue
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        h.update(b"\0")
    return h.hexdigest()


def _parse_graph(graph: str, entities: str | None) -> GraphStore:
    if graph.endswith(".json"):
        return load_graph_json(graph)
    return load_triples_tsv(graph, entities)


def write_snapshot(store: GraphStore, path: Path, digest: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump({"version": SNAPSHOT_VERSION, "digest": digest, "store": store}, fh)
    os.replace(tmp, path)


def read_snapshot(path: str | Path) -> GraphStore:
    # Snapshots are only ever written by this tool; do not load untrusted files.
    with open(path, "rb") as fh:
        data = pickle.load(fh)
    if not isinstance(data, dict) or data.get("version") != SNAPSHOT_VERSION:
        raise UserError(f"{path} is not a snapshot written by this version; re-run ingest")
    return data["store"]


def load_store(graph: str | None, entities: str | None, cache_dir: str | None) -> tuple[GraphStore, dict]:
    if not graph:
        raise UserError("--graph is required (triples TSV, graph JSON or snapshot)")
    try:
        if graph.endswith(SNAPSHOT_SUFFIX):
            return read_snapshot(graph), {"snapshot": graph, "cached": True}
        digest = _digest(graph, entities)
        info: dict[str, Any] = {"digest": digest, "cached": False}
        if cache_dir:
            snap = Path(cache_dir) / f"{digest[:32]}{SNAPSHOT_SUFFIX}"
            info["snapshot"] = str(snap)
            if snap.is_file():
                info["cached"] = True
                return read_snapshot(snap), info
            store = _parse_graph(graph, entities)
            write_snapshot(store, snap, digest)
            return store, info
        return _parse_graph(graph, entities), info
    except FileNotFoundError as exc:
        raise UserError(f"cannot read {exc.filename}: no such file") from None
    except IsADirectoryError as exc:
        raise UserError(f"cannot read {exc.filename}: is a directory") from None
    except PermissionError as exc:
        raise UserError(f"cannot read {exc.filename}: permission denied") from None
    except IngestionError as exc:
        raise UserError(f"cannot ingest {graph}: {exc}") from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot ingest {graph}: {exc}") from None


def make_llm(settings: dict[str, Any]):
    script = settings.get("llm_script")
    if script:
        try:
            return ScriptedLLM.from_file(script)
        except OSError as exc:
            raise UserError(f"cannot read LLM script {script}: {exc.strerror}") from None
        except (ScriptError, yaml.YAMLError) as exc:
            raise UserError(f"bad LLM script {script}: {exc}") from None
    url = settings.get("llm_url")
    if url:
        model = settings.get("llm_model")
        if not model:
            raise UserError("--llm-url needs --llm-model (or KGRAG_LLM_MODEL)")
        return HttpLLM(str(url), str(model))
    raise UserError("no LLM configured: pass --llm-script or --llm-url/--llm-model")


# output ---------------------------------------------------------------------------


def emit(args: argparse.Namespace, text: str, payload: Any) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))
    elif text:
        print(text)


def _tsv(rows: Sequence[Sequence[Any]]) -> str:
    return "\n".join("\t".join(str(c) for c in row) for row in rows)


# subcommands --------------------------------------------------------------------


def cmd_ingest(args, settings) -> int:
    cache = args.cache_dir or settings.get("cache_dir") or ".kgrag-cache"
    store, info = load_store(args.graph, args.entities, cache)
    if args.out:
        write_snapshot(store, Path(args.out), info.get("digest", ""))
        info["snapshot"] = args.out
    payload = {"entities": len(store.entities), "triplets": len(store), "relations": len(store.relations()), **info}
    text = (
        f"entities: {payload['entities']}\ntriplets: {payload['triplets']}\n"
        f"relations: {payload['relations']}\nsnapshot: {payload.get('snapshot')}"
        + (" (cached)" if info.get("cached") else "")
    )
    emit(args, text, payload)
    return 0


def cmd_schema(args, settings, store) -> int:
    schema = store.schema()
    emit(args, schema.render(), schema.to_dict())
    return 0


def cmd_link(args, settings, store) -> int:
    config = pipeline_config(settings)
    m = args.m or config.top_m
    mode = args.mode or config.link_mode
    index = Pipeline(store, None, config.replace(link_mode=mode)).link_index()
    try:
        linked = link(args.mention, store, m=m, mode=mode, index=index)
    except (LinkingConfigError, ValueError) as exc:
        raise UserError(str(exc)) from None
    rows = [
        (le.mention.text, le.entity, store.name_of(le.entity), le.method, f"{le.score:.4f}", le.rank)
        for le in linked
    ]
    payload = [
        {"mention": r[0], "entity": r[1], "name": r[2], "method": r[3], "score": le.score, "rank": r[5]}
        for r, le in zip(rows, linked)
    ]
    emit(args, _tsv([("mention", "entity", "name", "method", "score", "rank")] + rows), payload)
    return 0


def _resolve(names: Sequence[str], store: GraphStore, role: str) -> list[str]:
    warnings: list[str] = []
    ids = resolve_names(names, store, warnings)
    for w in warnings:
        print(f"warning: {role}: {w}", file=sys.stderr)
    return ids


def cmd_paths(args, settings, store) -> int:
    config = pipeline_config(settings)
    sources = _resolve(args.source, store, "source")
    warnings: list[str] = []
    if args.target:
        targets = _resolve(args.target, store, "target")
        found = shortest_paths(sources, targets, store, max_hops=args.max_hops or config.max_hops, warnings=warnings)
    else:
        if not args.relpath:
            raise UserError("paths needs --relpath (or --target for shortest paths)")
        try:
            relpaths = [RelationPath.parse(r) for r in args.relpath]
        except ValueError as exc:
            raise UserError(str(exc)) from None
        found = follow_paths(relpaths, sources, store, cap=config.grounding_cap, warnings=warnings)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    emit(args, "\n".join(p.render(store.name_of) for p in found), [p.to_dict() for p in found])
    return 0


def cmd_query(args, settings, store) -> int:
    if args.file:
        try:
            text = Path(args.file).read_text(encoding="utf-8")
        except OSError as exc:
            raise UserError(f"cannot read {args.file}: {exc.strerror}") from None
    elif args.text and args.text != "-":
        text = args.text
    else:
        try:
            piped = args.text == "-" or not sys.stdin.isatty()
            text = sys.stdin.read() if piped else ""
        except (OSError, ValueError):
            text = ""
        if not text.strip():
            raise UserError("query needs cypher text, --file, or a query on stdin")
    result = run_query_text(text, store)
    if isinstance(result, QueryFailure):
        if args.json:
            emit(args, "", result.to_dict())
        raise UserError(result.message)
    if result.warnings:
        print(f"warning: {result.warnings} type-mismatched comparison(s) evaluated to null", file=sys.stderr)
    emit(args, result.to_tsv().rstrip("\n"), result.to_dict())
    return 0


def cmd_retrieve(args, settings, store) -> int:
    config = pipeline_config(settings)
    k = args.k or config.k
    seeds = _resolve(args.seed, store, "seed")
    if args.strategy == "text":
        pipe = Pipeline(store, None, config)
        scored = text_retrieve(args.question, k or 10, store, index=pipe.text_index())
        triplets = [s.triplet for s in scored]
        extra: dict[str, Any] = {"scores": [s.score for s in scored]}
    elif args.strategy == "rerank":
        if not seeds:
            raise UserError("rerank retrieval needs --seed")
        pipe = Pipeline(store, None, config)
        stages = rerank_retrieve(
            args.question, seeds, store, pipe.reranker, hops=config.hops,
            k_r=config.k_r, k_t=config.k_t, k=k or 10,
        )
        triplets = stages.triplets
        extra = {"scores": [s.score for s in stages.final], "kept_relations": stages.kept_relations}
    else:
        if not seeds:
            raise UserError("agentic retrieval needs --seed")
        llm = make_llm(settings)
        try:
            run = agentic_retrieve(
                args.question, seeds, store, llm, max_iterations=config.agent_iterations,
                frontier_cap=config.frontier_cap, template_dir=config.template_dir,
            )
        except TransportError as exc:
            raise PipelineFailure(str(exc)) from None
        triplets = run.triplets
        extra = {"calls": run.calls, "states": [s.to_dict() for s in run.states]}
    payload = {"strategy": args.strategy, "triplets": [list(t.key) for t in triplets], **extra}
    emit(args, "\n".join(render_triplets(triplets, store.name_of)), payload)
    return 0


def cmd_answer(args, settings, store) -> int:
    config = pipeline_config(settings)
    llm = make_llm(settings)
    result = Pipeline(store, llm, config).run(args.question, seed_entities=args.seed)
    trace_path = Path(args.trace)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    result.write_trace(trace_path)
    payload = {
        "question": args.question,
        "answers": result.answers,
        "draft_answers": result.draft_answers,
        "trace": str(trace_path),
        "error": result.error,
    }
    if result.error:
        if args.json:
            emit(args, "", payload)
        raise PipelineFailure(f"{result.error} (partial trace in {trace_path})")
    emit(args, "\n".join(result.answers) + f"\ntrace: {trace_path}", payload)
    return 0


def cmd_eval(args, settings, store) -> int:
    config = pipeline_config(settings)
    llm = make_llm(settings)
    if not Path(args.dataset).is_file():
        raise UserError(f"cannot read {args.dataset}: no such file")
    try:
        report = evaluate_batch(args.dataset, store, llm, config, workers=args.workers, out_dir=args.out, k=args.k)
    except DatasetError as exc:
        raise UserError(f"{args.dataset}: {exc}") from None
    data = report.to_dict()
    lines = [f"{name}: {data[name]['value']:.4f} ({data[name]['exact']})"
             for name in ("hit", "hit_at_2", f"recall_at_{report.k}")]
    lines.append("examples: {examples}, scored: {scored}, errors: {errors}".format(**report.counts))
    lines.append(f"report: {Path(args.out) / 'report.json'}")
    emit(args, "\n".join(lines), data)
    return 0


# parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with pipeline settings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    graph = argparse.ArgumentParser(add_help=False)
    graph.add_argument("--graph", help="triples TSV, graph JSON, or a snapshot file")
    graph.add_argument("--entities", help="entity metadata TSV (id, name, type, key=value...)")
    graph.add_argument("--cache-dir", help="snapshot cache directory keyed by input hash")

    llm = argparse.ArgumentParser(add_help=False)
    llm.add_argument("--llm-script", help="scripted LLM responses (YAML)")
    llm.add_argument("--llm-url", help="chat-completion base URL; token from KGRAG_API_KEY")
    llm.add_argument("--llm-model", help="model name for --llm-url")

    parser = _Parser(prog="kgrag", description="Knowledge-graph retrieval and question answering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common, graph], help="parse a graph and cache a snapshot")
    p.add_argument("--out", help="also write the snapshot here")

    sub.add_parser("schema", parents=[common, graph], help="print node and relation types")

    p = sub.add_parser("link", parents=[common, graph], help="link mentions to entities")
    p.add_argument("--mention", action="append", required=True, help="mention text (repeatable)")
    p.add_argument("--m", type=int, help="candidates per mention")
    p.add_argument("--mode", choices=["string", "embedding", "both"])

    p = sub.add_parser("paths", parents=[common, graph], help="ground relation paths or find shortest paths")
    p.add_argument("--source", action="append", required=True, help="source entity name or id (repeatable)")
    p.add_argument("--relpath", action="append", default=[], help='relation chain "r1 -> r2" (repeatable)')
    p.add_argument("--target", action="append", default=[], help="target entity for shortest paths")
    p.add_argument("--max-hops", type=int)

    p = sub.add_parser("query", parents=[common, graph], help="run an openCypher query")
    p.add_argument("text", nargs="?", help="query text (\"-\" or omitted reads stdin)")
    p.add_argument("--file", help="read the query from a file")

    p = sub.add_parser("retrieve", parents=[common, graph, llm], help="retrieve triplets for a question")
    p.add_argument("--strategy", choices=["agentic", "text", "rerank"], required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--seed", action="append", default=[], help="seed entity name or id (repeatable)")
    p.add_argument("--k", type=int)

    p = sub.add_parser("answer", parents=[common, graph, llm], help="run the full pipeline")
    p.add_argument("--question", required=True)
    p.add_argument("--seed", action="append", default=[], help="extra seed entity (repeatable)")
    p.add_argument("--trace", default="trace.jsonl", help="where to write the JSON-lines trace")

    p = sub.add_parser("eval", parents=[common, graph, llm], help="evaluate on a QA dataset")
    p.add_argument("--dataset", required=True, help="JSONL with id, question, answers")
    p.add_argument("--out", default="eval-out", help="directory for report.json and examples.jsonl")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--k", type=int, help="k for Recall@k")
    return parser


COMMANDS = {
    "schema": cmd_schema,
    "link": cmd_link,
    "paths": cmd_paths,
    "query": cmd_query,
    "retrieve": cmd_retrieve,
    "answer": cmd_answer,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None, env: dict[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("kgrag: error: a command is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    env = dict(os.environ if env is None else env)
    try:
        settings = load_settings(args.config, args.set, env)
        for key in ("llm_script", "llm_url", "llm_model"):
            if getattr(args, key, None):
                settings[key] = getattr(args, key)
        if getattr(args, "workers", 1) < 1:
            raise UserError("--workers must be >= 1")
        if args.command == "ingest":
            return cmd_ingest(args, settings)
        store, _ = load_store(args.graph, args.entities, args.cache_dir or settings.get("cache_dir"))
        return COMMANDS[args.command](args, settings, store)
    except UserError as exc:
        print(f"kgrag: error: {exc}", file=sys.stderr)
        return 1
    except (PipelineFailure, TransportError, UnscriptedPromptError, ScriptError) as exc:
        print(f"kgrag: pipeline error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
