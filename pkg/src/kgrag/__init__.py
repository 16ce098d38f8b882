"""Knowledge-graph retrieval-augmented question answering."""

from .graph_store import Entity, GraphStore, Schema, Triplet, get_schema, ingest_triples, load_triples_tsv
from .kg_linker import GraphArtifacts, build_prompt, generate_artifacts, parse_response
from .linking import LinkedEntity, Mention, link
from .llm import HttpLLM, LlmRequest, ScriptedLLM, ScriptEntry
from .orchestrator import Pipeline, PipelineConfig, RetrievalContext, call_budget, run_pipeline
from .paths import GroundedPath, RelationPath, follow_paths, shortest_paths
from .retrieval import agentic_retrieve, rerank_retrieve, text_retrieve

__version__ = "0.1.0"

__all__ = [
    "Entity", "GraphStore", "Schema", "Triplet", "get_schema", "ingest_triples", "load_triples_tsv",
    "GraphArtifacts", "build_prompt", "generate_artifacts", "parse_response",
    "LinkedEntity", "Mention", "link",
    "HttpLLM", "LlmRequest", "ScriptedLLM", "ScriptEntry",
    "Pipeline", "PipelineConfig", "RetrievalContext", "call_budget", "run_pipeline",
    "GroundedPath", "RelationPath", "follow_paths", "shortest_paths",
    "agentic_retrieve", "rerank_retrieve", "text_retrieve",
]
