import json

import pytest

from kgrag.graph_store import Triplet
from kgrag.llm import ScriptedLLM, UnscriptedPromptError
from kgrag.models import TransportError
from kgrag.orchestrator import (
    ConfigError,
    Pipeline,
    PipelineConfig,
    QueryResult,
    RetrievalContext,
    Source,
    budget_ceiling,
    call_budget,
    run_pipeline,
)
from kgrag.cypher import ResultTable
from kgrag.paths import Direction, GroundedPath

Q = "Which championships has the team led by Stan Kasten won?"
NW_Q = "What is the average unit price of products ordered in quantities above 10?"
GOLDS = [f"{y} World Series" for y in (1963, 1988, 1965, 1981, 1959)]
CHAMPIONSHIPS = {("Los Angeles Dodgers", "sports.sports_team.championships", g) for g in GOLDS}


def cwq_run(store, fixtures_dir, **config):
    llm = ScriptedLLM.from_file(fixtures_dir / "cwq_script.yaml")
    return run_pipeline(Q, store, llm, PipelineConfig(**config)), llm


def keys(context):
    return {context._key(i.value) for i in context.items}


def events(result, name):
    return [e for e in result.trace if e["event"] == name]


def script(*entries):
    return ScriptedLLM.from_data([{"match": m, "text": t, "response": r} for m, t, r in entries])


def test_cwq_replay_answers_and_iteration_two_championships(cwq_store, fixtures_dir):
    result, llm = cwq_run(cwq_store, fixtures_dir, scoring=False)
    assert result.ok
    assert result.answers == GOLDS
    by_iteration = {}
    for item in result.context.items:
        if isinstance(item.value, Triplet):
            by_iteration.setdefault(item.iteration, set()).add(item.value.key)
    assert CHAMPIONSHIPS <= by_iteration[2]
    assert not CHAMPIONSHIPS & by_iteration[1]
    assert call_budget(result.trace) == len(llm.call_log) == 10


def test_cwq_replay_follow_path_grounds_leadership_chain(cwq_store, fixtures_dir):
    result, _ = cwq_run(cwq_store, fixtures_dir, scoring=False)
    [path] = [p for p in result.context.paths if p.nodes[0] == "Stan Kasten"]
    assert path.nodes == ("Stan Kasten", "m.0_yv0g3", "Los Angeles Dodgers")


def test_cwq_replay_query_result_in_context(cwq_store, fixtures_dir):
    result, _ = cwq_run(cwq_store, fixtures_dir, scoring=False)
    [qr] = result.context.query_results
    assert isinstance(qr.result, ResultTable)
    assert qr.result.rows == [("Los Angeles Dodgers",)]


def test_traces_are_byte_identical(cwq_store, fixtures_dir):
    first, _ = cwq_run(cwq_store, fixtures_dir)
    second, _ = cwq_run(cwq_store, fixtures_dir)
    assert first.trace_jsonl().encode("utf-8") == second.trace_jsonl().encode("utf-8")
    for line in first.trace_jsonl().splitlines():
        json.loads(line)


def test_write_trace(tmp_path, cwq_store, fixtures_dir):
    result, _ = cwq_run(cwq_store, fixtures_dir, scoring=False)
    path = tmp_path / "t.jsonl"
    result.write_trace(path)
    assert path.read_text(encoding="utf-8") == result.trace_jsonl()


def test_budget_never_exceeds_ceiling(cwq_store, fixtures_dir):
    for config in ({}, {"scoring": False}, {"agent_iterations": 1, "frontier_cap": 1},
                   {"refinement_iterations": 1}, {"paths": False, "query": False}):
        result, llm = cwq_run(cwq_store, fixtures_dir, **config)
        assert call_budget(result.trace) == len(llm.call_log)
        assert call_budget(result.trace) <= budget_ceiling(PipelineConfig(**config))


def test_ceiling_formula():
    assert budget_ceiling(PipelineConfig()) == 2 * (1 + 2 * 3 * 8) + 1
    assert budget_ceiling(PipelineConfig(refinement_iterations=0)) == 1
    assert budget_ceiling(PipelineConfig(per_task=True, refinement_iterations=1)) == 4 + 48 + 1


JAMAICA_ONE_SHOT = (
    ("substring", "Task: Entity Extraction", "<entities>\nJamaica\n</entities>\n<answers>\nEnglish\n</answers>"),
    ("substring", "Task: Question Answering", "<answers>\nEnglish\n</answers>"),
)


def test_scoring_single_iteration_makes_two_calls(jamaica_store):
    llm = script(*JAMAICA_ONE_SHOT)
    result = run_pipeline("What language is spoken in Jamaica?", jamaica_store, llm,
                          PipelineConfig(refinement_iterations=1, agentic=False))
    assert result.answers == ["English"]
    assert call_budget(result.trace) == len(llm.call_log) == 2
    assert events(result, "scoring")[0]["added"] > 0


def test_agentic_immediate_finish_makes_four_calls(jamaica_store):
    llm = script(("substring", "Task: Entity Extraction", "<entities>\nJamaica\n</entities>"),
                 ("substring", "Task: Question Answering", "<answers>\nEnglish\n</answers>"),
                 ("substring", "Task: Relation Selection", "<selected>\nlanguage_spoken\n</selected>"),
                 ("substring", "Task: Entity Selection", "<next-entities>\nFINISH\n</next-entities>"))
    result = run_pipeline("What language is spoken in Jamaica?", jamaica_store, llm,
                          PipelineConfig(refinement_iterations=1, scoring=False, top_m=1))
    assert call_budget(result.trace) == len(llm.call_log) == 4
    assert ("Jamaica", "language_spoken", "English") in {t.key for t in result.context.triplets}


def test_zero_refinement_iterations_is_direct_answer(jamaica_store):
    llm = script(("substring", "Task: Question Answering", "<answers>\nEnglish\n</answers>"))
    result = run_pipeline("What language is spoken in Jamaica?", jamaica_store, llm,
                          PipelineConfig(refinement_iterations=0))
    assert result.answers == ["English"]
    assert len(result.context) == 0
    assert call_budget(result.trace) == len(llm.call_log) == 1


def test_empty_entities_break_and_drafts_survive(jamaica_store):
    llm = script(("substring", "Task: Entity Extraction", "<entities>\n</entities>\n<answers>\nEnglish\n</answers>"),
                 ("substring", "Task: Question Answering", "<answers>\n</answers>"))
    result = run_pipeline("q?", jamaica_store, llm)
    assert [e["reason"] for e in events(result, "terminate")] == ["no entities"]
    assert result.answers == result.draft_answers == ["English"]
    assert events(result, "answer")[0]["draft_fallback"] is True


def test_linker_finish_terminates(cwq_store):
    llm = script(("substring", "Task: Entity Extraction", "<entities>\nFINISH\n</entities>"),
                 ("substring", "Task: Question Answering", "<answers>\nx\n</answers>"))
    result = run_pipeline(Q, cwq_store, llm)
    assert events(result, "terminate")[0]["reason"] == "linker finished"
    assert result.answers == ["x"]


def test_no_new_entities_terminates(cwq_store):
    same = "<entities>\nStan Kasten\n</entities>"
    llm = script(("substring", "Task: Entity Extraction", same),
                 ("substring", "Task: Relevant Entity Extraction", same),
                 ("substring", "Task: Question Answering", "<answers>\nx\n</answers>"))
    result = run_pipeline(Q, cwq_store, llm, PipelineConfig(agentic=False, scoring=False, refinement_iterations=5))
    [term] = events(result, "terminate")
    assert term == {"event": "terminate", "iteration": 2, "reason": "no new entities"}
    assert len(events(result, "linker")) == 2


@pytest.mark.parametrize("source,flag", [("scoring", "scoring"), ("query", "query"), ("agentic", "agentic"),
                                         ("follow", "paths")])
def test_strategy_isolation_differential(cwq_store, fixtures_dir, source, flag):
    full, _ = cwq_run(cwq_store, fixtures_dir)
    off, _ = cwq_run(cwq_store, fixtures_dir, **{flag: False})
    assert keys(full.context.without(source)) == keys(off.context)


def test_context_only_grows_across_iterations(cwq_store, fixtures_dir):
    result, _ = cwq_run(cwq_store, fixtures_dir)
    sizes = [e["size"] for e in events(result, "context")]
    assert sizes == sorted(sizes) and sizes[0] > 0


def test_failing_strategy_only_removes_its_items(cwq_store, fixtures_dir, monkeypatch):
    import kgrag.orchestrator as orch

    def boom(*args, **kwargs):
        raise RuntimeError("index offline")

    baseline, _ = cwq_run(cwq_store, fixtures_dir)
    monkeypatch.setattr(orch, "text_retrieve", boom)
    broken, _ = cwq_run(cwq_store, fixtures_dir)
    assert broken.ok and broken.answers == baseline.answers
    errors = events(broken, "strategy_error")
    assert errors and all(e["strategy"] == "scoring" for e in errors)
    assert keys(broken.context) == keys(baseline.context.without(Source.SCORING))


class DownAfter:
    def __init__(self, inner, ok_calls):
        self.inner = inner
        self.ok_calls = ok_calls
        self.n = 0

    def complete(self, prompt):
        self.n += 1
        if self.n > self.ok_calls:
            raise TransportError("connection reset")
        return self.inner.complete(prompt)


def test_linker_transport_failure_returns_error_result(cwq_store, fixtures_dir):
    llm = DownAfter(ScriptedLLM.from_file(fixtures_dir / "cwq_script.yaml"), 5)
    result = run_pipeline(Q, cwq_store, llm, PipelineConfig(scoring=False))
    assert not result.ok and result.answers == []
    assert events(result, "error")[0]["stage"] == "linker"
    assert len(result.context) > 0
    assert call_budget(result.trace) == llm.n


def test_answer_transport_failure(jamaica_store):
    llm = DownAfter(script(*JAMAICA_ONE_SHOT), 1)
    result = run_pipeline("What language is spoken in Jamaica?", jamaica_store, llm,
                          PipelineConfig(refinement_iterations=1, agentic=False))
    assert result.error and events(result, "error")[0]["stage"] == "answer"
    assert result.draft_answers == ["English"]
    assert call_budget(result.trace) == llm.n == 3


def test_unscripted_prompt_propagates(cwq_store):
    with pytest.raises(UnscriptedPromptError):
        run_pipeline(Q, cwq_store, script(("substring", "nothing like this", "x")))


class Recorder:
    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.inner.complete(prompt)


def test_northwind_query_repair(northwind_store, fixtures_dir):
    llm = Recorder(ScriptedLLM.from_file(fixtures_dir / "northwind_script.yaml"))
    result = run_pipeline(NW_Q, northwind_store, llm, PipelineConfig(agentic=False, scoring=False))
    first, second = events(result, "query")
    assert first["iteration"] == 1 and first["result"]["rows"] == [[None]]
    assert second["iteration"] == 2 and second["result"]["rows"] == [[160.75 / 3]]
    assert ":ORDERS]" in second["query"]
    assert result.answers == ["53.583333333333336"]
    # the null result is what the second linker prompt saw
    assert "Result: averageUnitPrice: null" in llm.prompts[1]


def test_seed_entities_join_first_iteration(cwq_store, fixtures_dir):
    llm = ScriptedLLM.from_file(fixtures_dir / "cwq_script.yaml")
    result = run_pipeline(Q, cwq_store, llm, PipelineConfig(scoring=False, agentic=False),
                          seed_entities=["New York Yankees"])
    linked_paths = {p.nodes[0] for p in result.context.paths}
    assert "Stan Kasten" in linked_paths


def test_pipeline_object_reuses_indexes(cwq_store, fixtures_dir):
    pipe = Pipeline(cwq_store, ScriptedLLM.from_file(fixtures_dir / "cwq_script.yaml"))
    a = pipe.run(Q)
    index = pipe.text_index()
    b = pipe.run(Q)
    assert pipe.text_index() is index
    assert a.trace_jsonl() == b.trace_jsonl()


def test_context_dedup_keeps_provenance():
    ctx = RetrievalContext()
    t = Triplet("a", "r", "b")
    assert ctx.add(t, Source.AGENTIC, 1)
    assert not ctx.add(Triplet("a", "r", "b"), Source.SCORING, 2)
    [item] = ctx.items
    assert item.provenance == (Source.AGENTIC, Source.SCORING) and item.iteration == 1
    assert keys(ctx.without(Source.AGENTIC)) == keys(ctx)
    assert len(ctx.without(Source.AGENTIC).without(Source.SCORING)) == 0


def test_select_prefers_query_then_paths_then_agentic_then_scoring():
    ctx = RetrievalContext()
    ctx.add(Triplet("s1", "r", "s2"), Source.SCORING, 1)
    ctx.add(Triplet("a1", "r", "a2"), Source.AGENTIC, 1)
    ctx.add(GroundedPath(("p1", "p2"), ("r",), (Direction.FORWARD,)), Source.FOLLOW, 1)
    ctx.add(QueryResult("MATCH (n) RETURN n", ResultTable(["n"], [("x",)])), Source.QUERY, 1)
    costs = [len(i.render().split()) for i in ctx.items]
    assert costs == [5, 5, 5, 8]
    kinds = lambda budget: [i.kind for i in ctx.select(budget)]
    assert kinds(8) == ["query"]
    assert kinds(13) == ["path", "query"]
    assert kinds(18) == ["triplet", "path", "query"]
    assert [i.provenance[0] for i in ctx.select(18)] == [Source.AGENTIC, Source.FOLLOW, Source.QUERY]
    assert len(ctx.select(None)) == len(ctx.select(23)) == 4
    assert ctx.select(4) == []


def test_select_respects_budget_in_verbalized_context(cwq_store, fixtures_dir):
    result, _ = cwq_run(cwq_store, fixtures_dir)
    for budget in (5, 20, 60, 200):
        assert len(result.context.verbalize(cwq_store, budget).split()) <= budget


@pytest.mark.parametrize("data,message", [
    ({"top_m": 0}, "top_m"),
    ({"agent_iterations": True}, "agent_iterations"),
    ({"refinement_iterations": -1}, "refinement_iterations"),
    ({"k": 0}, "k must"),
    ({"link_mode": "fuzzy"}, "link_mode"),
    ({"scoring_method": "bm25"}, "scoring_method"),
    ({"bogus": 1}, "unknown config keys: bogus"),
])
def test_config_errors(data, message):
    with pytest.raises(ConfigError, match=message):
        PipelineConfig.from_mapping(data)


def test_config_round_trip_and_defaults():
    config = PipelineConfig()
    assert PipelineConfig.from_mapping(config.to_dict()) == config
    assert (config.refinement_iterations, config.agent_iterations, config.top_m) == (2, 3, 3)
    assert (config.k_r, config.k_t, config.hops, config.frontier_cap) == (20, 100, 2, 8)
    assert config.context_budget == 8000
    assert config.replace(k=5).k == 5
