import itertools
import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from kgrag.eval import (
    DatasetError,
    ExampleScore,
    MetricReport,
    QaExample,
    evaluate_batch,
    hit,
    hit_at_2,
    load_dataset,
    mean,
    normalize_answer,
    recall_at_k,
)
from kgrag.graph_store import Triplet
from kgrag.llm import ScriptedLLM
from kgrag.orchestrator import PipelineConfig, QueryResult, RetrievalContext
from kgrag.cypher import ResultTable
from kgrag.paths import Direction, GroundedPath

GOLD = ["1988 World Series"]


def test_hit_examples():
    assert hit(["1988 World Series"], ["1981 World Series", "1988 World Series"]) == 1
    assert hit([], GOLD) == 0
    assert hit(["english"], ["English"]) == 1


def test_hit_normalisation_is_whole_string():
    assert hit(["  ENGLISH \n"], ["English"]) == 1
    assert hit(["Thüringer"], ["Thüringer"]) == 1
    assert hit(["English language"], ["English"]) == 0
    assert normalize_answer(" Straße ") == "strasse"


@pytest.mark.parametrize("kg_ok,direct_ok", list(itertools.product([True, False], repeat=2)))
def test_hit_at_2_truth_table(kg_ok, direct_ok):
    kg = ["1988 World Series" if kg_ok else "1963 World Series", "1988 World Series"]
    direct = ["1988 World Series" if direct_ok else "1959 World Series"]
    assert hit_at_2(kg, direct, GOLD) == int(kg_ok or direct_ok)


def test_hit_at_2_uses_only_top_answer_of_each_source():
    assert hit_at_2(["wrong", "1988 World Series"], ["also wrong", "1988 World Series"], GOLD) == 0
    assert hit_at_2([], [], GOLD) == 0


def ranked_context(gold_rank: int, total: int = 6) -> RetrievalContext:
    ctx = RetrievalContext()
    for i in range(1, total + 1):
        tail = "1988 World Series" if i == gold_rank else f"filler {i}"
        ctx.add(Triplet(f"team {i}", "championships", tail), "agentic", 1)
    return ctx


@pytest.mark.parametrize("k", range(1, 6))
def test_recall_gold_at_rank_k_plus_one(k):
    ctx = ranked_context(k + 1)
    assert recall_at_k(ctx, GOLD, k) == 0
    assert recall_at_k(ctx, GOLD, k + 1) == 1


def test_recall_rank_one_and_absent():
    assert all(recall_at_k(ranked_context(1), GOLD, k) == 1 for k in range(1, 8))
    assert all(recall_at_k(ranked_context(99), GOLD, k) == 0 for k in range(1, 8))


def test_recall_k_must_be_positive():
    with pytest.raises(ValueError):
        recall_at_k(ranked_context(1), GOLD, 0)


def test_recall_reads_path_endpoints_and_query_cells():
    ctx = RetrievalContext()
    ctx.add(GroundedPath(("Stan Kasten", "m.0_yv0g3", "Los Angeles Dodgers"), ("a", "b"),
                         (Direction.FORWARD, Direction.FORWARD)), "follow", 1)
    ctx.add(QueryResult("q", ResultTable(["x"], [("1988 World Series",)])), "query", 1)
    assert recall_at_k(ctx, ["Los Angeles Dodgers"], 1) == 1
    assert recall_at_k(ctx, ["m.0_yv0g3"], 2) == 0
    assert recall_at_k(ctx, GOLD, 1) == 0
    assert recall_at_k(ctx, GOLD, 2) == 1


def test_recall_maps_ids_to_names(cwq_store):
    items = [Triplet("m.0_yv0g3", "organization.leadership.organization", "Los Angeles Dodgers")]
    assert recall_at_k(items, ["los angeles dodgers"], 1, cwq_store) == 1


answers = st.lists(st.sampled_from(["a", "b", "c", "A", " b"]), max_size=4)


@settings(max_examples=200, deadline=None)
@given(answers, answers, st.sampled_from(["a", "b", "c", "z"]))
def test_hit_monotone_in_predictions(preds, extra, gold):
    assert hit(preds + extra, [gold]) >= hit(preds, [gold])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 8), st.integers(1, 8))
def test_recall_monotone_in_k(gold_rank, total):
    ctx = ranked_context(gold_rank, total)
    values = [recall_at_k(ctx, GOLD, k) for k in range(1, total + 2)]
    assert values == sorted(values)


def score(i, h, h2, r, gold=True, error=None):
    return ExampleScore(str(i), "q", ["g"] if gold else [], [], [], h, h2, r, error)


bits = st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1), st.booleans())


@settings(max_examples=200, deadline=None)
@given(st.lists(bits, max_size=30))
def test_aggregates_equal_exact_means(rows):
    report = MetricReport([score(i, *row) for i, row in enumerate(rows)], k=10)
    scored = [row for row in rows if row[3]]
    n = len(scored)
    for attr, col in (("hit_rate", 0), ("hit_at_2_rate", 1), ("recall_rate", 2)):
        expected = Fraction(sum(r[col] for r in scored), n) if n else Fraction(0)
        assert getattr(report, attr) == expected
    assert report.counts["scored"] == n
    assert report.counts["unscoreable"] == len(rows) - n


def test_mean_and_report_dict():
    assert mean([1, 0, 1]) == Fraction(2, 3)
    report = MetricReport([score(0, 1, 1, 0), score(1, 0, 1, 1), score(2, 1, 1, 1)], k=5)
    data = report.to_dict()
    assert data["hit"] == {"value": 0.666667, "exact": "2/3"}
    assert data["recall_at_5"]["exact"] == "2/3"
    assert data["hit_at_2"]["exact"] == "3/3"
    assert MetricReport([score(0, 0, 0, 0), score(1, 0, 0, 0)], k=5).to_dict()["hit"]["exact"] == "0/2"
    assert MetricReport([], k=5).to_dict()["hit"] == {"value": 0.0, "exact": "0/0"}


def test_load_dataset(fixtures_dir):
    examples = load_dataset(fixtures_dir / "qa.jsonl")
    assert [e.id for e in examples] == ["cwq-1", "cwq-2", "cwq-3"]
    assert examples[1].seed_entities == ("Stan Kasten",)
    assert not examples[2].scoreable


@pytest.mark.parametrize("content,message", [
    ('{"id": 1, "question": "q"}\nnot json\n', "line 2"),
    ('{"question": "q"}\n', "missing field 'id'"),
    ('{"id": 1, "question": "q"}\n{"id": 1, "question": "r"}\n', "duplicate id"),
    ('{"id": 1, "question": "  "}\n', "empty question"),
    ('[1, 2]\n', "expected an object"),
])
def test_dataset_errors(tmp_path, content, message):
    path = tmp_path / "d.jsonl"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(DatasetError, match=message):
        load_dataset(path)


def test_evaluate_batch_writes_report(tmp_path, fixtures_dir, cwq_store, cwq_llm):
    out = tmp_path / "out"
    report = evaluate_batch(fixtures_dir / "qa.jsonl", cwq_store, cwq_llm, PipelineConfig(scoring=False),
                            out_dir=out)
    assert [e.hit for e in report.per_example] == [1, 0, 0]
    assert report.hit_rate == Fraction(1, 2)
    saved = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert saved["hit"]["exact"] == "1/2"
    assert saved["counts"] == {"examples": 3, "scored": 2, "unscoreable": 1, "errors": 0}
    lines = (out / "examples.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["id"] for line in lines] == ["cwq-1", "cwq-2", "cwq-3"]


def test_evaluate_batch_parallel_matches_serial(fixtures_dir, cwq_store):
    def run(workers):
        llm = ScriptedLLM.from_file(fixtures_dir / "cwq_script.yaml")
        report = evaluate_batch(fixtures_dir / "qa.jsonl", cwq_store, llm, PipelineConfig(scoring=False),
                                workers=workers)
        return [e.to_dict() for e in report.per_example]

    assert run(1) == run(3)


def test_pipeline_errors_are_scored_zero_and_counted(cwq_store):
    llm = ScriptedLLM.from_data([{"text": "never matches anything", "response": "x"}])
    report = evaluate_batch([QaExample("e1", "q?", ("1988 World Series",))], cwq_store, llm)
    [only] = report.per_example
    assert only.hit == 0 and only.error
    assert report.counts["errors"] == 1
    assert report.hit_rate == 0


def test_workers_must_be_positive(cwq_store, cwq_llm):
    with pytest.raises(ValueError):
        evaluate_batch([], cwq_store, cwq_llm, workers=0)
