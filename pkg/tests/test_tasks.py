import functools
import random

import pytest

from localbench.models import RequestRecord, RequestStatus, TaskInstance
from localbench.tasks import DatasetError, generate_prompts, get_task, score_run
from localbench.tasks.mmlu import extract_choice, score_mmlu
from localbench.tasks.qa import f1_score, normalize_answer, score_qa_exact_match, score_qa_f1
from localbench.tasks.sql import extract_sql, has_top_level_order_by, score_sql_execution
from localbench.tasks.summarization import rouge_l, score_rouge_l
from localbench.utils.database import SqlDatabaseError

from conftest import write_jsonl


def brute_force_lcs(a, b):
    @functools.lru_cache(maxsize=None)
    def lcs(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + lcs(i + 1, j + 1)
        return max(lcs(i + 1, j), lcs(i, j + 1))
    return lcs(0, 0)


def test_rouge_l_matches_brute_force_lcs():
    rng = random.Random(1234)
    vocabulary = ["a", "b", "c", "d", "e"]
    for _ in range(1000):
        hyp = [rng.choice(vocabulary) for _ in range(rng.randint(0, 9))]
        ref = [rng.choice(vocabulary) for _ in range(rng.randint(0, 9))]
        lcs = brute_force_lcs(tuple(hyp), tuple(ref))
        expected = 0.0 if lcs == 0 else 2 * (lcs / len(hyp)) * (lcs / len(ref)) / ((lcs / len(hyp)) + (lcs / len(ref)))
        assert rouge_l(" ".join(hyp), " ".join(ref)) == pytest.approx(expected, abs=1e-12)


def test_rouge_l_is_case_insensitive_and_takes_best_reference():
    assert rouge_l("The Cat", "the cat") == 1.0
    instances = [TaskInstance("s1", "prompt", references=["nothing alike", "the cat sat"])]
    score = score_rouge_l([("s1", "the cat sat")], instances)
    assert score.value == 1.0


def test_squad_f1_hand_worked_example():
    # articles dropped: [cat, sat] against [cat, sat, on, mat] -> P=1, R=1/2
    assert f1_score("the cat sat", "cat sat on the mat") == pytest.approx(2 / 3)


def test_squad_empty_conventions():
    assert f1_score("", "") == 1.0
    assert f1_score("Paris", "") == 0.0
    assert f1_score("", "Paris") == 0.0
    assert normalize_answer("The  Eiffel, Tower!") == "eiffel tower"


def test_qa_scores_unanswerable_and_max_over_references():
    instances = [
        TaskInstance("paris", "p", references=["Paris", "in Paris"]),
        TaskInstance("none", "p", references=[]),
    ]
    outputs = [("paris", "in Paris."), ("none", "unanswerable")]
    f1 = score_qa_f1(outputs, instances)
    em = score_qa_exact_match(outputs, instances)
    assert f1.value == 1.0
    assert em.value == 1.0
    assert [v for _, v in em.per_instance] == [1.0, 1.0]


def test_extract_choice():
    assert extract_choice("The answer is B.") == "B"
    assert extract_choice("b) because") == "B"
    assert extract_choice("I think (C), not a") == "C"
    assert extract_choice("no idea") is None


def test_extract_choice_takes_first_letter_regardless_of_case():
    assert extract_choice("a, because B is a distractor") == "A"
    assert extract_choice("d) Paris (not C)") == "D"
    assert extract_choice("Answer: c. Option A is wrong") == "C"
    instances = [TaskInstance("1", "p", references=["A"])]
    assert score_mmlu([("1", "a, because B is a distractor")], instances).value == 1.0


def test_mmlu_accuracy():
    instances = [TaskInstance("1", "p", references=["A"]), TaskInstance("2", "p", references=["D"])]
    score = score_mmlu([("1", "A"), ("2", "Answer: B")], instances)
    assert score.metric_name == "accuracy"
    assert score.value == 0.5


def test_generate_prompts_is_deterministic(mmlu_dataset):
    first, _ = generate_prompts("mmlu", str(mmlu_dataset), samples=5, seed=3)
    second, _ = generate_prompts("mmlu", str(mmlu_dataset), samples=5, seed=3)
    other, _ = generate_prompts("mmlu", str(mmlu_dataset), samples=5, seed=4)
    assert [i.id for i in first] == [i.id for i in second]
    assert [i.prompt for i in first] == [i.prompt for i in second]
    assert [i.id for i in first] != [i.id for i in other]
    assert len({i.id for i in first}) == 5
    assert "A. " in first[0].prompt and first[0].references == ["A"]


def test_generate_prompts_warns_when_dataset_is_short(mmlu_dataset):
    instances, warnings = generate_prompts("mmlu", str(mmlu_dataset), samples=100, seed=0)
    assert len(instances) == 12
    assert warnings and "fewer than samples" in warnings[0]


def test_dataset_errors_carry_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"question": "q", "choices": ["a","b","c","d"], "answer": "A"}\n{not json\n', encoding="utf-8")
    with pytest.raises(DatasetError) as excinfo:
        generate_prompts("mmlu", str(path), samples=2, seed=0)
    assert excinfo.value.line == 2

    missing = write_jsonl(tmp_path / "missing.jsonl", [{"question": "q"}])
    with pytest.raises(DatasetError) as excinfo:
        generate_prompts("mmlu", str(missing), samples=1, seed=0)
    assert "choices" in str(excinfo.value)

    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        generate_prompts("qa", str(empty), samples=1, seed=0)

    with pytest.raises(DatasetError):
        generate_prompts("qa", str(tmp_path / "absent.jsonl"), samples=1, seed=0)


def test_duplicate_ids_are_rejected(tmp_path):
    row = {"id": "x", "question": "q", "context": "c", "answers": ["c"]}
    path = write_jsonl(tmp_path / "dup.jsonl", [row, row])
    with pytest.raises(DatasetError):
        generate_prompts("qa", str(path), samples=2, seed=0)


def test_extract_sql_from_prose_and_fences():
    assert extract_sql("```sql\nSELECT 1;\n```") == "SELECT 1;"
    assert extract_sql("Sure! SELECT region FROM sales; Hope this helps") == "SELECT region FROM sales;"
    assert extract_sql("```\nSELECT 2\n```") == "SELECT 2"


def test_order_by_detection_ignores_subqueries():
    assert has_top_level_order_by("SELECT a FROM t ORDER BY a")
    assert not has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a)")
    assert not has_top_level_order_by("SELECT 'order by' FROM t")


async def test_sql_execution_accuracy(sql_dataset):
    instances, _ = generate_prompts("sql", str(sql_dataset), samples=2, seed=0)
    by_id = {i.id: i for i in instances}
    assert "Schema:" in by_id["top"].prompt

    outputs = [
        # same rows in a different order: gold has no ORDER BY
        ("by-region", "SELECT region, SUM(amount) FROM sales GROUP BY region ORDER BY region DESC"),
        # gold orders descending, prediction ascending
        ("top", "```sql\nSELECT amount FROM sales ORDER BY amount ASC\n```"),
    ]
    score = await score_sql_execution(outputs, instances)
    assert dict(score.per_instance) == {"by-region": 1.0, "top": 0.0}

    broken = [("by-region", "SELEC nonsense"), ("top", "SELECT amount FROM sales ORDER BY amount DESC")]
    score = await score_sql_execution(broken, instances)
    assert dict(score.per_instance) == {"by-region": 0.0, "top": 1.0}


async def test_sql_missing_database_is_an_error(tmp_path):
    instance = TaskInstance("x", "p", references=["SELECT 1"],
                            aux={"db_path": str(tmp_path / "nope.sqlite"), "gold_sql": "SELECT 1"})
    with pytest.raises(SqlDatabaseError):
        await score_sql_execution([("x", "SELECT 1")], [instance])


async def test_score_run_counts_failures_as_zero(qa_dataset):
    plugin = get_task("qa")
    instances, _ = plugin.generate_prompts(str(qa_dataset), samples=2, seed=0)
    records = [
        RequestRecord(seq=0, instance_id="paris", arrival_time=0, dispatch_time=0, output_text="Paris"),
        RequestRecord(seq=1, instance_id="none", arrival_time=0, dispatch_time=0,
                      status=RequestStatus.HTTP_ERROR, http_status=500),
    ]
    scores = await score_run(plugin, records, instances)
    assert [s.metric_name for s in scores] == ["f1", "exact_match"]
    assert all(s.value == 0.5 for s in scores)
    assert all(len(s.per_instance) == 2 for s in scores)


async def test_custom_task(tmp_path):
    template = tmp_path / "template.txt"
    template.write_text("Translate to French: {text}\n", encoding="utf-8")
    dataset = write_jsonl(tmp_path / "custom.jsonl", [{"id": "c1", "text": "cat", "reference": "chat"}])

    plugin = get_task("custom", str(template), custom_metric="exact_match")
    instances, _ = plugin.generate_prompts(str(dataset), samples=1, seed=0)
    assert instances[0].prompt == "Translate to French: cat\n"
    scores = await plugin.quality_metrics([("c1", "Chat")], instances)
    assert scores[0].metric_name == "exact_match" and scores[0].value == 1.0


def test_unknown_task_is_rejected():
    with pytest.raises(DatasetError):
        get_task("translation")
