"""Graph validation, dependency-zeroed scoring, aggregation, reports."""

import numpy as np
import pytest

from semcond import dpgscore as dg
from semcond.dpgscore import PromptGraph, Question


def q(qid, level1="Entity", deps=()):
    return Question(id=qid, text=qid, level1=level1, level2="x", depends_on=list(deps))


def three_question_graph():
    # q1 root, q2 depends on q1, q3 independent
    return PromptGraph("p0", [q("q1"), q("q2", "Attribute", ["q1"]), q("q3")])


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_validate_ok():
    assert dg.validate_graph(three_question_graph()) == []


def test_validate_self_dependency():
    g = PromptGraph("p", [q("a", deps=["a"])])
    assert any("itself" in v or "cycle" in v for v in dg.validate_graph(g))


def test_validate_duplicate_id():
    g = PromptGraph("p", [q("a"), q("a")])
    assert any("duplicate" in v for v in dg.validate_graph(g))


def test_validate_unresolved_dep():
    g = PromptGraph("p", [q("a", deps=["ghost"])])
    assert any("resolve" in v for v in dg.validate_graph(g))


def test_validate_cycle():
    g = PromptGraph("p", [q("a", deps=["b"]), q("b", deps=["a"])])
    assert any("cycle" in v for v in dg.validate_graph(g))


def test_validate_empty():
    assert dg.validate_graph(PromptGraph("p", [])) != []


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def test_score_image_all_yes():
    g = three_question_graph()
    assert dg.score_image({"q1": True, "q2": True, "q3": True}, g) == 1.0


def test_score_image_all_no():
    g = three_question_graph()
    assert dg.score_image({"q1": False, "q2": False, "q3": False}, g) == 0.0


def test_score_image_dependency_zeroing():
    # root no, dependent yes, independent yes -> (0 + 0 + 1)/3
    g = three_question_graph()
    s = dg.score_image({"q1": False, "q2": True, "q3": True}, g)
    assert abs(s - 1.0 / 3.0) < 1e-12


def test_score_image_missing_answer_rejected():
    g = three_question_graph()
    with pytest.raises(ValueError):
        dg.score_image({"q1": True, "q2": True}, g)
    with pytest.raises(ValueError):
        dg.score_image({"q1": True, "q2": True, "q3": True, "q4": True}, g)


def test_transitive_ancestors():
    g = PromptGraph("p", [q("a"), q("b", deps=["a"]), q("c", deps=["b"])])
    # a=no zeroes c even though c's direct parent b answered yes
    assert dg.score_image({"a": False, "b": True, "c": True}, g) == 0.0


def test_score_prompt_identical_images():
    g = three_question_graph()
    ans = {"q1": True, "q2": False, "q3": True}
    single = dg.score_image(ans, g)
    assert dg.score_prompt([ans] * 4, g) == single


def test_score_prompt_mean():
    g = PromptGraph("p", [q("a")])
    sets = [{"a": True}, {"a": True}, {"a": False}, {"a": False}]
    assert dg.score_prompt(sets, g) == 0.5


def test_score_prompt_wrong_count_rejected():
    g = three_question_graph()
    with pytest.raises(ValueError):
        dg.score_prompt([{"q1": True, "q2": True, "q3": True}] * 3, g)


def test_score_prompt_mixed_fixture():
    g = three_question_graph()
    sets = [
        {"q1": True, "q2": True, "q3": True},     # 1.0
        {"q1": False, "q2": True, "q3": True},    # 1/3
        {"q1": False, "q2": True, "q3": True},    # 1/3
        {"q1": False, "q2": False, "q3": False},  # 0.0
    ]
    assert abs(dg.score_prompt(sets, g) - 0.41665) < 1e-4


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregate_category_vs_overall_differ():
    """Categories pool raw answers; overall applies dependency zeroing."""
    g = PromptGraph("p", [q("q1", "Entity"), q("q2", "Attribute", ["q1"]),
                          q("q3", "Entity")])
    answers = {"q1": False, "q2": True, "q3": True}
    res = dg.aggregate([(g, [answers])])
    assert abs(res.overall - 1.0 / 3.0) < 1e-12
    assert res.per_category["Entity"] == 0.5
    assert res.per_category["Attribute"] == 1.0


def test_aggregate_empty_category_omitted():
    g = PromptGraph("p", [q("q1", "Entity")])
    res = dg.aggregate([(g, [{"q1": True}])])
    assert "Relation" not in res.per_category
    assert res.per_category == {"Entity": 1.0}


def test_aggregate_all_yes():
    g = three_question_graph()
    ans = {k: True for k in ("q1", "q2", "q3")}
    res = dg.aggregate([(g, [ans, ans])])
    assert res.overall == 1.0
    assert all(v == 1.0 for v in res.per_category.values())


def test_aggregate_permutation_invariant():
    g1 = PromptGraph("p1", [q("a")])
    g2 = PromptGraph("p2", [q("a"), q("b", "Relation", ["a"])])
    e1 = (g1, [{"a": True}])
    e2 = (g2, [{"a": True, "b": False}])
    r_fwd = dg.aggregate([e1, e2])
    r_rev = dg.aggregate([e2, e1])
    assert r_fwd.overall == r_rev.overall
    assert r_fwd.per_category == r_rev.per_category


# ---------------------------------------------------------------------------
# properties against a brute-force evaluator
# ---------------------------------------------------------------------------


def brute_force_score(answers, graph):
    """Independent oracle: expand ancestor sets by fixpoint iteration."""
    parents = {qq.id: set(qq.depends_on) for qq in graph.questions}
    ancestors = {k: set(v) for k, v in parents.items()}
    changed = True
    while changed:
        changed = False
        for k in ancestors:
            extra = set()
            for a in ancestors[k]:
                extra |= ancestors[a]
            if not extra <= ancestors[k]:
                ancestors[k] |= extra
                changed = True
    total = 0
    for qq in graph.questions:
        ok = answers[qq.id] and all(answers[a] for a in ancestors[qq.id])
        total += int(ok)
    return total / len(graph.questions)


def random_dag(rng, n):
    qs = []
    for i in range(n):
        deps = [f"n{j}" for j in range(i) if rng.random() < 0.4]
        cat = dg.LEVEL1_CATEGORIES[rng.integers(len(dg.LEVEL1_CATEGORIES))]
        qs.append(Question(id=f"n{i}", text="", level1=cat, level2="", depends_on=deps))
    return PromptGraph("r", qs)


def test_brute_force_equivalence():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        g = random_dag(rng, int(rng.integers(1, 11)))
        answers = {qq.id: bool(rng.random() < 0.6) for qq in g.questions}
        assert dg.score_image(answers, g) == brute_force_score(answers, g)


def test_monotone_in_answer_flips():
    """Flipping any answer no -> yes never decreases the image score."""
    rng = np.random.default_rng(8)
    trials = 0
    while trials < 10000:
        g = random_dag(rng, int(rng.integers(2, 11)))
        answers = {qq.id: bool(rng.random() < 0.5) for qq in g.questions}
        noes = [k for k, v in answers.items() if not v]
        if not noes:
            continue
        base = dg.score_image(answers, g)
        flip = dict(answers)
        flip[noes[int(rng.integers(len(noes)))]] = True
        assert dg.score_image(flip, g) >= base
        trials += 1


def test_dependency_dominance():
    rng = np.random.default_rng(9)
    for _ in range(200):
        g = random_dag(rng, 8)
        root = g.questions[0].id
        answers = {qq.id: True for qq in g.questions}
        answers[root] = False
        s = dg.score_image(answers, g)
        descendants = {qid for qid, anc in _ancestor_map(g).items() if root in anc}
        expected = (len(g.questions) - 1 - len(descendants)) / len(g.questions)
        assert s == expected


def _ancestor_map(graph):
    return dg._ancestors(graph)


# ---------------------------------------------------------------------------
# reports and wire formats
# ---------------------------------------------------------------------------


def test_emit_report_round_trip(tmp_path):
    import csv

    g = three_question_graph()
    sets = [{"q1": True, "q2": True, "q3": False}] * 4
    res = dg.aggregate([(g, sets)])
    paths = dg.emit_report(res, tmp_path)
    with open(paths[0], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["prompt_id", "image_idx", "score"]
    for row, (pid, idx, score) in zip(rows[1:], res.per_image):
        assert row[0] == pid and int(row[1]) == idx
        assert float(row[2]) == score


def test_emit_report_byte_stable(tmp_path):
    g = three_question_graph()
    sets = [{"q1": True, "q2": False, "q3": True}] * 4
    res = dg.aggregate([(g, sets)])
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        dg.emit_report(res, d)
    for name in ("scores.csv", "summary.csv", "results.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_graph_jsonl_round_trip(tmp_path):
    g = three_question_graph()
    path = tmp_path / "graphs.jsonl"
    dg.save_graphs(path, [g])
    back = dg.load_graphs(path)[0]
    assert back.prompt_id == g.prompt_id
    assert [qq.id for qq in back.questions] == [qq.id for qq in g.questions]
    assert [qq.depends_on for qq in back.questions] == [qq.depends_on for qq in g.questions]


def test_answers_jsonl_round_trip(tmp_path):
    rows = [("p0", 0, {"q1": True, "q2": False}), ("p0", 1, {"q1": False, "q2": False})]
    path = tmp_path / "answers.jsonl"
    dg.save_answers(path, rows)
    assert dg.load_answers(path) == rows
