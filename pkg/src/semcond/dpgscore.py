"""Dependency-aware scoring of per-question yes/no answers on prompt graphs.

A question earns credit only when it and every transitive ancestor were
answered yes. The overall benchmark number is the mean over prompts of the
per-prompt mean over images of that dependency-zeroed accuracy. Category
columns are computed differently on purpose: they pool the raw answers of
all (image, question) pairs in a level-1 category, without zeroing.
"""

import csv
import json
from dataclasses import dataclass, field

LEVEL1_CATEGORIES = ("Global", "Entity", "Attribute", "Relation", "Other")


@dataclass
class Question:
    id: str
    text: str
    level1: str
    level2: str
    depends_on: list = field(default_factory=list)
    predicate: dict = None


@dataclass
class PromptGraph:
    prompt_id: str
    questions: list = field(default_factory=list)

    def by_id(self):
        return {q.id: q for q in self.questions}


def validate_graph(graph: PromptGraph):
    """Returns a list of violations; empty means the graph is well formed."""
    violations = []
    if not graph.questions:
        violations.append("graph has no questions")
    ids = [q.id for q in graph.questions]
    seen = set()
    for qid in ids:
        if qid in seen:
            violations.append(f"duplicate question id {qid!r}")
        seen.add(qid)
    for q in graph.questions:
        if q.level1 not in LEVEL1_CATEGORIES:
            violations.append(f"{q.id}: unknown level-1 category {q.level1!r}")
        for dep in q.depends_on:
            if dep not in seen:
                violations.append(f"{q.id}: dependency {dep!r} does not resolve")
            if dep == q.id:
                violations.append(f"{q.id}: depends on itself")
    # Kahn's algorithm; leftovers sit on a cycle
    deps = {q.id: set(d for d in q.depends_on if d in seen) for q in graph.questions}
    ready = [qid for qid, d in deps.items() if not d]
    done = set()
    while ready:
        qid = ready.pop()
        done.add(qid)
        for other, d in deps.items():
            if qid in d:
                d.discard(qid)
                if not d and other not in done:
                    ready.append(other)
    cyclic = sorted(set(ids) - done)
    if cyclic and len(set(ids)) == len(ids):
        violations.append(f"dependency cycle through {cyclic}")
    return violations


def _ancestors(graph: PromptGraph):
    by_id = graph.by_id()
    memo = {}

    def walk(qid):
        if qid in memo:
            return memo[qid]
        acc = set()
        for dep in by_id[qid].depends_on:
            acc.add(dep)
            acc |= walk(dep)
        memo[qid] = acc
        return acc

    for q in graph.questions:
        walk(q.id)
    return memo


def check_answers(answers: dict, graph: PromptGraph):
    want = {q.id for q in graph.questions}
    got = set(answers)
    if got != want:
        missing, extra = sorted(want - got), sorted(got - want)
        raise ValueError(f"answer keys mismatch: missing={missing} extra={extra}")


def score_image(answers: dict, graph: PromptGraph) -> float:
    """Dependency-zeroed accuracy of one image's answers, in [0, 1]."""
    check_answers(answers, graph)
    anc = _ancestors(graph)
    credit = 0
    for q in graph.questions:
        if answers[q.id] and all(answers[a] for a in anc[q.id]):
            credit += 1
    return credit / len(graph.questions)


def score_prompt(answer_sets, graph: PromptGraph, images_per_prompt: int = 4) -> float:
    if len(answer_sets) != images_per_prompt:
        raise ValueError(f"expected {images_per_prompt} answer sets, got {len(answer_sets)}")
    return sum(score_image(a, graph) for a in answer_sets) / images_per_prompt


@dataclass
class BenchResult:
    per_image: list          # (prompt_id, image_idx, score)
    per_prompt: dict         # prompt_id -> score
    overall: float
    per_category: dict       # level1 -> pooled raw-answer mean


def aggregate(entries) -> BenchResult:
    """entries: iterable of (PromptGraph, [answers per image])."""
    entries = list(entries)
    if not entries:
        raise ValueError("nothing to aggregate")
    per_image = []
    per_prompt = {}
    cat_hits = {}
    cat_total = {}
    for graph, answer_sets in entries:
        scores = [score_image(a, graph) for a in answer_sets]
        for idx, s in enumerate(scores):
            per_image.append((graph.prompt_id, idx, s))
        per_prompt[graph.prompt_id] = sum(scores) / len(scores)
        for answers in answer_sets:
            for q in graph.questions:
                cat_hits[q.level1] = cat_hits.get(q.level1, 0) + int(answers[q.id])
                cat_total[q.level1] = cat_total.get(q.level1, 0) + 1
    overall = sum(per_prompt.values()) / len(per_prompt)
    per_category = {c: cat_hits[c] / cat_total[c] for c in LEVEL1_CATEGORIES if c in cat_total}
    return BenchResult(per_image, per_prompt, overall, per_category)


# ---------------------------------------------------------------------------
# report emission and wire formats
# ---------------------------------------------------------------------------


def emit_report(result: BenchResult, outdir) -> list:
    """Writes scores.csv, summary.csv and a JSON mirror; returns the paths."""
    import os

    os.makedirs(outdir, exist_ok=True)
    scores_path = os.path.join(outdir, "scores.csv")
    with open(scores_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prompt_id", "image_idx", "score"])
        for prompt_id, idx, s in result.per_image:
            w.writerow([prompt_id, idx, repr(float(s))])
    summary_path = os.path.join(outdir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["overall", repr(float(result.overall))])
        for cat in LEVEL1_CATEGORIES:
            if cat in result.per_category:
                w.writerow([f"category_{cat}", repr(float(result.per_category[cat]))])
    json_path = os.path.join(outdir, "results.json")
    with open(json_path, "w") as fh:
        json.dump(
            {
                "overall": result.overall,
                "per_category": {c: result.per_category[c]
                                 for c in LEVEL1_CATEGORIES if c in result.per_category},
                "per_prompt": {k: result.per_prompt[k] for k in sorted(result.per_prompt)},
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    return [scores_path, summary_path, json_path]


def graph_to_record(graph: PromptGraph) -> dict:
    return {
        "prompt_id": graph.prompt_id,
        "questions": [
            {
                "id": q.id, "text": q.text, "level1": q.level1, "level2": q.level2,
                "depends_on": list(q.depends_on),
                **({"predicate": q.predicate} if q.predicate is not None else {}),
            }
            for q in graph.questions
        ],
    }


def graph_from_record(rec: dict) -> PromptGraph:
    return PromptGraph(
        prompt_id=rec["prompt_id"],
        questions=[
            Question(
                id=q["id"], text=q["text"], level1=q["level1"], level2=q["level2"],
                depends_on=list(q.get("depends_on", [])), predicate=q.get("predicate"),
            )
            for q in rec["questions"]
        ],
    )


def save_graphs(path, graphs) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), sort_keys=True) + "\n")


def load_graphs(path):
    graphs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                graphs.append(graph_from_record(json.loads(line)))
    return graphs


def save_answers(path, rows) -> None:
    """rows: iterable of (prompt_id, image_idx, {question id: bool})."""
    with open(path, "w") as fh:
        for prompt_id, idx, answers in rows:
            fh.write(json.dumps(
                {"prompt_id": prompt_id, "image_idx": idx, "answers": answers},
                sort_keys=True) + "\n")


def load_answers(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                rows.append((rec["prompt_id"], int(rec["image_idx"]),
                             {k: bool(v) for k, v in rec["answers"].items()}))
    return rows
