"""Retrieval evaluation with mean average precision.

Pool protocol (a local convention, not a reproduction of any published
benchmark): every test triplet becomes a query whose candidates are its own
positive (relevant), its own negative, and up to ``k`` positives of other
triplets with a different anchor (non-relevant), shuffled under the seed.
Candidates are ranked by cosine similarity, ties keep pool order.
"""

from __future__ import annotations

import json
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SkippedItemWarning, Triplet


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalTask:
    query_text: str
    candidates: tuple[tuple[str, bool], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple((str(t), bool(r)) for t, r in self.candidates))
        if not self.candidates:
            raise EvaluationError("retrieval task needs at least one candidate")
        if not any(r for _, r in self.candidates):
            raise EvaluationError("retrieval task needs at least one relevant candidate")


@dataclass
class EvalReport:
    model: str
    map_score: float
    per_query: list[float]
    protocol: dict = field(default_factory=dict)
    descriptor: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "map": self.map_score, "per_query": self.per_query,
                "protocol": self.protocol, "descriptor": self.descriptor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_markdown(self) -> str:
        return f"| model | MAP |\n|---|---|\n| {self.model} | {100 * self.map_score:.2f} |\n"


def triplets_to_tasks(test: Sequence[Triplet], k: int = 8, seed: int = 0) -> list[RetrievalTask]:
    if not test:
        raise EvaluationError("no test triplets")
    if k < 0:
        raise EvaluationError("k must be >= 0")
    rng = np.random.default_rng(seed)
    tasks = []
    for i, t in enumerate(test):
        own = {t.anchor, t.positive, t.negative}
        others = list(dict.fromkeys(
            o.positive for o in test if o.anchor_key != t.anchor_key and o.positive not in own
        ))
        n = min(k, len(others))
        picks = [others[j] for j in sorted(rng.choice(len(others), size=n, replace=False))] if n else []
        pool = [(t.positive, True), (t.negative, False)] + [(p, False) for p in picks]
        if len(pool) < 2:
            warnings.warn(f"test triplet {i}: candidate pool smaller than 2; skipped", SkippedItemWarning,
                          stacklevel=2)
            continue
        order = rng.permutation(len(pool))
        tasks.append(RetrievalTask(t.anchor, tuple(pool[j] for j in order)))
    return tasks


def average_precision(ranking: Sequence[bool]) -> float:
    """Mean over relevant positions ``r`` of precision@r."""
    hits = 0
    total = 0.0
    for rank, relevant in enumerate(ranking, start=1):
        if relevant:
            hits += 1
            total += hits / rank
    if hits == 0:
        raise EvaluationError("average precision undefined without a relevant item")
    return total / hits


def _unit(vectors: np.ndarray, texts: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise EvaluationError(f"zero-norm embedding for text {texts[int(bad[0])]!r}")
    return vectors / norms[:, None]


def rank_candidates(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Indices by descending cosine score; stable, so ties keep input order."""
    scores = candidates @ query
    return np.argsort(-scores, kind="stable")


def _embed_unique(model, tasks: Sequence[RetrievalTask]) -> dict[str, np.ndarray]:
    texts = list(dict.fromkeys([t.query_text for t in tasks] + [c for t in tasks for c, _ in t.candidates]))
    vectors = _unit(np.asarray(model.embed(texts), dtype=np.float64), texts)
    return dict(zip(texts, vectors))


def evaluate(model, tasks: Sequence[RetrievalTask], label: str | None = None,
             protocol: Mapping | None = None, descriptor: Mapping | None = None) -> EvalReport:
    """``model`` is anything with ``embed(texts) -> (n, d) array``."""
    if not tasks:
        raise EvaluationError("no retrieval tasks")
    vec = _embed_unique(model, tasks)
    per_query = []
    for task in tasks:
        cand = np.stack([vec[c] for c, _ in task.candidates])
        order = rank_candidates(vec[task.query_text], cand)
        per_query.append(average_precision([task.candidates[j][1] for j in order]))
    label = label or getattr(model, "label", None) or "model"
    return EvalReport(label, float(np.mean(per_query)), per_query, dict(protocol or {}), dict(descriptor or {}))


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[str]
    scores: dict[str, dict[str, float]]
    reports: dict[str, dict[str, EvalReport]]

    def best(self) -> dict[str, str]:
        return {c: max(self.rows, key=lambda r: (self.scores[r][c], -self.rows.index(r))) for c in self.columns}

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "rows": [{"model": r, "map": {c: self.scores[r][c] for c in self.columns}} for r in self.rows],
            "best": self.best(),
            "reports": {r: {c: self.reports[r][c].to_dict() for c in self.columns} for r in self.rows},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_markdown(self) -> str:
        best = self.best()
        lines = ["| model | " + " | ".join(self.columns) + " |", "|---|" + "---|" * len(self.columns)]
        for r in self.rows:
            cells = []
            for c in self.columns:
                cell = f"{100 * self.scores[r][c]:.2f}"
                cells.append(f"**{cell}**" if best[c] == r else cell)
            lines.append(f"| {r} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def compare(models: Sequence[tuple[str, object]], task_sets: Mapping[str, Sequence[RetrievalTask]],
            protocol: Mapping | None = None) -> ComparisonTable:
    """Evaluate every labeled model on every task set (columns); best per column is highlighted."""
    if len(models) < 2:
        raise EvaluationError("compare needs at least 2 models")
    if not task_sets:
        raise EvaluationError("compare needs at least one task set")
    labels = [label for label, _ in models]
    if len(set(labels)) != len(labels):
        raise EvaluationError(f"model labels must be unique: {labels}")
    dims = {label: getattr(m, "dim", None) for label, m in models}
    if len({d for d in dims.values() if d is not None}) > 1:
        raise EvaluationError(f"inconsistent embedding dimensions: {dims}")
    scores: dict[str, dict[str, float]] = {}
    reports: dict[str, dict[str, EvalReport]] = {}
    for label, model in models:
        scores[label], reports[label] = {}, {}
        for column, tasks in task_sets.items():
            rep = evaluate(model, tasks, label=label, protocol=protocol)
            scores[label][column] = rep.map_score
            reports[label][column] = rep
    return ComparisonTable(list(task_sets), labels, scores, reports)


def write_report(obj, json_path=None, markdown_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(obj.to_json() + "\n", encoding="utf-8")
    if markdown_path is not None:
        Path(markdown_path).write_text(obj.to_markdown(), encoding="utf-8")
