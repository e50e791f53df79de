"""End-to-end evaluation of an image-caption pair.

The flow: extract a semantic graph from the caption, then iterate levels up
to the configured maximum. Each level generates questions targeting elements
the coverage mask still marks unexamined, answers them against the image,
judges the answers, appends the results to the evaluation graph, and updates
the mask from both the questions' declared targets and a model-side coverage
check. The loop stops early once everything is covered (or the checker says
so, or a level yields no questions). Scores, the binary decision, and a
natural-language explanation are assembled into an EvaluationReport.

Levels are strictly sequential because each one consumes the previous
level's graph and mask; within a level, answering and judging distinct
questions fans out concurrently.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import (
    EmptyBatchError,
    EmptyHiegError,
    GraphGenFailedError,
    HmgieError,
    MalformedOutputError,
    SchemaViolationError,
)
from .gateway import Gateway, ModelRequest, RequestKind, sniff_media_type
from .hieg import (
    Hieg,
    LevelStats,
    QuestionBatch,
    expand,
    hieg_to_prompt_json,
    level_stats,
    overall_decision,
)
from .prompts import (
    PromptTemplate,
    TemplateName,
    load_templates,
    parse_coverage_reply,
    parse_eval_reply,
    parse_question_batch,
    parse_vqa_reply,
    render,
)
from .scoring import (
    MetricsSummary,
    ScoringConfig,
    WeightDirection,
    compute_h_acc,
    compute_h_comp,
    detection_metrics,
)
from .semantic_graph import (
    CoverageMask,
    SemanticGraph,
    apply_coverage,
    fresh_mask,
    graph_to_json,
    is_fully_covered,
    parse_semantic_graph,
)

DEFAULT_GRAPH_EXAMPLE = """Caption: A brown dog lies on a red sofa in a living room.

Semantic Graph:
{
    "nodes": [
        {"id": "N1", "type": "Entity", "label": "dog"},
        {"id": "N2", "type": "Attribute", "label": "brown"},
        {"id": "N3", "type": "Entity", "label": "sofa"},
        {"id": "N4", "type": "Attribute", "label": "red"},
        {"id": "N5", "type": "Location", "label": "living room"}
    ],
    "edges": [
        {"from": ["N1", "dog"], "to": ["N2", "brown"], "type": "Has Attribute", "label": "dog is brown", "description": "The dog has brown fur."},
        {"from": ["N3", "sofa"], "to": ["N4", "red"], "type": "Has Attribute", "label": "sofa is red", "description": "The sofa is red."},
        {"from": ["N1", "dog"], "to": ["N3", "sofa"], "type": "Spatial", "label": "lies on", "description": "The dog lies on the sofa."},
        {"from": ["N3", "sofa"], "to": ["N5", "living room"], "type": "Spatial", "label": "in", "description": "The sofa is in the living room."}
    ]
}"""


@dataclass(frozen=True)
class RoleBindings:
    """One gateway per pipeline role; roles may share a gateway."""

    graph_gen: Gateway
    question_gen: Gateway
    vqa: Gateway
    answer_eval: Gateway
    coverage: Gateway
    explain: Gateway

    @classmethod
    def uniform(cls, gateway: Gateway) -> "RoleBindings":
        return cls(
            graph_gen=gateway,
            question_gen=gateway,
            vqa=gateway,
            answer_eval=gateway,
            coverage=gateway,
            explain=gateway,
        )


@dataclass(frozen=True)
class PipelineConfig:
    backends: RoleBindings
    max_level: int = 5
    max_questions_per_level: int = 10
    retry_limit: int = 3
    weight_ratio: float = 1.2
    weight_direction: WeightDirection = WeightDirection.INCREASING_WITH_DEPTH
    model_id: str = "gpt-4o"
    temperature: float = 0.3
    max_output_tokens: int = 2048
    templates: Mapping[TemplateName, PromptTemplate] = field(default_factory=load_templates)
    graph_example: str = DEFAULT_GRAPH_EXAMPLE
    intra_level_parallelism: int = 4

    def __post_init__(self):
        if self.max_level < 1:
            raise SchemaViolationError("max_level must be >= 1")
        if self.max_questions_per_level < 1:
            raise SchemaViolationError("max_questions_per_level must be >= 1")
        if self.retry_limit < 1:
            raise SchemaViolationError("retry_limit must be >= 1")
        if self.weight_ratio <= 0:
            raise SchemaViolationError("weight_ratio must be > 0")
        if self.temperature < 0:
            raise SchemaViolationError("temperature must be >= 0")
        if self.intra_level_parallelism < 1:
            raise SchemaViolationError("intra_level_parallelism must be >= 1")

    def scoring_config(self) -> ScoringConfig:
        return ScoringConfig(
            weight_ratio=self.weight_ratio,
            max_level=self.max_level,
            max_per_level=self.max_questions_per_level,
            weight_direction=self.weight_direction,
        )


def _text_request(prompt: str, config: PipelineConfig) -> ModelRequest:
    return ModelRequest(
        kind=RequestKind.TEXT,
        prompt=prompt,
        model_id=config.model_id,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def format_unverified(graph: SemanticGraph, mask: CoverageMask) -> str:
    """Compact summary of still-unexamined elements for the question prompt."""
    nodes = [
        f"{node.id} ({node.label})"
        for node in graph.nodes
        if mask.node_flags.get(node.id, 0)
    ]
    edges = [
        f"[{index}] {edge.from_id} -> {edge.to_id} ({edge.kind.value}: {edge.label})"
        for index, edge in enumerate(graph.edges)
        if mask.edge_flags.get(index, 0)
    ]
    node_line = ", ".join(nodes) if nodes else "none"
    edge_line = ", ".join(edges) if edges else "none"
    return f"Unverified nodes: {node_line}\nUnverified edges: {edge_line}"


def build_graph_request(caption: str, config: PipelineConfig) -> ModelRequest:
    prompt = render(
        config.templates[TemplateName.SEMANTIC_GRAPH_GEN],
        {"example": config.graph_example, "caption": caption},
    )
    return _text_request(prompt, config)


def build_question_request(
    graph: SemanticGraph,
    mask: CoverageMask,
    hieg: Hieg,
    suggestion: Optional[str],
    level: int,
    config: PipelineConfig,
) -> ModelRequest:
    # The unverified-element summary rides along with the graph so the
    # template keeps its original placeholder set.
    graph_block = f"{graph_to_json(graph)}\n\n{format_unverified(graph, mask)}"
    prompt = render(
        config.templates[TemplateName.QUESTION_GEN],
        {
            "semantic-graph": graph_block,
            "previous-HIEG": hieg_to_prompt_json(hieg),
            "suggestion": suggestion if suggestion else "None",
            "current-level": str(level),
        },
    )
    return _text_request(prompt, config)


def build_vqa_request(
    question: str, image_payload: bytes, config: PipelineConfig
) -> ModelRequest:
    prompt = render(config.templates[TemplateName.VQA], {"question": question})
    return ModelRequest.vision(
        prompt,
        image_payload,
        model_id=config.model_id,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def build_eval_request(
    question: str, expected_answer: str, actual_answer: str, config: PipelineConfig
) -> ModelRequest:
    prompt = render(
        config.templates[TemplateName.ANSWER_EVAL],
        {
            "question": question,
            "expected-answer": expected_answer,
            "actual-answer": actual_answer,
        },
    )
    return _text_request(prompt, config)


def build_coverage_request(
    graph: SemanticGraph, hieg: Hieg, config: PipelineConfig
) -> ModelRequest:
    prompt = render(
        config.templates[TemplateName.COVERAGE_CHECK],
        {"semantic-graph": graph_to_json(graph), "hieg": hieg_to_prompt_json(hieg)},
    )
    return _text_request(prompt, config)


def build_explain_request(
    hieg: Hieg, caption: str, decision: int, config: PipelineConfig
) -> ModelRequest:
    prompt = render(
        config.templates[TemplateName.EXPLAIN],
        {
            "hieg": hieg_to_prompt_json(hieg),
            "caption": caption,
            "consistency-decision": "Consistent" if decision else "Inconsistent",
        },
    )
    return _text_request(prompt, config)


@dataclass(frozen=True)
class EvaluationReport:
    """Everything one pair evaluation produced, serializable and stable."""

    h_acc: float
    h_comp: float
    decision: int
    realized_depth: int
    hieg: Hieg
    semantic_graph: SemanticGraph
    explanation: str
    per_level: tuple[LevelStats, ...]
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "h_acc": self.h_acc,
            "h_comp": self.h_comp,
            "decision": self.decision,
            "realized_depth": self.realized_depth,
            "explanation": self.explanation,
            "per_level": [
                {
                    "level": s.level,
                    "questions": s.count,
                    "correct_weighted_sum": s.correct_weighted_sum,
                }
                for s in self.per_level
            ],
            "hieg": [node.to_dict() for node in self.hieg.nodes()],
            "semantic_graph": {
                "caption": self.semantic_graph.source_caption,
                "nodes": [
                    {"id": n.id, "type": n.kind.value, "label": n.label}
                    for n in self.semantic_graph.nodes
                ],
                "edges": [
                    {
                        "from": e.from_id,
                        "to": e.to_id,
                        "type": e.kind.value,
                        "label": e.label,
                        "description": e.description,
                    }
                    for e in self.semantic_graph.edges
                ],
            },
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)


def _generate_graph(
    caption: str, config: PipelineConfig, diagnostics: list[str]
) -> SemanticGraph:
    last_error: Optional[Exception] = None
    for attempt in range(1, config.retry_limit + 1):
        response = config.backends.graph_gen.call(build_graph_request(caption, config))
        try:
            return parse_semantic_graph(response.text, caption)
        except (MalformedOutputError, SchemaViolationError) as exc:
            last_error = exc
            diagnostics.append(f"graph-gen attempt {attempt} unparseable: {exc}")
    raise GraphGenFailedError(
        f"semantic graph generation failed after {config.retry_limit} attempts: {last_error}",
        partial_hieg=Hieg.empty(config.max_level),
        diagnostics=diagnostics,
    )


def _sanitize_batch(
    batch: QuestionBatch, graph: SemanticGraph, hieg: Hieg, diagnostics: list[str]
) -> QuestionBatch:
    """Drop hallucinated parent ids and coverage targets before expansion."""
    known_nodes = set(graph.node_ids())
    known_edges = set(range(len(graph.edges)))
    known_parents = hieg.node_ids()
    items = []
    for item in batch.items:
        bad_parents = item.parent_ids - known_parents
        bad_nodes = item.covered_nodes - known_nodes
        bad_edges = item.covered_edges - known_edges
        if bad_parents:
            diagnostics.append(
                f"level {batch.level}: dropped unknown parents {sorted(bad_parents)} "
                f"for question {item.question!r}"
            )
        if bad_nodes or bad_edges:
            diagnostics.append(
                f"level {batch.level}: dropped unknown coverage targets "
                f"{sorted(bad_nodes) + sorted(bad_edges)} for question {item.question!r}"
            )
        items.append(
            replace(
                item,
                parent_ids=item.parent_ids - bad_parents,
                covered_nodes=item.covered_nodes - bad_nodes,
                covered_edges=item.covered_edges - bad_edges,
            )
        )
    return QuestionBatch(level=batch.level, items=tuple(items))


def _answer_and_judge(
    question: str,
    expected_answer: str,
    image_payload: bytes,
    config: PipelineConfig,
) -> tuple[str, float, bool, list[str]]:
    """Stages 2 and 3 for one question: VQA then semantic answer evaluation."""
    notes: list[str] = []
    vqa_response = config.backends.vqa.call(
        build_vqa_request(question, image_payload, config)
    )
    if not vqa_response.text.strip():
        notes.append(f"vqa returned an empty reply for {question!r}; marked incorrect")
        return "", 1.0, False, notes
    try:
        reply = parse_vqa_reply(vqa_response.text)
        answer, confidence = reply.answer, reply.confidence
    except MalformedOutputError:
        # Models sometimes answer in plain prose; the judge can still use it.
        answer, confidence = vqa_response.text.strip(), 1.0
        notes.append(f"vqa reply unparseable for {question!r}; using raw text")

    verdict: Optional[bool] = None
    for attempt in range(1, config.retry_limit + 1):
        eval_response = config.backends.answer_eval.call(
            build_eval_request(question, expected_answer, answer, config)
        )
        try:
            verdict = parse_eval_reply(eval_response.text).correct
            break
        except MalformedOutputError as exc:
            notes.append(f"answer-eval attempt {attempt} unparseable for {question!r}: {exc}")
    if verdict is None:
        notes.append(f"answer evaluation failed for {question!r}; marked incorrect")
        verdict = False
    return answer, confidence, verdict, notes


def _run_level(
    batch: QuestionBatch, image_payload: bytes, config: PipelineConfig
) -> tuple[list[tuple[str, float]], list[bool], list[str]]:
    """Fan stage 2+3 out over the batch; results keep batch order."""
    workers = min(config.intra_level_parallelism, len(batch.items))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(
                    lambda item: _answer_and_judge(
                        item.question, item.expected_answer, image_payload, config
                    ),
                    batch.items,
                )
            )
    else:
        outcomes = [
            _answer_and_judge(item.question, item.expected_answer, image_payload, config)
            for item in batch.items
        ]
    answers = [(answer, confidence) for answer, confidence, _, _ in outcomes]
    verdicts = [verdict for _, _, verdict, _ in outcomes]
    notes = [note for _, _, _, item_notes in outcomes for note in item_notes]
    return answers, verdicts, notes


def evaluate_pair(
    image: bytes,
    caption: str,
    config: PipelineConfig,
    media_type: Optional[str] = None,
) -> EvaluationReport:
    """Evaluate one image-caption pair and return the full report.

    Raises:
        ValueError: empty caption or undecodable image.
        GraphGenFailedError: the caption graph could not be parsed after retries.
        EmptyHiegError: no level produced any question.
        ExhaustedError and friends propagate from the gateway, annotated with
            the partial evaluation graph (.partial_hieg) for debugging.
    """
    if not caption or not caption.strip():
        raise ValueError("caption must be nonempty")
    if not image:
        raise ValueError("image payload is empty")
    if media_type is None and sniff_media_type(image) is None:
        raise ValueError("image format not recognized (png/jpeg/gif/webp/bmp)")

    diagnostics: list[str] = []
    hieg = Hieg.empty(config.max_level)
    try:
        graph = _generate_graph(caption, config, diagnostics)
        mask = fresh_mask(graph)
        suggestion: Optional[str] = None

        for level in range(1, config.max_level + 1):
            request = build_question_request(graph, mask, hieg, suggestion, level, config)
            suggestion = None  # consumed by this level's prompt
            batch: Optional[QuestionBatch] = None
            for attempt in range(1, config.retry_limit + 1):
                response = config.backends.question_gen.call(request)
                try:
                    batch = parse_question_batch(response.text, level)
                    break
                except EmptyBatchError:
                    diagnostics.append(f"level {level}: question generator returned no items")
                    batch = None
                    break
                except MalformedOutputError as exc:
                    diagnostics.append(
                        f"level {level}: question reply attempt {attempt} unparseable: {exc}"
                    )
            if batch is None:
                break

            if len(batch.items) > config.max_questions_per_level:
                diagnostics.append(
                    f"level {level}: truncated {len(batch.items)} questions to "
                    f"{config.max_questions_per_level}"
                )
                batch = QuestionBatch(
                    level=level, items=batch.items[: config.max_questions_per_level]
                )
            batch = _sanitize_batch(batch, graph, hieg, diagnostics)

            answers, verdicts, notes = _run_level(batch, image, config)
            diagnostics.extend(notes)
            hieg = expand(hieg, batch, answers, verdicts)

            declared_nodes = frozenset().union(*(i.covered_nodes for i in batch.items))
            declared_edges = frozenset().union(*(i.covered_edges for i in batch.items))
            mask = apply_coverage(mask, declared_nodes, declared_edges)

            coverage_reply = None
            coverage_request = build_coverage_request(graph, hieg, config)
            for attempt in range(1, config.retry_limit + 1):
                response = config.backends.coverage.call(coverage_request)
                try:
                    coverage_reply = parse_coverage_reply(response.text)
                    break
                except (MalformedOutputError, SchemaViolationError) as exc:
                    diagnostics.append(
                        f"level {level}: coverage reply attempt {attempt} unparseable: {exc}"
                    )
            if coverage_reply is not None:
                examined_nodes = coverage_reply.examined_nodes & set(mask.node_flags)
                examined_edges = coverage_reply.examined_edges & set(mask.edge_flags)
                unknown = (coverage_reply.examined_nodes - examined_nodes) | (
                    coverage_reply.examined_edges - examined_edges
                )
                if unknown:
                    diagnostics.append(
                        f"level {level}: coverage reply named unknown elements "
                        f"{sorted(map(str, unknown))}"
                    )
                mask = apply_coverage(mask, examined_nodes, examined_edges)
                suggestion = coverage_reply.next_level_suggestion
                if coverage_reply.verified_complete:
                    break
            else:
                diagnostics.append(
                    f"level {level}: coverage check failed; relying on declared targets"
                )
            if is_fully_covered(mask):
                break

        if hieg.node_count == 0:
            error = EmptyHiegError("evaluation produced no questions")
            error.partial_hieg = hieg
            error.pipeline_diagnostics = tuple(diagnostics)
            raise error

        stats = level_stats(hieg)
        scoring = config.scoring_config()
        h_acc = compute_h_acc(stats, scoring)
        h_comp = compute_h_comp([s.count for s in stats], scoring)
        decision = overall_decision(hieg)

        explanation = ""
        try:
            explain_response = config.backends.explain.call(
                build_explain_request(hieg, caption, decision, config)
            )
            explanation = explain_response.text.strip()
        except HmgieError as exc:
            diagnostics.append(f"explanation generation failed: {exc}")
        if not explanation:
            diagnostics.append("explanation is empty")

        return EvaluationReport(
            h_acc=h_acc,
            h_comp=h_comp,
            decision=decision,
            realized_depth=hieg.deepest_level,
            hieg=hieg,
            semantic_graph=graph,
            explanation=explanation,
            per_level=stats,
            diagnostics=tuple(diagnostics),
        )
    except HmgieError as exc:
        if not hasattr(exc, "partial_hieg"):
            exc.partial_hieg = hieg
            exc.pipeline_diagnostics = tuple(diagnostics)
        raise


@dataclass(frozen=True)
class DatasetItem:
    """One labeled (or unlabeled) pair from a JSONL dataset."""

    id: str
    image_path: str
    caption: str
    label: Optional[int] = None
    granularity: Optional[int] = None


@dataclass(frozen=True)
class ItemResult:
    item: DatasetItem
    report: Optional[EvaluationReport] = None
    error: Optional[str] = None


@dataclass(frozen=True)
class BatchResult:
    results: tuple[ItemResult, ...]
    metrics: Optional[MetricsSummary]
    evaluated: int
    failed: int


def load_dataset_jsonl(path: str | Path) -> list[DatasetItem]:
    """Read dataset lines: {"id", "image_path", "caption", "label", "granularity"}."""
    items = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{line_no}: line is not an object")
            for key in ("image_path", "caption"):
                if key not in record:
                    raise ValueError(f"{path}:{line_no}: missing {key!r}")
            label = record.get("label")
            if label not in (0, 1, None):
                raise ValueError(f"{path}:{line_no}: label must be 0, 1, or null")
            granularity = record.get("granularity")
            if granularity is not None and granularity not in (1, 2, 3, 4):
                warnings.warn(f"{path}:{line_no}: granularity {granularity} outside 1-4")
            items.append(
                DatasetItem(
                    id=str(record.get("id", f"line-{line_no}")),
                    image_path=str(record["image_path"]),
                    caption=str(record["caption"]),
                    label=label,
                    granularity=granularity,
                )
            )
    return items


def evaluate_batch(
    dataset: Sequence[DatasetItem],
    config: PipelineConfig,
    parallelism: int = 1,
) -> BatchResult:
    """Evaluate every dataset item; results keep input order.

    Per-item failures are recorded instead of aborting the batch. Detection
    metrics are attached iff every item carries a ground-truth label; failed
    items are excluded from the confusion counts.
    """
    if parallelism < 1:
        raise SchemaViolationError("parallelism must be >= 1")

    def _one(item: DatasetItem) -> ItemResult:
        try:
            payload = Path(item.image_path).read_bytes()
            report = evaluate_pair(payload, item.caption, config)
            return ItemResult(item=item, report=report)
        except (HmgieError, OSError, ValueError) as exc:
            return ItemResult(item=item, error=f"{type(exc).__name__}: {exc}")

    if parallelism == 1 or len(dataset) <= 1:
        results = [_one(item) for item in dataset]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_one, dataset))

    evaluated = sum(1 for r in results if r.report is not None)
    failed = len(results) - evaluated
    metrics = None
    if dataset and all(item.label is not None for item in dataset):
        pairs = [
            (1 - r.report.decision, r.item.label)
            for r in results
            if r.report is not None
        ]
        granularities = [r.item.granularity for r in results if r.report is not None]
        if pairs:
            metrics = detection_metrics(
                pairs,
                granularities if any(g is not None for g in granularities) else None,
            )
    return BatchResult(
        results=tuple(results), metrics=metrics, evaluated=evaluated, failed=failed
    )
