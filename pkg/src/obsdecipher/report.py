"""Per-run metric reports: align results with gold records and aggregate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backends import ChatBackend
from .dataset import CharacterRecord
from .embedding import EmbeddingProvider
from .errors import AlignmentError, ConfigError
from .inference import InterpretationResult
from .metrics import (
    classification_accuracy,
    embedding_f1,
    llm_judge,
    mover_score,
    rouge1_f1,
    tokenize,
)

KNOWN_METRICS = ("rouge1", "embedding_f1", "mover", "judge", "type_acc")


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple[str, ...] = ("rouge1", "embedding_f1", "mover")
    lang: str = "zh"

    def __post_init__(self):
        unknown = set(self.metrics) - set(KNOWN_METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics: {sorted(unknown)}")


@dataclass(frozen=True)
class MetricReport:
    metadata: dict
    per_item: tuple[dict, ...]
    aggregate: dict

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "metadata": self.metadata,
            "per_item": list(self.per_item),
            "aggregate": self.aggregate,
        }

    def to_table(self) -> str:
        """Small fixed-width summary for terminals."""
        names = sorted(self.aggregate)
        width = max((len(n) for n in names), default=6)
        lines = [f"{'metric'.ljust(width)}  aggregate"]
        for name in names:
            lines.append(f"{name.ljust(width)}  {self.aggregate[name]:.4f}")
        return "\n".join(lines)


def evaluate_run(
    results: Sequence[InterpretationResult],
    gold: Sequence[CharacterRecord],
    config: EvalConfig,
    provider: EmbeddingProvider | None = None,
    judge_backend: ChatBackend | None = None,
) -> MetricReport:
    """Score every result against its gold record and aggregate the means."""
    if not results:
        raise AlignmentError("no results to evaluate")
    gold_by_id: Mapping[str, CharacterRecord] = {c.character_id: c for c in gold}
    needs_provider = {"embedding_f1", "mover"} & set(config.metrics)
    if needs_provider and provider is None:
        raise ConfigError("embedding-based metrics require an embedding provider")
    if "judge" in config.metrics and judge_backend is None:
        raise ConfigError("judge metric requires a chat backend")

    per_item: list[dict] = []
    type_pairs: list[tuple[str, str]] = []
    for result in results:
        record = gold_by_id.get(result.character_ref)
        if record is None:
            raise AlignmentError(f"no gold record for character {result.character_ref!r}")
        candidate = tokenize(result.interpretation, config.lang)
        reference = tokenize(record.interpretation, config.lang)
        scores: dict[str, float] = {}
        if "rouge1" in config.metrics:
            scores["rouge1"] = rouge1_f1(candidate, reference)
        if "embedding_f1" in config.metrics:
            scores["embedding_f1"] = embedding_f1(candidate, reference, provider)
        if "mover" in config.metrics:
            scores["mover"] = mover_score(candidate, reference, provider)
        if "judge" in config.metrics:
            scores["judge"] = llm_judge(judge_backend, result.interpretation, record.interpretation)
        if "type_acc" in config.metrics and record.inscription_type and result.inscription_type:
            type_pairs.append((result.inscription_type.value, record.inscription_type))
            scores["type_match"] = float(
                result.inscription_type.value == record.inscription_type
            )
        per_item.append({"character_ref": result.character_ref, "scores": scores})

    aggregate: dict[str, float] = {}
    metric_names = sorted({name for item in per_item for name in item["scores"]})
    for name in metric_names:
        values = [item["scores"][name] for item in per_item if name in item["scores"]]
        aggregate[name] = sum(values) / len(values)
    if type_pairs:
        aggregate["type_acc"] = classification_accuracy(
            [a for a, _ in type_pairs], [b for _, b in type_pairs]
        )

    metadata = {
        "lang": config.lang,
        "metrics": list(config.metrics),
        "items": len(per_item),
        "backends": sorted({name for r in results for name in r.backend_names}),
        "template_ids": sorted({tid for r in results for tid in r.template_ids}),
        "modes": sorted({r.mode for r in results}),
    }
    if provider is not None:
        metadata["embedding_provider"] = provider.name
    if judge_backend is not None:
        metadata["judge_backend"] = judge_backend.name
    return MetricReport(metadata=metadata, per_item=tuple(per_item), aggregate=aggregate)


def report_to_file(report: MetricReport, path) -> None:
    from .pipeline import atomic_write_text  # local import avoids a cycle

    atomic_write_text(path, json.dumps(report.to_json(), ensure_ascii=False, indent=2, sort_keys=True))
