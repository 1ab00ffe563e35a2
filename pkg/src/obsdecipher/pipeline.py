"""End-to-end orchestration: classify, retrieve, infer, interpret, persist.

Characters are processed independently under a bounded worker pool;
per-character failures are recorded and never abort the run. The emitted
run manifest fingerprints every input (model, graph, templates, backends,
config) so reported numbers stay attributable and reruns are comparable by
hash.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from ._io import atomic_write_text
from .backends import ChatBackend, OfflineChatBackend, TokenUsage, backend_from_env
from .classifier import ClassifierModel, classify_topk
from .dataset import CharacterRecord, Corpus
from .embedding import EmbeddingProvider, embed_image
from .errors import ConfigError, ObsError
from .inference import (
    InterpretationResult,
    generate_interpretation_multiagent,
    generate_interpretation_vlm,
    infer_relationship,
)
from .kg import KnowledgeGraph
from .retrieval import RetrievalConfig, SemanticCache, retrieve_evidence


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "vlm"  # "vlm" | "multi_agent"
    language: str = "zh"
    top_k: int = 5
    concurrency: int = 1
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mock: bool = False

    def __post_init__(self):
        if self.mode not in ("vlm", "multi_agent"):
            raise ConfigError(f"mode must be vlm or multi_agent, got {self.mode!r}")
        if self.language not in ("zh", "en"):
            raise ConfigError(f"language must be zh or en, got {self.language!r}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "PipelineConfig":
        known = {"mode", "language", "top_k", "concurrency", "retrieval", "mock"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if "retrieval" in kwargs:
            kwargs["retrieval"] = RetrievalConfig.from_mapping(kwargs["retrieval"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_mapping(doc)


@dataclass(frozen=True)
class PipelineBackends:
    """Resolved chat backends for one run."""

    chat: ChatBackend
    retriever: ChatBackend
    reasoner: ChatBackend

    @classmethod
    def offline(cls) -> "PipelineBackends":
        mock = OfflineChatBackend()
        return cls(chat=mock, retriever=mock, reasoner=mock)

    @classmethod
    def from_env(cls) -> "PipelineBackends | None":
        chat = backend_from_env()
        if chat is None:
            return None
        retriever = backend_from_env("retriever") or chat
        reasoner = backend_from_env("reasoner") or chat
        return cls(chat=chat, retriever=retriever, reasoner=reasoner)


@dataclass(frozen=True)
class RunFailure:
    character_id: str
    error: str

    def to_json(self) -> dict:
        return {"character_id": self.character_id, "error": self.error}


def interpret_character(
    char: CharacterRecord,
    image_root: Path | None,
    provider: EmbeddingProvider,
    model: ClassifierModel,
    graph: KnowledgeGraph,
    cache: SemanticCache,
    backends: PipelineBackends,
    config: PipelineConfig,
):
    """Run stages a-d for one character; returns (result, evidence bundle)."""
    image_path = Path(char.image_ref)
    if image_root is not None and not image_path.is_absolute():
        image_path = image_root / image_path
    image = image_path.read_bytes()

    query = embed_image(provider, image)
    predicted = classify_topk(model, query, config.top_k)

    if config.mode == "vlm":
        evidence = retrieve_evidence(
            graph, predicted, cache, config.retrieval, character_ref=char.character_id
        )
        typed = infer_relationship(
            backends.chat, image, predicted, evidence, lang=config.language
        )
        result = generate_interpretation_vlm(
            backends.chat, image, predicted, evidence, lang=config.language
        )
        type_backend = backends.chat.name
    else:
        result, evidence = generate_interpretation_multiagent(
            backends.retriever,
            backends.reasoner,
            image,
            graph,
            predicted,
            cache,
            config.retrieval,
            lang=config.language,
            character_ref=char.character_id,
        )
        typed = infer_relationship(
            backends.reasoner, None, predicted, evidence, lang=config.language
        )
        type_backend = backends.reasoner.name

    # the type-inference stage owns the inscription judgment and trace
    result = replace(
        result,
        inscription_type=typed.inscription_type,
        reasoning_trace=typed.reasoning or result.reasoning_trace,
        token_usage=result.token_usage + typed.token_usage,
        usage_by_backend=result.usage_by_backend
        + ((f"{type_backend}:type", typed.token_usage),),
    )
    return result, evidence


def run_pipeline(
    corpus: Corpus,
    provider: EmbeddingProvider,
    model: ClassifierModel,
    graph: KnowledgeGraph,
    backends: PipelineBackends,
    config: PipelineConfig,
    characters: Sequence[str] | None = None,
    image_root: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> tuple[list[InterpretationResult], list[RunFailure], dict]:
    """Interpret every requested character, isolating per-character failures.

    Returns results (input order), failures, and the run manifest whose
    ``manifest_hash`` is deterministic for fixed inputs and mock backends.
    """
    chars_by_id = {c.character_id: c for c in corpus.characters}
    if characters is None:
        targets = [c.character_id for c in corpus.characters]
    else:
        targets = list(characters)
    cache = SemanticCache(
        provider,
        threshold=config.retrieval.cache_threshold,
        capacity=config.retrieval.cache_capacity,
    )
    root = Path(image_root) if image_root is not None else None

    def work(character_id: str):
        record = chars_by_id.get(character_id)
        if record is None:
            raise ObsError(f"character {character_id!r} not in corpus")
        return interpret_character(
            record, root, provider, model, graph, cache, backends, config
        )

    outcomes: list[tuple[str, tuple | None, str | None]] = []
    if config.concurrency == 1:
        for cid in targets:
            try:
                outcomes.append((cid, work(cid), None))
            except (ObsError, OSError) as exc:
                outcomes.append((cid, None, f"{type(exc).__name__}: {exc}"))
    else:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = [(cid, pool.submit(work, cid)) for cid in targets]
            for cid, future in futures:
                try:
                    outcomes.append((cid, future.result(), None))
                except (ObsError, OSError) as exc:
                    outcomes.append((cid, None, f"{type(exc).__name__}: {exc}"))

    results = [pair[0] for _, pair, _ in outcomes if pair is not None]
    bundles = [pair[1] for _, pair, _ in outcomes if pair is not None]
    failures = [RunFailure(cid, err) for cid, _, err in outcomes if err is not None]

    if out_dir is not None:
        out = Path(out_dir)
        evidence_dir = out / "evidence"
        evidence_dir.mkdir(parents=True, exist_ok=True)
        for result, bundle in zip(results, bundles):
            atomic_write_text(
                out / f"{result.character_ref}.json",
                json.dumps(result.to_json(), ensure_ascii=False, indent=2, sort_keys=True),
            )
            atomic_write_text(
                evidence_dir / f"{result.character_ref}.json",
                json.dumps(bundle.to_json(), ensure_ascii=False, indent=2, sort_keys=True),
            )

    manifest = _run_manifest(results, failures, model, graph, backends, config)
    if out_dir is not None:
        atomic_write_text(
            Path(out_dir) / "run_manifest.json",
            json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True),
        )
    return results, failures, manifest


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _run_manifest(
    results: Sequence[InterpretationResult],
    failures: Sequence[RunFailure],
    model: ClassifierModel,
    graph: KnowledgeGraph,
    backends: PipelineBackends,
    config: PipelineConfig,
) -> dict:
    result_hashes = [
        _sha256_text(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True))
        for r in results
    ]
    model_fingerprint = _sha256_text(
        json.dumps(
            {
                "dim": model.dim,
                "provider": model.provider_name,
                "labels": model._labels,
                "matrix": model._matrix.tobytes().hex(),
            },
            sort_keys=True,
        )
    )
    graph_fingerprint = _sha256_text(
        json.dumps(
            {
                "nodes": sorted(graph.nodes),
                "edges": sorted((e.src, e.dst, e.relation.value) for e in graph.edges),
                "source_split": graph.source_split,
            },
            sort_keys=True,
        )
    )
    body = {
        "schema_version": 1,
        "mode": config.mode,
        "language": config.language,
        "mock": config.mock,
        "retrieval": {
            "top_m": config.retrieval.top_m,
            "min_evidence": config.retrieval.min_evidence,
            "max_items": config.retrieval.max_items,
            "cache_threshold": config.retrieval.cache_threshold,
            "cache_capacity": config.retrieval.cache_capacity,
        },
        "model_hash": model_fingerprint,
        "graph_hash": graph_fingerprint,
        "backend_names": sorted({backends.chat.name, backends.retriever.name, backends.reasoner.name}),
        "template_ids": sorted({tid for r in results for tid in r.template_ids}),
        "results": result_hashes,
        "failures": [f.to_json() for f in failures],
        "result_count": len(results),
        "failure_count": len(failures),
    }
    body["manifest_hash"] = _sha256_text(json.dumps(body, ensure_ascii=False, sort_keys=True))
    return body
