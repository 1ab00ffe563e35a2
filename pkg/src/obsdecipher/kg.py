"""Component-character knowledge graph.

Typed nodes (Component, Character, ModernCharacter) with CONTAINS,
VARIANT_OF and MAPS_TO edges, held in an in-memory adjacency index. The
graph is immutable once built, which makes concurrent reads trivially safe.
Persistence is line-delimited JSON with a trailing sha256 checksum line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .dataset import Corpus
from .errors import (
    CorruptFileError,
    InconsistentCorpusError,
    IoFailureError,
    NotFoundError,
)


class NodeKind(str, Enum):
    COMPONENT = "Component"
    CHARACTER = "Character"
    MODERN = "ModernCharacter"


class Relation(str, Enum):
    CONTAINS = "CONTAINS"
    VARIANT_OF = "VARIANT_OF"
    MAPS_TO = "MAPS_TO"


_EDGE_ENDPOINT_KINDS = {
    Relation.CONTAINS: (NodeKind.CHARACTER, NodeKind.COMPONENT),
    Relation.VARIANT_OF: (NodeKind.CHARACTER, NodeKind.CHARACTER),
    Relation.MAPS_TO: (NodeKind.CHARACTER, NodeKind.MODERN),
}


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: NodeKind
    label: str
    explanation: str = ""
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        # canonical attribute order so persistence round-trips compare equal
        object.__setattr__(self, "attributes", tuple(sorted(self.attributes)))

    def attr(self, key: str) -> str | None:
        for k, v in self.attributes:
            if k == key:
                return v
        return None


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    relation: Relation


def component_node_id(label: str) -> str:
    return f"component:{label}"


def character_node_id(character_id: str) -> str:
    return f"character:{character_id}"


def modern_node_id(text: str) -> str:
    return f"modern:{text}"


class KnowledgeGraph:
    """Immutable node/edge store with the four lookups the agent needs."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge], source_split: str = ""):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if node.node_id in self.nodes:
                raise InconsistentCorpusError(f"duplicate node id {node.node_id!r}")
            self.nodes[node.node_id] = node
        edge_set: set[Edge] = set()
        ordered_edges: list[Edge] = []
        for edge in edges:
            if edge in edge_set:
                continue
            self._check_edge(edge)
            edge_set.add(edge)
            ordered_edges.append(edge)
        self.edges: tuple[Edge, ...] = tuple(ordered_edges)
        self.source_split = source_split

        # adjacency indexes for O(1) lookups
        self._chars_by_label: dict[str, list[str]] = {}
        self._variants: dict[str, list[str]] = {}
        self._modern: dict[str, str] = {}
        for edge in self.edges:
            if edge.relation is Relation.CONTAINS:
                label = self.nodes[edge.dst].label
                self._chars_by_label.setdefault(label, []).append(
                    self.nodes[edge.src].label
                )
            elif edge.relation is Relation.VARIANT_OF:
                self._variants.setdefault(self.nodes[edge.src].label, []).append(
                    self.nodes[edge.dst].label
                )
            elif edge.relation is Relation.MAPS_TO:
                self._modern[self.nodes[edge.src].label] = self.nodes[edge.dst].label
        for bucket in self._chars_by_label.values():
            bucket.sort()
        for bucket in self._variants.values():
            bucket.sort()

    def _check_edge(self, edge: Edge) -> None:
        want_src, want_dst = _EDGE_ENDPOINT_KINDS[edge.relation]
        for endpoint, want in ((edge.src, want_src), (edge.dst, want_dst)):
            node = self.nodes.get(endpoint)
            if node is None:
                raise InconsistentCorpusError(
                    f"edge {edge.relation.value} references missing node {endpoint!r}"
                )
            if node.kind is not want:
                raise InconsistentCorpusError(
                    f"edge {edge.relation.value} endpoint {endpoint!r} has kind "
                    f"{node.kind.value}, expected {want.value}"
                )

    # --- agent tools -------------------------------------------------------

    def component_explanation(self, label: str) -> dict:
        """Exact-label explanation lookup (first external tool)."""
        node = self.nodes.get(component_node_id(label))
        if node is None:
            raise NotFoundError("component", label)
        return {"explanation": node.explanation, "node_id": node.node_id}

    def characters_by_component(self, label: str) -> list[dict]:
        """All characters containing the labeled component (second tool).

        An unknown label raises NotFoundError; a known label with zero
        incidences returns an empty list.
        """
        if component_node_id(label) not in self.nodes:
            raise NotFoundError("component", label)
        rows = []
        for character_id in self._chars_by_label.get(label, ()):
            node = self.nodes[character_node_id(character_id)]
            labels = (node.attr("component_labels") or "").split("\x1f")
            co = [l for l in labels if l and l != label]
            rows.append(
                {
                    "character_id": character_id,
                    "interpretation": node.explanation,
                    "co_components": co,
                }
            )
        return rows

    def variant_lookup(self, character_id: str) -> list[str]:
        """All VARIANT_OF neighbours of an existing character, sorted."""
        if character_node_id(character_id) not in self.nodes:
            raise NotFoundError("character", character_id)
        return list(self._variants.get(character_id, ()))

    def modern_mapping(self, character_id: str) -> str | None:
        """Modern-form target of an existing character, or None."""
        if character_node_id(character_id) not in self.nodes:
            raise NotFoundError("character", character_id)
        return self._modern.get(character_id)

    # --- equality ------------------------------------------------------------

    def structurally_equal(self, other: "KnowledgeGraph") -> bool:
        return (
            self.nodes == other.nodes
            and set(self.edges) == set(other.edges)
            and self.source_split == other.source_split
        )


def build_graph(
    train_corpus: Corpus,
    explanations: Mapping[str, str] | None = None,
    source_split: str = "",
) -> KnowledgeGraph:
    """Assemble the graph from the training split of the corpus.

    One Component node per vocabulary label, one Character node per record,
    CONTAINS edges from the annotated component labels, symmetric VARIANT_OF
    edges within each variant group, and MAPS_TO edges to modern forms.
    Component explanations come from the ``explanations`` mapping, falling
    back to any explanation carried by the component records.
    """
    explanations = dict(explanations or {})
    fallback: dict[str, str] = {}
    for comp in train_corpus.components:
        if comp.explanation and comp.label not in fallback:
            fallback[comp.label] = comp.explanation

    nodes: list[Node] = []
    for label in sorted(train_corpus.vocabulary):
        nodes.append(
            Node(
                node_id=component_node_id(label),
                kind=NodeKind.COMPONENT,
                label=label,
                explanation=explanations.get(label, fallback.get(label, "")),
            )
        )

    edges: list[Edge] = []
    groups: dict[str, list[str]] = {}
    modern_forms: set[str] = set()
    for char in sorted(train_corpus.characters, key=lambda c: c.character_id):
        attrs = [("image_ref", char.image_ref)]
        if char.inscription_type:
            attrs.append(("inscription_type", char.inscription_type))
        # co-component lookups need the full ordered label list on the node
        attrs.append(("component_labels", "\x1f".join(char.component_labels)))
        nodes.append(
            Node(
                node_id=character_node_id(char.character_id),
                kind=NodeKind.CHARACTER,
                label=char.character_id,
                explanation=char.interpretation,
                attributes=tuple(attrs),
            )
        )
        for label in dict.fromkeys(char.component_labels):
            if label not in train_corpus.vocabulary:
                raise InconsistentCorpusError(
                    f"character {char.character_id!r} references label {label!r} "
                    "absent from the vocabulary"
                )
            edges.append(
                Edge(
                    src=character_node_id(char.character_id),
                    dst=component_node_id(label),
                    relation=Relation.CONTAINS,
                )
            )
        if char.variant_group:
            groups.setdefault(char.variant_group, []).append(char.character_id)
        if char.modern_form:
            modern_forms.add(char.modern_form)
            edges.append(
                Edge(
                    src=character_node_id(char.character_id),
                    dst=modern_node_id(char.modern_form),
                    relation=Relation.MAPS_TO,
                )
            )

    for form in sorted(modern_forms):
        nodes.append(
            Node(node_id=modern_node_id(form), kind=NodeKind.MODERN, label=form)
        )

    # VARIANT_OF is stored symmetrically: both directions for every pair
    for group in sorted(groups):
        members = sorted(groups[group])
        for a in members:
            for b in members:
                if a != b:
                    edges.append(
                        Edge(
                            src=character_node_id(a),
                            dst=character_node_id(b),
                            relation=Relation.VARIANT_OF,
                        )
                    )
    return KnowledgeGraph(nodes, edges, source_split=source_split)


# --- persistence -------------------------------------------------------------


def _node_line(node: Node) -> str:
    return json.dumps(
        {
            "t": "node",
            "id": node.node_id,
            "kind": node.kind.value,
            "label": node.label,
            "explanation": node.explanation,
            "attributes": {k: v for k, v in node.attributes},
        },
        ensure_ascii=False,
        sort_keys=True,
    )


def _edge_line(edge: Edge) -> str:
    return json.dumps(
        {"t": "edge", "from": edge.src, "to": edge.dst, "relation": edge.relation.value},
        ensure_ascii=False,
        sort_keys=True,
    )


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    """LDJSON dump: meta line, nodes, edges, then a sha256 checksum line."""
    lines = [json.dumps({"t": "meta", "source_split": graph.source_split}, sort_keys=True)]
    lines.extend(_node_line(graph.nodes[nid]) for nid in sorted(graph.nodes))
    lines.extend(
        _edge_line(e)
        for e in sorted(graph.edges, key=lambda e: (e.relation.value, e.src, e.dst))
    )
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    lines.append(json.dumps({"t": "checksum", "sha256": digest}, sort_keys=True))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"cannot write graph file: {exc}") from exc


def load_graph(path: str | Path) -> KnowledgeGraph:
    """Load and verify a graph file; checksum mismatch raises CorruptFileError."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"cannot read graph file: {exc}") from exc
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise CorruptFileError("graph file is empty")
    try:
        last = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"graph file checksum line unreadable: {exc}") from exc
    if last.get("t") != "checksum":
        raise CorruptFileError("graph file has no trailing checksum line")
    body = lines[:-1]
    digest = hashlib.sha256("\n".join(body).encode("utf-8")).hexdigest()
    if digest != last.get("sha256"):
        raise CorruptFileError("graph file checksum mismatch")

    source_split = ""
    nodes: list[Node] = []
    edges: list[Edge] = []
    for lineno, line in enumerate(body, 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptFileError(f"graph file line {lineno} unreadable: {exc}") from exc
        t = rec.get("t")
        if t == "meta":
            source_split = rec.get("source_split", "")
        elif t == "node":
            nodes.append(
                Node(
                    node_id=rec["id"],
                    kind=NodeKind(rec["kind"]),
                    label=rec["label"],
                    explanation=rec.get("explanation", ""),
                    attributes=tuple(sorted(rec.get("attributes", {}).items())),
                )
            )
        elif t == "edge":
            edges.append(
                Edge(src=rec["from"], dst=rec["to"], relation=Relation(rec["relation"]))
            )
        else:
            raise CorruptFileError(f"graph file line {lineno} has unknown type {t!r}")
    return KnowledgeGraph(nodes, edges, source_split=source_split)
