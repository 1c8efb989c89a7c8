"""Scene-graph data model, validation, and the restricted-grammar caption parser.

Graphs come in two flavours: frame-level (extracted alongside region
proposals, objects may point at a region) and language-level (parsed from a
caption). Node identity is positional: two nodes with the same label are
distinct instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ParseError, SchemaError

FRAME = "frame"
LANGUAGE = "language"


@dataclass(frozen=True)
class ObjectNode:
    label_id: int
    region_index: Optional[int] = None


@dataclass(frozen=True)
class AttributeNode:
    label_id: int
    owner: int


@dataclass(frozen=True)
class RelationNode:
    """Directed edge: subject --label--> object (indices into objects)."""

    label_id: int
    subject: int
    object: int


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[ObjectNode, ...]
    attributes: tuple[AttributeNode, ...] = ()
    relations: tuple[RelationNode, ...] = ()
    source: str = LANGUAGE
    frame_index: Optional[int] = None


@dataclass(frozen=True)
class TemplateGrammar:
    """Token vocabularies for the synthetic caption templates.

    Sentences are one or more clauses joined by the conjunction, each clause
    "(the)? ATTR* OBJ (REL (the)? ATTR* OBJ)?".
    """

    objects: tuple[str, ...]
    attributes: tuple[str, ...]
    relations: tuple[str, ...]
    article: str = "the"
    conjunction: str = "and"

    def object_id(self, word: str) -> Optional[int]:
        return _index_of(self.objects, word)

    def attribute_id(self, word: str) -> Optional[int]:
        return _index_of(self.attributes, word)

    def relation_id(self, word: str) -> Optional[int]:
        return _index_of(self.relations, word)


def _index_of(words: Sequence[str], word: str) -> Optional[int]:
    try:
        return words.index(word)  # type: ignore[union-attr]
    except ValueError:
        return None


def validate(
    graph: SceneGraph,
    grammar: Optional[TemplateGrammar] = None,
    n_regions: Optional[int] = None,
) -> list[str]:
    """Check every structural invariant; return one message per violation.

    Total function: never raises. Label-range checks run only when a grammar
    (label vocabularies) is supplied, region bounds only when n_regions is.
    """
    violations = []
    n_obj = len(graph.objects)

    if graph.source not in (FRAME, LANGUAGE):
        violations.append(f"unknown source {graph.source!r}")
    if graph.source == FRAME and graph.frame_index is None:
        violations.append("frame graph missing frame_index")
    if graph.source == LANGUAGE and graph.frame_index is not None:
        violations.append("language graph carries frame_index")

    for i, obj in enumerate(graph.objects):
        if obj.region_index is not None:
            if graph.source != FRAME:
                violations.append(f"region_index on non-frame graph at object {i}")
            elif n_regions is not None and not 0 <= obj.region_index < n_regions:
                violations.append(f"region_index out of range at object {i}")
        if grammar is not None and not 0 <= obj.label_id < len(grammar.objects):
            violations.append(f"object label out of vocabulary at object {i}")

    for i, att in enumerate(graph.attributes):
        if not 0 <= att.owner < n_obj:
            violations.append(f"dangling owner at attribute {i}")
        if grammar is not None and not 0 <= att.label_id < len(grammar.attributes):
            violations.append(f"attribute label out of vocabulary at attribute {i}")

    for i, rel in enumerate(graph.relations):
        if not 0 <= rel.subject < n_obj:
            violations.append(f"dangling subject at relation {i}")
        if not 0 <= rel.object < n_obj:
            violations.append(f"dangling object at relation {i}")
        if rel.subject == rel.object:
            violations.append(f"self-relation at relation {i}")
        if grammar is not None and not 0 <= rel.label_id < len(grammar.relations):
            violations.append(f"relation label out of vocabulary at relation {i}")

    return violations


def triplets(graph: SceneGraph) -> list[tuple[int, int, int]]:
    """(subject label, relation label, object label) per relation, in order."""
    return [
        (graph.objects[r.subject].label_id, r.label_id, graph.objects[r.object].label_id)
        for r in graph.relations
    ]


class _CaptionParser:
    def __init__(self, tokens: Sequence[str], grammar: TemplateGrammar):
        self.tokens = list(tokens)
        self.grammar = grammar
        self.pos = 0
        self.objects: list[ObjectNode] = []
        self.attributes: list[AttributeNode] = []
        self.relations: list[RelationNode] = []

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def parse(self) -> SceneGraph:
        if not self.tokens:
            raise ParseError("empty sentence")
        while True:
            subject = self.parse_noun_phrase()
            rel_id = None if self.peek() is None else self.grammar.relation_id(self.peek())
            if rel_id is not None:
                self.pos += 1
                obj = self.parse_noun_phrase()
                self.relations.append(RelationNode(label_id=rel_id, subject=subject, object=obj))
            token = self.peek()
            if token is None:
                break
            if token != self.grammar.conjunction:
                raise ParseError(f"unexpected token {token!r} at position {self.pos}")
            self.pos += 1
        return SceneGraph(
            objects=tuple(self.objects),
            attributes=tuple(self.attributes),
            relations=tuple(self.relations),
            source=LANGUAGE,
        )

    def parse_noun_phrase(self) -> int:
        if self.peek() == self.grammar.article:
            self.pos += 1
        # attributes bind to the nearest following object word
        pending = []
        while self.peek() is not None and self.grammar.attribute_id(self.peek()) is not None:
            pending.append(self.grammar.attribute_id(self.peek()))
            self.pos += 1
        token = self.peek()
        if token is None:
            raise ParseError(f"expected object word at position {self.pos}, got end of sentence")
        label = self.grammar.object_id(token)
        if label is None:
            raise ParseError(f"expected object word at position {self.pos}, got {token!r}")
        self.pos += 1
        index = len(self.objects)
        self.objects.append(ObjectNode(label_id=label))
        for att in pending:
            self.attributes.append(AttributeNode(label_id=att, owner=index))
        return index


def parse_caption(tokens: Sequence[str], grammar: TemplateGrammar) -> SceneGraph:
    """Parse a grammar-conforming token sequence into a language scene graph."""
    return _CaptionParser(tokens, grammar).parse()


# JSON schema: {"source": .., "frame_index"?, "objects": [{"label", "region"?}],
# "attributes": [{"label", "owner"}], "relations": [{"label", "subject", "object"}]}
_GRAPH_FIELDS = {"source", "frame_index", "objects", "attributes", "relations"}


def graph_to_json(graph: SceneGraph, grammar: TemplateGrammar) -> dict:
    data: dict = {"source": graph.source}
    if graph.frame_index is not None:
        data["frame_index"] = graph.frame_index
    data["objects"] = [
        {"label": grammar.objects[o.label_id]}
        | ({"region": o.region_index} if o.region_index is not None else {})
        for o in graph.objects
    ]
    data["attributes"] = [
        {"label": grammar.attributes[a.label_id], "owner": a.owner} for a in graph.attributes
    ]
    data["relations"] = [
        {"label": grammar.relations[r.label_id], "subject": r.subject, "object": r.object}
        for r in graph.relations
    ]
    return data


def graph_from_json(data: dict, grammar: TemplateGrammar, path: str = "$") -> SceneGraph:
    """Decode and label-resolve a scene-graph JSON object; reject unknown fields."""
    if not isinstance(data, dict):
        raise SchemaError(path, "expected an object")
    for key in data:
        if key not in _GRAPH_FIELDS:
            raise SchemaError(f"{path}.{key}", "unknown field")
    source = data.get("source")
    if source not in (FRAME, LANGUAGE):
        raise SchemaError(f"{path}.source", "must be 'frame' or 'language'")

    objects = []
    for i, entry in enumerate(_expect_list(data, "objects", path)):
        _check_fields(entry, {"label", "region"}, f"{path}.objects[{i}]")
        label = grammar.object_id(entry.get("label"))
        if label is None:
            raise SchemaError(f"{path}.objects[{i}].label", f"unknown object label {entry.get('label')!r}")
        objects.append(ObjectNode(label_id=label, region_index=entry.get("region")))

    attributes = []
    for i, entry in enumerate(_expect_list(data, "attributes", path)):
        _check_fields(entry, {"label", "owner"}, f"{path}.attributes[{i}]")
        label = grammar.attribute_id(entry.get("label"))
        if label is None:
            raise SchemaError(f"{path}.attributes[{i}].label", f"unknown attribute label {entry.get('label')!r}")
        attributes.append(AttributeNode(label_id=label, owner=entry["owner"]))

    relations = []
    for i, entry in enumerate(_expect_list(data, "relations", path)):
        _check_fields(entry, {"label", "subject", "object"}, f"{path}.relations[{i}]")
        label = grammar.relation_id(entry.get("label"))
        if label is None:
            raise SchemaError(f"{path}.relations[{i}].label", f"unknown relation label {entry.get('label')!r}")
        relations.append(RelationNode(label_id=label, subject=entry["subject"], object=entry["object"]))

    graph = SceneGraph(
        objects=tuple(objects),
        attributes=tuple(attributes),
        relations=tuple(relations),
        source=source,
        frame_index=data.get("frame_index"),
    )
    bad = validate(graph, grammar)
    if bad:
        raise SchemaError(path, f"invalid scene graph: {bad[0]}")
    return graph


def _expect_list(data: dict, key: str, path: str) -> list:
    value = data.get(key, [])
    if not isinstance(value, list):
        raise SchemaError(f"{path}.{key}", "expected a list")
    return value


def _check_fields(entry: dict, allowed: set, path: str) -> None:
    if not isinstance(entry, dict):
        raise SchemaError(path, "expected an object")
    for key in entry:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}", "unknown field")
