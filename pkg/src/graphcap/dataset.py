"""Seeded synthetic grounded-video data, manifest I/O, and batching.

Each clip carries frame features, region proposals (feature + box + class
scores), per-frame scene graphs, a templated caption with its language scene
graph, and object-word annotations with positive-region indicators built
from the IoU > 0.5 rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import scene_graph as sg
from .errors import ConfigError, SchemaError
from .metrics import iou

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_SENTENCE_LEN = 20  # sentences are cut here, annotations beyond are dropped

_OBJECT_WORDS = ("man", "woman", "dog", "cat", "car", "bird", "horse", "child",
                 "boat", "ball", "chair", "bike", "tree", "fish", "sheep", "truck")
_ATTRIBUTE_WORDS = ("blue", "red", "small", "tall", "green", "old", "young",
                    "white", "black", "big")
_RELATION_WORDS = ("grab", "ride", "watch", "follow", "push", "hold", "chase",
                   "touch", "pull", "face")


def _named(base: Sequence[str], prefix: str, n: int) -> tuple[str, ...]:
    if n <= len(base):
        return tuple(base[:n])
    return tuple(base) + tuple(f"{prefix}{i}" for i in range(len(base), n))


def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


_sig9_arr = np.vectorize(_sig9, otypes=[np.float64])


@dataclass(frozen=True)
class Vocabulary:
    """Word vocabulary plus the three disjoint label vocabularies."""

    words: tuple[str, ...]
    objects: tuple[str, ...]
    attributes: tuple[str, ...]
    relations: tuple[str, ...]
    synonyms: tuple[tuple[str, str], ...] = ()  # (word, object label) pairs

    @cached_property
    def word_ids(self) -> dict:
        return {w: i for i, w in enumerate(self.words)}

    @cached_property
    def grammar(self) -> sg.TemplateGrammar:
        return sg.TemplateGrammar(self.objects, self.attributes, self.relations)

    @cached_property
    def _object_class_by_word(self) -> dict:
        table = {w: i for i, w in enumerate(self.objects)}
        for word, label in self.synonyms:
            if label in table:
                table.setdefault(word, table[label])
        return table

    def word_id(self, word: str) -> int:
        return self.word_ids.get(word, UNK_ID)

    def object_class(self, word: str) -> Optional[int]:
        """Object class id for a word, honouring the synonym table."""
        return self._object_class_by_word.get(word)

    def to_json(self) -> dict:
        return {
            "words": list(self.words),
            "objects": list(self.objects),
            "attributes": list(self.attributes),
            "relations": list(self.relations),
            "synonyms": {w: label for w, label in self.synonyms},
        }


def build_vocabulary(n_objects: int, n_attributes: int, n_relations: int) -> Vocabulary:
    objects = _named(_OBJECT_WORDS, "object", n_objects)
    attributes = _named(_ATTRIBUTE_WORDS, "attribute", n_attributes)
    relations = _named(_RELATION_WORDS, "relation", n_relations)
    words = SPECIAL_TOKENS + ("the", "and") + objects + attributes + relations
    return Vocabulary(words=words, objects=objects, attributes=attributes, relations=relations)


@dataclass(frozen=True, eq=False)
class Region:
    feature: np.ndarray  # (d_r,)
    box: tuple[float, float, float, float]  # normalized xyxy
    frame_index: int
    class_scores: np.ndarray  # (n_object_labels,), sums to 1


@dataclass(frozen=True, eq=False)
class ObjectAnnotation:
    token_position: int
    class_id: int
    frame_index: int
    box: tuple[float, float, float, float]
    gamma: np.ndarray  # (N,) uint8, 1 iff IoU(region, box) > 0.5


@dataclass(frozen=True, eq=False)
class Clip:
    clip_id: str
    frame_features: np.ndarray  # (Q, d_f)
    global_rep: np.ndarray  # (d_f + 2,): pooled frames + (clip position, duration)
    regions: tuple[Region, ...]
    frame_graphs: tuple[sg.SceneGraph, ...]
    language_graph: sg.SceneGraph
    sentence: tuple[int, ...]  # word ids, no <bos>/<eos>
    annotations: tuple[ObjectAnnotation, ...]


@dataclass(frozen=True, eq=False)
class VideoSample:
    video_id: str
    split: str
    clips: tuple[Clip, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    videos: tuple[VideoSample, ...]
    vocab: Vocabulary
    prototypes: np.ndarray  # (n_object_labels, d_r) class feature prototypes
    config: "SynthConfig"

    def split(self, name: str) -> tuple[VideoSample, ...]:
        return tuple(v for v in self.videos if v.split == name)

    def clips(self, split: Optional[str] = None) -> list[Clip]:
        videos = self.videos if split is None else self.split(split)
        return [c for v in videos for c in v.clips]


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    val_videos: int = 6
    clips_per_video: int = 2
    frames_per_clip: int = 3  # Q
    regions_per_clip: int = 8  # N
    n_object_labels: int = 12
    n_attribute_labels: int = 6
    n_relation_labels: int = 6
    region_dim: int = 16  # d_r
    frame_dim: int = 16  # d_f
    noise: float = 0.05  # feature noise sigma

    def validate(self) -> None:
        for name in ("n_videos", "clips_per_video", "frames_per_clip", "regions_per_clip",
                     "n_object_labels", "n_attribute_labels", "n_relation_labels",
                     "region_dim", "frame_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.val_videos < 0:
            raise ConfigError(f"val_videos must be >= 0, got {self.val_videos}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.regions_per_clip < 5:
            raise ConfigError("regions_per_clip must be >= 5 (two facts plus frame coverage)")
        if self.n_object_labels < 5:
            raise ConfigError("n_object_labels must be >= 5 to leave distractor classes")


def render_caption(graph: sg.SceneGraph, grammar: sg.TemplateGrammar) -> list[str]:
    """Render a template-shaped language graph back into tokens.

    Inverse of parse_caption for graphs where every object takes part in at
    most one relation (the shape the synthesizer produces).
    """
    tokens, _ = _render_with_positions(graph, grammar)
    return tokens


def _render_with_positions(graph, grammar):
    attrs_of = {}
    for att in graph.attributes:
        attrs_of.setdefault(att.owner, []).append(att.label_id)
    seen = [False] * len(graph.objects)
    positions = [-1] * len(graph.objects)
    tokens: list[str] = []

    def noun_phrase(obj_index: int) -> None:
        tokens.append(grammar.article)
        for label in attrs_of.get(obj_index, []):
            tokens.append(grammar.attributes[label])
        positions[obj_index] = len(tokens)
        tokens.append(grammar.objects[graph.objects[obj_index].label_id])
        seen[obj_index] = True

    clauses = 0
    for rel in graph.relations:
        if seen[rel.subject] or seen[rel.object]:
            raise ConfigError("render_caption requires each object in at most one relation")
        if clauses:
            tokens.append(grammar.conjunction)
        noun_phrase(rel.subject)
        tokens.append(grammar.relations[rel.label_id])
        noun_phrase(rel.object)
        clauses += 1
    for i in range(len(graph.objects)):
        if not seen[i]:
            if clauses:
                tokens.append(grammar.conjunction)
            noun_phrase(i)
            clauses += 1
    return tokens, positions


_GRID = 3  # boxes live in distinct cells of a GRID x GRID layout


def _cell_box(cell: int, rng: np.random.Generator) -> tuple[float, float, float, float]:
    row, col = divmod(cell, _GRID)
    span = 1.0 / _GRID
    x0, y0 = col * span, row * span
    # minimum side 0.2 keeps the jittered proposal comfortably above IoU 0.5
    x1 = x0 + rng.uniform(0.0, span - 0.22)
    y1 = y0 + rng.uniform(0.0, span - 0.22)
    w = rng.uniform(0.2, span - (x1 - x0) - 0.01)
    h = rng.uniform(0.2, span - (y1 - y0) - 0.01)
    return (_sig9(x1), _sig9(y1), _sig9(x1 + w), _sig9(y1 + h))


def _jitter_box(box, rng: np.random.Generator):
    x1, y1, x2, y2 = box
    d = rng.uniform(-0.01, 0.01, size=4)
    return (_sig9(x1 + d[0]), _sig9(y1 + d[1]), _sig9(x2 + d[2]), _sig9(y2 + d[3]))


def _class_scores(feature: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    d2 = np.sum((prototypes - feature[None, :]) ** 2, axis=1)
    logits = -d2
    logits -= logits.max()
    scores = np.exp(logits)
    return _sig9_arr(scores / scores.sum())


def synthesize(config: SynthConfig, seed: int) -> Dataset:
    """Build a deterministic desk-scale dataset from (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    vocab = build_vocabulary(config.n_object_labels, config.n_attribute_labels,
                             config.n_relation_labels)
    grammar = vocab.grammar
    prototypes = _sig9_arr(rng.normal(0.0, 2.0 / np.sqrt(config.region_dim),
                                      size=(config.n_object_labels, config.region_dim)))

    videos = []
    total = config.n_videos + config.val_videos
    for v in range(total):
        split = "train" if v < config.n_videos else "val"
        video_id = f"v{v:04d}"
        clips = tuple(
            _synthesize_clip(config, rng, vocab, grammar, prototypes,
                             clip_id=f"{video_id}_c{j}", clip_index=j)
            for j in range(config.clips_per_video)
        )
        videos.append(VideoSample(video_id=video_id, split=split, clips=clips))
    return Dataset(videos=tuple(videos), vocab=vocab, prototypes=prototypes, config=config)


def _synthesize_clip(config, rng, vocab, grammar, prototypes, clip_id, clip_index):
    q_frames = config.frames_per_clip
    n_facts = int(rng.integers(1, 3))
    mention_classes = rng.choice(config.n_object_labels, size=2 * n_facts, replace=False)

    # language graph in canonical (render) order: subject, object per fact
    objects, attributes, relations = [], [], []
    obj_frames = []
    for f in range(n_facts):
        subj, obj = 2 * f, 2 * f + 1
        frame = f % q_frames
        for k in (subj, obj):
            if rng.random() < 0.6:
                attributes.append(sg.AttributeNode(
                    label_id=int(rng.integers(config.n_attribute_labels)), owner=k))
            objects.append(sg.ObjectNode(label_id=int(mention_classes[k])))
            obj_frames.append(frame)
        relations.append(sg.RelationNode(
            label_id=int(rng.integers(config.n_relation_labels)), subject=subj, object=obj))
    attributes.sort(key=lambda a: a.owner)
    language_graph = sg.SceneGraph(objects=tuple(objects), attributes=tuple(attributes),
                                   relations=tuple(relations), source=sg.LANGUAGE)

    tokens, positions = _render_with_positions(language_graph, grammar)
    tokens = tokens[:MAX_SENTENCE_LEN]
    sentence = tuple(vocab.word_id(t) for t in tokens)

    # one proposal per mentioned object plus distractor proposals, each in
    # its own grid cell so the gamma rule (IoU > 0.5, full region set) only
    # fires on the intended proposal
    n_mentioned = len(objects)
    n_distract = config.regions_per_clip - n_mentioned
    cells = rng.permutation(_GRID * _GRID)[:config.regions_per_clip]
    covered = set(obj_frames)
    spare_frames = [q for q in range(q_frames) if q not in covered]
    distract_frames = (spare_frames + [int(rng.integers(q_frames))
                                       for _ in range(n_distract)])[:n_distract]
    free_classes = [c for c in range(config.n_object_labels) if c not in set(mention_classes)]

    regions = []
    gt_boxes = []
    for k in range(n_mentioned):
        gt_box = _cell_box(int(cells[k]), rng)
        gt_boxes.append(gt_box)
        feature = _sig9_arr(prototypes[objects[k].label_id]
                            + rng.normal(0.0, config.noise, size=config.region_dim))
        regions.append(Region(feature=feature, box=_jitter_box(gt_box, rng),
                              frame_index=obj_frames[k],
                              class_scores=_class_scores(feature, prototypes)))
    distract_classes = []
    for k in range(n_distract):
        cls = int(free_classes[int(rng.integers(len(free_classes)))])
        distract_classes.append(cls)
        feature = _sig9_arr(prototypes[cls]
                            + rng.normal(0.0, config.noise, size=config.region_dim))
        regions.append(Region(feature=feature, box=_cell_box(int(cells[n_mentioned + k]), rng),
                              frame_index=distract_frames[k],
                              class_scores=_class_scores(feature, prototypes)))

    frame_graphs = []
    for q in range(q_frames):
        f_objects, f_attributes, f_relations = [], [], []
        remap = {}
        for k, obj in enumerate(objects):
            if obj_frames[k] == q:
                remap[k] = len(f_objects)
                f_objects.append(sg.ObjectNode(label_id=obj.label_id, region_index=k))
        for att in attributes:
            if att.owner in remap:
                f_attributes.append(sg.AttributeNode(label_id=att.label_id,
                                                     owner=remap[att.owner]))
        for rel in relations:
            if rel.subject in remap and rel.object in remap:
                f_relations.append(sg.RelationNode(label_id=rel.label_id,
                                                   subject=remap[rel.subject],
                                                   object=remap[rel.object]))
        for k in range(n_distract):
            if distract_frames[k] == q:
                idx = len(f_objects)
                f_objects.append(sg.ObjectNode(label_id=distract_classes[k],
                                               region_index=n_mentioned + k))
                if rng.random() < 0.5:
                    f_attributes.append(sg.AttributeNode(
                        label_id=int(rng.integers(config.n_attribute_labels)), owner=idx))
        frame_graphs.append(sg.SceneGraph(objects=tuple(f_objects),
                                          attributes=tuple(f_attributes),
                                          relations=tuple(f_relations),
                                          source=sg.FRAME, frame_index=q))

    all_boxes = [r.box for r in regions]
    annotations = []
    for k in range(n_mentioned):
        if positions[k] >= MAX_SENTENCE_LEN:
            continue
        gamma = np.array([1 if iou(b, gt_boxes[k]) > 0.5 else 0 for b in all_boxes],
                         dtype=np.uint8)
        annotations.append(ObjectAnnotation(token_position=positions[k],
                                            class_id=objects[k].label_id,
                                            frame_index=obj_frames[k],
                                            box=gt_boxes[k], gamma=gamma))

    features = np.stack([r.feature for r in regions])
    frame_features = np.zeros((q_frames, config.frame_dim))
    for q in range(q_frames):
        members = features[[r.frame_index == q for r in regions]]
        pooled = members.mean(axis=0)
        resized = np.resize(pooled, config.frame_dim)  # identity when d_f == d_r
        frame_features[q] = resized + rng.normal(0.0, config.noise, size=config.frame_dim)
    frame_features = _sig9_arr(frame_features)
    global_rep = _sig9_arr(np.concatenate([
        frame_features.mean(axis=0),
        [clip_index / config.clips_per_video, 0.5],
    ]))

    return Clip(clip_id=clip_id, frame_features=frame_features, global_rep=global_rep,
                regions=tuple(regions), frame_graphs=tuple(frame_graphs),
                language_graph=language_graph, sentence=sentence,
                annotations=tuple(annotations))


# ---------------------------------------------------------------------------
# Manifest I/O


def manifest_dict(dataset: Dataset) -> dict:
    vocab = dataset.vocab
    grammar = vocab.grammar
    return {
        "vocab": vocab.to_json(),
        "config": {k: getattr(dataset.config, k) for k in SynthConfig.__dataclass_fields__},
        "prototypes": dataset.prototypes.tolist(),
        "videos": [
            {
                "video_id": v.video_id,
                "split": v.split,
                "clips": [
                    {
                        "clip_id": c.clip_id,
                        "frame_features": c.frame_features.tolist(),
                        "global_rep": c.global_rep.tolist(),
                        "regions": [
                            {
                                "feature": r.feature.tolist(),
                                "box": list(r.box),
                                "frame_index": r.frame_index,
                                "class_scores": r.class_scores.tolist(),
                            }
                            for r in c.regions
                        ],
                        "frame_graphs": [sg.graph_to_json(g, grammar) for g in c.frame_graphs],
                        "language_graph": sg.graph_to_json(c.language_graph, grammar),
                        "sentence": [vocab.words[t] for t in c.sentence],
                        "annotations": [
                            {
                                "token_position": a.token_position,
                                "class": vocab.objects[a.class_id],
                                "frame_index": a.frame_index,
                                "box": list(a.box),
                                "gamma": a.gamma.tolist(),
                            }
                            for a in c.annotations
                        ],
                    }
                    for c in v.clips
                ],
            }
            for v in dataset.videos
        ],
    }


def save(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(manifest_dict(dataset), indent=1), encoding="utf-8")


class _Walker:
    """Schema walker that reports the JSON path of the first offending field."""

    def __init__(self, data, path="$"):
        self.data = data
        self.path = path

    def fail(self, key, message):
        raise SchemaError(f"{self.path}.{key}" if key else self.path, message)

    def require(self, key, kind):
        if not isinstance(self.data, dict):
            raise SchemaError(self.path, "expected an object")
        if key not in self.data:
            self.fail(key, "missing required field")
        value = self.data[key]
        if not isinstance(value, kind) or isinstance(value, bool):
            self.fail(key, f"expected {kind.__name__}")
        return value

    def reject_unknown(self, allowed):
        for key in self.data:
            if key not in allowed:
                self.fail(key, "unknown field")

    def child(self, key, index=None):
        suffix = f".{key}" if index is None else f".{key}[{index}]"
        return _Walker(self.data[key] if index is None else self.data[key][index],
                       self.path + suffix)


def _float_vector(walker: _Walker, key: str, length: Optional[int] = None) -> np.ndarray:
    raw = walker.require(key, list)
    if any(not isinstance(x, (int, float)) or isinstance(x, bool) for x in raw):
        walker.fail(key, "expected a list of numbers")
    if length is not None and len(raw) != length:
        walker.fail(key, f"expected length {length}, got {len(raw)}")
    return np.asarray(raw, dtype=np.float64)


def _box_from(walker: _Walker, key: str) -> tuple[float, float, float, float]:
    vec = _float_vector(walker, key, 4)
    x1, y1, x2, y2 = (float(v) for v in vec)
    if not (x1 < x2 and y1 < y2):
        walker.fail(key, "box invariant violated: requires x1 < x2 and y1 < y2")
    return (x1, y1, x2, y2)


def load(path) -> Dataset:
    """Load and fully validate a manifest; SchemaError names the first bad field."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from exc

    root = _Walker(data)
    root.reject_unknown({"vocab", "config", "prototypes", "videos"})
    vocab_w = _Walker(root.require("vocab", dict), "$.vocab")
    vocab_w.reject_unknown({"words", "objects", "attributes", "relations", "synonyms"})
    words = vocab_w.require("words", list)
    if len(words) < len(SPECIAL_TOKENS) or tuple(words[:4]) != SPECIAL_TOKENS:
        vocab_w.fail("words", "first four entries must be the special tokens")
    synonyms = tuple(sorted((vocab_w.data.get("synonyms") or {}).items()))
    vocab = Vocabulary(words=tuple(words),
                       objects=tuple(vocab_w.require("objects", list)),
                       attributes=tuple(vocab_w.require("attributes", list)),
                       relations=tuple(vocab_w.require("relations", list)),
                       synonyms=synonyms)
    grammar = vocab.grammar

    config_w = _Walker(root.require("config", dict), "$.config")
    config_w.reject_unknown(set(SynthConfig.__dataclass_fields__))
    try:
        config = SynthConfig(**config_w.data)
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise SchemaError("$.config", str(exc)) from exc

    prototypes = np.asarray(root.require("prototypes", list), dtype=np.float64)
    if prototypes.shape != (config.n_object_labels, config.region_dim):
        root.fail("prototypes", f"expected shape {(config.n_object_labels, config.region_dim)}")

    videos = []
    for vi, _ in enumerate(root.require("videos", list)):
        vw = root.child("videos", vi)
        vw.reject_unknown({"video_id", "split", "clips"})
        video_id = vw.require("video_id", str)
        split = vw.require("split", str)
        if split not in ("train", "val", "test"):
            vw.fail("split", "must be train, val, or test")
        clips = []
        for ci, _ in enumerate(vw.require("clips", list)):
            clips.append(_load_clip(vw.child("clips", ci), vocab, grammar, config))
        videos.append(VideoSample(video_id=video_id, split=split, clips=tuple(clips)))

    return Dataset(videos=tuple(videos), vocab=vocab, prototypes=prototypes, config=config)


def _load_clip(cw: _Walker, vocab: Vocabulary, grammar, config: SynthConfig) -> Clip:
    cw.reject_unknown({"clip_id", "frame_features", "global_rep", "regions",
                       "frame_graphs", "language_graph", "sentence", "annotations"})
    clip_id = cw.require("clip_id", str)
    q_frames = config.frames_per_clip

    raw_frames = cw.require("frame_features", list)
    if len(raw_frames) != q_frames:
        cw.fail("frame_features", f"expected {q_frames} frames")
    try:
        frame_features = np.asarray(raw_frames, dtype=np.float64)
    except (TypeError, ValueError):
        cw.fail("frame_features", "expected a numeric matrix")
    if frame_features.shape != (q_frames, config.frame_dim):
        cw.fail("frame_features", f"expected {config.frame_dim}-dim rows")
    global_rep = _float_vector(cw, "global_rep", config.frame_dim + 2)

    regions = []
    for ri, _ in enumerate(cw.require("regions", list)):
        rw = cw.child("regions", ri)
        rw.reject_unknown({"feature", "box", "frame_index", "class_scores"})
        frame_index = rw.require("frame_index", int)
        if not 0 <= frame_index < q_frames:
            rw.fail("frame_index", f"must be in [0, {q_frames})")
        scores = _float_vector(rw, "class_scores", config.n_object_labels)
        if abs(scores.sum() - 1.0) > 1e-6:
            rw.fail("class_scores", "must sum to 1 within 1e-6")
        if (scores < 0).any():
            rw.fail("class_scores", "must be nonnegative")
        regions.append(Region(feature=_float_vector(rw, "feature", config.region_dim),
                              box=_box_from(rw, "box"), frame_index=frame_index,
                              class_scores=scores))
    n_regions = len(regions)

    frame_graphs = []
    for gi, raw in enumerate(cw.require("frame_graphs", list)):
        path = f"{cw.path}.frame_graphs[{gi}]"
        graph = sg.graph_from_json(raw, grammar, path)
        bad = sg.validate(graph, grammar, n_regions=n_regions)
        if bad:
            raise SchemaError(path, bad[0])
        if graph.source != sg.FRAME:
            raise SchemaError(f"{path}.source", "frame graph expected")
        frame_graphs.append(graph)

    language_graph = sg.graph_from_json(cw.require("language_graph", dict), grammar,
                                        f"{cw.path}.language_graph")
    if language_graph.source != sg.LANGUAGE:
        raise SchemaError(f"{cw.path}.language_graph.source", "language graph expected")

    raw_sentence = cw.require("sentence", list)
    if any(not isinstance(t, str) for t in raw_sentence):
        cw.fail("sentence", "expected word strings")
    sentence = tuple(vocab.word_id(t) for t in raw_sentence[:MAX_SENTENCE_LEN])

    annotations = []
    for ai, _ in enumerate(cw.require("annotations", list)):
        aw = cw.child("annotations", ai)
        aw.reject_unknown({"token_position", "class", "frame_index", "box", "gamma"})
        pos = aw.require("token_position", int)
        if pos >= MAX_SENTENCE_LEN:
            continue  # annotation dropped with the cut tokens
        if not 0 <= pos < len(sentence):
            aw.fail("token_position", "out of sentence range")
        class_word = aw.require("class", str)
        class_id = vocab.object_class(class_word)
        if class_id is None:
            aw.fail("class", f"unknown object class {class_word!r}")
        if vocab.object_class(vocab.words[sentence[pos]]) is None:
            aw.fail("token_position", "does not point at an object word")
        frame_index = aw.require("frame_index", int)
        if not 0 <= frame_index < q_frames:
            aw.fail("frame_index", f"must be in [0, {q_frames})")
        gamma_raw = aw.require("gamma", list)
        if len(gamma_raw) != n_regions:
            aw.fail("gamma", f"expected length {n_regions}")
        if any(g not in (0, 1) for g in gamma_raw):
            aw.fail("gamma", "entries must be 0 or 1")
        if sum(gamma_raw) == 0:
            aw.fail("gamma", "needs at least one positive region")
        annotations.append(ObjectAnnotation(token_position=pos, class_id=class_id,
                                            frame_index=frame_index, box=_box_from(aw, "box"),
                                            gamma=np.asarray(gamma_raw, dtype=np.uint8)))

    return Clip(clip_id=clip_id, frame_features=frame_features, global_rep=global_rep,
                regions=tuple(regions), frame_graphs=tuple(frame_graphs),
                language_graph=language_graph, sentence=sentence,
                annotations=tuple(annotations))


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True, eq=False)
class Batch:
    clips: tuple[Clip, ...]
    sentences: np.ndarray  # (B, T) int64, padded with PAD_ID
    sentence_mask: np.ndarray  # (B, T) bool, True on real tokens
    region_features: np.ndarray  # (B, N_max, d_r)
    region_mask: np.ndarray  # (B, N_max) bool, True on real regions


def batches(dataset: Dataset, batch_size: int, seed: int,
            split: Optional[str] = None) -> Iterator[Batch]:
    """Deterministically shuffled clip batches with padding masks."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    clips = dataset.clips(split)
    order = np.random.default_rng(seed).permutation(len(clips))
    for start in range(0, len(clips), batch_size):
        chunk = [clips[i] for i in order[start:start + batch_size]]
        yield _collate(chunk)


def _collate(chunk: Sequence[Clip]) -> Batch:
    b = len(chunk)
    t_max = max(len(c.sentence) for c in chunk)
    n_max = max(len(c.regions) for c in chunk)
    d_r = chunk[0].regions[0].feature.shape[0]
    sentences = np.full((b, t_max), PAD_ID, dtype=np.int64)
    sentence_mask = np.zeros((b, t_max), dtype=bool)
    region_features = np.zeros((b, n_max, d_r))
    region_mask = np.zeros((b, n_max), dtype=bool)
    for i, clip in enumerate(chunk):
        sentences[i, :len(clip.sentence)] = clip.sentence
        sentence_mask[i, :len(clip.sentence)] = True
        for j, region in enumerate(clip.regions):
            region_features[i, j] = region.feature
        region_mask[i, :len(clip.regions)] = True
    return Batch(clips=tuple(chunk), sentences=sentences, sentence_mask=sentence_mask,
                 region_features=region_features, region_mask=region_mask)
