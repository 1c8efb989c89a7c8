"""Captioning, grounding, and hallucination metrics.

Everything here is a pure function of plain data (token lists, boxes,
attention vectors), so the suite can be re-checked against naive
re-implementations.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyCorpusError

Box = tuple[float, float, float, float]


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of two xyxy boxes; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


# ---------------------------------------------------------------------------
# Captioning metrics


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]],
         references: Sequence[Sequence[Sequence[str]]], n: int) -> float:
    """Corpus-level BLEU@n: clipped n-gram precision with brevity penalty.

    Geometric mean of the clipped precisions for orders 1..n, times
    exp(1 - r/c) when the candidate corpus is shorter than the (closest)
    reference lengths.
    """
    if len(candidates) == 0:
        raise EmptyCorpusError("BLEU needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")

    matched = [0] * n
    attempted = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min(((abs(len(r) - len(cand)), len(r)) for r in refs))[1]
        for k in range(1, n + 1):
            counts = _ngram_counts(cand, k)
            max_ref = Counter()
            for ref in refs:
                for gram, count in _ngram_counts(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], count)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            attempted[k - 1] += max(len(cand) - k + 1, 0)

    if cand_len == 0 or any(a == 0 for a in attempted) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / a) for m, a in zip(matched, attempted)) / n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def cider(candidates: Sequence[Sequence[str]],
          references: Sequence[Sequence[Sequence[str]]]) -> float:
    """Corpus CIDEr: mean over n in 1..4 of TF-IDF cosine, averaged over
    references and clips, scaled by 10.

    idf(g) = ln(M) - ln(df(g)) with df counted over the M clips' reference
    sets; n-grams absent from every reference get weight 0, so duplicating
    the whole corpus leaves per-clip scores unchanged.
    """
    if len(candidates) < 2:
        raise EmptyCorpusError("CIDEr needs at least two clips for document frequencies")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    n_max = 4
    m = len(candidates)

    doc_freq: list[Counter] = [Counter() for _ in range(n_max)]
    for refs in references:
        for k in range(1, n_max + 1):
            grams = set()
            for ref in refs:
                grams.update(_ngram_counts(ref, k))
            doc_freq[k - 1].update(grams)

    def tfidf(tokens, k):
        vec = {}
        for gram, count in _ngram_counts(tokens, k).items():
            df = doc_freq[k - 1].get(gram, 0)
            if df > 0:
                vec[gram] = count * (math.log(m) - math.log(df))
        return vec

    def cosine(u: dict, v: dict) -> float:
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0 or nv == 0:
            return 0.0
        return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)

    scores = []
    for cand, refs in zip(candidates, references):
        per_ref = []
        for ref in refs:
            sims = [cosine(tfidf(cand, k), tfidf(ref, k)) for k in range(1, n_max + 1)]
            per_ref.append(sum(sims) / n_max)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Grounding metrics


@dataclass(frozen=True)
class LocalizedWord:
    token_index: int
    word: str
    region_index: int
    frame_index: int
    box: Box


@dataclass(frozen=True)
class ClipPrediction:
    clip_id: str
    tokens: tuple[str, ...]
    localized: tuple[LocalizedWord, ...] = ()


@dataclass(frozen=True)
class ClipReference:
    clip_id: str
    tokens: tuple[str, ...]
    object_boxes: tuple[tuple[int, Box], ...] = ()  # (class id, gt box) per annotation
    gt_objects: frozenset = frozenset()  # class ids for hallucination eval


@dataclass(frozen=True)
class F1Counts:
    f1_all: float
    f1_loc: float
    count_a: int  # generated object words
    count_b: int  # of those, correctly predicted
    count_c: int  # of those, also localized (IoU > threshold)


def grounding_f1(predictions: Sequence[ClipPrediction],
                 references: Sequence[ClipReference],
                 classify: Callable[[str], Optional[int]],
                 iou_threshold: float = 0.5) -> F1Counts:
    """F1_ALL = C/A and F1_LOC = C/B over generated object words.

    A generated object word is correct (B) when its class occurs among the
    reference sentence's object words, and localized (C) when its predicted
    box additionally overlaps some annotation of that class by more than the
    threshold. Zero denominators yield 0.
    """
    a = b = c = 0
    for pred, ref in zip(predictions, references):
        ref_classes = {classify(w) for w in ref.tokens} - {None}
        boxes_by_class = defaultdict(list)
        for class_id, box in ref.object_boxes:
            boxes_by_class[class_id].append(box)
        predicted_box = {lw.token_index: lw.box for lw in pred.localized}
        for t, word in enumerate(pred.tokens):
            class_id = classify(word)
            if class_id is None:
                continue
            a += 1
            if class_id not in ref_classes:
                continue
            b += 1
            box = predicted_box.get(t)
            if box is not None and any(iou(box, gt) > iou_threshold
                                       for gt in boxes_by_class.get(class_id, [])):
                c += 1
    return F1Counts(f1_all=c / a if a else 0.0, f1_loc=c / b if b else 0.0,
                    count_a=a, count_b=b, count_c=c)


@dataclass(frozen=True, eq=False)
class AttentionTrace:
    """Region attention recorded at one annotated object word."""

    attention: np.ndarray  # a^r over the clip's N regions
    boxes: tuple[Box, ...]  # region boxes, aligned with attention
    candidate_mask: np.ndarray  # bool, regions eligible for this annotation
    gt_box: Box
    localized_region: int


def grd_att(traces: Sequence[AttentionTrace], iou_threshold: float = 0.5,
            total_annotations: Optional[int] = None) -> tuple[float, float]:
    """Localization accuracy and attention correctness at annotated words.

    GRD counts traces whose localized region overlaps the ground-truth box;
    ATT averages the attention mass on correct regions, renormalized over the
    candidate set. total_annotations widens the denominator so annotations
    without a trace (word never generated) count as misses.
    """
    denom_count = total_annotations if total_annotations is not None else len(traces)
    if denom_count == 0:
        return 0.0, 0.0
    grd_hits = 0
    att_total = 0.0
    for trace in traces:
        correct = np.array([iou(box, trace.gt_box) > iou_threshold for box in trace.boxes])
        if correct[trace.localized_region]:
            grd_hits += 1
        weights = np.asarray(trace.attention) * trace.candidate_mask
        denom = weights.sum()
        if denom > 0:
            att_total += float(weights[correct & trace.candidate_mask].sum() / denom)
    return grd_hits / denom_count, att_total / denom_count


def chair(predictions: Sequence[ClipPrediction],
          references: Sequence[ClipReference],
          classify: Callable[[str], Optional[int]]) -> tuple[float, float, float]:
    """Hallucination rates per instance and per sentence, plus object recall.

    chair_i pools mentioned object instances over the corpus; recall_o pools
    distinct ground-truth objects per clip. 0/0 cases are defined as 0.
    """
    instances = 0
    hallucinated = 0
    bad_sentences = 0
    gt_total = 0
    gt_mentioned = 0
    for pred, ref in zip(predictions, references):
        mentioned = [classify(w) for w in pred.tokens]
        mentioned = [c for c in mentioned if c is not None]
        instances += len(mentioned)
        clip_halluc = sum(1 for c in mentioned if c not in ref.gt_objects)
        hallucinated += clip_halluc
        if clip_halluc:
            bad_sentences += 1
        gt_total += len(ref.gt_objects)
        gt_mentioned += len(ref.gt_objects & set(mentioned))
    chair_i = hallucinated / instances if instances else 0.0
    chair_s = bad_sentences / len(predictions) if predictions else 0.0
    recall_o = gt_mentioned / gt_total if gt_total else 0.0
    return chair_i, chair_s, recall_o


@dataclass
class MetricReport:
    bleu1: float
    bleu4: float
    cider: float
    f1_all: float
    f1_loc: float
    grd: float
    att: float
    chair_i: float
    chair_s: float
    recall_o: float
    count_a: int
    count_b: int
    count_c: int
    modes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "captioning": {"bleu1": self.bleu1, "bleu4": self.bleu4, "cider": self.cider},
            "grounding": {"f1_all": self.f1_all, "f1_loc": self.f1_loc,
                          "grd": self.grd, "att": self.att,
                          "counts": {"A": self.count_a, "B": self.count_b, "C": self.count_c}},
            "hallucination": {"chair_i": self.chair_i, "chair_s": self.chair_s,
                              "recall_o": self.recall_o},
            "modes": dict(self.modes),
        }

    def table(self) -> str:
        """Plain-text row mirroring the captioning/grounding table layout."""
        header = (f"{'BLEU@1':>8} {'BLEU@4':>8} {'CIDEr':>8} {'GRD.':>8} {'ATT.':>8} "
                  f"{'F1_ALL':>8} {'F1_LOC':>8} {'CHAIR_i':>8} {'CHAIR_s':>8} {'RECALL_o':>9}")
        row = (f"{self.bleu1:8.4f} {self.bleu4:8.4f} {self.cider:8.4f} {self.grd:8.4f} "
               f"{self.att:8.4f} {self.f1_all:8.4f} {self.f1_loc:8.4f} {self.chair_i:8.4f} "
               f"{self.chair_s:8.4f} {self.recall_o:9.4f}")
        return header + "\n" + row
