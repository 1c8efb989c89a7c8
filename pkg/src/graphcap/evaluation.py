"""Evaluation harness: runs the model over a dataset split, assembles
generation traces with localized object words, and computes the full metric
report."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import metrics
from .dataset import Clip, Dataset, VideoSample, Vocabulary
from .errors import VocabularyError
from .model import GroundedCaptioner, video_tensors


@dataclass(frozen=True)
class TraceRecord:
    """Per-clip generation trace, the JSON surface consumed by the metrics."""

    video_id: str
    clip_id: str
    tokens: tuple[str, ...]
    s_r: tuple[float, ...]
    s_sg: tuple[float, ...]
    a_r: tuple[tuple[float, ...], ...]
    a_sg: tuple[tuple[float, ...], ...]
    localized_regions: tuple[dict, ...]

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "clip_id": self.clip_id,
            "tokens": list(self.tokens),
            "s_r": list(self.s_r),
            "s_sg": list(self.s_sg),
            "a_r": [list(row) for row in self.a_r],
            "a_sg": [list(row) for row in self.a_sg],
            "localized_regions": [dict(e) for e in self.localized_regions],
        }


def _candidate_mask(clip: Clip, class_id: int, restrict: bool) -> Optional[np.ndarray]:
    """Target-frame restriction: regions on the frame holding the class's
    ground-truth box. Falls back to all regions when unrestricted or the
    class has no annotation."""
    if not restrict:
        return None
    for ann in clip.annotations:
        if ann.class_id == class_id:
            return np.array([r.frame_index == ann.frame_index for r in clip.regions])
    return None


def generate_traces(model: GroundedCaptioner, videos: Sequence[VideoSample],
                    mode: str = "greedy", beam_width: int = 3, max_len: int = 20,
                    restrict_gt_frame: bool = False, zero_graph: bool = False,
                    gate_override: Optional[tuple[float, float]] = None) -> list[TraceRecord]:
    vocab = model.vocab
    traces = []
    for video in videos:
        cts = video_tensors(video)
        for generated in model.generate_video(cts, mode=mode, beam_width=beam_width,
                                              max_len=max_len, gate_override=gate_override,
                                              zero_graph=zero_graph):
            clip = generated.clip
            words = tuple(vocab.words[t] for t in generated.tokens)
            localized = []
            for t, word in enumerate(words):
                class_id = vocab.object_class(word)
                if class_id is None:
                    continue
                mask = _candidate_mask(clip, class_id, restrict_gt_frame)
                region = model.localize_word(class_id, generated.regions_aug,
                                             generated.selections[t].a_r, mask)
                localized.append({
                    "token_index": t,
                    "region_index": region,
                    "frame_index": clip.regions[region].frame_index,
                    "box": list(clip.regions[region].box),
                })
            traces.append(TraceRecord(
                video_id=video.video_id,
                clip_id=clip.clip_id,
                tokens=words,
                s_r=tuple(float(s.s_r) for s in generated.selections),
                s_sg=tuple(float(s.s_sg) for s in generated.selections),
                a_r=tuple(tuple(float(x) for x in s.a_r) for s in generated.selections),
                a_sg=tuple(tuple(float(x) for x in s.a_sg) for s in generated.selections),
                localized_regions=tuple(localized),
            ))
    return traces


def save_traces(traces: Sequence[TraceRecord], path) -> None:
    Path(path).write_text(
        json.dumps({"clips": [t.to_json() for t in traces]}, indent=1), encoding="utf-8")


@torch.no_grad()
def teacher_forced_attention(model: GroundedCaptioner, videos: Sequence[VideoSample],
                             restrict_gt_frame: bool = True) -> tuple[list, int]:
    """AttentionTrace per annotated object word under teacher forcing, plus
    the total annotation count."""
    traces = []
    total = 0
    for video in videos:
        cts = video_tensors(video)
        state = model.decoder.initial_state()
        last_h2 = None
        for ct in cts:
            graph_repr, _ = model.clip_graph_repr(ct, "full")
            if last_h2 is not None:
                state, _ = model.decoder.init_next_sentence(state, last_h2, graph_repr)
            _, selections, state, regions = model.decode_teacher_forced(ct, graph_repr, state)
            last_h2 = state.h2
            boxes = tuple(r.box for r in ct.clip.regions)
            for ann in ct.clip.annotations:
                total += 1
                a_r = selections[ann.token_position].a_r
                mask = _candidate_mask(ct.clip, ann.class_id, restrict_gt_frame)
                region = model.localize_word(ann.class_id, regions, a_r, mask)
                full_mask = np.ones(len(boxes), dtype=bool) if mask is None else mask
                traces.append(metrics.AttentionTrace(
                    attention=a_r.detach().cpu().numpy(),
                    boxes=boxes, candidate_mask=full_mask,
                    gt_box=ann.box, localized_region=region))
    return traces, total


def generated_attention(traces: Sequence[TraceRecord], videos: Sequence[VideoSample],
                        vocab: Vocabulary) -> tuple[list, int]:
    """GRD/ATT ingredients from generated sentences: each annotation matches
    the first generated occurrence of its word; absent words count as misses."""
    by_clip = {t.clip_id: t for t in traces}
    out = []
    total = 0
    for video in videos:
        for clip in video.clips:
            trace = by_clip.get(clip.clip_id)
            if trace is None:
                continue
            boxes = tuple(r.box for r in clip.regions)
            localized_by_token = {e["token_index"]: e["region_index"]
                                  for e in trace.localized_regions}
            for ann in clip.annotations:
                total += 1
                word = vocab.objects[ann.class_id]
                hits = [t for t, w in enumerate(trace.tokens)
                        if vocab.object_class(w) == ann.class_id and t in localized_by_token]
                if not hits:
                    continue
                t = hits[0]
                out.append(metrics.AttentionTrace(
                    attention=np.array(trace.a_r[t]),
                    boxes=boxes,
                    candidate_mask=np.ones(len(boxes), dtype=bool),
                    gt_box=ann.box,
                    localized_region=localized_by_token[t]))
    return out, total


def clip_references(videos: Sequence[VideoSample], vocab: Vocabulary,
                    halluc_gt: Optional[dict] = None) -> list[metrics.ClipReference]:
    """Gold sentences, annotated boxes, and hallucination ground-truth sets.

    halluc_gt optionally overrides the per-clip object sets (clip_id -> list
    of object words, the relabeled-annotation format)."""
    references = []
    for video in videos:
        for clip in video.clips:
            tokens = tuple(vocab.words[t] for t in clip.sentence)
            if halluc_gt is not None and clip.clip_id in halluc_gt:
                gt_objects = set()
                for word in halluc_gt[clip.clip_id]:
                    class_id = vocab.object_class(word)
                    if class_id is None:
                        raise VocabularyError(
                            f"hallucination ground truth {word!r} has no object class")
                    gt_objects.add(class_id)
            else:
                gt_objects = {vocab.object_class(w) for w in tokens} - {None}
            references.append(metrics.ClipReference(
                clip_id=clip.clip_id,
                tokens=tokens,
                object_boxes=tuple((a.class_id, a.box) for a in clip.annotations),
                gt_objects=frozenset(gt_objects)))
    return references


def predictions_from_traces(traces: Sequence[TraceRecord],
                            videos: Sequence[VideoSample]) -> list[metrics.ClipPrediction]:
    by_clip = {t.clip_id: t for t in traces}
    predictions = []
    for video in videos:
        for clip in video.clips:
            trace = by_clip[clip.clip_id]
            localized = tuple(
                metrics.LocalizedWord(token_index=e["token_index"],
                                      word=trace.tokens[e["token_index"]],
                                      region_index=e["region_index"],
                                      frame_index=e["frame_index"],
                                      box=tuple(e["box"]))
                for e in trace.localized_regions)
            predictions.append(metrics.ClipPrediction(
                clip_id=clip.clip_id, tokens=trace.tokens, localized=localized))
    return predictions


def exact_match_rate(traces: Sequence[TraceRecord], videos: Sequence[VideoSample],
                     vocab: Vocabulary) -> float:
    """Fraction of clips whose generated tokens equal the gold sentence."""
    gold = {c.clip_id: tuple(vocab.words[t] for t in c.sentence)
            for v in videos for c in v.clips}
    if not traces:
        return 0.0
    return sum(t.tokens == gold[t.clip_id] for t in traces) / len(traces)


def evaluate_model(model: GroundedCaptioner, dataset: Dataset, split: str = "train",
                   teacher_forced: bool = True, restrict_gt_frame: bool = True,
                   halluc_gt: Optional[dict] = None, mode: str = "greedy",
                   beam_width: int = 3) -> tuple[metrics.MetricReport, list[TraceRecord]]:
    """Generate, localize, and score one split; returns the report and traces."""
    videos = dataset.split(split)
    vocab = dataset.vocab
    traces = generate_traces(model, videos, mode=mode, beam_width=beam_width,
                             restrict_gt_frame=False)
    predictions = predictions_from_traces(traces, videos)
    references = clip_references(videos, vocab, halluc_gt)

    candidates = [list(p.tokens) for p in predictions]
    refs = [[list(r.tokens)] for r in references]
    bleu1 = metrics.bleu(candidates, refs, 1)
    bleu4 = metrics.bleu(candidates, refs, 4)
    cider = metrics.cider(candidates, refs) if len(candidates) >= 2 else 0.0

    counts = metrics.grounding_f1(predictions, references, vocab.object_class)
    if teacher_forced:
        att_traces, total = teacher_forced_attention(model, videos, restrict_gt_frame)
    else:
        att_traces, total = generated_attention(traces, videos, vocab)
    grd, att = metrics.grd_att(att_traces, total_annotations=total)
    chair_i, chair_s, recall_o = metrics.chair(predictions, references, vocab.object_class)

    report = metrics.MetricReport(
        bleu1=bleu1, bleu4=bleu4, cider=cider,
        f1_all=counts.f1_all, f1_loc=counts.f1_loc, grd=grd, att=att,
        chair_i=chair_i, chair_s=chair_s, recall_o=recall_o,
        count_a=counts.count_a, count_b=counts.count_b, count_c=counts.count_c,
        modes={"grd_att": "teacher_forced" if teacher_forced else "generated",
               "restrict_gt_frame": restrict_gt_frame,
               "generation": mode if mode == "greedy" else f"beam:{beam_width}",
               "split": split})
    return report, traces
