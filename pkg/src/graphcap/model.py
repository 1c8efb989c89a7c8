"""Full grounded-description model: graph encoders, sentence decoder, and
grounding head, wired per video so the context cell carries across clips.

Training and generation both walk a video's clips in order; teacher-forced
decoding feeds gold prefixes, generation feeds its own argmax (or beam)
tokens. The graph summary conditioning the decoder is the pooled language
representation during language pretraining and the mapped (refined) visual
representation afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dataset import BOS_ID, EOS_ID, Clip, VideoSample, Vocabulary
from .decoder import SentenceDecoder, SelectionWeights, caption_loss
from .graph_encoder import (GraphConvEncoder, PooledGraphRepr, VisualLanguageMapper,
                            mapping_loss, pool_graphs)
from .grounding import GroundingHead, grounding_loss, localize_class, region_attention_loss

PHASE_LANGUAGE = "language"
PHASE_FULL = "full"


@dataclass(frozen=True)
class ModelDims:
    word_dim: int
    hidden_dim: int
    graph_embed_dim: int  # label embedding size e
    graph_dim: int  # unified node embedding size u
    attn_dim: int
    mfb_k: int = 5


DESK_DIMS = ModelDims(word_dim=32, hidden_dim=64, graph_embed_dim=32, graph_dim=32,
                      attn_dim=32)
PAPER_DIMS = ModelDims(word_dim=512, hidden_dim=1024, graph_embed_dim=1000,
                       graph_dim=1000, attn_dim=512)


@dataclass(frozen=True, eq=False)
class ClipTensors:
    """Clip arrays converted once to model-dtype tensors."""

    clip: Clip
    features: Tensor  # (N, d_r)
    boxes: Tensor  # (N, 4)
    class_scores: Tensor  # (N, C)
    frames: Tensor  # (Q, d_f)
    global_rep: Tensor
    targets: Tensor  # (T+1,) long: sentence tokens then <eos>
    gammas: tuple[Tensor, ...]  # aligned with clip.annotations

    @classmethod
    def from_clip(cls, clip: Clip, dtype: torch.dtype = torch.float64) -> "ClipTensors":
        return cls(
            clip=clip,
            features=torch.stack([torch.as_tensor(r.feature, dtype=dtype) for r in clip.regions]),
            boxes=torch.tensor([r.box for r in clip.regions], dtype=dtype),
            class_scores=torch.stack([torch.as_tensor(r.class_scores, dtype=dtype)
                                      for r in clip.regions]),
            frames=torch.as_tensor(clip.frame_features, dtype=dtype),
            global_rep=torch.as_tensor(clip.global_rep, dtype=dtype),
            targets=torch.tensor(list(clip.sentence) + [EOS_ID], dtype=torch.long),
            gammas=tuple(torch.as_tensor(a.gamma, dtype=dtype) for a in clip.annotations),
        )


def video_tensors(video: VideoSample, dtype: torch.dtype = torch.float64) -> list[ClipTensors]:
    return [ClipTensors.from_clip(c, dtype) for c in video.clips]


@dataclass
class VideoLosses:
    """Per-video sums plus the counts needed for batch-level averaging."""

    caption_nll: Tensor
    mapping: Tensor
    attention: Tensor
    grounding: Tensor
    n_clips: int
    n_annotations: int
    n_tokens: int
    n_correct_tokens: int


@dataclass(frozen=True, eq=False)
class GeneratedClip:
    clip: Clip
    tokens: tuple[int, ...]  # generated word ids, <eos> excluded
    selections: tuple[SelectionWeights, ...]  # one per generated token
    regions_aug: Tensor
    graph_repr: Tensor  # (3, u) stacked summary in effect during decoding


class RelationalGraphEncoder(nn.Module):
    """Language-side and visual-side encoders plus the refining mapper."""

    def __init__(self, vocab: Vocabulary, dims: ModelDims, region_dim: int):
        super().__init__()
        sizes = (len(vocab.objects), len(vocab.attributes), len(vocab.relations))
        self.language = GraphConvEncoder(*sizes, embed_dim=dims.graph_embed_dim,
                                         out_dim=dims.graph_dim)
        self.visual = GraphConvEncoder(*sizes, embed_dim=dims.graph_embed_dim,
                                       out_dim=dims.graph_dim, region_dim=region_dim,
                                       mfb_k=dims.mfb_k)
        self.mapper = VisualLanguageMapper(dims.graph_dim)


class GroundedCaptioner(nn.Module):
    def __init__(self, vocab: Vocabulary, dims: ModelDims, region_dim: int,
                 frame_dim: int, seed: Optional[int] = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.vocab = vocab
        self.dims = dims
        self.graph_encoder = RelationalGraphEncoder(vocab, dims, region_dim)
        self.decoder = SentenceDecoder(
            vocab_size=len(vocab.words), word_dim=dims.word_dim,
            hidden_dim=dims.hidden_dim, frame_dim=frame_dim,
            global_dim=frame_dim + 2, region_dim=region_dim,
            n_classes=len(vocab.objects), graph_dim=dims.graph_dim,
            attn_dim=dims.attn_dim)
        self.grounding = GroundingHead(self.decoder.region_aug_dim, len(vocab.objects))
        self.double()

    # -- graph summaries -------------------------------------------------

    def language_repr(self, ct: ClipTensors) -> PooledGraphRepr:
        embedded = self.graph_encoder.language.encode(ct.clip.language_graph)
        return pool_graphs([embedded], self.dims.graph_dim)

    def visual_repr(self, ct: ClipTensors) -> tuple[PooledGraphRepr, PooledGraphRepr]:
        """Pooled frame-graph representation and its language-refined mapping."""
        embedded = [self.graph_encoder.visual.encode(g, ct.features)
                    for g in ct.clip.frame_graphs]
        pooled = pool_graphs(embedded, self.dims.graph_dim)
        return pooled, self.graph_encoder.mapper(pooled)

    def clip_graph_repr(self, ct: ClipTensors, phase: str) -> tuple[Tensor, Optional[Tensor]]:
        """(3, u) summary for decoding, plus the mapping loss when visual."""
        if phase == PHASE_LANGUAGE:
            return self.language_repr(ct).stack(), None
        _, refined = self.visual_repr(ct)
        loss = mapping_loss(refined, self.language_repr(ct))
        return refined.stack(), loss

    def augmented_regions(self, ct: ClipTensors) -> Tensor:
        return self.decoder.augment_regions(ct.features, ct.boxes, ct.class_scores)

    # -- teacher-forced training forward ----------------------------------

    def decode_teacher_forced(self, ct: ClipTensors, graph_repr: Tensor, state,
                              regions_aug: Optional[Tensor] = None):
        regions = self.augmented_regions(ct) if regions_aug is None else regions_aug
        inputs = [BOS_ID] + list(ct.clip.sentence)
        logits_steps = []
        selections = []
        for prev in inputs:
            state, logits, selection = self.decoder.step(
                state, ct.global_rep, prev, ct.frames, regions, graph_repr)
            logits_steps.append(logits)
            selections.append(selection)
        return torch.stack(logits_steps), selections, state, regions

    def annotation_losses(self, ct: ClipTensors, selections, regions_aug: Tensor,
                          lambda_l: float, lambda_r: float):
        """(attention loss, grounding loss) per annotated object word."""
        out = []
        for ann, gamma in zip(ct.clip.annotations, ct.gammas):
            a_r = selections[ann.token_position].a_r
            l_r = region_attention_loss(a_r, gamma)
            scores = self.grounding.class_scores(regions_aug, a_r)
            l_g = grounding_loss(scores, gamma, ann.class_id, l_r, lambda_l, lambda_r)
            out.append((l_r, l_g))
        return out

    def video_losses(self, cts: Sequence[ClipTensors], phase: str,
                     lambda_l: float = 1.0, lambda_r: float = 1.0) -> VideoLosses:
        zero = self.decoder.word_head.weight.new_zeros(())
        totals = VideoLosses(caption_nll=zero, mapping=zero, attention=zero,
                             grounding=zero, n_clips=0, n_annotations=0,
                             n_tokens=0, n_correct_tokens=0)
        state = self.decoder.initial_state()
        last_h2 = None
        for ct in cts:
            graph_repr, lm = self.clip_graph_repr(ct, phase)
            if last_h2 is not None:
                state, _ = self.decoder.init_next_sentence(state, last_h2, graph_repr)
            logits, selections, state, regions = self.decode_teacher_forced(
                ct, graph_repr, state)
            last_h2 = state.h2
            totals.caption_nll = totals.caption_nll + F.cross_entropy(
                logits, ct.targets, reduction="sum")
            if lm is not None:
                totals.mapping = totals.mapping + lm
            for l_r, l_g in self.annotation_losses(ct, selections, regions,
                                                   lambda_l, lambda_r):
                totals.attention = totals.attention + l_r
                totals.grounding = totals.grounding + l_g
                totals.n_annotations += 1
            predictions = logits.detach().argmax(dim=-1)
            totals.n_tokens += int(ct.targets.shape[0])
            totals.n_correct_tokens += int((predictions == ct.targets).sum())
            totals.n_clips += 1
        return totals

    # -- generation --------------------------------------------------------

    @torch.no_grad()
    def generate_video(self, cts: Sequence[ClipTensors], mode: str = "greedy",
                       beam_width: int = 3, max_len: int = 20,
                       gate_override: Optional[tuple[float, float]] = None,
                       zero_graph: bool = False) -> list[GeneratedClip]:
        """Decode every clip of a video in order, threading the context cell.

        zero_graph replaces the refined graph summary with zeros (the
        no-graph ablation); gate_override pins (s_r, s_sg) at every step.
        """
        results = []
        state = self.decoder.initial_state()
        last_h2 = None
        for ct in cts:
            _, refined = self.visual_repr(ct)
            graph_repr = refined.stack()
            if zero_graph:
                graph_repr = torch.zeros_like(graph_repr)
            if last_h2 is not None:
                state, _ = self.decoder.init_next_sentence(state, last_h2, graph_repr)
            regions = self.augmented_regions(ct)
            if mode == "greedy":
                tokens, selections, state = self._generate_greedy(
                    ct, graph_repr, state, regions, max_len, gate_override)
            elif mode == "beam":
                tokens, selections, state = self._generate_beam(
                    ct, graph_repr, state, regions, max_len, beam_width, gate_override)
            else:
                raise ValueError(f"unknown mode {mode!r}")
            last_h2 = state.h2
            results.append(GeneratedClip(clip=ct.clip, tokens=tuple(tokens),
                                         selections=tuple(selections),
                                         regions_aug=regions, graph_repr=graph_repr))
        return results

    def _generate_greedy(self, ct, graph_repr, state, regions, max_len, gate_override):
        tokens: list[int] = []
        selections: list[SelectionWeights] = []
        prev = BOS_ID
        with torch.no_grad():
            while len(tokens) < max_len:
                state, logits, selection = self.decoder.step(
                    state, ct.global_rep, prev, ct.frames, regions, graph_repr,
                    gate_override)
                word = int(np.argmax(logits.cpu().numpy()))  # first max on ties
                if word == EOS_ID:
                    break
                tokens.append(word)
                selections.append(selection)
                prev = word
        return tokens, selections, state

    def _generate_beam(self, ct, graph_repr, state, regions, max_len, width, gate_override):
        # hypotheses: (neg score for sorting, tokens, selections, state, done)
        hyps = [(0.0, [], [], state, False)]
        with torch.no_grad():
            for _ in range(max_len + 1):
                if all(done for *_, done in hyps):
                    break
                candidates = []
                for score, tokens, sels, hstate, done in hyps:
                    if done:
                        candidates.append((score, tokens, sels, hstate, True))
                        continue
                    prev = tokens[-1] if tokens else BOS_ID
                    new_state, logits, selection = self.decoder.step(
                        hstate, ct.global_rep, prev, ct.frames, regions, graph_repr,
                        gate_override)
                    logp = F.log_softmax(logits, dim=-1).cpu().numpy()
                    order = sorted(range(len(logp)), key=lambda w: (-logp[w], w))[:width]
                    for word in order:
                        new_tokens = tokens if word == EOS_ID else tokens + [word]
                        new_sels = sels if word == EOS_ID else sels + [selection]
                        finished = word == EOS_ID or len(new_tokens) >= max_len
                        candidates.append((score + float(logp[word]), new_tokens,
                                           new_sels, new_state, finished))
                hyps = sorted(candidates, key=lambda h: -h[0])[:width]
        best = max(hyps, key=lambda h: h[0])
        return best[1], best[2], best[3]

    # -- evaluation-time traces --------------------------------------------

    def localize_word(self, class_id: int, regions_aug: Tensor, a_r: Tensor,
                      candidate_mask: Optional[np.ndarray] = None) -> int:
        scores = self.grounding.class_scores(regions_aug, a_r)
        return localize_class(class_id, scores, candidate_mask)


def next_token_accuracy(model: GroundedCaptioner, videos: Sequence[Sequence[ClipTensors]],
                        phase: str) -> float:
    """Teacher-forced argmax accuracy over gold targets (including <eos>)."""
    correct = total = 0
    with torch.no_grad():
        for cts in videos:
            losses = model.video_losses(cts, phase)
            correct += losses.n_correct_tokens
            total += losses.n_tokens
    return correct / total if total else 0.0
