"""Two-layer recurrent sentence generator with the region/graph selection
mechanism and the cross-sentence context cell.

All decoding here is single-clip: states are 1-D tensors and one step emits
one word distribution. The layer-1 cell reads the global clip vector and the
previous word; layer 2 reads the temporally attended frame, the gated graph
summary, and the gated attended region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    hc: Tensor  # context cell hidden
    cc: Tensor  # context cell state
    step: int = 0


@dataclass(frozen=True)
class SelectionWeights:
    """How much (s_r, s_sg sum to 1) and what (a_r, a_sg simplex vectors)."""

    s_r: Tensor  # scalar
    s_sg: Tensor  # scalar
    a_r: Tensor  # (N,)
    a_sg: Tensor  # (3,)


class _AdditiveAttention(nn.Module):
    """score_i = w^T tanh(W_k x_i + W_q h); weights = softmax over i."""

    def __init__(self, key_dim: int, query_dim: int, attn_dim: int):
        super().__init__()
        self.key = nn.Linear(key_dim, attn_dim)
        self.query = nn.Linear(query_dim, attn_dim, bias=False)
        self.score = nn.Linear(attn_dim, 1, bias=False)

    def forward(self, keys: Tensor, query: Tensor) -> Tensor:
        scores = self.score(torch.tanh(self.key(keys) + self.query(query))).squeeze(-1)
        return F.softmax(scores, dim=-1)


class SentenceDecoder(nn.Module):
    def __init__(self, vocab_size: int, word_dim: int, hidden_dim: int,
                 frame_dim: int, global_dim: int, region_dim: int,
                 n_classes: int, graph_dim: int, attn_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.graph_dim = graph_dim
        self.region_aug_dim = region_dim + 5 + n_classes  # feature + box code + class scores

        self.word_embedding = nn.Embedding(vocab_size, word_dim)
        self.lstm_first = nn.LSTMCell(hidden_dim + global_dim + word_dim, hidden_dim)
        self.lstm_second = nn.LSTMCell(
            hidden_dim + frame_dim + graph_dim + self.region_aug_dim, hidden_dim)
        self.lstm_context = nn.LSTMCell(hidden_dim, hidden_dim)

        self.temporal = _AdditiveAttention(frame_dim, hidden_dim, attn_dim)
        aug = self.region_aug_dim
        self.region_query = nn.Linear(aug, attn_dim)
        self.region_key = nn.Linear(aug, attn_dim)
        self.region_value = nn.Linear(aug, attn_dim)
        self.region_out = nn.Linear(attn_dim, aug)

        self.gate_region = nn.Linear(hidden_dim + aug, 1)
        self.gate_graph = nn.Linear(hidden_dim + graph_dim, 1)
        self.spatial = _AdditiveAttention(aug, hidden_dim, attn_dim)
        self.graph_attention = _AdditiveAttention(graph_dim, hidden_dim, attn_dim)

        self.word_head = nn.Linear(hidden_dim, vocab_size, bias=False)
        self.init_projection = nn.Linear(hidden_dim + 3 * graph_dim, hidden_dim)

    def initial_state(self) -> DecoderState:
        zero = self.word_head.weight.new_zeros(self.hidden_dim)
        return DecoderState(h1=zero, c1=zero, h2=zero, c2=zero, hc=zero, cc=zero, step=0)

    # -- per-step operations -------------------------------------------------

    def step_layer1(self, state: DecoderState, global_rep: Tensor, prev_word: int):
        embedded = self.word_embedding(torch.tensor(prev_word))
        inputs = torch.cat([state.h2, global_rep, embedded]).unsqueeze(0)
        h1, c1 = self.lstm_first(inputs, (state.h1.unsqueeze(0), state.c1.unsqueeze(0)))
        return h1.squeeze(0), c1.squeeze(0)

    def temporal_attention(self, h1: Tensor, frames: Tensor) -> tuple[Tensor, Tensor]:
        weights = self.temporal(frames, h1)  # (Q,)
        return weights @ frames, weights

    def augment_regions(self, features: Tensor, boxes: Tensor, class_scores: Tensor) -> Tensor:
        """Concatenate box encoding and class scores, then one residual
        self-attention pass across all regions of the clip."""
        area = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).unsqueeze(1)
        x = torch.cat([features, boxes, area, class_scores], dim=-1)  # (N, aug)
        q, k, v = self.region_query(x), self.region_key(x), self.region_value(x)
        attn = F.softmax(q @ k.T / math.sqrt(q.shape[-1]), dim=-1)
        return x + self.region_out(attn @ v)

    def select(self, h1: Tensor, regions: Tensor, graph_repr: Tensor,
               gate_override: Optional[tuple[float, float]] = None):
        """Gate the two sources (how much) and attend within each (what)."""
        score_r = self.gate_region(torch.cat([h1, regions.mean(dim=0)]))
        score_sg = self.gate_graph(torch.cat([h1, graph_repr.mean(dim=0)]))
        gates = F.softmax(torch.cat([score_r, score_sg]), dim=-1)
        s_r, s_sg = gates[0], gates[1]
        if gate_override is not None:
            s_r = h1.new_tensor(gate_override[0])
            s_sg = h1.new_tensor(gate_override[1])
        a_r = self.spatial(regions, h1)  # (N,)
        a_sg = self.graph_attention(graph_repr, h1)  # (3,)
        r_hat = a_r @ regions
        u_hat = a_sg @ graph_repr
        return SelectionWeights(s_r=s_r, s_sg=s_sg, a_r=a_r, a_sg=a_sg), r_hat, u_hat

    def step_layer2(self, state: DecoderState, h1: Tensor, f_hat: Tensor,
                    u_hat: Tensor, r_hat: Tensor, s_r: Tensor, s_sg: Tensor):
        inputs = torch.cat([h1, f_hat, s_sg * u_hat, s_r * r_hat]).unsqueeze(0)
        h2, c2 = self.lstm_second(inputs, (state.h2.unsqueeze(0), state.c2.unsqueeze(0)))
        return h2.squeeze(0), c2.squeeze(0)

    def word_logits(self, h2: Tensor) -> Tensor:
        return self.word_head(h2)

    def word_distribution(self, h2: Tensor) -> Tensor:
        return F.softmax(self.word_logits(h2), dim=-1)

    def step(self, state: DecoderState, global_rep: Tensor, prev_word: int,
             frames: Tensor, regions: Tensor, graph_repr: Tensor,
             gate_override: Optional[tuple[float, float]] = None):
        """One full decode step; returns (new state, logits, selection)."""
        h1, c1 = self.step_layer1(state, global_rep, prev_word)
        f_hat, _ = self.temporal_attention(h1, frames)
        selection, r_hat, u_hat = self.select(h1, regions, graph_repr, gate_override)
        h2, c2 = self.step_layer2(state, h1, f_hat, u_hat, r_hat,
                                  selection.s_r, selection.s_sg)
        new_state = replace(state, h1=h1, c1=c1, h2=h2, c2=c2, step=state.step + 1)
        return new_state, self.word_logits(h2), selection

    # -- cross-sentence context ----------------------------------------------

    def init_next_sentence(self, state: DecoderState, last_h2: Tensor,
                           graph_repr: Tensor) -> tuple[DecoderState, Tensor]:
        """Advance the context cell on a finished sentence and seed the next
        sentence's layer-1 hidden state."""
        hc, cc = self.lstm_context(last_h2.unsqueeze(0),
                                   (state.hc.unsqueeze(0), state.cc.unsqueeze(0)))
        hc, cc = hc.squeeze(0), cc.squeeze(0)
        x0 = F.relu(self.init_projection(torch.cat([hc, graph_repr.reshape(-1)])))
        zero = x0.new_zeros(self.hidden_dim)
        return DecoderState(h1=x0, c1=zero, h2=zero, c2=zero, hc=hc, cc=cc, step=0), x0


def caption_loss(logits: Tensor, targets: Tensor, mapping_loss_value: Tensor,
                 lambda_m: float) -> Tensor:
    """Sum of gold-token negative log-probabilities plus the weighted
    visual-language mapping loss."""
    nll = F.cross_entropy(logits, targets, reduction="sum")
    return nll + lambda_m * mapping_loss_value
