"""Graph convolutions over scene graphs and the visual-to-language mapping.

Objects, attributes, and relations each get a unified embedding via
role-aware convolution blocks (shared structure, independent parameters).
On frame graphs, object label embeddings are fused with their region
feature through factorized bilinear pooling before convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError
from .scene_graph import SceneGraph


@dataclass(frozen=True)
class NodeEmbeddings:
    """Unified per-node embeddings, one row per graph node."""

    objects: Tensor  # (|objects|, u)
    attributes: Tensor  # (|attributes|, u)
    relations: Tensor  # (|relations|, u)


@dataclass(frozen=True)
class PooledGraphRepr:
    """Per-type mean-pooled graph summary (zero vector for an empty type)."""

    objects: Tensor  # (u,)
    attributes: Tensor  # (u,)
    relations: Tensor  # (u,)

    def stack(self) -> Tensor:
        return torch.stack([self.objects, self.attributes, self.relations])


class MfbFusion(nn.Module):
    """Factorized bilinear pooling of a region feature with a label embedding.

    z = sum-pool_k((P_x x) * (P_y y)), then signed square root and L2
    normalization. The zero vector normalizes to zero.
    """

    def __init__(self, region_dim: int, embed_dim: int, k: int = 5):
        super().__init__()
        if k < 1:
            raise DimensionError(f"pooling window k must be >= 1, got {k}")
        self.region_dim = region_dim
        self.embed_dim = embed_dim
        self.k = k
        self.project_region = nn.Linear(region_dim, k * embed_dim, bias=False)
        self.project_label = nn.Linear(embed_dim, k * embed_dim, bias=False)

    def forward(self, region: Tensor, label: Tensor) -> Tensor:
        if region.shape[-1] != self.region_dim:
            raise DimensionError(f"region feature dim {region.shape[-1]} != {self.region_dim}")
        if label.shape[-1] != self.embed_dim:
            raise DimensionError(f"label embedding dim {label.shape[-1]} != {self.embed_dim}")
        z = self.project_region(region) * self.project_label(label)
        z = z.view(*z.shape[:-1], self.embed_dim, self.k).sum(dim=-1)
        z = torch.sqrt(F.relu(z)) - torch.sqrt(F.relu(-z))
        return F.normalize(z, dim=-1, eps=1e-12)


class GraphConvEncoder(nn.Module):
    """Scene-graph encoder with one convolution block per node role.

    Blocks compute relu(W [inputs] + b). Objects average the subject-role and
    object-role triplet contributions; objects in no triplet fall back to a
    dedicated isolated-object block. Attribute rows are scaled by one over
    the owner's attribute count.
    """

    def __init__(self, n_object_labels: int, n_attribute_labels: int,
                 n_relation_labels: int, embed_dim: int, out_dim: int,
                 region_dim: Optional[int] = None, mfb_k: int = 5):
        super().__init__()
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.object_labels = nn.Embedding(n_object_labels, embed_dim)
        self.attribute_labels = nn.Embedding(n_attribute_labels, embed_dim)
        self.relation_labels = nn.Embedding(n_relation_labels, embed_dim)
        self.subject_block = nn.Linear(3 * embed_dim, out_dim)
        self.object_block = nn.Linear(3 * embed_dim, out_dim)
        self.attribute_block = nn.Linear(2 * embed_dim, out_dim)
        self.relation_block = nn.Linear(3 * embed_dim, out_dim)
        self.isolated_block = nn.Linear(embed_dim, out_dim)
        self.mfb = MfbFusion(region_dim, embed_dim, mfb_k) if region_dim else None

    def object_inputs(self, graph: SceneGraph, region_features: Optional[Tensor] = None) -> Tensor:
        """Label embeddings e^o, MFB-fused with the region feature where one exists."""
        ids = torch.tensor([o.label_id for o in graph.objects], dtype=torch.long)
        rows = self.object_labels(ids)
        if self.mfb is None or region_features is None:
            return rows
        fused = []
        for i, obj in enumerate(graph.objects):
            if obj.region_index is None:
                fused.append(rows[i])
            else:
                fused.append(self.mfb(region_features[obj.region_index], rows[i]))
        return torch.stack(fused) if fused else rows

    def _triplet_inputs(self, graph: SceneGraph, e_obj: Tensor) -> Tensor:
        rel_ids = torch.tensor([r.label_id for r in graph.relations], dtype=torch.long)
        e_rel = self.relation_labels(rel_ids)
        subj = torch.stack([e_obj[r.subject] for r in graph.relations])
        obj = torch.stack([e_obj[r.object] for r in graph.relations])
        return torch.cat([subj, e_rel, obj], dim=-1)  # (T, 3e), subject-relation-object

    def encode_objects(self, graph: SceneGraph, region_features: Optional[Tensor] = None) -> Tensor:
        e_obj = self.object_inputs(graph, region_features)
        n = len(graph.objects)
        if n == 0:
            return e_obj.new_zeros((0, self.out_dim))
        summed = e_obj.new_zeros((n, self.out_dim))
        counts = e_obj.new_zeros(n)
        if graph.relations:
            triplets = self._triplet_inputs(graph, e_obj)
            as_subject = F.relu(self.subject_block(triplets))
            as_object = F.relu(self.object_block(triplets))
            subj_idx = torch.tensor([r.subject for r in graph.relations], dtype=torch.long)
            obj_idx = torch.tensor([r.object for r in graph.relations], dtype=torch.long)
            summed = summed.index_add(0, subj_idx, as_subject).index_add(0, obj_idx, as_object)
            ones = counts.new_ones(len(graph.relations))
            counts = counts.index_add(0, subj_idx, ones).index_add(0, obj_idx, ones)
        averaged = summed / counts.clamp(min=1.0).unsqueeze(1)
        isolated = F.relu(self.isolated_block(e_obj))
        return torch.where((counts > 0).unsqueeze(1), averaged, isolated)

    def encode_attributes(self, graph: SceneGraph, region_features: Optional[Tensor] = None) -> Tensor:
        if not graph.attributes:
            return self.attribute_labels.weight.new_zeros((0, self.out_dim))
        e_obj = self.object_inputs(graph, region_features)
        owners = [a.owner for a in graph.attributes]
        att_ids = torch.tensor([a.label_id for a in graph.attributes], dtype=torch.long)
        pairs = torch.cat([e_obj[owners], self.attribute_labels(att_ids)], dim=-1)
        rows = F.relu(self.attribute_block(pairs))
        per_owner = torch.bincount(torch.tensor(owners), minlength=len(graph.objects))
        scale = per_owner[owners].to(rows.dtype)
        return rows / scale.unsqueeze(1)

    def encode_relations(self, graph: SceneGraph, region_features: Optional[Tensor] = None) -> Tensor:
        if not graph.relations:
            return self.relation_labels.weight.new_zeros((0, self.out_dim))
        e_obj = self.object_inputs(graph, region_features)
        return F.relu(self.relation_block(self._triplet_inputs(graph, e_obj)))

    def encode(self, graph: SceneGraph, region_features: Optional[Tensor] = None) -> NodeEmbeddings:
        return NodeEmbeddings(
            objects=self.encode_objects(graph, region_features),
            attributes=self.encode_attributes(graph, region_features),
            relations=self.encode_relations(graph, region_features),
        )


def pool_graphs(embeddings: Sequence[NodeEmbeddings], dim: int,
                dtype: torch.dtype = torch.float64) -> PooledGraphRepr:
    """Mean over all rows of each node type across the given graphs."""

    def pool(rows: list[Tensor]) -> Tensor:
        stacked = [r for r in rows if r.shape[0] > 0]
        if not stacked:
            return torch.zeros(dim, dtype=dtype)
        return torch.cat(stacked).mean(dim=0)

    return PooledGraphRepr(
        objects=pool([e.objects for e in embeddings]),
        attributes=pool([e.attributes for e in embeddings]),
        relations=pool([e.relations for e in embeddings]),
    )


class VisualLanguageMapper(nn.Module):
    """Two-layer perceptron translating pooled visual graph vectors into the
    language graph space; applied to each node-type vector."""

    def __init__(self, dim: int, hidden_dim: Optional[int] = None):
        super().__init__()
        self.layer1 = nn.Linear(dim, hidden_dim or dim)
        self.layer2 = nn.Linear(hidden_dim or dim, dim)

    def forward(self, pooled: PooledGraphRepr) -> PooledGraphRepr:
        mapped = self.layer2(F.relu(self.layer1(pooled.stack())))
        return PooledGraphRepr(objects=mapped[0], attributes=mapped[1], relations=mapped[2])


def mapping_loss(mapped: PooledGraphRepr, language: PooledGraphRepr) -> Tensor:
    """Mean squared error over all components of the two graph summaries."""
    a, b = mapped.stack(), language.stack()
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()
