"""Supervised region attention, region-class similarity, and object-word
localization."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, VocabularyError

LOG_FLOOR = 1e-9  # keeps the losses finite for vanishing probabilities


class GroundingHead(nn.Module):
    """Linear object classifier over augmented region features."""

    def __init__(self, region_aug_dim: int, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.classifier = nn.Linear(region_aug_dim, n_classes, bias=False)

    def class_scores(self, regions: Tensor, attention: Tensor) -> Tensor:
        """Per-region class distributions p^s.

        The step's region attention enters as a per-region scalar added to
        every class logit of that region's row before the row softmax.
        """
        if regions.shape[-1] != self.classifier.in_features:
            raise DimensionError(
                f"region dim {regions.shape[-1]} != {self.classifier.in_features}")
        if attention.shape[0] != regions.shape[0]:
            raise DimensionError(
                f"attention length {attention.shape[0]} != {regions.shape[0]} regions")
        logits = self.classifier(regions) + attention.unsqueeze(1)
        return F.softmax(logits, dim=-1)


def region_attention_loss(attention: Tensor, gamma: Tensor) -> Tensor:
    """-sum_i gamma_i log a^r_i over the positive-region indicators."""
    return -(gamma * torch.log(attention.clamp(min=LOG_FLOOR))).sum()


def grounding_loss(class_scores: Tensor, gamma: Tensor, class_id: int,
                   attention_loss: Tensor, lambda_l: float, lambda_r: float) -> Tensor:
    """-lambda_L sum_i gamma_i log p^s_i[class] + lambda_R * attention loss."""
    column = class_scores[:, class_id]
    class_term = -(gamma * torch.log(column.clamp(min=LOG_FLOOR))).sum()
    return lambda_l * class_term + lambda_r * attention_loss


def localize(word: str, class_scores: Tensor, vocab,
             candidate_mask: Optional[np.ndarray] = None) -> int:
    """Region index with the highest class probability for the word.

    Ties break to the lowest region index; the mask restricts candidates
    (e.g. to the annotated frame during training-time evaluation).
    """
    class_id = vocab.object_class(word)
    if class_id is None:
        raise VocabularyError(f"{word!r} has no object class mapping")
    return localize_class(class_id, class_scores, candidate_mask)


def localize_class(class_id: int, class_scores: Tensor,
                   candidate_mask: Optional[np.ndarray] = None) -> int:
    column = class_scores[:, class_id].detach().cpu().numpy().copy()
    if candidate_mask is not None:
        if len(candidate_mask) != len(column):
            raise DimensionError("candidate mask length mismatch")
        column[~np.asarray(candidate_mask, dtype=bool)] = -np.inf
    return int(np.argmax(column))  # np.argmax takes the first (lowest) maximum
