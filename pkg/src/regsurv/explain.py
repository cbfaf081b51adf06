"""Gradient-based regional risk attribution.

For each of the 29 region features feeding the sentence embedders, the
weight is the mean gradient of the fused risk with respect to that feature;
the score is the rectified weighted feature sum, re-weighted by the global
risk through a sigmoid. Higher scores mark regions that drive the predicted
risk upward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import NUM_REGIONS
from .errors import EvaluationError


@dataclass
class RegionRiskScores:
    scores: np.ndarray        # (29,) non-negative
    global_risk: float

    def validate(self):
        if self.scores.shape != (NUM_REGIONS,):
            raise EvaluationError(f"expected 29 region scores, got {self.scores.shape}")
        if (self.scores < 0).any():
            raise EvaluationError("region risk scores must be non-negative")

    def ranked(self) -> list:
        order = np.argsort(-self.scores)
        return [(int(j) + 1, float(self.scores[j])) for j in order]


def regional_risk_attention(model, patches, pooled_risk: torch.Tensor,
                            clinical: torch.Tensor) -> RegionRiskScores:
    """Attribute the fused risk to the 29 region features of one sample.

    ``patches`` are the sample's cached ROI patches, ``pooled_risk`` the
    (1, C) survival-attention output, ``clinical`` the standardized
    covariates.
    """
    model.assert_finite()
    region_features = model.region_encoder(patches)
    leaf = region_features.detach().requires_grad_(True)

    sentence_features = model.sentence_visual_features(leaf, pooled_risk.reshape(-1))
    text_features = model.text_space_features(sentence_features).reshape(-1)
    risk = model.survival_head(
        text_features.unsqueeze(0),
        pooled_risk.reshape(1, -1),
        clinical.reshape(1, -1),
    )[0]
    risk.backward()
    if leaf.grad is None:
        raise EvaluationError("risk did not propagate to the region features")

    weights = leaf.grad[:NUM_REGIONS].mean(dim=1)
    sums = leaf.detach()[:NUM_REGIONS].sum(dim=1)
    scores = torch.relu(weights * sums) * torch.sigmoid(risk.detach())
    result = RegionRiskScores(scores.numpy().astype(np.float64), float(risk))
    result.validate()
    return result
