"""Multi-modal survival prediction: per-modality encoders, two-stage fusion,
the risk predictor, the Cox partial-likelihood loss, and the concordance
index.

The loss uses the inclusive risk set {j : t_j >= t_i} (subject included,
Breslow handling of ties) and is numerically stabilized with logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import LossError, MetricError, ShapeError


@dataclass
class RiskBatch:
    """Parallel arrays of predicted risks, observed times, and event flags."""

    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        self.risks = np.asarray(self.risks, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=bool)
        if not (len(self.risks) == len(self.times) == len(self.events)):
            raise ShapeError("risks, times, events must have equal lengths")
        if (self.times < 0).any():
            raise ShapeError("times must be non-negative")


class ModalityEncoder(nn.Module):
    """Two-hidden-layer MLP mapping one modality to the survival width."""

    def __init__(self, in_width: int, hidden: int, out_width: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(in_width, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_width),
        )

    def forward(self, x):
        return self.net(x)


class MultiModalSurvivalHead(nn.Module):
    """Encodes text/image/clinical features, fuses image with text first,
    then clinical, and predicts a scalar risk.
    """

    def __init__(self, text_width: int, image_width: int, clinical_width: int,
                 hidden: int, survival_width: int, seed: int = 0):
        super().__init__()
        self.text_encoder = ModalityEncoder(text_width, hidden, survival_width, seed=seed)
        self.image_encoder = ModalityEncoder(image_width, hidden, survival_width, seed=seed + 1)
        self.clinical_encoder = ModalityEncoder(clinical_width, hidden, survival_width, seed=seed + 2)
        torch.manual_seed(seed + 3)
        self.fusion1 = nn.Linear(2 * survival_width, survival_width)
        self.fusion2 = nn.Linear(2 * survival_width, survival_width)
        self.predictor = nn.Linear(survival_width, 1)

    def encode_and_fuse(self, text_feature, image_feature, clinical):
        s_t = self.text_encoder(text_feature)
        s_i = self.image_encoder(image_feature)
        s_c = self.clinical_encoder(clinical)
        stage1 = self.fusion1(torch.cat([s_i, s_t], dim=-1))
        fused = self.fusion2(torch.cat([stage1, s_c], dim=-1))
        return s_t, s_i, s_c, fused

    def forward(self, text_feature, image_feature, clinical):
        _, _, _, fused = self.encode_and_fuse(text_feature, image_feature, clinical)
        return self.predictor(fused).squeeze(-1)


def coxph_loss(risks: torch.Tensor, times: torch.Tensor,
               events: torch.Tensor) -> torch.Tensor:
    """Negative log partial likelihood averaged over event subjects.

    Risk sets are {j : t_j >= t_i}; censored subjects appear in risk sets
    but contribute no outer term. Raises LossError on all-censored batches
    so callers can resample.
    """
    risks = risks.reshape(-1)
    times = times.reshape(-1)
    events = events.reshape(-1).bool()
    if not (risks.shape == times.shape == events.shape):
        raise ShapeError("risks, times, events must have equal lengths")
    if not bool(events.any()):
        raise LossError("coxph_loss is undefined for a batch with zero events")
    at_risk = times.unsqueeze(0) >= times.unsqueeze(1)        # [i, j]: t_j >= t_i
    scores = risks.unsqueeze(0).expand(len(risks), -1)
    masked = scores.masked_fill(~at_risk, float("-inf"))
    log_denominator = torch.logsumexp(masked, dim=1)
    return -(risks[events] - log_denominator[events]).mean()


def coxph_loss_batch(batch: RiskBatch) -> float:
    return float(coxph_loss(
        torch.tensor(batch.risks), torch.tensor(batch.times),
        torch.tensor(batch.events),
    ))


def concordance_index(batch: RiskBatch) -> float:
    """Harrell's C: over pairs where the earlier subject has an event and
    times differ, count correctly ordered risk pairs (ties at 0.5).
    """
    risks, times, events = batch.risks, batch.times, batch.events
    comparable = events[:, None] & (times[:, None] < times[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise MetricError("no comparable pairs for the concordance index")
    greater = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant = greater * 1.0 + tied * 0.5
    return float(concordant[comparable].sum() / n_pairs)
