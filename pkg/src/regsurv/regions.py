"""Region geometry: detector-output resolution, coordinate masking, and the
completion network that fills in undetected boxes from the spatial layout of
the detected ones.

The completion network is a 3-hidden-layer MLP over the flattened 29x4
coordinate vector. It is trained masked-autoencoder style: a few region
slots are replaced by a mask token and only those slots contribute to the
reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import NUM_REGIONS
from .data import MASK_TOKEN, RegionSet
from .errors import CompletionError, DataError, RegsurvError, ValidationError

NUM_CLASSES = NUM_REGIONS + 1  # 29 regions + background
COORD_DIM = NUM_REGIONS * 4


@dataclass
class ProposalSet:
    """Detector output: candidate boxes with 30-way class scores."""

    proposals: list  # of (BoundingBox, score_vector)

    def validate(self):
        for idx, (box, scores) in enumerate(self.proposals):
            scores = np.asarray(scores)
            if scores.shape != (NUM_CLASSES,):
                raise ValidationError(
                    f"proposal {idx}: score vector must have length {NUM_CLASSES}, got {scores.shape}"
                )
            if scores.min() < 0 or scores.max() > 1:
                raise ValidationError(f"proposal {idx}: scores outside [0,1]")
            box.validate(f"proposal {idx}")


def resolve_detections(proposals: ProposalSet) -> RegionSet:
    """Assign proposals to region classes by per-proposal argmax, keeping the
    top scorer per class. Classes no proposal claims are flagged undetected
    and given mask-token coordinates.
    """
    coords = np.full((NUM_REGIONS, 4), MASK_TOKEN, dtype=np.float64)
    detected = np.zeros(NUM_REGIONS, dtype=bool)
    best = np.full(NUM_REGIONS, -np.inf)
    for box, scores in proposals.proposals:
        scores = np.asarray(scores, dtype=np.float64)
        cls = int(np.argmax(scores))
        if cls >= NUM_REGIONS:  # background
            continue
        if scores[cls] > best[cls]:
            best[cls] = scores[cls]
            coords[cls] = box.as_array()
            detected[cls] = True
    return RegionSet(coords, detected)


def mask_regions(coords: np.ndarray, mask_count: int, seed: int):
    """Replace ``mask_count`` random region rows with the mask token.

    Returns (masked coords, sorted mask indices).
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(NUM_REGIONS, 4)
    if not 1 <= mask_count <= NUM_REGIONS - 1:
        raise RegsurvError(f"mask_count must be in 1..{NUM_REGIONS - 1}, got {mask_count}")
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(NUM_REGIONS, size=mask_count, replace=False))
    masked = coords.copy()
    masked[indices] = MASK_TOKEN
    return masked, indices


def repair_box(raw: np.ndarray, min_side: float = 0.01) -> np.ndarray:
    """Turn any 4 floats into a valid normalized box: order the coordinates,
    clamp to [0,1], then expand to a minimum side length.
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty(4)
    for axis in (0, 1):
        lo, hi = sorted((float(raw[axis]), float(raw[axis + 2])))
        lo, hi = max(0.0, min(1.0, lo)), max(0.0, min(1.0, hi))
        if hi - lo < min_side:
            center = min(max((lo + hi) / 2, min_side / 2), 1 - min_side / 2)
            lo, hi = center - min_side / 2, center + min_side / 2
        out[axis], out[axis + 2] = lo, hi
    return out


class RegionCompleter(nn.Module):
    """116 -> 116 coordinate regression MLP with three hidden layers."""

    def __init__(self, hidden: int = 512, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(COORD_DIM, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, COORD_DIM),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class CompleterTraining:
    model: RegionCompleter
    epoch_losses: list


def train_completer(layouts, epochs: int = 300, lr: float = 1e-3, batch_size: int = 128,
                    mask_low: int = 1, mask_high: int = 8, hidden: int = 512,
                    seed: int = 0) -> CompleterTraining:
    """Train the completer on fully detected ground-truth layouts.

    Each step masks a uniformly drawn number of regions per layout and
    minimizes MSE on the masked slots only.
    """
    if len(layouts) < 2:
        raise DataError(f"completer training needs at least 2 layouts, got {len(layouts)}")
    for idx, layout in enumerate(layouts):
        if not layout.all_detected():
            raise DataError(f"training layout {idx} has undetected regions")
    coords = torch.tensor(np.stack([l.coords for l in layouts]), dtype=torch.float32)
    coords = coords.reshape(len(layouts), COORD_DIM)

    model = RegionCompleter(hidden=hidden, seed=seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    n = coords.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, batch_size):
            batch = coords[order[start:start + batch_size]]
            mask = torch.zeros(batch.shape[0], NUM_REGIONS, dtype=torch.bool)
            for row in range(batch.shape[0]):
                count = int(rng.integers(mask_low, mask_high + 1))
                mask[row, rng.choice(NUM_REGIONS, size=count, replace=False)] = True
            slot_mask = mask.repeat_interleave(4, dim=1)
            inputs = torch.where(slot_mask, torch.tensor(float(MASK_TOKEN)), batch)
            pred = model(inputs)
            loss = ((pred - batch) ** 2)[slot_mask].mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
    model.eval()
    return CompleterTraining(model, losses)


def complete_regions(partial: RegionSet, model: RegionCompleter,
                     min_side: float = 0.01) -> RegionSet:
    """Fill undetected boxes from the detected ones.

    Detected coordinates pass through bit-identically; predictions for the
    undetected slots are repaired into valid boxes. The result reports all
    29 regions as detected.
    """
    if not partial.detected.any():
        raise CompletionError("cannot complete a region set with zero detected regions")
    if partial.all_detected():
        return RegionSet(partial.coords.copy(), partial.detected.copy())

    inputs = partial.coords.copy()
    inputs[~partial.detected] = MASK_TOKEN
    with torch.no_grad():
        pred = model(torch.tensor(inputs.reshape(1, COORD_DIM), dtype=torch.float32))
    pred = pred.numpy().reshape(NUM_REGIONS, 4).astype(np.float64)

    coords = partial.coords.copy()
    for j in np.flatnonzero(~partial.detected):
        coords[j] = repair_box(pred[j], min_side)
    return RegionSet(coords, np.ones(NUM_REGIONS, dtype=bool))


# --- detector plug-ins ------------------------------------------------------
#
# A detector maps (image, optional ground-truth RegionSet) -> ProposalSet.
# The oracle variant replays ground truth with configurable dropout and score
# noise, standing in for a real object detector; the canonical variant emits
# the hand-authored layout regardless of the image.


class OracleDetector:
    def __init__(self, dropout: float = 0.0, score_noise: float = 0.0, seed: int = 0):
        self.dropout = dropout
        self.score_noise = score_noise
        self.seed = seed

    def __call__(self, image, truth: RegionSet = None) -> ProposalSet:
        if truth is None:
            raise DataError("oracle detector needs ground-truth regions alongside the image")
        digest = int(np.abs(np.asarray(image)).sum() * 1e6) % (2 ** 31)
        rng = np.random.default_rng((self.seed, digest))
        proposals = []
        for j in range(NUM_REGIONS):
            if not truth.detected[j] or rng.random() < self.dropout:
                continue
            scores = np.full(NUM_CLASSES, 0.01)
            scores[j] = np.clip(0.9 + self.score_noise * rng.standard_normal(), 0.05, 1.0)
            proposals.append((truth.box(j), scores))
        return ProposalSet(proposals)


class CanonicalDetector:
    def __init__(self, **_):
        from .synthetic import CANONICAL_LAYOUT

        self.layout = CANONICAL_LAYOUT

    def __call__(self, image, truth: RegionSet = None) -> ProposalSet:
        from .data import BoundingBox

        proposals = []
        for j in range(NUM_REGIONS):
            scores = np.full(NUM_CLASSES, 0.01)
            scores[j] = 0.99
            x1, y1, x2, y2 = self.layout[j]
            proposals.append((BoundingBox(x1, y1, x2, y2), scores))
        return ProposalSet(proposals)
