"""Shared data model: bounding boxes, region sets, structured reports,
survival records, cohort samples, and the JSON-lines dataset format.

All value types are plain dataclasses over numpy arrays and are safe to
share across threads; nothing here mutates its inputs.
"""

from __future__ import annotations

import base64
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import NUM_REGIONS, NUM_SENTENCES, SCHEMA_VERSION
from .errors import ConfigError, DataError, ParseError, ValidationError

MASK_TOKEN = -1.0  # placeholder coordinate for undetected regions


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0,1] image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self, context: str = "box"):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValidationError(f"{context}: coordinates outside [0,1]: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"{context}: degenerate box (x1<x2, y1<y2 required): {coords}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


@dataclass
class RegionSet:
    """29 region boxes with per-region detection flags.

    ``coords`` is a (29, 4) float array; rows whose flag is False may hold
    mask placeholders and are exempt from box invariants.
    """

    coords: np.ndarray
    detected: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.detected = np.asarray(self.detected, dtype=bool)

    def validate(self, context: str = "regions"):
        if self.coords.shape != (NUM_REGIONS, 4):
            raise ValidationError(f"{context}: coords must be (29,4), got {self.coords.shape}")
        if self.detected.shape != (NUM_REGIONS,):
            raise ValidationError(f"{context}: detected must be (29,), got {self.detected.shape}")
        for j in np.flatnonzero(self.detected):
            self.box(int(j)).validate(f"{context}[{j + 1}]")

    def box(self, j: int) -> BoundingBox:
        """Zero-based region index -> BoundingBox."""
        x1, y1, x2, y2 = self.coords[j]
        return BoundingBox(float(x1), float(y1), float(x2), float(y2))

    def all_detected(self) -> bool:
        return bool(self.detected.all())

    def copy(self) -> "RegionSet":
        return RegionSet(self.coords.copy(), self.detected.copy())

    @classmethod
    def fully_detected(cls, coords: np.ndarray) -> "RegionSet":
        return cls(np.asarray(coords, dtype=np.float64), np.ones(NUM_REGIONS, dtype=bool))


@dataclass
class StructuredReport:
    """Five sentences: four region-group Findings plus the global Impression."""

    sentences: list

    def validate(self, context: str = "report"):
        if len(self.sentences) != NUM_SENTENCES:
            raise ValidationError(
                f"{context}: expected {NUM_SENTENCES} sentences, got {len(self.sentences)}"
            )
        for i, s in enumerate(self.sentences):
            if not isinstance(s, str) or not s.strip():
                raise ValidationError(f"{context}: sentence {i + 1} is empty")

    def joined(self) -> str:
        return " ".join(self.sentences)


@dataclass
class SurvivalRecord:
    time_days: float
    event: bool
    clinical: np.ndarray

    def __post_init__(self):
        self.clinical = np.asarray(self.clinical, dtype=np.float64)

    def validate(self, covariate_count: int, context: str = "survival"):
        if self.time_days < 0:
            raise ValidationError(f"{context}: time_days must be >= 0, got {self.time_days}")
        if self.clinical.shape != (covariate_count,):
            raise ValidationError(
                f"{context}: clinical vector must have length {covariate_count}, "
                f"got {self.clinical.shape}"
            )


@dataclass
class CohortSample:
    sample_id: str
    image: np.ndarray
    regions: RegionSet
    report: StructuredReport
    survival: SurvivalRecord
    meta: dict = field(default_factory=dict)

    def validate(self, image_size: int, covariate_count: int):
        ctx = f"sample {self.sample_id}"
        if self.image.shape != (image_size, image_size):
            raise ValidationError(
                f"{ctx}: image must be {image_size}x{image_size}, got {self.image.shape}"
            )
        self.regions.validate(ctx)
        self.report.validate(ctx)
        self.survival.validate(covariate_count, ctx)


def _encode_image(image: np.ndarray) -> dict:
    arr = np.ascontiguousarray(image, dtype=np.float32)
    return {
        "f32_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
        "height": int(arr.shape[0]),
        "width": int(arr.shape[1]),
    }


def _decode_image(payload: dict, base_dir: Path) -> np.ndarray:
    if "f32_b64" in payload:
        raw = base64.b64decode(payload["f32_b64"])
        arr = np.frombuffer(raw, dtype=np.float32)
        return arr.reshape(payload["height"], payload["width"]).astype(np.float64)
    if "png" in payload:
        from PIL import Image

        path = base_dir / payload["png"]
        with Image.open(path) as im:
            im = im.convert("I") if im.mode in ("I;16", "I") else im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
        peak = 65535.0 if arr.max() > 255 else 255.0
        return arr / peak
    raise ParseError(f"image payload must carry 'f32_b64' or 'png', got keys {sorted(payload)}")


def sample_to_record(sample: CohortSample) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sample_id": sample.sample_id,
        "image": _encode_image(sample.image),
        "boxes": [[float(v) for v in row] for row in sample.regions.coords],
        "detected": [bool(v) for v in sample.regions.detected],
        "report": list(sample.report.sentences),
        "survival": {"time_days": float(sample.survival.time_days), "event": bool(sample.survival.event)},
        "clinical": [float(v) for v in sample.survival.clinical],
        "meta": sample.meta,
    }


def record_to_sample(record: dict, base_dir: Path) -> CohortSample:
    detected = record.get("detected")
    boxes = np.asarray(record["boxes"], dtype=np.float64)
    if detected is None:
        detected = np.ones(len(boxes), dtype=bool)
    regions = RegionSet(boxes, np.asarray(detected, dtype=bool))
    survival = SurvivalRecord(
        time_days=float(record["survival"]["time_days"]),
        event=bool(record["survival"]["event"]),
        clinical=np.asarray(record["clinical"], dtype=np.float64),
    )
    return CohortSample(
        sample_id=str(record["sample_id"]),
        image=_decode_image(record["image"], base_dir),
        regions=regions,
        report=StructuredReport(list(record["report"])),
        survival=survival,
        meta=dict(record.get("meta", {})),
    )


def load_dataset(path, schema_version: str = SCHEMA_VERSION,
                 image_size: int = 224, covariate_count: int = 17) -> list:
    """Load a JSON-lines cohort file, validating every sample.

    Samples are returned sorted by sample id so ordering never depends on
    file layout.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    samples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON record: {exc}") from exc
            version = record.get("schema_version")
            if version != schema_version:
                raise ParseError(
                    f"{path}:{lineno}: unknown schema_version {version!r} (expected {schema_version!r})"
                )
            try:
                sample = record_to_sample(record, path.parent)
            except (KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: missing or malformed field: {exc}") from exc
            sample.validate(image_size, covariate_count)
            samples.append(sample)
    samples.sort(key=lambda s: s.sample_id)
    return samples


def save_dataset(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")


def split_dataset(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle and partition into train/val/test by the given ratios.

    Sizes are floor(ratio * n) for train and val; the remainder goes to
    test, so the partition is always exhaustive and disjoint.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be 3 non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


@dataclass
class ClinicalScaler:
    """Z-scores continuous covariates with train-split statistics.

    Binary columns (only values 0/1 in the fit data) pass through unchanged.
    """

    mean: np.ndarray = None
    std: np.ndarray = None

    def fit(self, samples) -> "ClinicalScaler":
        mat = np.stack([s.survival.clinical for s in samples])
        binary = np.all((mat == 0) | (mat == 1), axis=0)
        self.mean = np.where(binary, 0.0, mat.mean(axis=0))
        std = mat.std(axis=0)
        self.std = np.where(binary | (std < 1e-12), 1.0, std)
        return self

    def transform(self, clinical: np.ndarray) -> np.ndarray:
        return (np.asarray(clinical, dtype=np.float64) - self.mean) / self.std


def export_risk_csv(rows, path):
    """rows: iterable of (sample_id, risk, time_days, event)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "risk", "time_days", "event"])
        for sample_id, risk, time_days, event in rows:
            writer.writerow([sample_id, f"{risk:.10g}", f"{time_days:.10g}", int(event)])
