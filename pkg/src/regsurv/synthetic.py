"""Synthetic frontal-CXR cohort generator.

Stands in for clinical datasets that cannot ship with the code. Each sample
is driven by a latent severity scalar in [0,1] that controls

* an intensity blob planted inside one configured lung-group region,
* which report template bank each sentence group draws from
  (normal vs. abnormal phrasing),
* the event time (higher severity -> shorter time) plus optional
  uniform censoring, and
* a leak into vital-sign covariates.

A second latent, clinical frailty, also shortens event times but is visible
only through the covariates, never the image. The modalities are therefore
complementary: an image-only model is capped below what image + clinical
fusion can reach, the way multi-modal cohorts behave.

Generation is deterministic given (n, seed, config); the latent state is
recorded in each sample's ``meta`` dict so tests can audit it.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import NUM_REGIONS, SynthConfig
from .data import CohortSample, RegionSet, StructuredReport, SurvivalRecord
from .errors import ConfigError

REGION_NAMES = [
    "right lung", "right upper lung zone", "right mid lung zone", "right lower lung zone",
    "right hilar structures", "right apical zone", "right costophrenic angle",
    "right hemidiaphragm", "left lung", "left upper lung zone", "left mid lung zone",
    "left lower lung zone", "left hilar structures", "left apical zone",
    "left costophrenic angle", "left hemidiaphragm", "trachea", "spine",
    "right clavicle", "left clavicle", "aortic arch", "mediastinum",
    "upper mediastinum", "svc", "cardiac silhouette", "cavoatrial junction",
    "right atrium", "carina", "abdomen",
]

# Hand-authored layout loosely following frontal-CXR anatomy (x1, y1, x2, y2).
# Only internal consistency matters; there is no real annotation behind it.
CANONICAL_LAYOUT = np.array([
    [0.08, 0.18, 0.45, 0.78],   # right lung
    [0.10, 0.18, 0.44, 0.38],   # right upper lung zone
    [0.09, 0.38, 0.44, 0.58],   # right mid lung zone
    [0.08, 0.58, 0.44, 0.78],   # right lower lung zone
    [0.30, 0.40, 0.46, 0.60],   # right hilar structures
    [0.12, 0.12, 0.42, 0.24],   # right apical zone
    [0.08, 0.70, 0.24, 0.82],   # right costophrenic angle
    [0.08, 0.66, 0.44, 0.80],   # right hemidiaphragm
    [0.55, 0.18, 0.92, 0.78],   # left lung
    [0.56, 0.18, 0.90, 0.38],   # left upper lung zone
    [0.56, 0.38, 0.91, 0.58],   # left mid lung zone
    [0.56, 0.58, 0.92, 0.78],   # left lower lung zone
    [0.54, 0.40, 0.70, 0.60],   # left hilar structures
    [0.58, 0.12, 0.88, 0.24],   # left apical zone
    [0.76, 0.70, 0.92, 0.82],   # left costophrenic angle
    [0.56, 0.66, 0.92, 0.80],   # left hemidiaphragm
    [0.46, 0.10, 0.54, 0.30],   # trachea
    [0.44, 0.08, 0.56, 0.88],   # spine
    [0.08, 0.10, 0.46, 0.20],   # right clavicle
    [0.54, 0.10, 0.92, 0.20],   # left clavicle
    [0.46, 0.30, 0.60, 0.42],   # aortic arch
    [0.40, 0.25, 0.62, 0.70],   # mediastinum
    [0.42, 0.12, 0.60, 0.35],   # upper mediastinum
    [0.38, 0.25, 0.48, 0.45],   # svc
    [0.36, 0.45, 0.68, 0.75],   # cardiac silhouette
    [0.40, 0.48, 0.50, 0.58],   # cavoatrial junction
    [0.38, 0.50, 0.52, 0.68],   # right atrium
    [0.47, 0.28, 0.55, 0.36],   # carina
    [0.15, 0.78, 0.85, 0.95],   # abdomen
], dtype=np.float64)

# Sentence template banks per group. Abnormal lung templates ground the
# planted region by name via {region}.
TEMPLATES = {
    1: {
        "normal": [
            "the lungs are clear without focal consolidation.",
            "lungs are well expanded and clear.",
            "no focal airspace opacity is seen.",
        ],
        "abnormal": [
            "patchy opacity in the {region} concerning for pneumonia.",
            "multifocal airspace opacity most pronounced in the {region}.",
            "hazy consolidation within the {region}.",
        ],
    },
    2: {
        "normal": [
            "no pleural effusion or pneumothorax.",
            "the pleural spaces are clear bilaterally.",
            "no effusion or pneumothorax is identified.",
        ],
        "abnormal": [
            "small pleural effusion with blunting of the costophrenic angle.",
            "trace pleural effusion at the lung base.",
        ],
    },
    3: {
        "normal": [
            "the cardiomediastinal silhouette is within normal limits.",
            "heart size is normal without cardiomegaly.",
            "normal cardiac contours and mediastinum.",
        ],
        "abnormal": [
            "the cardiac silhouette is enlarged suggesting cardiomegaly.",
            "borderline cardiomegaly with mild vascular congestion.",
        ],
    },
    4: {
        "normal": [
            "no acute osseous abnormality.",
            "the visualized bones are intact without fracture.",
            "no displaced rib fracture is seen.",
        ],
        "abnormal": [
            "mild degenerative changes of the thoracic spine.",
        ],
    },
    5: {
        "normal": [
            "no acute cardiopulmonary process.",
            "clear lungs without acute abnormality.",
        ],
        "abnormal": [
            "findings consistent with viral pneumonia.",
            "multifocal pneumonia with a severe disease burden.",
        ],
    },
}

COVARIATE_NAMES = [
    "age", "sex", "temperature", "oxygen_saturation", "heart_rate",
    "white_blood_cells", "lymphocytes", "creatinine", "c_reactive_protein",
    "cardiovascular_disease", "hypertension", "copd", "diabetes",
    "chronic_liver_disease", "chronic_kidney_disease", "cancer", "hiv",
]


def _repair_coords(coords: np.ndarray, min_side: float = 0.01) -> np.ndarray:
    """Clamp jittered boxes back into [0,1] with a positive minimum side."""
    out = coords.copy()
    for axis in (0, 1):
        lo = np.minimum(out[:, axis], out[:, axis + 2])
        hi = np.maximum(out[:, axis], out[:, axis + 2])
        lo = np.clip(lo, 0.0, 1.0)
        hi = np.clip(hi, 0.0, 1.0)
        too_thin = hi - lo < min_side
        center = np.clip((lo + hi) / 2, min_side / 2, 1 - min_side / 2)
        lo = np.where(too_thin, center - min_side / 2, lo)
        hi = np.where(too_thin, center + min_side / 2, hi)
        out[:, axis], out[:, axis + 2] = lo, hi
    return out


def _render_image(size: int, coords: np.ndarray, blob_box: np.ndarray,
                  severity: float, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    image = 0.32 + 0.10 * yy

    # soft anatomy priors: darker lung fields, brighter spine band
    for j in (0, 8):  # right/left lung
        x1, y1, x2, y2 = coords[j]
        inside = (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
        image = np.where(inside, image - 0.12, image)
    sx1, sy1, sx2, sy2 = coords[17]  # spine
    inside = (xx >= sx1) & (xx <= sx2) & (yy >= sy1) & (yy <= sy2)
    image = np.where(inside, image + 0.18, image)

    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=8.0)
    image = image + 0.04 * texture

    x1, y1, x2, y2 = blob_box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    sigma = max(x2 - x1, y2 - y1) / 3.5
    bump = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2)))
    image = image + amplitude * severity * bump

    image = np.clip(image, 0.0, 1.0)
    # keep values exactly float32-representable so serialization round-trips
    return image.astype(np.float32).astype(np.float64)


def _clinical_vector(severity: float, frailty: float, signal: float, count: int,
                     rng: np.random.Generator) -> np.ndarray:
    values = {
        "age": 58.0 + 14.0 * rng.standard_normal(),
        "sex": float(rng.integers(0, 2)),
        "temperature": 36.7 + (1.2 * severity + 0.5 * frailty) * signal
                       + 0.3 * rng.standard_normal(),
        "oxygen_saturation": float(np.clip(96.5 - (8.0 * severity + 2.0 * frailty) * signal
                                           + 1.2 * rng.standard_normal(), 70.0, 100.0)),
        "heart_rate": 80.0 + (12.0 * severity + 6.0 * frailty) * signal
                      + 6.0 * rng.standard_normal(),
        "white_blood_cells": 7.0 + 3.0 * frailty * signal + 1.5 * rng.standard_normal(),
        "lymphocytes": float(np.clip(1.8 - 0.6 * frailty * signal
                                     + 0.3 * rng.standard_normal(), 0.1, None)),
        "creatinine": float(np.clip(1.0 + 0.3 * rng.standard_normal(), 0.2, None)),
        "c_reactive_protein": float(np.clip(15.0 + 70.0 * frailty * signal
                                            + 8.0 * rng.standard_normal(), 0.0, None)),
        "cardiovascular_disease": float(rng.random() < 0.25),
        "hypertension": float(rng.random() < 0.4),
        "copd": float(rng.random() < 0.15),
        "diabetes": float(rng.random() < 0.25),
        "chronic_liver_disease": float(rng.random() < 0.05),
        "chronic_kidney_disease": float(rng.random() < 0.1),
        "cancer": float(rng.random() < 0.1),
        "hiv": float(rng.random() < 0.02),
    }
    base = [values[name] for name in COVARIATE_NAMES]
    if count <= len(base):
        return np.array(base[:count], dtype=np.float64)
    extra = rng.standard_normal(count - len(base))
    return np.concatenate([np.array(base), extra])


def _pick_sentence(group: int, abnormal: bool, severity: float,
                   threshold: float, blob_region: int):
    """Severity selects the template deterministically: the bank's variants
    partition the severity range the bank applies to, so phrasing grades
    with disease burden and reports are a function of the latent state.
    """
    bank = TEMPLATES[group]["abnormal" if abnormal else "normal"]
    lo, hi = (threshold, 1.0) if abnormal else (0.0, min(threshold, 1.0))
    position = min(max((severity - lo) / (hi - lo), 0.0), 1.0 - 1e-9)
    idx = int(position * len(bank))
    text = bank[idx].format(region=REGION_NAMES[blob_region - 1])
    template_id = f"{group}/{'abnormal' if abnormal else 'normal'}/{idx}"
    return text, template_id


def generate_synthetic_cohort(n: int, seed: int, config: SynthConfig = None) -> list:
    """Generate ``n`` deterministic cohort samples."""
    if n < 1:
        raise ConfigError(f"cohort size must be >= 1, got {n}")
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        severity = float(rng.uniform())
        frailty = float(rng.uniform())
        coords = _repair_coords(
            CANONICAL_LAYOUT + rng.normal(0.0, config.box_jitter_sigma, size=(NUM_REGIONS, 4))
        )
        blob_box = coords[config.blob_region - 1]
        image = _render_image(config.image_size, coords, blob_box, severity,
                              config.blob_amplitude, rng)

        abnormal = {g: severity > config.group_thresholds.get(g, 2.0) for g in range(1, 6)}
        sentences, template_ids = [], {}
        for g in range(1, 6):
            text, tid = _pick_sentence(g, abnormal[g], severity,
                                       config.group_thresholds.get(g, 2.0),
                                       config.blob_region)
            sentences.append(text)
            template_ids[str(g)] = tid

        event_time = config.time_scale_days * float(
            np.exp(-config.risk_coefficient * severity
                   - config.frailty_coefficient * frailty
                   + config.time_noise_sd * rng.standard_normal())
        )
        censored = rng.random() < config.censoring_fraction
        if censored:
            observed = float(rng.uniform(0.0, event_time))
            event = False
        else:
            observed = event_time
            event = True

        clinical = _clinical_vector(severity, frailty, config.clinical_signal,
                                    config.covariate_count, rng)
        meta = {
            "severity": severity,
            "frailty": frailty,
            "event_time_days": event_time,
            "abnormal_groups": {str(g): bool(v) for g, v in abnormal.items()},
            "template_ids": template_ids,
            "blob_region": config.blob_region,
        }
        samples.append(CohortSample(
            sample_id=f"s{k:05d}",
            image=image,
            regions=RegionSet.fully_detected(coords),
            report=StructuredReport(sentences),
            survival=SurvivalRecord(observed, event, clinical),
            meta=meta,
        ))
    return samples


def template_corpus() -> list:
    """Every sentence the generator can emit; used to build vocabularies."""
    out = []
    for group, banks in TEMPLATES.items():
        for bank in banks.values():
            for template in bank:
                if "{region}" in template:
                    out.extend(template.format(region=name) for name in REGION_NAMES)
                else:
                    out.append(template)
    return out
