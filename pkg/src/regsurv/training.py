"""Three-stage training protocol and the end-to-end inference path.

Stage 1 trains the survival-attention pooling and an image-only risk head
under the Cox loss, with the backbone frozen. Stage 2 reloads and freezes
the attention pooling, then trains the region/sentence encoders, both text
space embedders, and the decoder under the alignment loss. Stage 3 trains
only the survival encoders, fusion layers, and risk predictor.

Because the backbone stays frozen throughout, per-sample pyramids and ROI
patches are computed once and cached; each stage then only runs its own
trainable heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig, NUM_SENTENCES
from .data import ClinicalScaler, RegionSet, StructuredReport
from .errors import DataError, OrderingError
from .explain import RegionRiskScores, regional_risk_attention
from .model import ReportSurvivalModel
from .regions import complete_regions, resolve_detections, train_completer
from .registry import resolve
from .survival import RiskBatch, concordance_index, coxph_loss
from .synthetic import template_corpus
from .textgen import (EOS, Vocabulary, detokenize, teacher_forced_batch,
                      token_ce_sum, tokenize)
from .visual import stack_patches


@dataclass
class SampleCache:
    """Frozen-backbone tensors for one split."""

    last_maps: torch.Tensor      # (N, C, H, W)
    patches: list                # per-sample RegionPatches
    token_ids: list              # per-sample list of 5 id sequences
    times: np.ndarray
    events: np.ndarray
    clinical: np.ndarray         # raw covariates
    sample_ids: list


@dataclass
class TrainedPipeline:
    model: ReportSurvivalModel
    scaler: ClinicalScaler
    stage_flags: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)


def build_vocabulary() -> Vocabulary:
    return Vocabulary.build(template_corpus())


def build_cache(model: ReportSurvivalModel, samples) -> SampleCache:
    """Run the frozen backbone once per sample and tokenize the reports."""
    maps, patches, token_ids = [], [], []
    max_len = model.config.model.max_sentence_len
    with torch.no_grad():
        for sample in samples:
            pyramid = model.backbone(torch.tensor(sample.image, dtype=torch.float32))
            maps.append(pyramid.maps[-1])
            patches.append(model.region_encoder.extract_patches(pyramid, sample.regions))
            token_ids.append([
                tokenize(s, model.vocab, max_len) for s in sample.report.sentences
            ])
    return SampleCache(
        last_maps=torch.stack(maps),
        patches=patches,
        token_ids=token_ids,
        times=np.array([s.survival.time_days for s in samples]),
        events=np.array([s.survival.event for s in samples], dtype=bool),
        clinical=np.stack([s.survival.clinical for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )


def _event_batches(n: int, batch_size: int, events: np.ndarray,
                   rng: np.random.Generator) -> list:
    """Fixed-size batches, each guaranteed at least one event.

    Zero-event batches are resampled from the full split rather than
    skipped, keeping epoch lengths constant.
    """
    if not events.any():
        raise DataError("cannot form survival batches: the split has no events")
    order = rng.permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        tries = 0
        while not events[idx].any():
            idx = rng.choice(n, size=len(idx), replace=False)
            tries += 1
            if tries > 1000:
                raise DataError("failed to draw a batch containing an event")
        batches.append(idx)
    return batches


def train_stage1(model: ReportSurvivalModel, cache: SampleCache,
                 flags: dict, histories: dict):
    """Survival-attention pretraining on image features only."""
    cfg = model.config.train.stage1
    params = model.block_parameters(["survival_attention", "image_risk_head"])
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(model.config.seed + 101)
    times = torch.tensor(cache.times)
    events = torch.tensor(cache.events)
    losses = []
    for _ in range(cfg.epochs):
        epoch = []
        for idx in _event_batches(len(cache.patches), cfg.batch_size, cache.events, rng):
            risks = model.image_risk(cache.last_maps[idx])
            loss = coxph_loss(risks, times[idx], events[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch.append(loss.item())
        losses.append(float(np.mean(epoch)))
    flags["stage1"] = True
    histories["stage1"] = losses


def _pooled_risk_features(model, cache: SampleCache) -> torch.Tensor:
    with torch.no_grad():
        return model.survival_attention(cache.last_maps).squeeze(1)   # (N, C)


def _flat_sequences(cache: SampleCache, idx) -> list:
    out = []
    for i in idx:
        out.extend(cache.token_ids[i])
    return out


def train_stage2(model: ReportSurvivalModel, cache: SampleCache,
                 flags: dict, histories: dict):
    """Report generation with the frozen survival attention providing risk
    context; both the image branch and the reference-text branch decode
    through the shared decoder.
    """
    if not flags.get("stage1"):
        raise OrderingError("stage 2 requires stage 1 to have completed")
    cfg = model.config.train.stage2
    params = model.block_parameters([
        "region_encoder", "sentence_embedders", "image_to_text",
        "text_encoder", "text_to_text", "decoder",
    ])
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(model.config.seed + 202)
    pooled = _pooled_risk_features(model, cache)
    n = len(cache.patches)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_patches = stack_patches([cache.patches[i] for i in idx])
            region_features = model.region_encoder(batch_patches)
            sentence_features = model.sentence_visual_features(region_features, pooled[idx])
            visual_prefix = model.text_space_features(sentence_features)
            visual_prefix = visual_prefix.reshape(-1, 1, visual_prefix.shape[-1])

            sequences = _flat_sequences(cache, idx)
            inputs, targets = teacher_forced_batch(sequences)
            logits_visual = model.decoder(visual_prefix, inputs)
            text_prefix = model.text_to_text(model.text_encoder(targets))
            logits_text = model.decoder(text_prefix.unsqueeze(1), inputs)
            loss = (token_ce_sum(logits_visual, targets)
                    + token_ce_sum(logits_text, targets)) / len(idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch.append(loss.item())
        losses.append(float(np.mean(epoch)))
    flags["stage2"] = True
    histories["stage2"] = losses


def _text_space_batch(model, cache: SampleCache, pooled: torch.Tensor) -> torch.Tensor:
    """(N, 5*d_t) image-to-text features for every cached sample."""
    with torch.no_grad():
        batch_patches = stack_patches(cache.patches)
        region_features = model.region_encoder(batch_patches)
        sentence_features = model.sentence_visual_features(region_features, pooled)
        text_features = model.text_space_features(sentence_features)
    return text_features.reshape(len(cache.patches), -1)


def train_stage3(model: ReportSurvivalModel, cache: SampleCache,
                 flags: dict, histories: dict, scaler: ClinicalScaler):
    """Multi-modal survival prediction over frozen upstream features."""
    if not flags.get("stage2"):
        raise OrderingError("stage 3 requires stage 2 to have completed")
    cfg = model.config.train.stage3
    params = model.block_parameters(["survival_head"])
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(model.config.seed + 303)

    pooled = _pooled_risk_features(model, cache)
    text_features = _text_space_batch(model, cache, pooled)
    clinical = torch.tensor(
        np.stack([scaler.transform(row) for row in cache.clinical]), dtype=torch.float32
    )
    times = torch.tensor(cache.times)
    events = torch.tensor(cache.events)
    losses = []
    for _ in range(cfg.epochs):
        epoch = []
        for idx in _event_batches(len(cache.patches), cfg.batch_size, cache.events, rng):
            risks = model.survival_head(text_features[idx], pooled[idx], clinical[idx])
            loss = coxph_loss(risks, times[idx], events[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch.append(loss.item())
        losses.append(float(np.mean(epoch)))
    flags["stage3"] = True
    histories["stage3"] = losses


def train_completer_stage(model: ReportSurvivalModel, samples, flags: dict,
                          histories: dict):
    cfg = model.config.train.completer
    m = model.config.model
    result = train_completer(
        [s.regions for s in samples],
        epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
        mask_low=m.completer_mask_low, mask_high=m.completer_mask_high,
        hidden=m.completer_hidden, seed=model.config.seed + 404,
    )
    model.completer.load_state_dict(result.model.state_dict())
    flags["completer"] = True
    histories["completer"] = result.epoch_losses


def train_pipeline(train_samples, config: ExperimentConfig,
                   stages=("completer", "stage1", "stage2", "stage3"),
                   model: ReportSurvivalModel = None) -> TrainedPipeline:
    if not train_samples:
        raise DataError("training split is empty")
    if model is None:
        model = ReportSurvivalModel(config, build_vocabulary())
    cache = build_cache(model, train_samples)
    flags, histories = {}, {}
    scaler = ClinicalScaler().fit(train_samples)
    if "completer" in stages:
        train_completer_stage(model, train_samples, flags, histories)
    if "stage1" in stages:
        train_stage1(model, cache, flags, histories)
    if "stage2" in stages:
        train_stage2(model, cache, flags, histories)
    if "stage3" in stages:
        train_stage3(model, cache, flags, histories, scaler)
    return TrainedPipeline(model, scaler, flags, histories)


# --- evaluation over cached splits -------------------------------------------


def image_risks(model, cache: SampleCache) -> np.ndarray:
    with torch.no_grad():
        return model.image_risk(cache.last_maps).numpy().astype(np.float64)


def fused_risks(model, cache: SampleCache, scaler: ClinicalScaler) -> np.ndarray:
    pooled = _pooled_risk_features(model, cache)
    text_features = _text_space_batch(model, cache, pooled)
    clinical = torch.tensor(
        np.stack([scaler.transform(row) for row in cache.clinical]), dtype=torch.float32
    )
    with torch.no_grad():
        risks = model.survival_head(text_features, pooled, clinical)
    return risks.numpy().astype(np.float64)


def cindex_of(risks: np.ndarray, cache: SampleCache) -> float:
    return concordance_index(RiskBatch(risks, cache.times, cache.events))


def generate_reports(model, cache: SampleCache) -> list:
    """Greedy-decode the 5 sentences of every cached sample."""
    pooled = _pooled_risk_features(model, cache)
    reports = []
    with torch.no_grad():
        batch_patches = stack_patches(cache.patches)
        region_features = model.region_encoder(batch_patches)
        sentence_features = model.sentence_visual_features(region_features, pooled)
        text_features = model.text_space_features(sentence_features)
    for i in range(len(cache.patches)):
        sentences = []
        for s in range(NUM_SENTENCES):
            ids = model.decoder.decode(text_features[i, s])
            sentences.append(detokenize(ids, model.vocab) or ".")
        reports.append(StructuredReport(sentences))
    return reports


# --- full inference path ------------------------------------------------------


@dataclass
class InferenceResult:
    regions: RegionSet
    report: StructuredReport
    risk: float
    region_scores: RegionRiskScores


def run_inference(model: ReportSurvivalModel, scaler: ClinicalScaler,
                  stage_flags: dict, image: np.ndarray, clinical: np.ndarray,
                  truth_regions: RegionSet = None) -> InferenceResult:
    """detect -> complete -> encode -> attend -> decode -> fuse -> attribute."""
    for flag in ("stage1", "stage2", "stage3"):
        if not stage_flags.get(flag):
            raise OrderingError(f"inference requires {flag} to have completed")
    detector = resolve("detector", model.config.plugins.detector)(
        model.config, seed=model.config.seed
    )
    proposals = detector(image, truth_regions)
    regions = complete_regions(
        resolve_detections(proposals), model.completer,
        min_side=model.config.model.min_box_side,
    )

    with torch.no_grad():
        pyramid = model.backbone(torch.tensor(image, dtype=torch.float32))
        patches = model.region_encoder.extract_patches(pyramid, regions)
        pooled = model.survival_attention(pyramid.maps[-1])            # (1, C)
        region_features = model.region_encoder(patches)
        sentence_features = model.sentence_visual_features(
            region_features, pooled.reshape(-1)
        )
        text_features = model.text_space_features(sentence_features)   # (5, d_t)

    sentences = [
        detokenize(model.decoder.decode(text_features[s]), model.vocab) or "."
        for s in range(NUM_SENTENCES)
    ]
    clinical_std = torch.tensor(scaler.transform(clinical), dtype=torch.float32)
    with torch.no_grad():
        risk = float(model.survival_head(
            text_features.reshape(1, -1), pooled.reshape(1, -1),
            clinical_std.reshape(1, -1),
        )[0])
    scores = regional_risk_attention(model, patches, pooled, clinical_std)
    return InferenceResult(regions, StructuredReport(sentences), risk, scores)
