"""The assembled report-generation + survival model.

Submodules are grouped into named parameter blocks so the staged training
protocol can freeze, snapshot, and checkpoint them independently.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import SentenceEmbedders, SurvivalAttention
from .config import NUM_SENTENCES, ExperimentConfig, resolve_group_table
from .errors import EvaluationError
from .regions import RegionCompleter
from .registry import resolve
from .survival import MultiModalSurvivalHead
from .textgen import ReportDecoder, Vocabulary
from .visual import RegionFeatureEncoder


class ReportSurvivalModel(nn.Module):
    def __init__(self, config: ExperimentConfig, vocab: Vocabulary,
                 group_table: dict = None):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab
        self.group_table = group_table or resolve_group_table(config)
        m = config.model
        seed = config.seed

        self.backbone = resolve("backbone", config.plugins.backbone)(config, seed=seed)
        self.completer = RegionCompleter(hidden=m.completer_hidden, seed=seed + 1)
        self.region_encoder = RegionFeatureEncoder(m, seed=seed + 2)
        self.survival_attention = SurvivalAttention(
            m.attention_dim, m.attention_heads, m.pyramid_positions, seed=seed + 3
        )
        self.sentence_embedders = SentenceEmbedders(m, self.group_table, seed=seed + 4)
        torch.manual_seed(seed + 5)
        self.image_to_text = nn.Linear(m.sentence_width, m.text_width)
        self.text_encoder = resolve("text_encoder", config.plugins.text_encoder)(
            config, len(vocab), seed=seed + 6
        )
        torch.manual_seed(seed + 7)
        self.text_to_text = nn.Linear(self.text_encoder.width, m.text_width)
        self.decoder = ReportDecoder(
            len(vocab), dim=m.text_width, heads=m.decoder_heads,
            blocks=m.decoder_blocks, ffn_width=m.decoder_ffn_width,
            max_len=m.max_sentence_len, seed=seed + 8,
        )
        torch.manual_seed(seed + 9)
        self.image_risk_head = nn.Linear(m.attention_dim, 1)
        self.survival_head = MultiModalSurvivalHead(
            text_width=NUM_SENTENCES * m.text_width,
            image_width=m.attention_dim,
            clinical_width=self.config.synth.covariate_count,
            hidden=m.survival_hidden,
            survival_width=m.survival_width,
            seed=seed + 10,
        )

    # Named parameter blocks, the unit of freezing and checkpointing.
    def blocks(self) -> dict:
        return {
            "backbone": self.backbone,
            "completer": self.completer,
            "region_encoder": self.region_encoder,
            "survival_attention": self.survival_attention,
            "sentence_embedders": self.sentence_embedders,
            "image_to_text": self.image_to_text,
            "text_encoder": self.text_encoder,
            "text_to_text": self.text_to_text,
            "decoder": self.decoder,
            "image_risk_head": self.image_risk_head,
            "survival_head": self.survival_head,
        }

    def block_parameters(self, names) -> list:
        params = []
        for name in names:
            params.extend(self.blocks()[name].parameters())
        return params

    def snapshot(self, names=None) -> dict:
        """Detached copies of parameter tensors, for freeze-contract checks."""
        out = {}
        for name, module in self.blocks().items():
            if names is not None and name not in names:
                continue
            for key, tensor in module.state_dict().items():
                out[f"{name}.{key}"] = tensor.detach().clone()
        return out

    def assert_finite(self):
        for name, parameter in self.named_parameters():
            if not torch.isfinite(parameter).all():
                raise EvaluationError(f"parameter {name} contains non-finite values")

    def image_risk(self, last_map: torch.Tensor) -> torch.Tensor:
        """Stage-1 image-only risk: (B,C,H,W) -> (B,)."""
        pooled = self.survival_attention(last_map)
        return self.image_risk_head(pooled.squeeze(1)).squeeze(-1)

    def sentence_visual_features(self, region_features: torch.Tensor,
                                 pooled: torch.Tensor) -> list:
        """(…,30,W) region features + (…,C) pooled risk -> 5 of (…, d_e)."""
        from .visual import aggregate_sentence_features

        if region_features.dim() == 2:
            grouped = aggregate_sentence_features(region_features, self.group_table)
        else:
            grouped = []
            for i in sorted(self.group_table):
                members = sorted(self.group_table[i])
                cols = [region_features[:, j - 1] for j in members]
                grouped.append(torch.cat(cols, dim=-1))
        return self.sentence_embedders(grouped, pooled)

    def text_space_features(self, sentence_features: list) -> torch.Tensor:
        """5 of (…, d_e) -> (…, 5, d_t) image-to-text features."""
        return torch.stack([self.image_to_text(v) for v in sentence_features], dim=-2)
