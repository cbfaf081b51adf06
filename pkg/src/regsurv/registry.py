"""String-keyed plug-in registries for the swappable components: backbone,
detector, text encoder, and report labeler.

Config files reference plug-ins by key; unknown keys fail fast with a
ConfigError at validation time.
"""

from __future__ import annotations

from .errors import ConfigError

_REGISTRIES = {"backbone": {}, "detector": {}, "text_encoder": {}, "labeler": {}}


def register(kind: str, key: str):
    def wrap(factory):
        _REGISTRIES[kind][key] = factory
        return factory
    return wrap


def resolve(kind: str, key: str):
    try:
        table = _REGISTRIES[kind]
    except KeyError:
        raise ConfigError(f"unknown plug-in kind: {kind}") from None
    if key not in table:
        raise ConfigError(f"unknown {kind} plug-in {key!r}; known: {sorted(table)}")
    return table[key]


def resolve_all(plugins):
    resolve("backbone", plugins.backbone)
    resolve("detector", plugins.detector)
    resolve("text_encoder", plugins.text_encoder)
    resolve("labeler", plugins.labeler)


@register("backbone", "conv5")
def _conv5(config, seed: int = 0):
    from .visual import ConvBackbone

    return ConvBackbone(channels=config.model.backbone_channels, seed=seed)


@register("detector", "oracle")
def _oracle_detector(config, seed: int = 0):
    from .regions import OracleDetector

    return OracleDetector(
        dropout=config.plugins.detector_dropout,
        score_noise=config.plugins.detector_score_noise,
        seed=seed,
    )


@register("detector", "canonical")
def _canonical_detector(config, seed: int = 0):
    from .regions import CanonicalDetector

    return CanonicalDetector()


@register("text_encoder", "mean_embedding")
def _mean_embedding(config, vocab_size: int, seed: int = 0):
    from .textgen import MeanEmbeddingTextEncoder

    return MeanEmbeddingTextEncoder(vocab_size, width=config.model.text_width, seed=seed)


@register("labeler", "keyword")
def _keyword_labeler(config):
    from .nlgmetrics import KeywordLabeler

    return KeywordLabeler()
