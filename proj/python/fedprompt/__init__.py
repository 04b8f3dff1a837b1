"""Desk-scale simulator of federated domain-aware dual prompt tuning."""

from ._core import (
    Config,
    ConfigError,
    FedPromptError,
    compare,
    decode_nearest_words,
    domain_weights,
    fuse,
    generate_domains,
    linear_leak,
    load_config,
    parse_config,
    run,
    sweep,
    trainable_parameter_count,
)

__all__ = [
    "Config",
    "ConfigError",
    "FedPromptError",
    "compare",
    "decode_nearest_words",
    "domain_weights",
    "fuse",
    "generate_domains",
    "linear_leak",
    "load_config",
    "parse_config",
    "run",
    "sweep",
    "trainable_parameter_count",
]
