"""Metadata prompts and counterfactual neutralization.

A prompt is an ordered 4-attribute token set (device, age group, sex, site).
Neutralization always blanks the device attribute and independently blanks
each demographic attribute with probability p_text, replacing it with the
single shared NEUTRAL token.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, UnknownToken
from .rng import RngStream

NEUTRAL = "<neutral>"

ATTRIBUTES = ("device", "age_group", "sex", "site")


@dataclass(frozen=True)
class MetaPrompt:
    device: str
    age_group: str
    sex: str
    site: str

    def tokens(self) -> tuple:
        return (self.device, self.age_group, self.sex, self.site)


@dataclass(frozen=True)
class TextAugConfig:
    p_text: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p_text <= 1.0:
            raise ConfigError(f"p_text must be in [0, 1], got {self.p_text}")


def neutralize(prompt: MetaPrompt, stream: RngStream, cfg: TextAugConfig) -> MetaPrompt:
    """Device becomes NEUTRAL unconditionally; each demographic attribute
    becomes NEUTRAL independently with probability p_text."""
    fields = {"device": NEUTRAL}
    for name in ("age_group", "sex", "site"):
        if float(stream.random()) < cfg.p_text:
            fields[name] = NEUTRAL
    return replace(prompt, **fields)


class EmbeddingTable:
    """Token -> row lookup over a (V, E) matrix (a view into model params)."""

    __slots__ = ("vocab", "matrix")

    def __init__(self, vocab, matrix: np.ndarray):
        self.vocab = {tok: i for i, tok in enumerate(vocab)}
        if matrix.shape[0] != len(self.vocab):
            raise ConfigError(
                f"embedding matrix has {matrix.shape[0]} rows for {len(self.vocab)} tokens"
            )
        self.matrix = matrix

    def row_index(self, token: str) -> int:
        try:
            return self.vocab[token]
        except KeyError:
            raise UnknownToken(f"token {token!r} not in vocabulary") from None

    def prompt_rows(self, prompt: MetaPrompt) -> list:
        return [self.row_index(tok) for tok in prompt.tokens()]


def embed_prompt(prompt: MetaPrompt, table: EmbeddingTable) -> np.ndarray:
    """Sum of the four attribute embedding rows."""
    rows = table.prompt_rows(prompt)
    return table.matrix[rows].sum(axis=0)
