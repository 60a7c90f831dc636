"""Alignment layer: classifier outputs projected into a token embedding space.

The first two linear maps are value-copies of the pre-trained classifier
head.  The third is bias-free; its weight row for class k is the flattened
(tau x hidden) embedding of that class's textual fault description, so a
one-hot class vector reproduces the description embedding exactly.  A
deterministic toy tokenizer/embedding provider stands in for an external
language model so the whole path is testable offline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .errors import ConfigError
from .fcn import FcnModel


class ToyEmbeddingProvider:
    """Whitespace tokenizer over a fixed vocabulary with frozen random embeddings."""

    PAD_ID = 0
    UNK_ID = 1

    def __init__(self, hidden_size: int, vocab: list[str], seed: int = 0):
        if hidden_size < 1:
            raise ConfigError("hidden size must be >= 1")
        self.hidden_size = int(hidden_size)
        self._ids = {word.lower(): i + 2 for i, word in enumerate(dict.fromkeys(vocab))}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7]))
        self._table = rng.normal(size=(2 + len(self._ids), self.hidden_size))
        self._table.flags.writeable = False

    @property
    def pad_token_id(self) -> int:
        return self.PAD_ID

    def tokenize(self, text: str) -> list[int]:
        return [self._ids.get(word.lower(), self.UNK_ID) for word in text.split()]

    def embed(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ConfigError("token ids must be a flat sequence")
        if ids.size and (ids.min() < 0 or ids.max() >= self._table.shape[0]):
            raise ConfigError("token id outside the embedding table")
        return self._table[ids].copy()


def toy_provider(hidden_size: int, vocab: list[str], seed: int = 0) -> ToyEmbeddingProvider:
    return ToyEmbeddingProvider(hidden_size, vocab, seed)


def load_fault_descriptions(path) -> list[str]:
    """One description per line, line order == class order."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    descriptions = [line.strip() for line in lines if line.strip()]
    if not descriptions:
        raise ConfigError(f"{path}: no descriptions found")
    return descriptions


def init_l3(descriptions, provider, token_length: int) -> np.ndarray:
    """Weight matrix (n_classes, token_length * hidden) from class descriptions.

    Each description is tokenized, truncated or padded to exactly
    token_length tokens, embedded, and flattened row-major into one row.
    """
    if token_length < 1:
        raise ConfigError("token length must be >= 1")
    rows = []
    for k, text in enumerate(descriptions):
        if not text or not text.strip():
            raise ConfigError(f"description for class {k} is empty")
        tokens = provider.tokenize(text)[:token_length]
        tokens = tokens + [provider.pad_token_id] * (token_length - len(tokens))
        embedded = provider.embed(tokens)
        if embedded.shape != (token_length, provider.hidden_size):
            raise ConfigError(
                f"provider returned {embedded.shape}, expected "
                f"({token_length}, {provider.hidden_size})"
            )
        rows.append(embedded.reshape(-1))
    return np.stack(rows)


@dataclass
class AlignmentLayer:
    """Three linear maps turning encoder features into a (tau x hidden) embedding."""

    l1_weight: np.ndarray
    l1_bias: np.ndarray
    l2_weight: np.ndarray
    l2_bias: np.ndarray
    l3_weight: np.ndarray
    token_length: int
    hidden_size: int

    def __post_init__(self) -> None:
        n_classes = self.l2_weight.shape[0]
        expected = (n_classes, self.token_length * self.hidden_size)
        if self.l3_weight.shape != expected:
            raise ConfigError(
                f"l3 weight shape {self.l3_weight.shape}, expected {expected}"
            )

    @property
    def n_classes(self) -> int:
        return self.l2_weight.shape[0]

    def project(self, class_scores: np.ndarray) -> np.ndarray:
        """Bias-free l3 plus the row-major reshape to (tau, hidden).

        For a one-hot input this selects one weight row exactly, i.e. the
        embedding of that class's description, bit for bit.
        """
        p = np.asarray(class_scores, dtype=np.float64)
        flat = p @ self.l3_weight
        shape = (self.token_length, self.hidden_size)
        if p.ndim == 1:
            return flat.reshape(shape)
        return flat.reshape(p.shape[0], *shape)

    def align(self, features: np.ndarray) -> np.ndarray:
        """Encoder features -> (tau x hidden) vibration word embedding."""
        f = np.asarray(features, dtype=np.float64)
        squeeze = f.ndim == 1
        if squeeze:
            f = f[None, :]
        if f.shape[1] != self.l1_weight.shape[1]:
            raise ConfigError(
                f"feature width {f.shape[1]} != l1 input width {self.l1_weight.shape[1]}"
            )
        h = np.maximum(f @ self.l1_weight.T + self.l1_bias, 0.0)
        p = h @ self.l2_weight.T + self.l2_bias
        out = self.project(p)
        return out[0] if squeeze else out


def build_alignment(
    model: FcnModel,
    provider,
    token_length: int,
    descriptions: list[str],
) -> AlignmentLayer:
    """Copy the classifier head and initialize l3 from the description embeddings."""
    if len(descriptions) != model.config.n_classes:
        raise ConfigError(
            f"{len(descriptions)} descriptions for {model.config.n_classes} classes"
        )
    return AlignmentLayer(
        l1_weight=model.l1.w.value.copy(),
        l1_bias=model.l1.b.value.copy(),
        l2_weight=model.l2.w.value.copy(),
        l2_bias=model.l2.b.value.copy(),
        l3_weight=init_l3(descriptions, provider, token_length),
        token_length=token_length,
        hidden_size=provider.hidden_size,
    )


def save_alignment(path, layer: AlignmentLayer) -> None:
    nn.save_checkpoint(path, {
        "align.l1.weight": layer.l1_weight,
        "align.l1.bias": layer.l1_bias,
        "align.l2.weight": layer.l2_weight,
        "align.l2.bias": layer.l2_bias,
        "align.l3.weight": layer.l3_weight,
        "__config__/token_length": np.float64(layer.token_length),
        "__config__/hidden_size": np.float64(layer.hidden_size),
    })


def load_alignment(path) -> AlignmentLayer:
    tensors = nn.load_checkpoint(path)
    try:
        return AlignmentLayer(
            l1_weight=tensors["align.l1.weight"],
            l1_bias=tensors["align.l1.bias"],
            l2_weight=tensors["align.l2.weight"],
            l2_bias=tensors["align.l2.bias"],
            l3_weight=tensors["align.l3.weight"],
            token_length=int(tensors["__config__/token_length"]),
            hidden_size=int(tensors["__config__/hidden_size"]),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing alignment tensor {exc}") from exc
