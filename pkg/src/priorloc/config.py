"""Model widths and parameter-container helpers shared by the branches."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigurationError
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Widths of every learnable block.

    ``paper()`` gives the full-size network. ``desk()`` (the default) keeps
    the same topology at widths a single CPU core can train in minutes.
    """

    feature_dim: int = 2048
    embed_dim: int = 64
    attn_hidden: int = 32
    hidden_dim: int = 64
    text_dim: int = 300
    n_context: int = 10
    text_heads: int = 4
    text_ffn: int = 128
    kernel: int = 3
    dropout: float = 0.5
    tau: float = 10.0
    # "outside": A rescales the softmax weights of the reconstruction
    # attention, renormalised per query, so a zero weight drops the key.
    # "inside": A multiplies each key's score before the softmax. That form
    # cannot gate (a zero weight leaves the key at score 0) and trains an
    # inverted track on the synthetic corpus, so it is kept for comparison.
    csr_modulation: str = "outside"

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(embed_dim=2048, attn_hidden=512, hidden_dim=512, text_ffn=2048)

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    def validate(self):
        if self.embed_dim % self.text_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} is not divisible by {self.text_heads} heads")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel width must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.tau <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.csr_modulation not in ("inside", "outside"):
            raise ConfigurationError(f"unknown csr_modulation {self.csr_modulation!r}")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, int) and value < 0:
                raise ConfigurationError(f"{f.name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def conv_param(rng: np.random.Generator, k: int, c_in: int, c_out: int, gain: float = math.sqrt(2.0)) -> Tensor:
    return Tensor(rng.normal(0.0, gain / math.sqrt(k * c_in), size=(k, c_in, c_out)), requires_grad=True)


def dense_param(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, gain / math.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)


def const_param(shape, value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


class ParamGroup:
    """Mixin for dataclasses whose fields are all parameter tensors."""

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.named().items():
            if arrays[name].shape != t.shape:
                raise ConfigurationError(f"parameter {name}: stored shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)
