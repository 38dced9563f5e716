"""Complete semantic reconstruction: an attention-modulated encoder over
video segments and a decoder that fills the masked words of a description."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ModelConfig, ParamGroup, conv_param, const_param, dense_param
from .errors import ArgumentError, DimensionError
from .ksm import attention_track
from .numerics import Tensor

LOG_FLOOR = 1e-12


@dataclass
class CsrParams(ParamGroup):
    fc_w: Tensor
    fc_b: Tensor
    att1_w: Tensor
    att1_b: Tensor
    att2_w: Tensor
    att2_b: Tensor
    txt_w: Tensor
    txt_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wqd: Tensor
    wkd: Tensor
    wvd: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> "CsrParams":
        cfg.validate()
        K, d = cfg.kernel, cfg.hidden_dim
        return cls(
            fc_w=dense_param(rng, cfg.feature_dim, d), fc_b=const_param(d),
            att1_w=conv_param(rng, K, cfg.embed_dim, cfg.attn_hidden), att1_b=const_param(cfg.attn_hidden),
            att2_w=conv_param(rng, K, cfg.attn_hidden, 1, gain=1.0), att2_b=const_param(1),
            txt_w=dense_param(rng, cfg.text_dim, d, gain=10.0), txt_b=const_param(d),
            wq=dense_param(rng, d, d), wk=dense_param(rng, d, d), wv=dense_param(rng, d, d),
            wqd=dense_param(rng, d, d), wkd=dense_param(rng, d, d), wvd=dense_param(rng, d, d),
            out_w=dense_param(rng, d, vocab_size), out_b=const_param(vocab_size),
        )


@dataclass
class CsrForward:
    F_complete: Tensor
    A: Tensor
    F_c: Tensor
    F_fg: Tensor
    H: Tensor
    word_dists: Tensor


def positional_encoding(m: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table, ``m x d``."""
    pos = np.arange(m)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((m, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


def embed_video_fc(F: Tensor, params: CsrParams) -> Tensor:
    return nm.linear(F, params.fc_w, params.fc_b)


def csr_attention(F_e: Tensor, params: CsrParams) -> Tensor:
    return attention_track(F_e, params.att1_w, params.att1_b, params.att2_w, params.att2_b)


def embed_text(masked_embeds, params: CsrParams) -> Tensor:
    """Project masked-sentence word vectors and add position codes. Without
    the position term every [MASK] slot would query the video identically."""
    x = nm.linear(nm.as_tensor(masked_embeds), params.txt_w, params.txt_b)
    return x + positional_encoding(x.shape[0], x.shape[1])


def _flat(A: Tensor) -> Tensor:
    return nm.reshape(A, (A.shape[0],))


def _attend(q: Tensor, k: Tensor, v: Tensor, A: Tensor, modulation: str) -> Tensor:
    if modulation == "inside":
        return nm.masked_scaled_attention(q, k, v, _flat(A))
    # softmax(s) * A renormalised over keys is softmax(s + log A).
    scores = nm.matmul(q, nm.transpose(k)) * (1.0 / math.sqrt(q.shape[1]))
    gate = nm.reshape(nm.log(_flat(A), LOG_FLOOR), (1, k.shape[0]))
    return nm.matmul(nm.softmax(scores + gate, axis=1), v)


def reconstruct_encode(F_complete: Tensor, A: Tensor, params: CsrParams, modulation: str = "outside") -> Tensor:
    return _attend(nm.matmul(F_complete, params.wq), nm.matmul(F_complete, params.wk),
                   nm.matmul(F_complete, params.wv), A, modulation)


def reconstruct_decode(F_c: Tensor, F_fg: Tensor, A: Tensor, params: CsrParams, modulation: str = "outside") -> Tensor:
    if F_c.shape[1] != F_fg.shape[1]:
        raise DimensionError(f"text width {F_c.shape[1]} != video width {F_fg.shape[1]}")
    if A.shape[0] != F_fg.shape[0]:
        raise DimensionError(f"attention track has {A.shape[0]} entries for {F_fg.shape[0]} segments")
    return _attend(nm.matmul(F_c, params.wqd), nm.matmul(F_fg, params.wkd), nm.matmul(F_fg, params.wvd), A,
                   modulation)


def word_distributions(H: Tensor, params: CsrParams) -> Tensor:
    return nm.softmax(nm.linear(H, params.out_w, params.out_b), axis=1)


def csr_loss(word_dists: Tensor, targets, mask_positions) -> Tensor:
    """NLL of the original tokens at the masked positions. ``targets``
    holds the original id of every sentence position."""
    positions = np.asarray(list(mask_positions), dtype=np.int64)
    if positions.size == 0:
        raise ArgumentError("no masked positions to reconstruct")
    targets = np.asarray(targets, dtype=np.int64)
    picked = word_dists[positions, targets[positions]]
    return -nm.tsum(nm.log(picked, LOG_FLOOR))


def csr_forward(F: Tensor, F_e: Tensor, masked_embeds, params: CsrParams, F_complete: Tensor | None = None,
                A: Tensor | None = None, modulation: str = "outside") -> CsrForward:
    """One description against one video. ``F_complete`` and ``A`` may be
    passed in when several descriptions share a video."""
    F_complete = embed_video_fc(F, params) if F_complete is None else F_complete
    A = csr_attention(F_e, params) if A is None else A
    F_c = embed_text(masked_embeds, params)
    F_fg = reconstruct_encode(F_complete, A, params, modulation)
    H = reconstruct_decode(F_c, F_fg, A, params, modulation)
    return CsrForward(F_complete, A, F_c, F_fg, H, word_distributions(H, params))
