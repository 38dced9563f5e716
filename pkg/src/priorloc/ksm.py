"""Key semantic matching: video embedding, class-query text encoder and the
video-text matching loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ModelConfig, ParamGroup, conv_param, const_param, dense_param
from .errors import ArgumentError, DimensionError
from .numerics import Tensor

LOG_FLOOR = 1e-12


def default_k(T: int) -> int:
    """Top-k pool size for a video of ``T`` segments."""
    return max(1, T // 8)


@dataclass
class KsmParams(ParamGroup):
    emb1_w: Tensor
    emb1_b: Tensor
    emb2_w: Tensor
    emb2_b: Tensor
    att1_w: Tensor
    att1_b: Tensor
    att2_w: Tensor
    att2_b: Tensor
    start: Tensor
    context: Tensor
    key_proj: Tensor  # C x text_dim x D, one projection per class
    bg_key: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, n_classes: int, rng: np.random.Generator) -> "KsmParams":
        cfg.validate()
        K, D, H = cfg.kernel, cfg.embed_dim, cfg.attn_hidden
        proj = rng.normal(0.0, 1.0 / math.sqrt(cfg.text_dim), size=(n_classes, cfg.text_dim, D))
        return cls(
            emb1_w=conv_param(rng, K, cfg.feature_dim, D), emb1_b=const_param(D),
            emb2_w=conv_param(rng, K, D, D), emb2_b=const_param(D),
            att1_w=conv_param(rng, K, D, H), att1_b=const_param(H),
            att2_w=conv_param(rng, K, H, 1, gain=1.0), att2_b=const_param(1),
            start=Tensor(rng.normal(0.0, 0.1, size=(1, D)), requires_grad=True),
            context=Tensor(rng.normal(0.0, 0.1, size=(cfg.n_context, D)), requires_grad=True),
            key_proj=Tensor(proj, requires_grad=True),
            bg_key=const_param((1, D)),
            wq=dense_param(rng, D, D), wk=dense_param(rng, D, D), wv=dense_param(rng, D, D),
            wo=dense_param(rng, D, D), bo=const_param(D),
            ln1_g=const_param(D, 1.0), ln1_b=const_param(D),
            ff1_w=dense_param(rng, D, cfg.text_ffn, gain=math.sqrt(2.0)), ff1_b=const_param(cfg.text_ffn),
            ff2_w=dense_param(rng, cfg.text_ffn, D), ff2_b=const_param(D),
            ln2_g=const_param(D, 1.0), ln2_b=const_param(D),
        )

    @property
    def n_classes(self) -> int:
        return self.key_proj.shape[0]


@dataclass
class KsmForward:
    F_e: Tensor
    A: Tensor
    M: Tensor
    M_hat: Tensor
    s: Tensor
    s_hat: Tensor
    p: Tensor
    p_hat: Tensor


@dataclass
class QueryTokens:
    padded: Tensor  # (C+1) x L x D
    sequences: list[Tensor]


def fuse_features(rgb, flow) -> Tensor:
    rgb, flow = nm.as_tensor(rgb), nm.as_tensor(flow)
    if rgb.shape[0] != flow.shape[0]:
        raise DimensionError(f"rgb has {rgb.shape[0]} segments, flow has {flow.shape[0]}")
    return nm.concat([rgb, flow], axis=1)


def embed_video(F: Tensor, params: KsmParams, cfg: ModelConfig, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Returns ``(F_e, A_KSM)`` with ``A_KSM`` shaped ``T x 1``."""
    h = nm.relu(nm.conv1d(F, params.emb1_w, params.emb1_b))
    h = nm.dropout(h, cfg.dropout, rng, training)
    F_e = nm.relu(nm.conv1d(h, params.emb2_w, params.emb2_b))
    return F_e, attention_track(F_e, params.att1_w, params.att1_b, params.att2_w, params.att2_b)


def attention_track(F_e: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nm.sigmoid(nm.conv1d(nm.relu(nm.conv1d(F_e, w1, b1)), w2, b2))


def build_query_tokens(key_embeds: list, params: KsmParams) -> QueryTokens:
    """``key_embeds[c]`` is the ``len_c x text_dim`` word-vector matrix of
    class ``c``'s key description. The background query gets the learnable
    zero-initialised ``bg_key`` row in place of a description."""
    if len(key_embeds) != params.n_classes:
        raise ArgumentError(f"need one key text per class ({params.n_classes}), got {len(key_embeds)}")
    prefix = [params.start, params.context]
    seqs = []
    for c, emb in enumerate(key_embeds):
        seqs.append(nm.concat(prefix + [nm.matmul(nm.as_tensor(emb), params.key_proj[c])], axis=0))
    seqs.append(nm.concat(prefix + [params.bg_key], axis=0))
    L = max(s.shape[0] for s in seqs)
    D = params.start.shape[1]
    padded = nm.concat([nm.reshape(nm.pad_rows(s, 0, L - s.shape[0]), (1, L, D)) for s in seqs], axis=0)
    return QueryTokens(padded, seqs)


def _encoder_start_row(x: Tensor, params: KsmParams, n_heads: int) -> Tensor:
    """Post-LN transformer layer evaluated at position 0 only.

    Later positions never feed back into position 0 within a single layer
    except as keys and values, so this equals slicing row 0 of the full
    layer output.
    """
    D = x.shape[1]
    dh = D // n_heads
    x0 = x[0:1]
    q = nm.matmul(x0, params.wq)
    k = nm.matmul(x, params.wk)
    v = nm.matmul(x, params.wv)
    heads = [nm.scaled_attention(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh], v[:, h * dh:(h + 1) * dh])
             for h in range(n_heads)]
    attn = nm.linear(nm.concat(heads, axis=1), params.wo, params.bo)
    y = nm.layer_norm(x0 + attn, params.ln1_g, params.ln1_b)
    ff = nm.linear(nm.relu(nm.linear(y, params.ff1_w, params.ff1_b)), params.ff2_w, params.ff2_b)
    return nm.layer_norm(y + ff, params.ln2_g, params.ln2_b)


def encode_text_query(tokens: QueryTokens, params: KsmParams, cfg: ModelConfig) -> Tensor:
    """``(C+1) x D`` class queries, one [START] output per class sequence."""
    return nm.concat([_encoder_start_row(seq, params, cfg.text_heads) for seq in tokens.sequences], axis=0)


def match(F_e: Tensor, A: Tensor, F_query: Tensor, tau: float = 10.0) -> tuple[Tensor, Tensor]:
    if F_e.shape[1] != F_query.shape[1]:
        raise DimensionError(f"video width {F_e.shape[1]} != query width {F_query.shape[1]}")
    M = nm.mul(nm.matmul(nm.l2_normalize(F_e, axis=1), nm.transpose(nm.l2_normalize(F_query, axis=1))), tau)
    return M, nm.mul(nm.reshape(A, (A.shape[0], 1)), M)


def video_scores(M: Tensor, k: int) -> tuple[Tensor, Tensor]:
    if not 1 <= k <= M.shape[0]:
        raise ArgumentError(f"k={k} out of range for T={M.shape[0]}")
    s = nm.topk_mean(M, k, axis=0)
    return s, nm.softmax(s, axis=0)


def label_targets(label) -> tuple[np.ndarray, np.ndarray]:
    """Normalised targets with the background slot set to 1 and to 0."""
    label = np.asarray(label, dtype=np.float64)
    if label.sum() <= 0:
        raise ArgumentError("video label has no positive class")
    y = np.append(label, 1.0)
    y_hat = np.append(label, 0.0)
    return y / y.sum(), y_hat / y_hat.sum()


def ksm_loss(p: Tensor, p_hat: Tensor, label) -> Tensor:
    y, y_hat = label_targets(label)
    if p.shape != y.shape or p_hat.shape != y.shape:
        raise DimensionError(f"scores {p.shape} do not match label with background {y.shape}")
    return -(nm.tsum(nm.mul(nm.log(p, LOG_FLOOR), y)) + nm.tsum(nm.mul(nm.log(p_hat, LOG_FLOOR), y_hat)))


def ksm_forward(F: Tensor, F_query: Tensor, params: KsmParams, cfg: ModelConfig, k: int | None = None,
                training: bool = False, rng: np.random.Generator | None = None) -> KsmForward:
    F_e, A = embed_video(F, params, cfg, training, rng)
    M, M_hat = match(F_e, A, F_query, cfg.tau)
    k = default_k(F.shape[0]) if k is None else k
    s, p = video_scores(M, k)
    s_hat, p_hat = video_scores(M_hat, k)
    return KsmForward(F_e, A, M, M_hat, s, s_hat, p, p_hat)
