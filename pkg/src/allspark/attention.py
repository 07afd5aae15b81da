"""Channel-wise cross/self attention bottleneck.

Features are (..., d, C) token matrices: d patch tokens by C channels. The
attention runs over the channel axis: each (projected) query channel is
rebuilt as a softmax-weighted mix of the bank's (projected) value channels,
with the weights coming from instance-normalised channel inner products.

A bank wider than C is projected block-wise: its channels are cut into
consecutive blocks of C (the last block zero-padded), and every block goes
through the same C -> C' projection.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

INSTANCE_NORM_EPS = 1e-5


class Origin(enum.Enum):
    labeled = "labeled"
    unlabeled = "unlabeled"
    inference = "inference"


@dataclass
class FeatureMap:
    tokens: Tensor  # (..., d, C)
    origin: Origin = Origin.inference

    @property
    def d(self) -> int:
        return self.tokens.shape[-2]

    @property
    def C(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    num_heads: int = 1

    def __post_init__(self):
        C, Cp = self.w_q.shape
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != (C, Cp):
                raise ShapeError(f"{name} must be {(C, Cp)}, got {getattr(self, name).shape}")
        if self.w_out.shape != (Cp, C):
            raise ShapeError(f"w_out must be {(Cp, C)}, got {self.w_out.shape}")
        if self.num_heads < 1 or Cp % self.num_heads:
            raise ShapeError(f"num_heads={self.num_heads} must divide projected width {Cp}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def projected(self) -> int:
        return self.w_q.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_out": self.w_out}


def init_attention_params(channels: int, expansion: int = 1, num_heads: int = 1, rng=None) -> AttentionParams:
    """Zero-mean uniform init with bound 1/sqrt(C) on all four projections."""
    rng = np.random.default_rng(0) if rng is None else rng
    Cp = expansion * channels
    bound = 1.0 / np.sqrt(channels)

    def w(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return AttentionParams(w((channels, Cp)), w((channels, Cp)), w((channels, Cp)), w((Cp, channels)), num_heads)


def identity_params(channels: int, num_heads: int = 1) -> AttentionParams:
    eye = np.eye(channels)
    return AttentionParams(*(Tensor(eye.copy(), requires_grad=True) for _ in range(4)), num_heads=num_heads)


def _project_bank(bank: Tensor, w: Tensor, num_heads: int) -> Tensor:
    """(..., d, Cb) -> (..., heads, d, nb * head_width), nb = ceil(Cb / C)."""
    C, Cp = w.shape
    *lead, d, Cb = bank.shape
    nb = -(-Cb // C)
    if nb * C != Cb:
        pad = Tensor(np.zeros((*lead, d, nb * C - Cb), dtype=bank.data.dtype))
        bank = T.concat([bank, pad], axis=-1)
    hw = Cp // num_heads
    x = T.reshape(bank, (*lead, d, nb, C))
    x = T.matmul(x, w)  # (..., d, nb, Cp)
    x = T.reshape(x, (*lead, d, nb, num_heads, hw))
    n = len(lead)
    x = T.permute(x, (*range(n), n + 2, n, n + 1, n + 3))  # (..., heads, d, nb, hw)
    return T.reshape(x, (*lead, num_heads, d, nb * hw))


def _split_query(q: Tensor, num_heads: int) -> Tensor:
    """(..., d, Cp) -> (..., heads, hw, d): per-head transposed queries."""
    *lead, d, Cp = q.shape
    n = len(lead)
    x = T.reshape(q, (*lead, d, num_heads, Cp // num_heads))
    return T.permute(x, (*range(n), n + 1, n + 2, n))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, hw, d) -> (..., d, heads * hw)."""
    *lead, H, hw, d = x.shape
    n = len(lead)
    x = T.permute(x, (*range(n), n + 2, n, n + 1))
    return T.reshape(x, (*lead, d, H * hw))


def attention_weights(q_t: Tensor, k: Tensor) -> Tensor:
    """softmax(instance_norm(q^T k)) over the bank-channel axis."""
    return T.softmax_rows(T.instance_norm_rows(T.matmul(q_t, k), INSTANCE_NORM_EPS))


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1) -> Tensor:
    """Core channel attention on already projected tensors.

    q is (..., d, Cp); k and v are (..., heads, d, Wb). Returns (..., d, Cp).
    Permuting the columns of k and v jointly leaves the result unchanged.
    """
    q_t = _split_query(q, num_heads)
    m = attention_weights(q_t, k)
    return _merge_heads(T.matmul(m, T.transpose(v)))


def channel_cross_attention(
    query_feat: Union[FeatureMap, Tensor], bank: Tensor, params: AttentionParams
) -> FeatureMap:
    query = query_feat.tokens if isinstance(query_feat, FeatureMap) else query_feat
    bank = T.as_tensor(bank)
    if bank.ndim < 2 or bank.shape[-2] != query.shape[-2]:
        raise ShapeError(f"bank token length {bank.shape} does not match query {query.shape}")
    if bank.shape[-1] < 1:
        raise ShapeError("bank must hold at least one channel")
    if query.shape[-1] != params.channels:
        raise ShapeError(f"query has {query.shape[-1]} channels, params expect {params.channels}")
    heads = params.num_heads
    q = T.matmul(query, params.w_q)
    k = _project_bank(bank, params.w_k, heads)
    v = _project_bank(bank, params.w_v, heads)
    out = T.matmul(attend(q, k, v, heads), params.w_out)
    origin = query_feat.origin if isinstance(query_feat, FeatureMap) else Origin.inference
    return FeatureMap(out, origin)


def channel_self_attention(feat: Union[FeatureMap, Tensor], params: AttentionParams) -> FeatureMap:
    tokens = feat.tokens if isinstance(feat, FeatureMap) else feat
    out = channel_cross_attention(tokens, tokens, params)
    out.origin = feat.origin if isinstance(feat, FeatureMap) else Origin.inference
    return out


def batch_bank(tokens: Tensor) -> Tensor:
    """(B, d, C) unlabeled tokens -> one shared (d, B*C) bank, image-major."""
    if tokens.ndim == 2:
        return tokens
    B, d, C = tokens.shape
    return T.reshape(T.permute(tokens, (1, 0, 2)), (d, B * C))


def allspark_forward(
    labeled: Union[FeatureMap, Tensor],
    unlabeled: Optional[Union[FeatureMap, Tensor]],
    memory,
    params: AttentionParams,
    mode: str = "train",
    residual: bool = False,
) -> tuple[FeatureMap, Optional[FeatureMap]]:
    """Run the bottleneck.

    train: the labeled feature is rebuilt from the memory bank (or, during
    warm-up, from the in-batch unlabeled tokens); the unlabeled feature is
    refined by self-attention. infer: a single feature through self-attention,
    memory untouched.
    """
    lab = labeled if isinstance(labeled, FeatureMap) else FeatureMap(labeled, Origin.labeled)
    if mode == "infer":
        if unlabeled is not None:
            raise ContractError("infer mode takes a single feature")
        out = channel_self_attention(lab, params)
        if residual:
            out.tokens = T.add(out.tokens, lab.tokens)
        return FeatureMap(out.tokens, Origin.inference), None
    if mode != "train":
        raise ContractError(f"unknown mode {mode!r}")
    if unlabeled is None:
        raise ContractError("train mode needs both labeled and unlabeled features")
    unl = unlabeled if isinstance(unlabeled, FeatureMap) else FeatureMap(unlabeled, Origin.unlabeled)

    in_batch = batch_bank(unl.tokens)
    bank = in_batch if memory is None else memory.flatten_bank(fallback=in_batch)
    h_l = channel_cross_attention(lab, bank, params).tokens
    h_u = channel_self_attention(unl, params).tokens
    if residual:
        h_l = T.add(h_l, lab.tokens)
        h_u = T.add(h_u, unl.tokens)
    return FeatureMap(h_l, Origin.labeled), FeatureMap(h_u, Origin.unlabeled)
