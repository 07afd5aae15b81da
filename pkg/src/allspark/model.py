"""Desk-scale segmentation network: patch encoder -> AllSpark -> per-token decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, FeatureMap, Origin, allspark_forward, channel_self_attention
from .errors import ConfigError, ShapeError
from .memory import ProbabilityToken, SemanticMemory, csg_update
from .tensor import Tensor


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 4
    channels: int = 32
    depth: int = 2
    num_classes: int = 4
    heads: int = 1
    expansion: int = 1
    residual: bool = True
    allspark: bool = True
    similarity_norm: bool = False
    capacity_mult: float = 1.0
    warmup_threshold: int = 0  # 0 means "C channels"
    max_bank_width: int = 0  # 0 disables subsampling
    model_seed: int = 0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2 (class 0 is background)")
        if (self.expansion * self.channels) % self.heads:
            raise ConfigError("heads must divide expansion * channels")
        if self.capacity_mult <= 0:
            raise ConfigError("capacity_mult must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def capacity(self) -> int:
        return max(1, int(round(self.capacity_mult * self.channels)))


@dataclass
class Prediction:
    """probs/logits are (..., H*W, K) tensors; `prob_map` views them as (..., K, H, W)."""

    probs: Tensor
    logits: Tensor
    height: int
    width: int

    @property
    def prob_map(self) -> np.ndarray:
        p = self.probs.data
        return np.moveaxis(p, -1, -2).reshape(*p.shape[:-2], p.shape[-1], self.height, self.width)

    @property
    def logit_map(self) -> np.ndarray:
        z = self.logits.data
        return np.moveaxis(z, -1, -2).reshape(*z.shape[:-2], z.shape[-1], self.height, self.width)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D linear interpolation weights, align_corners=False.

    src = (dst + 0.5) * n_in / n_out - 0.5, clamped at 0; the two neighbours
    floor(src) and min(floor(src) + 1, n_in - 1) get weights 1 - frac and frac.
    """
    R = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        R[o, i0] += 1 - frac
        R[o, i1] += frac
    return R


@lru_cache(maxsize=32)
def upsample_matrix(height: int, width: int, gh: int, gw: int) -> np.ndarray:
    """(H*W, gh*gw) operator mapping a row-major token grid to row-major pixels."""
    return np.kron(bilinear_matrix(height, gh), bilinear_matrix(width, gw))


@lru_cache(maxsize=32)
def pool_matrix(height: int, width: int, gh: int, gw: int) -> np.ndarray:
    """(gh*gw, H*W) average pooling over equal blocks."""
    if height % gh or width % gw:
        raise ConfigError(f"{height}x{width} does not pool evenly to {gh}x{gw}")
    by, bx = height // gh, width // gw
    P = np.zeros((gh * gw, height * width))
    for y in range(height):
        for x in range(width):
            P[(y // by) * gw + x // bx, y * width + x] = 1.0 / (by * bx)
    return P


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, d, 3*patch*patch), tokens in row-major grid order."""
    B, ch, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, ch, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, ch * patch * patch)


def probability_token(pred: Prediction, d: int) -> ProbabilityToken | list[ProbabilityToken]:
    """Average-pool the probability map to the sqrt(d) x sqrt(d) patch grid."""
    g = math.isqrt(d)
    if g * g != d:
        raise ConfigError(f"token count {d} is not a perfect square")
    P = pool_matrix(pred.height, pred.width, g, g)
    pooled = P @ pred.probs.data
    if pooled.ndim == 2:
        return ProbabilityToken(pooled)
    return [ProbabilityToken(p) for p in pooled]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class SegModel:
    """Parameters live in `self.params` (name -> Tensor); names starting with
    "encoder." form the backbone group, the rest the head group."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.model_seed)
        P = 3 * c.patch * c.patch
        C, K = c.channels, c.num_classes
        params = {
            "encoder.embed.w": _uniform(rng, P, (P, C)),
            "encoder.embed.b": Tensor(np.zeros(C), requires_grad=True),
        }
        for i in range(c.depth):
            params[f"encoder.block{i}.w"] = _uniform(rng, C, (C, C))
            params[f"encoder.block{i}.b"] = Tensor(np.zeros(C), requires_grad=True)
            params[f"encoder.block{i}.mix"] = _uniform(rng, C, (C, C))
        Cp = c.expansion * C
        bound_attn = 1.0 / math.sqrt(C)
        for name, shape in (("w_q", (C, Cp)), ("w_k", (C, Cp)), ("w_v", (C, Cp)), ("w_out", (Cp, C))):
            params[f"allspark.{name}"] = Tensor(rng.uniform(-bound_attn, bound_attn, size=shape), requires_grad=True)
        params["decoder.w"] = _uniform(rng, C, (C, K))
        params["decoder.b"] = Tensor(np.zeros(K), requires_grad=True)
        self.params: dict[str, Tensor] = params

    # -- parameter plumbing

    def attention_params(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["allspark.w_q"], p["allspark.w_k"], p["allspark.w_v"], p["allspark.w_out"], self.config.heads)

    def groups(self) -> dict[str, list[Tensor]]:
        out = {"backbone": [], "head": []}
        for name, t in self.params.items():
            out["backbone" if name.startswith("encoder.") else "head"].append(t)
        return out

    def new_memory(self, seed: int = 0) -> SemanticMemory:
        c = self.config
        return SemanticMemory(
            c.num_classes,
            c.capacity,
            c.tokens,
            warmup_threshold=c.warmup_threshold or c.channels,
            max_bank_width=c.max_bank_width or None,
            seed=seed,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise ShapeError(f"checkpoint is missing parameter {k}")
            if state[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model {v.shape}")
            v.data = np.asarray(state[k], dtype=T.get_dtype()).copy()

    def cast(self) -> None:
        """Re-cast parameters to the current global precision."""
        for v in self.params.values():
            v.data = v.data.astype(T.get_dtype())

    # -- forward pieces

    def encode(self, images) -> FeatureMap:
        """(B, 3, H, W) or (3, H, W) images -> (B, d, C) or (d, C) tokens."""
        c = self.config
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (3, c.height, c.width):
            raise ShapeError(f"expected images of shape (3, {c.height}, {c.width}), got {x.shape}")
        p = self.params
        h = T.add(T.matmul(Tensor(patchify(x, c.patch)), p["encoder.embed.w"]), p["encoder.embed.b"])
        for i in range(c.depth):
            a = T.tanh(T.add(T.matmul(h, p[f"encoder.block{i}.w"]), p[f"encoder.block{i}.b"]))
            h = T.add(T.add(h, a), T.matmul(T.mean_tokens(a), p[f"encoder.block{i}.mix"]))
        if single:
            h = T.reshape(h, h.shape[1:])
        return FeatureMap(h)

    def decode(self, feat) -> Prediction:
        c = self.config
        tokens = feat.tokens if isinstance(feat, FeatureMap) else feat
        z = T.add(T.matmul(tokens, self.params["decoder.w"]), self.params["decoder.b"])
        U = Tensor(upsample_matrix(c.height, c.width, *c.grid))
        logits = T.matmul(U, z)
        return Prediction(T.softmax_rows(logits), logits, c.height, c.width)

    # -- full passes

    def forward_train(self, labeled, unlabeled, memory: Optional[SemanticMemory], update_memory: bool = True):
        """Returns (pred_l, pred_u, ptokens_u); with update_memory, also runs
        the grouping + enqueue on the detached unlabeled features."""
        c = self.config
        f_l = self.encode(labeled)
        f_u = self.encode(unlabeled)
        f_l.origin, f_u.origin = Origin.labeled, Origin.unlabeled
        if c.allspark:
            h_l, h_u = allspark_forward(f_l, f_u, memory, self.attention_params(), "train", c.residual)
        else:
            h_l, h_u = f_l, f_u
        pred_l = self.decode(h_l)
        pred_u = self.decode(h_u)
        ptok = probability_token(pred_u, c.tokens)
        if c.allspark and memory is not None and update_memory:
            feats = f_u.tokens.data
            toks = ptok if isinstance(ptok, list) else [ptok]
            csg_update(memory, feats.reshape(-1, *feats.shape[-2:]), np.stack([t.values for t in toks]), c.similarity_norm)
        return pred_l, pred_u, ptok

    def forward_supervised(self, labeled) -> Prediction:
        """Plain encoder -> decoder on labeled data only (AllSpark off)."""
        return self.decode(self.encode(labeled))

    def forward_infer(self, images) -> Prediction:
        c = self.config
        f = self.encode(images)
        if c.allspark:
            h = channel_self_attention(f, self.attention_params()).tokens
            if c.residual:
                h = T.add(h, f.tokens)
        else:
            h = f.tokens
        return self.decode(h)
