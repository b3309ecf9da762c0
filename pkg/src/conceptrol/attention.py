"""Baseline adapter attention: cross-attention with Direct Adding, and fused MM-attention.

Token matrices are row-major (one token per row). Projections are stored
per head as ``(C, d)`` arrays, so a head's queries are ``x @ w_q[h]``.
The fused token order for MM-attention is always ``[text, latent, image]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, floored_log, softmax_rows


def _frozen(a):
    if a is None:
        return None
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ConditionSet:
    """Text tokens, image-condition tokens and the concept span ``[start, end)``."""

    text_tokens: np.ndarray
    image_tokens: np.ndarray
    concept_span: tuple[int, int]

    def __post_init__(self):
        text = as_matrix(self.text_tokens, "text_tokens")
        image = as_matrix(self.image_tokens, "image_tokens")
        if text.shape[1] != image.shape[1]:
            raise ValueError(
                f"text and image tokens must share width, got {text.shape[1]} and {image.shape[1]}"
            )
        start, end = (int(v) for v in self.concept_span)
        if not 0 <= start < end <= text.shape[0]:
            raise ValueError(f"concept span {self.concept_span} invalid for {text.shape[0]} text tokens")
        object.__setattr__(self, "text_tokens", _frozen(text))
        object.__setattr__(self, "image_tokens", _frozen(image))
        object.__setattr__(self, "concept_span", (start, end))

    @property
    def num_text(self) -> int:
        return self.text_tokens.shape[0]

    @property
    def num_concept(self) -> int:
        return self.concept_span[1] - self.concept_span[0]

    @property
    def concept_tokens(self) -> np.ndarray:
        start, end = self.concept_span
        return self.text_tokens[start:end]


@dataclass(frozen=True)
class AttentionBlockWeights:
    """Per-head projections of one attention block.

    ``query_offset`` holds fixed positional features of shape ``(heads, positions, d)``
    that are added to the queries of the latent positions (the latent rows of the
    fused sequence in MM mode). ``None`` means no positional term.
    """

    block_id: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    query_offset: np.ndarray | None = None

    def __post_init__(self):
        w_q, w_k, w_v = (np.asarray(w, dtype=np.float64) for w in (self.w_q, self.w_k, self.w_v))
        if w_q.ndim != 3 or w_q.shape != w_k.shape:
            raise ValueError(f"w_q {w_q.shape} and w_k {w_k.shape} must be equal (heads, C, d)")
        if w_v.ndim != 3 or w_v.shape[:2] != w_q.shape[:2]:
            raise ValueError(f"w_v shape {w_v.shape} inconsistent with w_q {w_q.shape}")
        heads, width, _ = w_q.shape
        if w_v.shape[2] * heads != width:
            raise ValueError(f"value head dim {w_v.shape[2]} x {heads} heads != model dim {width}")
        object.__setattr__(self, "w_q", _frozen(w_q))
        object.__setattr__(self, "w_k", _frozen(w_k))
        object.__setattr__(self, "w_v", _frozen(w_v))
        if self.query_offset is not None:
            off = np.asarray(self.query_offset, dtype=np.float64)
            if off.ndim != 3 or off.shape[0] != heads or off.shape[2] != w_q.shape[2]:
                raise ValueError(f"query_offset shape {off.shape} must be (heads, positions, d)")
            object.__setattr__(self, "query_offset", _frozen(off))

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]


@dataclass(frozen=True)
class AttentionOutput:
    """Attention values plus the materialized post-softmax maps.

    ``maps`` is ``(heads, rows, keys)``: the text-branch map for cross-attention,
    the full fused map for MM-attention. Direct Adding also keeps the image
    branch map and its unscaled values.
    """

    values: np.ndarray
    maps: np.ndarray
    image_maps: np.ndarray | None = None
    image_values: np.ndarray | None = None

    def __post_init__(self):
        for name in ("values", "maps", "image_maps", "image_values"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


def _check_width(w: AttentionBlockWeights, *mats):
    for m in mats:
        if m.shape[1] != w.model_dim:
            raise ValueError(f"token width {m.shape[1]} != block model dim {w.model_dim}")


def _queries(x, w, head, offset_rows=None):
    q = x @ w.w_q[head]
    if w.query_offset is not None:
        off = w.query_offset[head]
        lo, hi = offset_rows if offset_rows is not None else (0, x.shape[0])
        if off.shape[0] != hi - lo:
            raise ValueError(f"query_offset has {off.shape[0]} positions, expected {hi - lo}")
        q[lo:hi] += off
    return q


def cross_attention(x, c, w: AttentionBlockWeights) -> AttentionOutput:
    """Multi-head cross-attention of latent positions ``x`` to condition tokens ``c``."""
    x = as_matrix(x, "x")
    c = as_matrix(c, "c")
    _check_width(w, x, c)
    scale = math.sqrt(w.head_dim)
    maps, values = [], []
    for h in range(w.heads):
        logits = (_queries(x, w, h) @ (c @ w.w_k[h]).T) / scale
        a = softmax_rows(logits)
        maps.append(a)
        values.append(a @ (c @ w.w_v[h]))
    return AttentionOutput(values=np.concatenate(values, axis=1), maps=np.stack(maps))


def direct_adding(x, c_text, c_image, w: AttentionBlockWeights, lam: float) -> AttentionOutput:
    """Text cross-attention plus ``lam`` times a parallel image cross-attention."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    text = cross_attention(x, c_text, w)
    image = cross_attention(x, c_image, w)
    values = text.values if lam == 0 else text.values + lam * image.values
    return AttentionOutput(
        values=values, maps=text.maps, image_maps=image.maps, image_values=image.values
    )


def build_bias_vanilla(lam: float, num_text: int, num_latent: int) -> np.ndarray:
    """Scale bias: ``log(lam)`` on the latent->image and image->latent blocks, zero elsewhere."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    m, n = num_text, num_latent
    bias = np.zeros((m + 2 * n, m + 2 * n))
    log_lam = floored_log(lam)
    bias[m : m + n, m + n :] = log_lam
    bias[m + n :, m : m + n] = log_lam
    return bias


def fuse_tokens(x, c_text, c_image) -> np.ndarray:
    return np.concatenate([c_text, x, c_image], axis=0)


def mm_attention(x, c_text, c_image, w: AttentionBlockWeights, bias=None) -> AttentionOutput:
    """Fused self-attention over ``[c_text; x; c_image]`` with an additive pre-softmax bias.

    ``bias=None`` runs plain self-attention. Output rows follow the fused order.
    """
    x = as_matrix(x, "x")
    c_text = as_matrix(c_text, "c_text")
    c_image = as_matrix(c_image, "c_image")
    _check_width(w, x, c_text, c_image)
    m, n = c_text.shape[0], x.shape[0]
    if c_image.shape[0] != n:
        raise ValueError(
            f"MM mode needs as many image tokens as latent tokens ({c_image.shape[0]} != {n})"
        )
    size = m + 2 * n
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (size, size):
            raise ValueError(f"bias shape {bias.shape} != ({size}, {size})")
    fused = fuse_tokens(x, c_text, c_image)
    scale = math.sqrt(w.head_dim)
    maps, values = [], []
    for h in range(w.heads):
        logits = (_queries(fused, w, h, offset_rows=(m, m + n)) @ (fused @ w.w_k[h]).T) / scale
        if bias is not None:
            logits = logits + bias
        a = softmax_rows(logits)
        maps.append(a)
        values.append(a @ (fused @ w.w_v[h]))
    return AttentionOutput(values=np.concatenate(values, axis=1), maps=np.stack(maps))


def latent_to_image_mass(out: AttentionOutput, num_text: int, num_latent: int) -> np.ndarray:
    """Per latent row, head-averaged attention mass placed on the image tokens."""
    m, n = num_text, num_latent
    return out.maps[:, m : m + n, m + n :].sum(axis=-1).mean(axis=0)
