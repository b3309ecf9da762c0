"""Textual concept masks and the masked adapter variants built on them.

Direct mode multiplies the image branch output by a max-normalized mask per
latent position. MM mode folds a mean-normalized mask into the pre-softmax
bias, and additionally suppresses attention from out-of-span text tokens to
the image tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionBlockWeights,
    AttentionOutput,
    cross_attention,
    mm_attention,
)
from .numerics import LOG_FLOOR, floored_log, mean_over

MAX_NORMALIZED = "max_normalized"
MEAN_NORMALIZED = "mean_normalized"
DIRECT = "direct"
MM = "mm"
MODES = (DIRECT, MM)


@dataclass(frozen=True)
class ConceptMask:
    values: np.ndarray
    mode: str
    source_block: int | None = None
    source_timestep: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.mode not in (MAX_NORMALIZED, MEAN_NORMALIZED):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if v.size == 0 or not np.all(v > 0):
            raise ValueError("concept mask entries must be strictly positive")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def mask_mode_for(adapter_mode: str) -> str:
    return MAX_NORMALIZED if adapter_mode == DIRECT else MEAN_NORMALIZED


def neutral_mask(size: int, adapter_mode: str) -> ConceptMask:
    """All-ones mask; it is both max- and mean-normalized."""
    return ConceptMask(np.ones(size), mask_mode_for(adapter_mode))


def mask_from_binary(region, adapter_mode: str) -> ConceptMask:
    """Turn a binary region into a concept mask of the adapter's normalization.

    Zeros are lifted to ``exp(LOG_FLOOR)`` so the mask stays strictly positive;
    in MM mode their log-bias then lands exactly on the floor.
    """
    r = np.asarray(region, dtype=np.float64).reshape(-1)
    if not np.any(r > 0):
        raise ValueError("binary region is empty")
    v = np.maximum(r, math.exp(LOG_FLOOR))
    v = v / (v.max() if adapter_mode == DIRECT else v.mean())
    return ConceptMask(v, mask_mode_for(adapter_mode))


@dataclass
class ConceptrolConfig:
    """Settings of one Conceptrol run. ``lam`` is serialized under the key ``lambda``."""

    lam: float = 1.0
    warmup_ratio: float | None = None
    suppression_epsilon: float = 1e-6
    concept_block: int = 4
    mode: str = DIRECT

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.warmup_ratio is None:
            self.warmup_ratio = 0.2 if self.mode == DIRECT else 0.0
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if not 0.0 < self.suppression_epsilon < 1.0:
            raise ValueError(
                f"suppression_epsilon must lie in (0, 1), got {self.suppression_epsilon}"
            )
        if self.concept_block < 0:
            raise ValueError(f"concept_block must be >= 0, got {self.concept_block}")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "warmup_ratio": self.warmup_ratio,
            "suppression_epsilon": self.suppression_epsilon,
            "concept_block": self.concept_block,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptrolConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(**data)


@dataclass
class MaskCache:
    """Concept masks of the current and the previous timestep for one run.

    Until a mask has been extracted, lookups fall back to a neutral mask of
    ``size`` positions.
    """

    size: int
    adapter_mode: str = DIRECT
    latest: ConceptMask | None = None
    previous_timestep: ConceptMask | None = None
    _neutral: ConceptMask | None = field(default=None, repr=False)

    def begin_step(self) -> None:
        self.previous_timestep = self.latest

    def update(self, mask: ConceptMask) -> None:
        self.latest = mask

    def neutral(self) -> ConceptMask:
        if self._neutral is None:
            self._neutral = neutral_mask(self.size, self.adapter_mode)
        return self._neutral


def _check_span(span, num_text: int) -> tuple[int, int]:
    start, end = (int(v) for v in span)
    if end <= start:
        raise ValueError(f"empty concept span {span}")
    if start < 0 or end > num_text:
        raise ValueError(f"concept span {span} out of range for {num_text} text tokens")
    return start, end


def extract_mask_direct(maps, span, block: int | None = None, timestep: int | None = None) -> ConceptMask:
    """Mean over heads and concept tokens of a ``(heads, positions, M)`` map, then divide by max."""
    maps = np.asarray(maps, dtype=np.float64)
    start, end = _check_span(span, maps.shape[-1])
    reduced = mean_over(maps[:, :, start:end], (0, 2))
    return ConceptMask(reduced / reduced.max(), MAX_NORMALIZED, block, timestep)


def extract_mask_mm(
    fused_maps, num_text: int, num_latent: int, span,
    block: int | None = None, timestep: int | None = None,
) -> ConceptMask:
    """Latent rows x concept columns of the fused map, reduced then divided by the mean."""
    fused_maps = np.asarray(fused_maps, dtype=np.float64)
    size = num_text + 2 * num_latent
    if fused_maps.ndim != 3 or fused_maps.shape[1:] != (size, size):
        raise ValueError(f"fused map shape {fused_maps.shape} != (heads, {size}, {size})")
    start, end = _check_span(span, num_text)
    latent = fused_maps[:, num_text : num_text + num_latent, start:end]
    reduced = mean_over(latent, (0, 2))
    return ConceptMask(reduced / reduced.mean(), MEAN_NORMALIZED, block, timestep)


def conceptrol_direct_adding(
    x, c_text, c_image, w: AttentionBlockWeights, lam: float, mask: ConceptMask
) -> AttentionOutput:
    if mask.mode != MAX_NORMALIZED:
        raise ValueError("direct mode needs a max_normalized mask")
    if len(mask) != np.shape(x)[0]:
        raise ValueError(f"mask length {len(mask)} != latent positions {np.shape(x)[0]}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    text = cross_attention(x, c_text, w)
    image = cross_attention(x, c_image, w)
    if lam == 0:
        values = text.values
    else:
        values = text.values + lam * (mask.values[:, None] * image.values)
    return AttentionOutput(values=values, maps=text.maps, image_maps=image.maps, image_values=image.values)


def build_mprime(lam: float, suppression_epsilon: float, span, num_text: int, num_latent: int) -> np.ndarray:
    """Text->image bias: ``log(lam)`` for rows inside the concept span, ``log(eps)`` elsewhere."""
    if not 0.0 < suppression_epsilon < 1.0:
        raise ValueError(f"suppression_epsilon must lie in (0, 1), got {suppression_epsilon}")
    start, end = _check_span(span, num_text)
    out = np.full((num_text, num_latent), floored_log(suppression_epsilon))
    out[start:end] = floored_log(lam)
    return out


def build_bias_conceptrol(lam: float, mask: ConceptMask, mprime, num_text: int, num_latent: int) -> np.ndarray:
    m, n = num_text, num_latent
    if mask.mode != MEAN_NORMALIZED:
        raise ValueError("MM mode needs a mean_normalized mask")
    if len(mask) != n:
        raise ValueError(f"mask length {len(mask)} != latent tokens {n}")
    mprime = np.asarray(mprime, dtype=np.float64)
    if mprime.shape != (m, n):
        raise ValueError(f"M' shape {mprime.shape} != ({m}, {n})")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    bias = np.zeros((m + 2 * n, m + 2 * n))
    bias[:m, m + n :] = mprime
    bias[m : m + n, m + n :] = floored_log(lam * mask.values)[:, None]
    bias[m + n :, m : m + n] = floored_log(lam)
    return bias


def conceptrol_mm_attention(
    x, c_text, c_image, w: AttentionBlockWeights, cfg: ConceptrolConfig, mask: ConceptMask, span
) -> AttentionOutput:
    m, n = np.shape(c_text)[0], np.shape(x)[0]
    mprime = build_mprime(cfg.lam, cfg.suppression_epsilon, span, m, n)
    bias = build_bias_conceptrol(cfg.lam, mask, mprime, m, n)
    return mm_attention(x, c_text, c_image, w, bias)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    # round() absorbs products like 0.1 * 30 = 3.0000000000000004
    return math.ceil(round(warmup_ratio * total_steps, 9))


def warmup_gate(step_index: int, total_steps: int, cfg: ConceptrolConfig) -> bool:
    """True when the image condition may be injected at 1-based ``step_index``."""
    if not 1 <= step_index <= total_steps:
        raise ValueError(f"step index {step_index} outside 1..{total_steps}")
    return step_index > warmup_steps(total_steps, cfg.warmup_ratio)


def mask_for_block(block: int, concept_block: int, cache: MaskCache) -> ConceptMask:
    """Blocks before the concept block see last step's mask; the rest see this step's."""
    mask = cache.previous_timestep if block < concept_block else cache.latest
    return mask if mask is not None else cache.neutral()


def restamp(mask: ConceptMask, timestep: int) -> ConceptMask:
    return replace(mask, source_timestep=timestep)


__all__ = [
    "ConceptMask",
    "ConceptrolConfig",
    "MaskCache",
    "build_bias_conceptrol",
    "build_mprime",
    "conceptrol_direct_adding",
    "conceptrol_mm_attention",
    "extract_mask_direct",
    "extract_mask_mm",
    "mask_for_block",
    "mask_from_binary",
    "neutral_mask",
    "warmup_gate",
]
