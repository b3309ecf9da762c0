"""A miniature deterministic latent diffusion engine with a planted concept block.

The denoiser never looks at the noisy latent: every block attends from fixed
positional latent tokens to the condition tokens, and the summed block outputs
form a clean target ``f(cond)``. The predicted noise is the one consistent with
that target, ``(x_t - sqrt(abar_t) f) / sqrt(1 - abar_t)``, so DDPM sampling
lands on ``f(cond)`` and every attention effect shows up directly in the output.

Token feature layout (width ``C``): channels ``0 .. C-3`` are generic features,
``C-2`` marks reference appearance (image tokens only) and ``C-1`` marks the
textual concept (concept tokens only, which are exactly that unit vector).
Output layout: channels 0-2 are RGB and channel 3 carries concept presence.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionBlockWeights,
    ConditionSet,
    build_bias_vanilla,
    cross_attention,
    direct_adding,
    latent_to_image_mass,
    mm_attention,
)
from .control import (
    DIRECT,
    MM,
    ConceptMask,
    ConceptrolConfig,
    MaskCache,
    conceptrol_direct_adding,
    conceptrol_mm_attention,
    extract_mask_direct,
    extract_mask_mm,
    restamp,
    warmup_gate,
)
from .numerics import Prng

TEXT_ONLY = "text_only"
VANILLA = "vanilla"
CONCEPTROL = "conceptrol"
VARIANTS = (TEXT_ONLY, VANILLA, CONCEPTROL)

CONCEPT_CHANNEL = 3
CONCEPT_COLOR = (0.5, 0.5, 0.5)
REFERENCE_COLOR = (0.95, 0.8, 0.1)
# keeps the planted block's non-concept logits well below the margin
PLANTED_QUERY_GAIN = 0.25


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step DDPM coefficients; arrays are indexed by ``t - 1`` for ``t = 1..T``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def total_steps(self) -> int:
        return self.beta.size

    @property
    def sigma(self) -> np.ndarray:
        return self.beta

    def at(self, t: int) -> tuple[float, float, float]:
        """``(beta_t, alpha_t, alpha_bar_t)`` for 1-based timestep ``t``."""
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside 1..{self.total_steps}")
        i = t - 1
        return float(self.beta[i]), float(self.alpha[i]), float(self.alpha_bar[i])

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(total_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, total_steps)
    alpha = 1.0 - beta
    alpha_bar = np.empty(total_steps)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc = acc * a
        alpha_bar[i] = acc
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar)


@dataclass(frozen=True)
class LatentGrid:
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != self.height * self.width:
            raise ValueError(f"latent data {data.shape} does not match {self.height}x{self.width}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def channel_map(self, channel: int) -> np.ndarray:
        return self.data[:, channel].reshape(self.height, self.width)


def render_rgb(x: LatentGrid) -> np.ndarray:
    """First three channels clamped to [0, 1] and quantized to 8 bits, round-half-up."""
    if x.channels < 3:
        raise ValueError(f"render needs >= 3 channels, got {x.channels}")
    rgb = np.clip(x.data[:, :3], 0.0, 1.0).reshape(x.height, x.width, 3)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class EngineConfig:
    height: int = 16
    width: int = 16
    channels: int = 8
    text_tokens: int = 12
    concept_span: tuple[int, int] = (4, 6)
    image_tokens: int = 4
    blocks: int = 6
    heads: int = 2
    head_dim: int = 4
    planted_block: int = 4
    delta: float = 8.0
    region: tuple[int, int, int, int] = (4, 4, 8, 8)
    value_gain: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "concept_span", tuple(int(v) for v in self.concept_span))
        object.__setattr__(self, "region", tuple(int(v) for v in self.region))

    @property
    def positions(self) -> int:
        return self.height * self.width

    def region_mask(self) -> np.ndarray:
        top, left, h, w = self.region
        grid = np.zeros((self.height, self.width), dtype=bool)
        grid[top : top + h, left : left + w] = True
        return grid.reshape(-1)


@dataclass(frozen=True)
class ToyDenoiser:
    height: int
    width: int
    blocks: tuple[AttentionBlockWeights, ...]
    latent_tokens: np.ndarray
    planted_block: int
    planted_region: np.ndarray
    delta: float
    mode: str = DIRECT

    @property
    def positions(self) -> int:
        return self.height * self.width

    @property
    def channels(self) -> int:
        return self.latent_tokens.shape[1]


def _check_engine(cfg: EngineConfig):
    c, h = cfg.channels, cfg.heads
    if c < 6:
        raise ValueError(f"engine.channels must be >= 6, got {c}")
    if c % h:
        raise ValueError(f"engine.channels ({c}) must be divisible by engine.heads ({h})")
    if cfg.head_dim < 2:
        raise ValueError(f"engine.head_dim must be >= 2, got {cfg.head_dim}")
    if not 0 <= cfg.planted_block < cfg.blocks:
        raise ValueError(f"engine.planted_block {cfg.planted_block} outside 0..{cfg.blocks - 1}")
    region = cfg.region_mask()
    if region.all() or not region.any():
        raise ValueError(f"engine.region {cfg.region} must cover some but not all positions")
    top, left, rh, rw = cfg.region
    if top < 0 or left < 0 or top + rh > cfg.height or left + rw > cfg.width:
        raise ValueError(f"engine.region {cfg.region} exceeds the {cfg.height}x{cfg.width} grid")


def _planted_weights(cfg: EngineConfig, prng: Prng, block_id: int, region: np.ndarray) -> AttentionBlockWeights:
    c, h, d = cfg.channels, cfg.heads, cfg.head_dim
    dv = c // h
    concept, appearance = c - 1, c - 2
    w_q = np.stack([prng.normal_matrix(c, d) * (PLANTED_QUERY_GAIN / math.sqrt(d)) for _ in range(h)])
    w_k = np.stack([prng.normal_matrix(c, d) / math.sqrt(d) for _ in range(h)])
    w_v = np.stack([prng.normal_matrix(c, dv) * cfg.value_gain for _ in range(h)])
    # head-space axis 0 is the planted direction: only concept tokens have keys along it
    w_q[:, :, 0] = 0.0
    w_k[:, :, 0] = 0.0
    w_k[:, concept, :] = 0.0
    w_k[:, concept, 0] = math.sqrt(d)
    offset = np.zeros((h, region.size, d))
    offset[:, region, 0] = cfg.delta

    w_v[:, concept, :] = 0.0
    w_v[:, appearance, :] = 0.0
    for ch in range(3):
        w_v[ch // dv, concept, ch % dv] = CONCEPT_COLOR[ch]
        w_v[ch // dv, appearance, ch % dv] = REFERENCE_COLOR[ch]
    head, col = divmod(CONCEPT_CHANNEL, dv)
    w_v[head, :, col] = 0.0
    w_v[head, concept, col] = 1.0
    w_v[head, appearance, col] = 1.0
    return AttentionBlockWeights(block_id, w_q, w_k, w_v, query_offset=offset)


def _random_weights(cfg: EngineConfig, prng: Prng, block_id: int) -> AttentionBlockWeights:
    c, h, d = cfg.channels, cfg.heads, cfg.head_dim
    w_q = np.stack([prng.normal_matrix(c, d) / math.sqrt(d) for _ in range(h)])
    w_k = np.stack([prng.normal_matrix(c, d) / math.sqrt(d) for _ in range(h)])
    w_v = np.stack([prng.normal_matrix(c, c // h) * cfg.value_gain for _ in range(h)])
    return AttentionBlockWeights(block_id, w_q, w_k, w_v)


def _generic_tokens(prng: Prng, count: int, channels: int) -> np.ndarray:
    tokens = np.zeros((count, channels))
    tokens[:, : channels - 2] = prng.normal_matrix(count, channels - 2)
    return tokens


def build_toy_denoiser(cfg: EngineConfig, mode: str = DIRECT, seed: int = 0) -> ToyDenoiser:
    """Seeded random blocks plus one planted block whose concept logits are ``delta`` higher inside the region."""
    _check_engine(cfg)
    if mode not in (DIRECT, MM):
        raise ValueError(f"mode must be 'direct' or 'mm', got {mode!r}")
    prng = Prng(derive_seed(seed, "weights"))
    region = cfg.region_mask()
    blocks = tuple(
        _planted_weights(cfg, prng, l, region) if l == cfg.planted_block else _random_weights(cfg, prng, l)
        for l in range(cfg.blocks)
    )
    latent_tokens = _generic_tokens(prng, cfg.positions, cfg.channels)
    latent_tokens.flags.writeable = False
    region.flags.writeable = False
    return ToyDenoiser(
        height=cfg.height,
        width=cfg.width,
        blocks=blocks,
        latent_tokens=latent_tokens,
        planted_block=cfg.planted_block,
        planted_region=region,
        delta=cfg.delta,
        mode=mode,
    )


def make_condition_set(cfg: EngineConfig, mode: str = DIRECT, seed: int = 0) -> ConditionSet:
    """Random text tokens with exact concept tokens in the span, and appearance-marked image tokens."""
    prng = Prng(derive_seed(seed, "conditions"))
    c = cfg.channels
    text = _generic_tokens(prng, cfg.text_tokens, c)
    start, end = cfg.concept_span
    if not 0 <= start < end <= cfg.text_tokens:
        raise ValueError(f"engine.concept_span {cfg.concept_span} invalid for {cfg.text_tokens} tokens")
    text[start:end] = 0.0
    text[start:end, c - 1] = 1.0
    count = cfg.positions if mode == MM else cfg.image_tokens
    image = _generic_tokens(prng, count, c)
    image[:, c - 2] = 1.0
    return ConditionSet(text, image, (start, end))


def build_instance(cfg: EngineConfig, mode: str, seed: int) -> tuple[ToyDenoiser, ConditionSet]:
    return build_toy_denoiser(cfg, mode, seed), make_condition_set(cfg, mode, seed)


@dataclass(frozen=True)
class ForwardRecord:
    """What one denoiser evaluation produced.

    ``text_maps[l]`` is the ``(heads, positions, M)`` attention of latent
    positions to the text tokens at block ``l``; ``image_scores[l]`` is the
    head-averaged image attention, one column per image token in direct mode
    and a single column of total latent->image mass in MM mode.
    """

    target: np.ndarray
    text_maps: tuple[np.ndarray, ...]
    image_scores: tuple[np.ndarray, ...]
    mask: ConceptMask
    injected: bool


@dataclass
class GenerationTrace:
    variant: str
    mode: str
    height: int
    width: int
    concept_span: tuple[int, int]
    concept_block: int
    lam: float
    x_T: np.ndarray | None = None
    timesteps: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)
    injected: list[bool] = field(default_factory=list)
    targets: list[np.ndarray] = field(default_factory=list)
    text_maps: list[tuple[np.ndarray, ...]] = field(default_factory=list)
    image_scores: list[tuple[np.ndarray, ...]] = field(default_factory=list)
    masks: list[ConceptMask] = field(default_factory=list)

    @property
    def num_blocks(self) -> int:
        return len(self.text_maps[0]) if self.text_maps else 0

    @property
    def image_scale_zero(self) -> bool:
        return self.lam == 0 or not any(self.injected)


def _target_pass(cond, cfg, d, variant, inject, prev_mask, fixed_mask, timestep):
    x = d.latent_tokens
    c_text, c_image = cond.text_tokens, cond.image_tokens
    span = cond.concept_span
    m, n = cond.num_text, d.positions
    star = cfg.concept_block
    lam = cfg.lam if inject else 0.0
    masked = variant == CONCEPTROL and inject
    target = np.zeros((n, d.channels))
    text_maps, image_scores = [], []
    current = None

    def pick(block):
        if fixed_mask is not None:
            return fixed_mask
        return prev_mask if block < star else current

    for l, w in enumerate(d.blocks):
        if d.mode == DIRECT:
            if masked:
                if l == star:
                    current = extract_mask_direct(cross_attention(x, c_text, w).maps, span, l, timestep)
                out = conceptrol_direct_adding(x, c_text, c_image, w, lam, pick(l))
            else:
                out = direct_adding(x, c_text, c_image, w, lam)
                if l == star:
                    current = extract_mask_direct(out.maps, span, l, timestep)
            text_maps.append(out.maps)
            image_scores.append(out.image_maps.mean(axis=0))
            target += out.values
        else:
            vanilla_bias = build_bias_vanilla(lam, m, n)
            if masked:
                if l == star:
                    # the mask is read from a plain pass of this block, then applied to it
                    pre = mm_attention(x, c_text, c_image, w, vanilla_bias)
                    current = extract_mask_mm(pre.maps, m, n, span, l, timestep)
                run_cfg = ConceptrolConfig(lam, cfg.warmup_ratio, cfg.suppression_epsilon, star, MM)
                out = conceptrol_mm_attention(x, c_text, c_image, w, run_cfg, pick(l), span)
            else:
                out = mm_attention(x, c_text, c_image, w, vanilla_bias)
                if l == star:
                    current = extract_mask_mm(out.maps, m, n, span, l, timestep)
            text_maps.append(np.ascontiguousarray(out.maps[:, m : m + n, :m]))
            image_scores.append(latent_to_image_mass(out, m, n)[:, None])
            target += out.values[m : m + n]
    for a in (target, *text_maps, *image_scores):
        a.flags.writeable = False
    return ForwardRecord(target, tuple(text_maps), tuple(image_scores), current, inject)


def denoiser_forward(
    x_t,
    t: int,
    cond: ConditionSet,
    cfg: ConceptrolConfig,
    d: ToyDenoiser,
    cache: MaskCache,
    schedule: NoiseSchedule,
    variant: str = CONCEPTROL,
    fixed_mask: ConceptMask | None = None,
    memo: dict | None = None,
) -> tuple[np.ndarray, ForwardRecord]:
    """Noise prediction at timestep ``t`` and the attention record behind it.

    ``memo`` may be shared across the steps of one run: the target depends only
    on the condition, the injection decision and the masks in play, so repeated
    configurations are reused instead of recomputed.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if cfg.mode != d.mode:
        raise ValueError(f"config mode {cfg.mode!r} != denoiser mode {d.mode!r}")
    if not 0 <= cfg.concept_block < len(d.blocks):
        raise ValueError(f"concept_block {cfg.concept_block} outside 0..{len(d.blocks) - 1}")
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (d.positions, d.channels):
        raise ValueError(f"latent shape {x_t.shape} != ({d.positions}, {d.channels})")
    total = schedule.total_steps
    step_index = total - t + 1
    if variant == TEXT_ONLY:
        inject = False
    elif variant == VANILLA:
        inject = True
    else:
        inject = warmup_gate(step_index, total, cfg)

    cache.begin_step()
    prev = cache.previous_timestep if cache.previous_timestep is not None else cache.neutral()
    uses_prev = variant == CONCEPTROL and inject and fixed_mask is None and cfg.concept_block > 0
    key = (variant, inject, prev.values.tobytes() if uses_prev else None)
    record = memo.get(key) if memo is not None else None
    if record is None:
        record = _target_pass(cond, cfg, d, variant, inject, prev, fixed_mask, t)
        if memo is not None:
            memo[key] = record
    mask = restamp(record.mask, t)
    cache.update(mask)
    if mask is not record.mask:
        record = ForwardRecord(record.target, record.text_maps, record.image_scores, mask, inject)

    _, _, alpha_bar = schedule.at(t)
    eps = (x_t - math.sqrt(alpha_bar) * record.target) / math.sqrt(1.0 - alpha_bar)
    return eps, record


def ddpm_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, prng: Prng | None = None) -> np.ndarray:
    """One ancestral step with fixed variance ``beta_t``; the last step (``t == 1``) adds no noise."""
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    beta, alpha, alpha_bar = schedule.at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = (x_t - (beta / math.sqrt(1.0 - alpha_bar)) * np.asarray(eps_hat)) / math.sqrt(alpha)
    if t == 1:
        return mean
    if prng is None:
        raise ValueError("a Prng is required for t > 1")
    z = prng.gaussians(mean.size).reshape(mean.shape)
    return mean + math.sqrt(beta) * z


def generate(
    cond: ConditionSet,
    cfg: ConceptrolConfig,
    d: ToyDenoiser,
    schedule: NoiseSchedule,
    seed: int,
    variant: str = CONCEPTROL,
    fixed_mask: ConceptMask | None = None,
) -> tuple[LatentGrid, GenerationTrace]:
    """Sample ``x_T`` from the seeded stream and run ``T`` denoising steps."""
    if fixed_mask is not None and len(fixed_mask) != d.positions:
        raise ValueError(f"fixed mask length {len(fixed_mask)} != {d.positions} positions")
    prng = Prng(seed)
    x = prng.normal_matrix(d.positions, d.channels)
    cache = MaskCache(d.positions, d.mode)
    memo: dict = {}
    trace = GenerationTrace(
        variant=variant,
        mode=d.mode,
        height=d.height,
        width=d.width,
        concept_span=cond.concept_span,
        concept_block=cfg.concept_block,
        lam=0.0 if variant == TEXT_ONLY else cfg.lam,
        x_T=x,
    )
    for t in range(schedule.total_steps, 0, -1):
        eps, record = denoiser_forward(x, t, cond, cfg, d, cache, schedule, variant, fixed_mask, memo)
        x = ddpm_step(x, t, eps, schedule, prng)
        trace.timesteps.append(t)
        trace.latents.append(x)
        trace.injected.append(record.injected)
        trace.targets.append(record.target)
        trace.text_maps.append(record.text_maps)
        trace.image_scores.append(record.image_scores)
        trace.masks.append(record.mask)
    return LatentGrid(d.height, d.width, x), trace
