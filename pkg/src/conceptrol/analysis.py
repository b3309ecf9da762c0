"""Attention-map localization analysis: AUC against oracle masks, block scans, transfer test."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .attention import ConditionSet
from .control import ConceptrolConfig, mask_from_binary
from .numerics import mean_over
from .toy import (
    CONCEPT_CHANNEL,
    CONCEPTROL,
    TEXT_ONLY,
    GenerationTrace,
    LatentGrid,
    NoiseSchedule,
    ToyDenoiser,
    generate,
)

log = logging.getLogger(__name__)

PLANTED = "planted"
SEGMENTED = "segmented"


class DegenerateOracleError(ValueError):
    """The oracle mask has no positive or no negative position."""


@dataclass(frozen=True)
class OracleMask:
    values: np.ndarray
    source: str = PLANTED

    def __post_init__(self):
        v = np.asarray(self.values).reshape(-1).astype(bool)
        if v.all() or not v.any():
            raise DegenerateOracleError(
                f"oracle mask needs positive and negative positions ({int(v.sum())}/{v.size} positive)"
            )
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


class NormalizedMap(NamedTuple):
    values: np.ndarray
    degenerate: bool


def normalize_map(values) -> NormalizedMap:
    """Affine rescale to [0, 1]; a constant map becomes all zeros and is flagged."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return NormalizedMap(np.zeros_like(v), True)
    return NormalizedMap((v - lo) / (hi - lo), False)


def auc(scores, oracle: OracleMask) -> float:
    """Mann-Whitney AUC with midranks: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size != len(oracle):
        raise ValueError(f"score length {s.size} != oracle length {len(oracle)}")
    labels = oracle.values
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def concept_map(text_maps, span) -> np.ndarray:
    """Head- and concept-token-averaged attention of each latent position."""
    start, end = span
    return mean_over(np.asarray(text_maps)[:, :, start:end], (0, 2))


def segment(x: LatentGrid, channel: int = CONCEPT_CHANNEL, threshold: float = 0.5) -> np.ndarray:
    """Threshold one output channel into a boolean region."""
    return x.data[:, channel] > threshold


@dataclass
class BlockScanReport:
    """AUC of each block's concept map at each timestep, with the derived ranking.

    ``auc_table[l, k]`` belongs to block ``l`` at the ``k``-th recorded step,
    whose diffusion timestep is ``timesteps[k]``.
    """

    auc_table: np.ndarray
    timesteps: list[int]
    degenerate: np.ndarray = field(repr=False, default=None)

    @property
    def mean_auc(self) -> np.ndarray:
        return self.auc_table.mean(axis=1)

    @property
    def best_per_timestep(self) -> np.ndarray:
        return self.auc_table.argmax(axis=0)

    @property
    def best_block(self) -> int:
        return int(np.argmax(self.mean_auc))

    def ranking(self) -> list[int]:
        """Blocks ordered by mean AUC, best first; ties keep block order."""
        return sorted(range(self.auc_table.shape[0]), key=lambda l: (-self.mean_auc[l], l))

    def rank_of(self, block: int) -> int:
        return self.ranking().index(block) + 1

    def rows(self):
        for l in range(self.auc_table.shape[0]):
            for k, t in enumerate(self.timesteps):
                yield l, t, float(self.auc_table[l, k])


def scan_blocks(trace: GenerationTrace, span, oracle: OracleMask) -> BlockScanReport:
    if not trace.text_maps:
        raise ValueError("trace holds no attention maps")
    blocks = trace.num_blocks
    steps = len(trace.text_maps)
    table = np.empty((blocks, steps))
    flags = np.zeros((blocks, steps), dtype=bool)
    for k, per_block in enumerate(trace.text_maps):
        if len(per_block) != blocks:
            raise ValueError(f"step {k} records {len(per_block)} blocks, expected {blocks}")
        for l, maps in enumerate(per_block):
            norm = normalize_map(concept_map(maps, span))
            table[l, k] = auc(norm.values, oracle)
            flags[l, k] = norm.degenerate
    return BlockScanReport(table, list(trace.timesteps), flags)


def image_condition_auc(trace: GenerationTrace, oracle: OracleMask) -> float:
    """Best AUC of any image-condition map over blocks, timesteps and score columns.

    The trace must come from a run whose image branch was computed but not
    injected (conditioning scale 0).
    """
    if not trace.image_scores:
        raise ValueError("trace holds no image-condition maps")
    if not trace.image_scale_zero:
        raise ValueError("image-condition analysis needs a run with conditioning scale 0")
    best = 0.0
    seen: set[int] = set()
    for per_block in trace.image_scores:
        for scores in per_block:
            if id(scores) in seen:
                continue
            seen.add(id(scores))
            for col in np.asarray(scores).T:
                best = max(best, auc(normalize_map(col).values, oracle))
    return best


def image_influence(x, reference) -> np.ndarray:
    """Per-position mean absolute change that the image condition caused."""
    a = x.data if isinstance(x, LatentGrid) else np.asarray(x)
    b = reference.data if isinstance(reference, LatentGrid) else np.asarray(reference)
    return np.abs(a - b).mean(axis=1)


def leakage_outside(influence, region) -> float:
    region = np.asarray(region, dtype=bool)
    return float(np.asarray(influence)[~region].mean())


def in_region_share(influence, region) -> float:
    influence = np.asarray(influence)
    total = influence.sum()
    if total == 0:
        return 0.0
    return float(influence[np.asarray(region, dtype=bool)].sum() / total)


@dataclass
class TransferResult:
    auc: float | None
    text_only: LatentGrid
    fused: LatentGrid | None
    concept_region: np.ndarray
    fused_region: np.ndarray | None
    degenerate: bool = False
    reason: str = ""


def transfer_experiment(
    cond: ConditionSet,
    cfg: ConceptrolConfig,
    d: ToyDenoiser,
    schedule: NoiseSchedule,
    seed: int,
) -> TransferResult:
    """Segment a text-only result, inject the image only inside that segment, segment again.

    The returned AUC scores the second segmentation against the first one.
    """
    x_text, _ = generate(cond, cfg, d, schedule, seed, variant=TEXT_ONLY)
    concept_region = segment(x_text)
    try:
        oracle = OracleMask(concept_region, SEGMENTED)
    except DegenerateOracleError as exc:
        log.warning("seed %s: text-only segmentation is degenerate: %s", seed, exc)
        return TransferResult(None, x_text, None, concept_region, None, True, str(exc))
    fixed = mask_from_binary(concept_region, d.mode)
    x_fused, _ = generate(cond, cfg, d, schedule, seed, variant=CONCEPTROL, fixed_mask=fixed)
    fused_region = segment(x_fused)
    if not fused_region.any():
        msg = "fused segmentation is empty"
        log.warning("seed %s: %s", seed, msg)
        return TransferResult(None, x_text, x_fused, concept_region, fused_region, True, msg)
    score = auc(fused_region.astype(np.float64), oracle)
    return TransferResult(score, x_text, x_fused, concept_region, fused_region)
