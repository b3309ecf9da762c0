"""Concept-masked image conditioning on a toy attention diffusion engine."""

from .analysis import (
    OracleMask,
    auc,
    image_condition_auc,
    normalize_map,
    scan_blocks,
    transfer_experiment,
)
from .attention import (
    AttentionBlockWeights,
    AttentionOutput,
    ConditionSet,
    build_bias_vanilla,
    cross_attention,
    direct_adding,
    mm_attention,
)
from .control import (
    ConceptMask,
    ConceptrolConfig,
    MaskCache,
    build_bias_conceptrol,
    conceptrol_direct_adding,
    conceptrol_mm_attention,
    extract_mask_direct,
    extract_mask_mm,
    warmup_gate,
)
from .numerics import Prng, floored_log, matmul, mean_over, softmax_rows
from .toy import (
    EngineConfig,
    NoiseSchedule,
    build_instance,
    build_toy_denoiser,
    ddpm_step,
    denoiser_forward,
    generate,
    make_schedule,
    render_rgb,
)

__version__ = "0.1.0"
