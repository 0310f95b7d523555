"""certseg: per-pixel certified segmentation for arbitrary pixel-wise
classifiers under L2-bounded perturbations, with an optional diffusion-style
denoising front end.

Noise levels are expressed in the canonical [0, 1] intensity domain
throughout; see the README for what that implies when comparing sigma values
across conventions.
"""

from .core import (
    CertifiedSegmentation,
    CertifyConfig,
    Image,
    LabelMap,
    derive_stream_seed,
    validate_image,
)
from .certifier import (
    binomial_pvalue,
    certify_image,
    collect_samples,
    holm_correct,
    select_candidates,
)
from .metrics import (
    MetricsReport,
    abstain_fraction,
    aggregate,
    certified_dice,
    certified_iou,
)
from .schedule import (
    NoiseSchedule,
    default_schedule,
    denoise,
    linear_schedule,
    sigma_at,
    timestep_for_sigma,
)
from .smoothing import (
    NoiseSample,
    add_noise,
    certified_radius,
    sample_noise,
    std_normal_quantile,
)

__version__ = "0.1.0"

__all__ = [
    "CertifiedSegmentation",
    "CertifyConfig",
    "Image",
    "LabelMap",
    "MetricsReport",
    "NoiseSample",
    "NoiseSchedule",
    "abstain_fraction",
    "add_noise",
    "aggregate",
    "binomial_pvalue",
    "certified_dice",
    "certified_iou",
    "certified_radius",
    "certify_image",
    "collect_samples",
    "default_schedule",
    "denoise",
    "derive_stream_seed",
    "holm_correct",
    "linear_schedule",
    "sample_noise",
    "select_candidates",
    "sigma_at",
    "std_normal_quantile",
    "timestep_for_sigma",
    "validate_image",
]
