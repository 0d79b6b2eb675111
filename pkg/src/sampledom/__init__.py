"""Sample-dominance weighting for training on inconsistent samples.

Pipeline: a per-channel stacked autoencoder compresses each trial, a two-stage
Gaussian KDE turns the encodings into per-trial dominance scores, and a
curriculum ramps those scores to 1 while a classifier trains on a
dominance-weighted cross-entropy.
"""

from sampledom.numerics import AdamWState, ShapeError, adamw_step, gaussian_noise, make_rng, matmul
from sampledom.data import Dataset, SynthSpec, Trial, crop, generate, load, load_csv, save
from sampledom.kde import KdeConfig, density_at_points, gaussian_kernel, kde_density, silverman_bandwidth
from sampledom.sae import SaeModel, encode, reconstruct, train_sae
from sampledom.dominance import (
    CurriculumSchedule,
    DominanceRecord,
    channel_wise_representative,
    clamp_scores,
    curriculum_weight,
    estimate_all,
    sample_wise_scores,
)
from sampledom.trainer import (
    ClassifierModel,
    EvalReport,
    TrainConfig,
    evaluate,
    load_classifier,
    predict,
    save_classifier,
    train_classifier,
    weighted_ce_loss,
)

__version__ = "0.1.0"
