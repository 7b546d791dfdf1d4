"""Anchor-based accuracy estimation from classifier logits under distribution shift."""

from .anchors import (
    Anchor,
    AnchorSet,
    Estimator,
    InfluenceKind,
    RectifyRule,
    cosine_distance,
    estimate_accuracy,
    influence_single,
    influence_total,
    inverse_erf,
    load_estimator,
    p_rec,
    p_true,
    rect_threshold,
    save_estimator,
    surface_grid,
)
from .baselines import CalibratedScorer, ac_estimate, atc_estimate, doc_estimate, fit_temperature, im_estimate
from .data import LabeledLogits, LogitMatrix, band_projection_stats, band_width_bound, load_logits, save_logits
from .train import TrainConfig, TrainReport, bce_loss, fit_estimator, gradients, init_anchors, train

__version__ = "0.1.0"
