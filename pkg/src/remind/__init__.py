"""Desk-scale lab for multimodal learning under long-tailed modality missingness.

Soft mixture-of-experts fusion with group-residual routing and uncertainty
gating, a learnable missing-modality embedding bank, group-DRO training, and
NTK-based gradient-consistency analysis, on a small self-contained
reverse-mode autodiff engine.
"""

from .autodiff import (AdamW, GradientDescent, Parameter, ShapeError, Tape,
                       backward, finite_diff_check)
from .drotrain import (GroupWeights, TrainConfig, TrainHistory, dro_step,
                       focal_loss, group_losses, train, update_lambda)
from .evalharness import (GroupMetrics, SpecializationMatrix, compute_metrics,
                          evaluate, extreme_missingness, specialization,
                          unseen_mc_protocol)
from .gradanalysis import (ConsistencyRecord, JacobianBlock, consistency,
                           dominant_direction, ntk, per_example_grads,
                           top_eigvec, track)
from .moefusion import (PHASE_GATED, PHASE_SHARED, FusionBlock, FusionOutput,
                        RemindModel, RouterConfig, RoutingMatrices,
                        UncertaintyReport, apply_experts, combine_weights,
                        dispatch_weights, fused_forward, gate,
                        load_checkpoint, normalize_for_routing, routing_logits,
                        save_checkpoint, uncertainty_metrics)
from .synthdata import (ConceptShift, DatasetSpec, EmbeddingBank, ModalityMask,
                        Sample, SyntheticDataset, apply_missing,
                        enumerate_groups, group_probability, load_dataset,
                        renormalized_probabilities, sample_dataset,
                        save_dataset)

__version__ = "0.1.0"
