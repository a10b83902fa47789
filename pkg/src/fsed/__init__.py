"""Few-shot event detection with causal intervention.

Verifies the backdoor-adjustment derivation mechanically on discrete
structural causal models and implements the intervened-prototype detector end
to end: training, episode sampling, and span-level evaluation.
"""

from .data import (
    EventInstance,
    EventSpan,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_by_types,
    trigger_coverage,
)
from .episodes import Episode, sample_ambiguous_negatives, sample_train_episode
from .evaluate import (
    Detector,
    EvalReport,
    episode_protocol,
    paired_ambiguity_protocol,
    span_f1,
    test_protocol,
)
from .intervene import (
    CandidateMode,
    CandidateTrigger,
    InterventionConfig,
    MaskedContext,
    Side,
    TriggerPosterior,
    WeightedInstance,
    adjusted_prototypes,
    expand_instances,
    mask_trigger,
    query_side_adjust,
    trigger_posterior,
)
from .losses import (
    Link,
    gradients,
    loss_and_gradients,
    reference_interventional_loss,
    surrogate_episode_loss,
)
from .model import (
    ModelParams,
    Prototype,
    SimilarityKind,
    TokenSequence,
    Vocab,
    classify_token,
    decode_spans,
    encode,
    episode_loss,
    init_params,
    prototypes,
    similarity,
    update_step,
)
from .predictor import (
    CountPredictor,
    fit_counts,
    load_external_logits,
    predict_candidates,
)
from .scm import (
    CausalDag,
    DiscreteScm,
    ProofStepReport,
    backdoor_estimate,
    ci_brute_force,
    d_separated,
    fsed_graph,
    interventional_distribution,
    mutilate,
    rule_condition_holds,
    verify_backdoor_proof,
)
from .train import TrainConfig, train_loop

__all__ = [name for name in dir() if not name.startswith("_")]
