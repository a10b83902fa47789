"""Episodic training with early stopping on dev micro-F1."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EventInstance
from .episodes import Episode, EpisodeSamplingError, _pick
from .evaluate import Detector, episode_protocol, mean_micro_f1
from .intervene import CandidateFn, InterventionConfig
from .losses import loss_and_gradients
from .model import (
    AdamState,
    ModelParams,
    SimilarityKind,
    Vocab,
    distributional_embeddings,
    init_params,
    init_params_structured,
    update_step,
)
from .predictor import count_candidate_fn, fit_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    k_shot: int = 5
    n_pos: int = 2
    n_neg: int = 10
    dev_pos: int = 10
    dev_neg: int = 100
    dev_ambiguous: int = 0
    dev_repeats: int = 2
    batches_per_epoch: int = 40
    max_epochs: int = 80
    patience: int = 15
    lr: float = 1e-2
    weight_decay: float = 0.0
    kind: SimilarityKind = SimilarityKind.PROTO
    d_emb: int = 32
    d_rep: int = 32
    d_hid: int = 64
    window: int = 2
    smoothing_k: float = 1.0
    # "uniform" is the plain dense init; "slots" starts the encoder in the
    # per-slot block basin, which episodic training needs on synthetic corpora
    encoder_init: str = "uniform"
    center_frac: float = 0.5
    init_scale: float = 3.0
    # distributional (co-occurrence SVD) embedding init over the raw corpus
    pretrained_embeddings: bool = False


@dataclass
class _TypePools:
    """Per-type positive/negative instance lists, computed once per split."""

    positives: dict[str, list[EventInstance]]
    negatives: dict[str, list[EventInstance]]

    @classmethod
    def build(cls, pool: Sequence[EventInstance]) -> "_TypePools":
        types = sorted({ev.type for inst in pool for ev in inst.events})
        positives = {t: [i for i in pool if i.has_event(t)] for t in types}
        negatives = {t: [i for i in pool if not i.has_event(t)] for t in types}
        return cls(positives, negatives)

    def sample(
        self, event_type: str, k: int, n_pos: int, n_neg: int, rng: np.random.Generator
    ) -> Episode:
        positives = self.positives[event_type]
        negatives = self.negatives[event_type]
        if len(positives) < k + n_pos or len(negatives) < n_neg:
            raise EpisodeSamplingError(
                f"event type {event_type!r} cannot supply a {k}-shot episode "
                f"with {n_pos}+{n_neg} queries"
            )
        chosen = _pick(positives, k + n_pos, rng)
        neg = _pick(negatives, n_neg, rng)
        return Episode(event_type, tuple(chosen[:k]), tuple(chosen[k:] + neg))


def train_loop(
    train_pool: Sequence[EventInstance],
    dev_pool: Sequence[EventInstance],
    config: TrainConfig,
    intervention: InterventionConfig | None,
    seed: int,
    candidate_fn: CandidateFn | None = None,
    vocab_pool: Sequence[EventInstance] | None = None,
) -> tuple[ModelParams, dict]:
    """One optimizer step per sampled episode; keeps the best dev-micro-F1
    snapshot and stops after `patience` epochs without improvement.

    The embedding table is built over `vocab_pool` (default: train plus dev)
    so unseen-type tokens keep distinct, untrained embedding rows instead of
    collapsing to [UNK]; no labels from those splits are touched. Fully
    deterministic given (inputs, seed): episode sampling draws from one seeded
    generator and each epoch's dev evaluation derives its own.
    """
    if not train_pool or not dev_pool:
        raise ValueError("train and dev splits must be non-empty")
    rng = np.random.default_rng(seed)
    if vocab_pool is None:
        vocab_pool = list(train_pool) + list(dev_pool)
    vocab = Vocab.build(t for inst in vocab_pool for t in inst.tokens)
    if config.encoder_init == "slots":
        params = init_params_structured(
            vocab, rng, d_emb=config.d_emb, d_rep=config.d_rep,
            d_hid=config.d_hid, window=config.window,
            center_frac=config.center_frac, scale=config.init_scale,
        )
    else:
        params = init_params(
            vocab, rng, d_emb=config.d_emb, d_rep=config.d_rep,
            d_hid=config.d_hid, window=config.window,
        )
    if config.pretrained_embeddings:
        table = distributional_embeddings(
            vocab, [inst.tokens for inst in vocab_pool], config.d_emb,
            window=config.window,
        )
        params = params.with_tensors({"embedding": table})
    needs_candidates = intervention is not None and (
        intervention.adjusts_support or intervention.adjusts_query
    )
    if needs_candidates and candidate_fn is None:
        predictor = fit_counts([inst.tokens for inst in train_pool], k=config.smoothing_k)
        candidate_fn = count_candidate_fn(predictor)

    pools = _TypePools.build(train_pool)
    trainable_types = [
        t for t, pos in pools.positives.items()
        if len(pos) >= config.k_shot + config.n_pos
        and len(pools.negatives[t]) >= config.n_neg
    ]
    if not trainable_types:
        raise EpisodeSamplingError("no event type has enough instances to train on")
    skipped = sorted(set(pools.positives) - set(trainable_types))
    if skipped:
        log.info("skipping %d undersized event types: %s", len(skipped), skipped)

    state = AdamState.init(params)
    best_params = params
    best_micro = -1.0
    best_epoch = 0
    history: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(config.batches_per_epoch):
            etype = trainable_types[int(rng.integers(len(trainable_types)))]
            episode = pools.sample(
                etype, config.k_shot, config.n_pos, config.n_neg, rng
            )
            loss, grads = loss_and_gradients(
                params, episode, config.kind, intervention, candidate_fn
            )
            params, state = update_step(
                params, grads, state, config.lr, config.weight_decay
            )
            losses.append(loss)

        detector = Detector(params, config.kind, intervention, candidate_fn)
        # fixed dev episodes across epochs: snapshot selection should track the
        # model, not the sampling noise
        dev_rng = np.random.default_rng([seed, 7919])
        dev_reports = episode_protocol(
            detector, dev_pool, config.k_shot, config.dev_pos, config.dev_neg,
            n_ambiguous=config.dev_ambiguous, repeats=config.dev_repeats,
            rng=dev_rng, seed=seed,
        )
        dev_micro = mean_micro_f1(dev_reports)
        if dev_micro > best_micro:
            best_micro = dev_micro
            best_params = params
            best_epoch = epoch
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "dev_micro_f1": dev_micro,
                "best_so_far": best_micro,
            }
        )
        if epoch - best_epoch >= config.patience:
            break

    summary = {
        "seed": seed,
        "best_epoch": best_epoch,
        "best_dev_micro_f1": best_micro,
        "stopped_epoch": history[-1]["epoch"] if history else 0,
        "epochs": history,
    }
    return best_params, summary
