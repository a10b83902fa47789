"""The seeded baseline-versus-intervention comparison on synthetic data.

One function drives the whole protocol: build a corpus whose homograph
partners share a mid-rank trigger (the K-shot overfit trap), train the plain
and intervened systems per seed, then score the same sampled test episodes
with and without the ambiguity augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticConfig, generate_synthetic, split_by_types
from .evaluate import Detector, mean_micro_f1, paired_ambiguity_protocol
from .intervene import InterventionConfig, Side
from .predictor import count_candidate_fn, fit_counts
from .train import TrainConfig, train_loop

TREND_CORPUS = SyntheticConfig(
    n_types=20,
    instances_per_type=500,
    frame_pool=30,
    frames_per_type=3,
    topic_pool=48,
    topics_per_type=8,
    min_len=12,
    max_len=20,
    ambiguity_rate=1.0,
    decoy_rate=0.1,
)

TREND_TRAINING = TrainConfig(
    n_pos=6,
    dev_pos=20,
    dev_neg=60,
    dev_ambiguous=10,
    batches_per_epoch=40,
    max_epochs=40,
    patience=40,
    lr=1e-3,
    d_emb=16,
    d_rep=96,
    d_hid=64,
    encoder_init="slots",
    pretrained_embeddings=True,
)

TREND_INTERVENTION = InterventionConfig(lam=0.5, top_n=1, side=Side.SUPPORT)


@dataclass
class SeedOutcome:
    seed: int
    base_clean: float
    base_ambiguous: float
    causal_clean: float
    causal_ambiguous: float

    @property
    def ambiguous_gap(self) -> float:
        return self.causal_ambiguous - self.base_ambiguous

    @property
    def base_drop(self) -> float:
        return self.base_clean - self.base_ambiguous

    @property
    def causal_drop(self) -> float:
        return self.causal_clean - self.causal_ambiguous


@dataclass
class TrendResult:
    outcomes: list[SeedOutcome] = field(default_factory=list)

    @property
    def mean_ambiguous_gap(self) -> float:
        return float(np.mean([o.ambiguous_gap for o in self.outcomes]))

    @property
    def smaller_drop_count(self) -> int:
        return sum(o.causal_drop < o.base_drop for o in self.outcomes)

    def rows(self) -> list[dict]:
        return [
            {
                "seed": o.seed,
                "base_clean": o.base_clean,
                "base_ambiguous": o.base_ambiguous,
                "causal_clean": o.causal_clean,
                "causal_ambiguous": o.causal_ambiguous,
                "ambiguous_gap": o.ambiguous_gap,
                "base_drop": o.base_drop,
                "causal_drop": o.causal_drop,
            }
            for o in self.outcomes
        ]


def run_trend_experiment(
    seeds=(1, 2, 3, 4, 5),
    corpus_config: SyntheticConfig = TREND_CORPUS,
    train_config: TrainConfig = TREND_TRAINING,
    intervention: InterventionConfig = TREND_INTERVENTION,
    corpus_seed: int = 0,
    eval_pos: int = 10,
    eval_neg: int = 5,
    eval_ambiguous: int = 30,
    eval_repeats: int = 6,
) -> TrendResult:
    """Train FS-Base and FS-Causal per seed and compare them on paired clean
    and ambiguity-augmented test episodes."""
    corpus = generate_synthetic(corpus_config, seed=corpus_seed)
    train_split, dev_split, test_split = split_by_types(corpus, (0.6, 0.2, 0.2), seed=corpus_seed)
    train_predictor = fit_counts([inst.tokens for inst in train_split], k=1.0)
    test_predictor = fit_counts([inst.tokens for inst in test_split], k=1.0)
    train_fn = count_candidate_fn(train_predictor)
    test_fn = count_candidate_fn(test_predictor)

    result = TrendResult()
    for seed in seeds:
        scores = {}
        for label, config in (("base", None), ("causal", intervention)):
            params, _ = train_loop(
                train_split, dev_split, train_config, config, seed=seed,
                candidate_fn=train_fn, vocab_pool=corpus,
            )
            detector = Detector(params, train_config.kind, config, test_fn)
            clean, ambiguous = paired_ambiguity_protocol(
                detector, test_split, train_config.k_shot,
                eval_pos, eval_neg, eval_ambiguous,
                repeats=eval_repeats, rng=np.random.default_rng(99), seed=seed,
            )
            scores[label] = (mean_micro_f1(clean), mean_micro_f1(ambiguous))
        result.outcomes.append(
            SeedOutcome(
                seed=seed,
                base_clean=scores["base"][0],
                base_ambiguous=scores["base"][1],
                causal_clean=scores["causal"][0],
                causal_ambiguous=scores["causal"][1],
            )
        )
    return result
