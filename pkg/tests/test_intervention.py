"""Masking, posteriors, expansion, adjusted prototypes and loss identities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsed.data import EventInstance, EventSpan
from fsed.episodes import Episode
from fsed.intervene import (
    CandidateMode,
    CandidateTrigger,
    InterventionConfig,
    InterventionError,
    MaskedContext,
    Side,
    TriggerPosterior,
    adjusted_prototypes,
    build_support_expansion,
    dedupe_candidates,
    expand_instances,
    mask_trigger,
    pooled_posterior,
    query_side_adjust,
    trigger_posterior,
)
from fsed.losses import (
    Link,
    gradients,
    loss_and_gradients,
    reference_interventional_loss,
    reference_token_terms,
    surrogate_episode_loss,
)
from fsed.model import (
    PARAM_NAMES,
    SimilarityKind,
    Vocab,
    encode,
    init_params,
    prototypes,
)
from fsed.predictor import count_candidate_fn, fit_counts


def instance(idx, tokens, span, etype="A"):
    return EventInstance(f"i{idx}", tuple(tokens), (EventSpan(etype, *span),))


def cand(surface, logit=0.0, original=False):
    surface = (surface,) if isinstance(surface, str) else tuple(surface)
    return CandidateTrigger(surface, logit, original)


@pytest.fixture
def small_world():
    support = [
        instance(0, ("u0", "u1", "fire", "u2", "u3", "u4"), (2, 3)),
        instance(1, ("v0", "v1", "bomb", "v2", "v3", "v4", "v5"), (2, 3)),
    ]
    queries = [
        instance(2, ("u0", "v1", "fire", "u2", "v3"), (2, 3)),
        EventInstance("i3", ("w0", "w1", "w2", "w3", "w4", "w5"), ()),
    ]
    episode = Episode("A", tuple(support), tuple(queries))
    tokens = [t for inst in support + queries for t in inst.tokens]
    vocab = Vocab.build(tokens + ["blast", "strike", "raid"])
    params = init_params(vocab, np.random.default_rng(7), d_emb=6, d_rep=6, d_hid=8)
    predictor = fit_counts(
        [inst.tokens for inst in support]
        + [("u1", "blast", "u2"), ("u1", "strike", "u2"), ("v1", "raid", "v2")]
    )
    return params, episode, count_candidate_fn(predictor)


class TestMaskTrigger:
    def test_single_token_span(self):
        inst = instance(0, ("they", "were", "killed", "by", "hostile", "fire"), (5, 6))
        ctx = mask_trigger(inst, "A")
        assert ctx.tokens == ("they", "were", "killed", "by", "hostile", "[MASK]")
        assert ctx.mask_index == 5
        assert ctx.original_trigger == ("fire",)

    def test_multi_token_span(self):
        inst = instance(0, ("a", "open", "fire", "b"), (1, 3))
        ctx = mask_trigger(inst, "A")
        assert ctx.tokens == ("a", "[MASK]", "b")
        assert ctx.mask_index == 1
        assert ctx.original_trigger == ("open", "fire")

    def test_no_trigger_errors(self):
        inst = EventInstance("x", ("a", "b"), ())
        with pytest.raises(InterventionError, match="0 trigger spans"):
            mask_trigger(inst, "A")

    def test_multiple_triggers_error(self):
        inst = EventInstance(
            "x", ("a", "b", "c", "d"),
            (EventSpan("A", 0, 1), EventSpan("A", 2, 3)),
        )
        with pytest.raises(InterventionError, match="2 trigger spans"):
            mask_trigger(inst, "A")


class TestTriggerPosterior:
    def test_lambda_one_point_mass(self):
        post = trigger_posterior(cand("fire", original=True), [cand("x"), cand("y")], 1.0)
        assert post.weights[0] == 1.0
        assert sum(post.weights) == pytest.approx(1.0, abs=1e-12)

    def test_equal_logits_split(self):
        post = trigger_posterior(
            cand("fire", original=True), [cand("x", 0.0), cand("y", 0.0)], 0.5
        )
        assert post.weights == pytest.approx((0.5, 0.25, 0.25), abs=1e-12)

    def test_hand_softmax_weights(self):
        post = trigger_posterior(
            cand("fire", original=True),
            [cand("x", math.log(3)), cand("y", 0.0)],
            0.5,
        )
        assert post.weights == pytest.approx((0.5, 0.375, 0.125), abs=1e-12)

    def test_empty_predicted_is_point_mass(self):
        post = trigger_posterior(cand("fire", original=True), [], 0.5)
        assert post.weights == (1.0,)

    def test_duplicate_surfaces_rejected(self):
        with pytest.raises(InterventionError, match="duplicate"):
            trigger_posterior(
                cand("fire", original=True), [cand("x"), cand("x")], 0.5
            )

    def test_lambda_out_of_range(self):
        with pytest.raises(InterventionError, match="lambda"):
            trigger_posterior(cand("fire", original=True), [], 0.0)

    @given(st.floats(-20, 20))
    @settings(max_examples=30)
    def test_logit_shift_invariance(self, shift):
        base = trigger_posterior(
            cand("fire", original=True),
            [cand("x", 1.0), cand("y", -0.5), cand("z", 0.2)],
            0.5,
        )
        shifted = trigger_posterior(
            cand("fire", original=True),
            [cand("x", 1.0 + shift), cand("y", -0.5 + shift), cand("z", 0.2 + shift)],
            0.5,
        )
        assert base.weights == pytest.approx(shifted.weights, abs=1e-12)


class TestExpansion:
    def ctx(self, idx=0):
        return MaskedContext(("a", "[MASK]", "b"), 1, ("fire",), f"s{idx}")

    def test_single_instance_lambda_one(self):
        post = trigger_posterior(cand("fire", original=True), [cand("x")], 1.0)
        out = expand_instances([self.ctx()], [post])
        assert len(out) == 1
        assert out[0].tokens == ("a", "fire", "b")
        assert out[0].weight == 1.0

    def test_symmetric_four_way(self):
        posts = [
            trigger_posterior(cand("fire", original=True), [cand("x", 0.0)], 0.5),
            trigger_posterior(cand("bomb", original=True), [cand("y", 0.0)], 0.5),
        ]
        out = expand_instances([self.ctx(0), self.ctx(1)], posts)
        assert len(out) == 4
        assert [w.weight for w in out] == pytest.approx([0.25] * 4)

    def test_hand_weights(self):
        posts = [
            trigger_posterior(cand("fire", original=True), [], 0.5),
            trigger_posterior(cand("bomb", original=True), [cand("y", 0.0)], 0.5),
        ]
        out = expand_instances([self.ctx(0), self.ctx(1)], posts)
        assert [w.weight for w in out] == pytest.approx([0.5, 0.25, 0.25])

    def test_multi_token_original_substitution(self):
        ctx = MaskedContext(("a", "[MASK]", "b"), 1, ("open", "fire"), "s")
        post = trigger_posterior(cand(("open", "fire"), original=True), [cand("x", 0.0)], 0.5)
        out = expand_instances([ctx], [post])
        assert out[0].tokens == ("a", "open", "fire", "b")
        assert out[0].span == (1, 3)
        assert out[1].tokens == ("a", "x", "b")
        assert out[1].span == (1, 2)

    def test_count_mismatch(self):
        post = trigger_posterior(cand("fire", original=True), [], 0.5)
        with pytest.raises(InterventionError, match="per context"):
            expand_instances([self.ctx(0), self.ctx(1)], [post])

    def test_pooled_mode(self):
        contexts = [self.ctx(0), self.ctx(1)]
        pooled = pooled_posterior(
            contexts, [[cand("x", 1.0)], [cand("y", 0.0)]], 0.5
        )
        out = expand_instances(contexts, [pooled], CandidateMode.POOLED)
        # every context times every candidate (original restored per context)
        assert len(out) == 6
        assert sum(w.weight for w in out) == pytest.approx(1.0, abs=1e-12)

    @given(
        st.integers(1, 4),
        st.integers(0, 5),
        st.floats(0.05, 1.0),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_normalization_property(self, k, n_cands, lam, seed):
        rng = np.random.default_rng(seed)
        contexts = [
            MaskedContext(("a", "[MASK]", "b"), 1, (f"orig{i}",), f"s{i}")
            for i in range(k)
        ]
        posts = [
            trigger_posterior(
                cand(f"orig{i}", original=True),
                [cand(f"c{j}", float(rng.normal())) for j in range(n_cands)],
                lam,
            )
            for i in range(k)
        ]
        for mode in CandidateMode:
            if mode == CandidateMode.POOLED:
                pooled = pooled_posterior(
                    contexts,
                    [[cand(f"c{j}", float(rng.normal())) for j in range(n_cands)]] * k,
                    lam,
                )
                out = expand_instances(contexts, [pooled], mode)
            else:
                out = expand_instances(contexts, posts, mode)
            assert sum(w.weight for w in out) == pytest.approx(1.0, abs=1e-12)


class TestDedupe:
    def test_drops_original_and_repeats(self):
        out = dedupe_candidates(
            [cand("fire", 1.0), cand("x", 0.5), cand("X", 0.2), cand("y", 0.1)],
            ("fire",),
        )
        assert [c.surface for c in out] == [("x",), ("y",)]


class TestAdjustedPrototypes:
    def test_lambda_one_equals_plain_prototypes(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=1.0, top_n=5, side=Side.SUPPORT)
        expansion = build_support_expansion(
            episode.support, episode.event_type, config, candidate_fn
        )
        adjusted = adjusted_prototypes(params, expansion)
        seqs = episode.support_sequences()
        plain = prototypes(
            [encode(params, s) for s in seqs], [s.labels for s in seqs]
        )
        np.testing.assert_allclose(adjusted.p1, plain.p1, atol=1e-12)
        np.testing.assert_allclose(adjusted.p0, plain.p0, atol=1e-12)

    def test_two_equal_weights_average(self, small_world):
        params, episode, _ = small_world
        ctxs = [mask_trigger(inst, "A") for inst in episode.support]
        posts = [
            trigger_posterior(cand(tuple(c.original_trigger), original=True), [], 1.0)
            for c in ctxs
        ]
        expansion = expand_instances(ctxs, posts)
        proto = adjusted_prototypes(params, expansion)
        reps = [encode(params, w.tokens) for w in expansion]
        triggers = [r[w.span[0] : w.span[1]] for r, w in zip(reps, expansion)]
        num = sum(w.weight * t.sum(axis=0) for w, t in zip(expansion, triggers))
        den = sum(w.weight * t.shape[0] for w, t in zip(expansion, triggers))
        np.testing.assert_allclose(proto.p1, num / den, atol=1e-12)

    def test_convex_combination_oracle(self, small_world):
        params, _, _ = small_world
        ctx = MaskedContext(("u0", "u1", "[MASK]", "u2", "u3"), 2, ("fire",), "s")
        post = trigger_posterior(
            cand("fire", original=True),
            [cand("blast", math.log(3)), cand("strike", 0.0)],
            0.5,
        )
        expansion = expand_instances([ctx], [post])
        proto = adjusted_prototypes(params, expansion)
        # independent weighted-sum oracle over encoded instances
        num1 = np.zeros(params.d_rep)
        den1 = 0.0
        for inst in expansion:
            reps = encode(params, inst.tokens)
            num1 += inst.weight * reps[inst.span[0] : inst.span[1]].sum(axis=0)
            den1 += inst.weight * (inst.span[1] - inst.span[0])
        np.testing.assert_allclose(proto.p1, num1 / den1, atol=1e-12)

    def test_weight_sum_violation(self, small_world):
        params, _, _ = small_world
        from fsed.intervene import WeightedInstance

        bad = [WeightedInstance(("a", "b", "c"), (1, 2), 0.4, "s")]
        with pytest.raises(InterventionError, match="sum"):
            adjusted_prototypes(params, bad)

    def test_all_trigger_instance_rejected(self, small_world):
        params, _, _ = small_world
        from fsed.intervene import WeightedInstance

        bad = [WeightedInstance(("a", "b"), (0, 2), 1.0, "s")]
        with pytest.raises(InterventionError, match="no non-trigger"):
            adjusted_prototypes(params, bad)


class TestQuerySideAdjust:
    def test_lambda_one_identity(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=1.0, top_n=5, side=Side.QUERY)
        query = episode.labeled_queries()[0]
        for position in range(len(query.tokens)):
            adjusted = query_side_adjust(params, query, position, candidate_fn, config)
            # single-row vs batched matmul may differ in the last ulp
            np.testing.assert_allclose(
                adjusted, encode(params, query)[position], atol=1e-12
            )

    def test_out_of_window_substitutions_leave_other_positions(self, small_world):
        # auxiliary check of encoder locality: replacing position p only
        # changes representations within the window
        params, episode, _ = small_world
        query = episode.labeled_queries()[0]
        tokens = list(query.tokens)
        base = encode(params, tokens)
        tokens[0] = "blast"
        shifted = encode(params, tokens)
        np.testing.assert_array_equal(base[4], shifted[4])

    def test_weighted_sum_oracle(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=0.5, top_n=3, side=Side.QUERY)
        query = episode.labeled_queries()[0]
        position = 2
        adjusted = query_side_adjust(params, query, position, candidate_fn, config)
        from fsed.intervene import query_position_mix
        from fsed.model import encode_windows

        rows, weights = query_position_mix(
            params, query.tokens, position, candidate_fn, config
        )
        expected = np.zeros(params.d_rep)
        for row, weight in zip(rows, weights):
            expected += weight * encode_windows(params, row[None, :])[0]
        np.testing.assert_allclose(adjusted, expected, atol=1e-12)

    def test_requires_query_side(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=0.5, top_n=3, side=Side.SUPPORT)
        with pytest.raises(InterventionError, match="side"):
            query_side_adjust(params, episode.labeled_queries()[0], 0, candidate_fn, config)

    def test_position_out_of_range(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=0.5, top_n=3, side=Side.QUERY)
        with pytest.raises(InterventionError, match="position"):
            query_side_adjust(params, episode.labeled_queries()[0], 99, candidate_fn, config)


class TestSurrogateLoss:
    def test_side_none_equals_base_bit_for_bit(self, small_world):
        params, episode, candidate_fn = small_world
        from fsed.model import episode_loss

        seqs = episode.support_sequences()
        proto = prototypes([encode(params, s) for s in seqs], [s.labels for s in seqs])
        base = episode_loss(params, proto, episode.labeled_queries(), SimilarityKind.PROTO)
        surrogate = surrogate_episode_loss(params, episode, None, SimilarityKind.PROTO)
        assert surrogate == base

    @pytest.mark.parametrize("kind", list(SimilarityKind))
    @pytest.mark.parametrize("side", list(Side))
    def test_lambda_one_degeneracy(self, small_world, kind, side):
        params, episode, candidate_fn = small_world
        base = surrogate_episode_loss(params, episode, None, kind)
        config = InterventionConfig(lam=1.0, top_n=5, side=side)
        causal = surrogate_episode_loss(params, episode, config, kind, candidate_fn)
        assert causal == pytest.approx(base, abs=1e-12)

    def test_seeded_support_intervention_deterministic(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=0.5, top_n=5, side=Side.SUPPORT)
        a = surrogate_episode_loss(params, episode, config, SimilarityKind.PROTO, candidate_fn)
        b = surrogate_episode_loss(params, episode, config, SimilarityKind.PROTO, candidate_fn)
        assert a == b
        assert np.isfinite(a) and a > 0


class TestGradients:
    def test_unused_embedding_rows_zero(self, small_world):
        params, episode, _ = small_world
        grads = gradients(params, episode, SimilarityKind.PROTO)
        unused = params.vocab.id("raid")
        np.testing.assert_array_equal(grads["embedding"][unused], 0.0)

    def test_relation_layer2_bias_chain_rule(self, small_world):
        # both class scores share the bias, so its gradient is exactly zero
        params, episode, _ = small_world
        grads = gradients(params, episode, SimilarityKind.RELATION)
        np.testing.assert_allclose(grads["rel_b2"], 0.0, atol=1e-15)

    @pytest.mark.parametrize("kind", list(SimilarityKind))
    @pytest.mark.parametrize("side", [None, Side.SUPPORT, Side.QUERY, Side.BOTH])
    def test_finite_difference_check(self, small_world, kind, side):
        params, episode, candidate_fn = small_world
        config = None if side is None else InterventionConfig(lam=0.5, top_n=3, side=side)
        loss, grads = loss_and_gradients(params, episode, kind, config, candidate_fn)
        assert np.isfinite(loss)

        def loss_fn(p):
            return surrogate_episode_loss(p, episode, config, kind, candidate_fn)

        worst = 0.0
        for name in PARAM_NAMES:
            arr = params.tensors()[name]
            flat = arr.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                h = 1e-5 * (1.0 + abs(flat[i]))
                up, dn = flat.copy(), flat.copy()
                up[i] += h
                dn[i] -= h
                numeric[i] = (
                    loss_fn(params.with_tensors({name: up.reshape(arr.shape)}))
                    - loss_fn(params.with_tensors({name: dn.reshape(arr.shape)}))
                ) / (2 * h)
            analytic = grads[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
        assert worst < 1e-4

    def test_loss_decreases_after_one_step(self, small_world):
        from fsed.model import AdamState, update_step

        params, episode, _ = small_world
        loss0, grads = loss_and_gradients(params, episode, SimilarityKind.PROTO)
        new_params, _ = update_step(params, grads, AdamState.init(params), lr=1e-2)
        loss1 = surrogate_episode_loss(new_params, episode, None, SimilarityKind.PROTO)
        assert loss1 < loss0


def one_dim_params(vocab, emb_values):
    """d_rep=1, window=1 encoder with handpicked embeddings."""
    params = init_params(
        vocab, np.random.default_rng(0), d_emb=1, d_rep=1, d_hid=2, window=1
    )
    emb = np.zeros((len(vocab), 1))
    for token, value in emb_values.items():
        emb[vocab.id(token), 0] = value
    return params.with_tensors(
        {"embedding": emb, "enc_w": np.ones((3 * 1, 1)) * 0.4, "enc_b": np.zeros(1)}
    )


class TestReferenceLoss:
    def test_lambda_one_single_support(self, small_world):
        params, episode, candidate_fn = small_world
        single = Episode("A", episode.support[:1], episode.queries)
        config = InterventionConfig(lam=1.0, top_n=4, side=Side.SUPPORT)
        loss = reference_interventional_loss(
            params, single, config, SimilarityKind.PROTO, candidate_fn=candidate_fn
        )
        # point-mass posterior: reduces to -sum_q phi(s0, q)^2
        reps = encode(params, single.support[0].tokens)
        trigger_rep = reps[2:3].mean(axis=0)
        expected = 0.0
        for seq in single.labeled_queries():
            for q in encode(params, seq):
                expected -= float(np.linalg.norm(trigger_rep - q)) ** 2
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_one_dim_same_side_identity(self):
        # all instance representations >= query representation: the squared
        # link equals the surrogate quantity per token
        vocab = Vocab.build(["big1", "big2", "small", "pad1"])
        params = one_dim_params(
            vocab, {"big1": 2.0, "big2": 1.5, "small": -2.0, "pad1": 0.0}
        )
        support = [
            instance(0, ("pad1", "pad1", "big1", "pad1", "pad1"), (2, 3)),
            instance(1, ("pad1", "pad1", "big2", "pad1", "pad1"), (2, 3)),
        ]
        queries = [EventInstance("q", ("small", "small"), ())]
        episode = Episode("A", tuple(support), tuple(queries))

        def candidate_fn(ctx, top_n):
            return [cand("big2" if ctx.original_trigger == ("big1",) else "big1", 0.0)]

        config = InterventionConfig(lam=0.5, top_n=1, side=Side.SUPPORT)
        terms = reference_token_terms(
            params, episode, config, SimilarityKind.PROTO,
            link=Link.SQUARE, candidate_fn=candidate_fn,
        )
        from fsed.intervene import build_support_expansion

        expansion = build_support_expansion(support, "A", config, candidate_fn)
        weights = np.array([w.weight for w in expansion])
        reps = np.array(
            [encode(params, w.tokens)[w.span[0], 0] for w in expansion]
        )
        q_reps = encode(params, queries[0].tokens)[:, 0]
        expected = [(weights @ reps - q) ** 2 for q in q_reps]
        np.testing.assert_allclose(terms, expected, atol=1e-12)

    def test_convexity_bound(self, small_world):
        params, episode, candidate_fn = small_world
        config = InterventionConfig(lam=0.5, top_n=3, side=Side.SUPPORT)
        from fsed.intervene import build_support_expansion
        from fsed.model import encode

        expansion = build_support_expansion(
            episode.support, episode.event_type, config, candidate_fn
        )
        terms = reference_token_terms(
            params, episode, config, SimilarityKind.RELATION,
            link=Link.IDENTITY, candidate_fn=candidate_fn,
        )
        from fsed.model import similarity

        trigger_reps = []
        for w in expansion:
            reps = encode(params, w.tokens)
            trigger_reps.append(reps[w.span[0] : w.span[1]].mean(axis=0))
        idx = 0
        for seq in episode.labeled_queries():
            for q in encode(params, seq):
                phis = [
                    similarity(SimilarityKind.RELATION, params, r, q)
                    for r in trigger_reps
                ]
                assert min(phis) - 1e-9 <= terms[idx] <= max(phis) + 1e-9
                idx += 1

    def test_enumeration_bound(self, small_world):
        params, episode, _ = small_world

        def many(ctx, top_n):
            return [cand(f"c{i}", -float(i)) for i in range(top_n)]

        config = InterventionConfig(lam=0.5, top_n=40, side=Side.SUPPORT)
        with pytest.raises(InterventionError, match="enumeration bound"):
            reference_interventional_loss(
                params, episode, config, SimilarityKind.PROTO, candidate_fn=many
            )


class TestVectorIdentities:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_exact_vector_identity(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        r = rng.normal(size=(n, d))
        q = rng.normal(size=d)
        w = rng.uniform(0.1, 1.0, size=n)
        w = w / w.sum()
        lhs = np.linalg.norm(w @ r - q) ** 2
        rhs = np.linalg.norm((r - q) .T @ w) ** 2
        assert lhs == pytest.approx(rhs, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_one_dim_same_side_equality(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        q = float(rng.normal())
        r = q + rng.uniform(0.01, 2.0, size=n)  # all on the same side
        w = rng.uniform(0.1, 1.0, size=n)
        w = w / w.sum()
        assert (w @ r - q) ** 2 == pytest.approx((w @ np.abs(r - q)) ** 2, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_relation_elementwise_identity_same_sign(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        q = rng.normal(size=d)
        signs = rng.choice([-1.0, 1.0], size=d)
        r = q + signs * rng.uniform(0.01, 2.0, size=(n, d))
        w = rng.uniform(0.1, 1.0, size=n)
        w = w / w.sum()
        lhs = np.abs(w @ r - q)
        rhs = w @ np.abs(r - q)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
