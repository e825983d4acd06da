"""Per-polyphone head architectures: laws, isolation, training, prediction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyg2p import tensor as T
from polyg2p.checkpoint import param_fingerprint
from polyg2p.corpus import SyntheticSpec, build_inventory, generate_synthetic
from polyg2p.encoder import EncoderConfig, EncoderModel, PretrainConfig, Vocabulary, pretrain
from polyg2p.heads import (ARCHITECTURES, FeatureCache, HeadConfig, HeadError,
                           HeadRegistry, HeadTrainConfig, TrainInstance,
                           evaluate_head, make_predictor, predict, train_head)

from gradcheck import check_op, projection_loss

RNG = np.random.default_rng(99)
D = 8


def make_registry(arch, seed=0, trunk_width=6, **kwargs):
    config = HeadConfig(arch=arch, feature_dim=D, trunk_width=trunk_width,
                        tf_heads=2, **kwargs)
    registry = HeadRegistry(config, seed=seed)
    registry.register("x", ["x1", "x2"])
    registry.register("y", ["y1", "y2", "y3"])
    return registry


class TestForwardLaws:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_probabilities_sum_to_one_with_candidate_width(self, arch):
        registry = make_registry(arch)
        feats = RNG.normal(size=(7, D))
        for char, want in (("x", 2), ("y", 3)):
            probs = registry.probabilities(feats, 3, char)
            assert probs.shape == (want,)
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_fc_depends_only_on_queried_position(self):
        registry = make_registry("fc")
        feats = RNG.normal(size=(7, D))
        zeroed = np.zeros_like(feats)
        zeroed[3] = feats[3]
        np.testing.assert_allclose(registry.probabilities(feats, 3, "x"),
                                   registry.probabilities(zeroed, 3, "x"),
                                   atol=1e-12)

    @pytest.mark.parametrize("arch", ["lstm", "transformer"])
    def test_context_sensitive_heads_react_to_other_positions(self, arch):
        registry = make_registry(arch)
        feats = RNG.normal(size=(7, D))
        base = registry.probabilities(feats, 3, "x")
        perturbed = feats.copy()
        perturbed[6] += 1.5
        assert not np.allclose(base, registry.probabilities(perturbed, 3, "x"))

    def test_blstm_trunk_width_is_twice_hidden(self):
        registry = make_registry("lstm", trunk_width=5)
        assert registry.trunk.out_width == 10

    def test_transformer_uniform_attention_on_constant_input(self):
        registry = make_registry("transformer")
        feats = np.tile(RNG.normal(size=(1, D)), (6, 1))
        weights = registry.first_block_attention(feats)
        assert weights.shape == (2, 6, 6)
        np.testing.assert_allclose(weights, 1.0 / 6.0, atol=1e-12)

    def test_transformer_attention_rows_sum_to_one(self):
        registry = make_registry("transformer")
        weights = registry.first_block_attention(RNG.normal(size=(5, D)))
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_attention_requires_transformer(self):
        with pytest.raises(HeadError):
            make_registry("fc").first_block_attention(RNG.normal(size=(5, D)))

    def test_unregistered_char_and_bad_position(self):
        registry = make_registry("fc")
        feats = RNG.normal(size=(4, D))
        with pytest.raises(HeadError, match="not registered"):
            registry.probabilities(feats, 1, "z")
        with pytest.raises(HeadError, match="position"):
            registry.probabilities(feats, 4, "x")


class TestRegistration:
    def test_registering_leaves_old_predictions_bit_identical(self):
        registry = make_registry("fc")
        feats = RNG.normal(size=(5, D))
        before = registry.probabilities(feats, 2, "x")
        registry.register("z", ["z1", "z2", "z3", "z4"])
        np.testing.assert_array_equal(registry.probabilities(feats, 2, "x"), before)

    def test_duplicate_and_underpopulated_registration(self):
        registry = make_registry("fc")
        with pytest.raises(HeadError, match="already registered"):
            registry.register("x", ["a", "b"])
        with pytest.raises(HeadError, match="at least 2"):
            registry.register("w", ["only"])

    def test_training_new_layer_only_leaves_old_layers_unchanged(self):
        from polyg2p.optim import Adam
        registry = make_registry("fc")
        registry.register("z", ["z1", "z2"])
        for p in registry.trunk.parameters():
            p.freeze()
        old = {name: p.data.copy() for char in ("x", "y")
               for p in registry.out_layers[char] for name in [p.name]}
        new_params = list(registry.out_layers["z"])
        opt = Adam(new_params, lr=1e-2)
        cand = registry.candidates["z"]
        for step in range(20):
            feats = RNG.normal(size=(6, D))
            probs_graph_rows = registry._trunk_rows(
                T.Tensor(feats[None, :, :]), np.array([2]), False, None)
            w, b = registry.out_layers["z"]
            logits = T.matmul(probs_graph_rows, w) + b
            T.softmax_cross_entropy(logits, np.array([step % len(cand)])).backward()
            opt.step()
        for char in ("x", "y"):
            for p in registry.out_layers[char]:
                np.testing.assert_array_equal(p.data, old[p.name])
        assert not np.allclose(registry.out_layers["z"][0].data,
                               registry.out_layers["z"][0].data * 0)


class TestPredictLaws:
    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_prediction_always_in_candidate_set(self, seed):
        rng = np.random.default_rng(seed)
        arch = ARCHITECTURES[seed % 3]
        registry = make_registry(arch, seed=seed % 17)
        feats = rng.normal(size=(int(rng.integers(2, 9)), D)) * 3
        pos = int(rng.integers(feats.shape[0]))
        char = ("x", "y")[seed % 2]
        probs = registry.probabilities(feats, pos, char)
        label = registry.candidates[char][int(np.argmax(probs))]
        assert label in registry.candidates[char]
        assert len(probs) == len(registry.candidates[char])

    def test_argmax_invariant_to_positive_logit_scaling(self):
        registry = make_registry("fc")
        feats = RNG.normal(size=(5, D))
        before = int(np.argmax(registry.probabilities(feats, 2, "y")))
        w, b = registry.out_layers["y"]
        w.data *= 7.0
        b.data *= 7.0
        assert int(np.argmax(registry.probabilities(feats, 2, "y"))) == before


class TestComposedGradients:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_head_parameters_pass_gradient_check(self, arch):
        encoder = EncoderModel(EncoderConfig(vocab_size=12, d_model=D, n_blocks=1,
                                             n_heads=2, ff_width=16, max_len=8,
                                             dropout=0.0), seed=2)
        encoder.freeze()
        feats = encoder.encode(np.array([[2, 5, 6, 7, 3]])).data[0]
        registry = make_registry(arch, trunk_width=4)

        def loss(*_):
            rows = registry._trunk_rows(T.Tensor(feats[None, :, :]),
                                        np.array([2]), False, None)
            w, b = registry.out_layers["y"]
            return T.softmax_cross_entropy(T.matmul(rows, w) + b, np.array([1]))

        touched = list(registry.trunk.parameters()) + list(registry.out_layers["y"])
        check_op(loss, touched, tol=1e-4)


@pytest.fixture(scope="module")
def toy_pipeline():
    """Small pretrained pipeline on an adjacent-marker corpus."""
    spec = SyntheticSpec(samples_per_char=300, marker_window=1)
    corpus = generate_synthetic(spec, seed=19)
    vocab = Vocabulary.from_texts([s.chars for s in corpus.sentences])
    encoder = EncoderModel(EncoderConfig(vocab_size=vocab.size), seed=4)
    pretrain(encoder, vocab, corpus.sentence_pairs(),
             PretrainConfig(epochs=10, lr=2e-3), seed=6)
    encoder.freeze()
    inventory = build_inventory(corpus.sentences, corpus.dictionary, min_count=0)
    instances = [TrainInstance(s.chars, s.targets[0][0],
                               s.chars[s.targets[0][0]], s.targets[0][1])
                 for s in corpus.sentences]
    order = np.random.default_rng(1).permutation(len(instances))
    split = int(0.85 * len(instances))
    train_set = [instances[i] for i in order[:split]]
    dev_set = [instances[i] for i in order[split:]]
    cache = FeatureCache(encoder, vocab)
    cache.warm([i.sentence for i in instances])
    return dict(corpus=corpus, vocab=vocab, encoder=encoder, inventory=inventory,
                train=train_set, dev=dev_set, cache=cache)


class TestTraining:
    def train(self, toy, arch, trunk_width=64, max_epochs=8):
        config = HeadConfig(arch=arch, feature_dim=64, trunk_width=trunk_width,
                            tf_heads=4)
        registry = HeadRegistry.from_inventory(config, toy["inventory"], seed=11)
        history = train_head(registry, toy["encoder"], toy["vocab"], toy["train"],
                             toy["dev"], HeadTrainConfig(max_epochs=max_epochs, patience=3),
                             seed=13, cache=toy["cache"])
        return registry, history

    def test_initial_loss_matches_uniform_expectation(self, toy_pipeline):
        registry, history = self.train(toy_pipeline, "fc", max_epochs=0)
        expect = np.mean([np.log(len(registry.candidates[i.char]))
                          for i in toy_pipeline["train"]])
        assert abs(history[0]["train_loss"] - expect) < 0.05 * expect

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_separable_task_reaches_95_dev_accuracy(self, toy_pipeline, arch):
        fp_before = param_fingerprint(toy_pipeline["encoder"].parameters())
        registry, history = self.train(toy_pipeline, arch)
        best = max(h["dev_acc"] for h in history)
        assert best >= 0.95, f"{arch} best dev accuracy {best}"
        # frozen encoder untouched by training
        assert param_fingerprint(toy_pipeline["encoder"].parameters()) == fp_before

    def test_trained_model_predicts_gold_label(self, toy_pipeline):
        registry, _ = self.train(toy_pipeline, "fc")
        hits = 0
        for inst in toy_pipeline["dev"][:20]:
            label, probs = predict(registry, toy_pipeline["encoder"],
                                   toy_pipeline["vocab"], inst.sentence, inst.position)
            assert label in registry.candidates[inst.char]
            hits += label == inst.label
        assert hits >= 18

    def test_unfrozen_encoder_rejected(self, toy_pipeline):
        encoder = EncoderModel(EncoderConfig(vocab_size=12, d_model=8, n_blocks=1,
                                             n_heads=2, ff_width=16, max_len=8), seed=0)
        registry = make_registry("fc", trunk_width=4)
        with pytest.raises(HeadError, match="frozen"):
            train_head(registry, encoder, Vocabulary(["a"]), [], [],
                       HeadTrainConfig(max_epochs=1))

    def test_unregistered_instance_rejected(self, toy_pipeline):
        registry = make_registry("fc")
        bad = [TrainInstance("ab", 0, "a", "a1")]
        with pytest.raises(HeadError, match="unregistered"):
            train_head(registry, toy_pipeline["encoder"], toy_pipeline["vocab"],
                       bad, [], HeadTrainConfig(max_epochs=1))

    def test_label_outside_candidates_rejected(self, toy_pipeline):
        registry = make_registry("fc")
        bad = [TrainInstance("xb", 0, "x", "nope")]
        with pytest.raises(HeadError, match="outside the candidate set"):
            train_head(registry, toy_pipeline["encoder"], toy_pipeline["vocab"],
                       bad, [], HeadTrainConfig(max_epochs=1))

    def test_make_predictor_routes_through_candidates(self, toy_pipeline):
        registry, _ = self.train(toy_pipeline, "fc")
        predictor = make_predictor(registry, toy_pipeline["encoder"],
                                   toy_pipeline["vocab"], cache=toy_pipeline["cache"])
        inst = toy_pipeline["dev"][0]
        assert predictor(inst.sentence, inst.position, inst.char) in \
            registry.candidates[inst.char]
