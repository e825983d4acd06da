"""Corpus parsing, inventory thresholding, folds, routing, and the generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyg2p import corpus as C
from polyg2p.corpus import (AnnotatedSentence, CorpusError, FoldAssignment,
                            InternalConsistencyError, PolyphoneInventory,
                            PronunciationDictionary, RoutingError,
                            SyntheticSpec, build_inventory, expected_label,
                            g2p_route, generate_synthetic, parse_corpus,
                            parse_dictionary, parse_folds, serialize_corpus,
                            serialize_dictionary, serialize_folds,
                            stratified_kfold)


class TestParseCorpus:
    def test_basic_line(self):
        got = parse_corpus(["AB中C\t2\tzhong1\n"])
        assert len(got) == 1
        assert got[0].chars == "AB中C"
        assert len(got[0].chars) == 4
        assert got[0].targets == [(2, "zhong1")]

    def test_position_out_of_range(self):
        with pytest.raises(CorpusError, match="line 1.*out of range"):
            parse_corpus(["中\t5\tzhong1\n"])

    def test_wrong_field_count(self):
        with pytest.raises(CorpusError, match="line 2.*3 tab-separated"):
            parse_corpus(["# header\n", "only two\tfields\n"])

    def test_empty_sentence(self):
        with pytest.raises(CorpusError, match="empty sentence"):
            parse_corpus(["\t0\tx1\n"])

    def test_comments_and_blank_lines_skipped(self):
        got = parse_corpus(["# comment\n", "\n", "ab\t0\tx1\n"])
        assert len(got) == 1

    def test_round_trip_identity(self):
        spec = SyntheticSpec(samples_per_char=30)
        corpus = generate_synthetic(spec, seed=3).sentences
        text = serialize_corpus(corpus)
        again = parse_corpus(text.splitlines(keepends=True))
        assert [(s.chars, s.targets) for s in again] == \
               [(s.chars, s.targets) for s in corpus]
        assert serialize_corpus(again) == text

    def test_dictionary_round_trip(self):
        d = PronunciationDictionary({"a": ["x1"], "b": ["y1", "y2"]})
        text = serialize_dictionary(d)
        again = parse_dictionary(text.splitlines(keepends=True))
        assert again.entries == d.entries


def two_char_corpus(n_x=3, n_y=1):
    rows = [AnnotatedSentence("xa", [(0, "x1")]) for _ in range(n_x)]
    rows += [AnnotatedSentence("ya", [(0, "y1")]) for _ in range(n_y)]
    return rows


DICT = PronunciationDictionary({"x": ["x1", "x2"], "y": ["y1", "y2"], "a": ["a1"]})


class TestBuildInventory:
    def test_strict_threshold(self):
        inv = build_inventory(two_char_corpus(), DICT, min_count=2)
        assert set(inv.candidates) == {"x"}
        assert inv.sample_counts == {"x": 3}
        assert inv.coverage == pytest.approx(3 / 4)

    def test_no_filtering(self):
        inv = build_inventory(two_char_corpus(), DICT, min_count=0)
        assert set(inv.candidates) == {"x", "y"}
        assert inv.coverage == pytest.approx(1.0)

    def test_threshold_is_strictly_greater(self):
        inv = build_inventory(two_char_corpus(n_x=2, n_y=2), DICT, min_count=2)
        assert set(inv.candidates) == set()

    def test_missing_dictionary_entry(self):
        with pytest.raises(CorpusError, match="missing from dictionary"):
            build_inventory([AnnotatedSentence("z", [(0, "z1")])], DICT, 0)

    def test_label_not_in_dictionary(self):
        with pytest.raises(CorpusError, match="not a dictionary pronunciation"):
            build_inventory([AnnotatedSentence("x", [(0, "bogus")])], DICT, 0)

    def test_monophonic_targets_ignored(self):
        corpus = two_char_corpus() + [AnnotatedSentence("a", [(0, "a1")])]
        inv = build_inventory(corpus, DICT, min_count=0)
        assert "a" not in inv.candidates


class TestStratifiedKFold:
    def corpus_of(self, counts):
        rows = []
        for ch, n in counts.items():
            rows += [AnnotatedSentence(ch + "a", [(0, f"{ch}1")]) for _ in range(n)]
        return rows

    def inventory_of(self, counts):
        return PolyphoneInventory(
            candidates={ch: [f"{ch}1", f"{ch}2"] for ch in counts},
            sample_counts=dict(counts))

    def test_even_split(self):
        counts = {"x": 20}
        folds = stratified_kfold(self.corpus_of(counts), self.inventory_of(counts), 10, seed=1)
        sizes = np.bincount(folds.assignment, minlength=10)
        assert list(sizes) == [2] * 10

    def test_deterministic(self):
        counts = {"x": 25, "y": 15}
        corpus, inv = self.corpus_of(counts), self.inventory_of(counts)
        a = stratified_kfold(corpus, inv, 10, seed=9).assignment
        b = stratified_kfold(corpus, inv, 10, seed=9).assignment
        np.testing.assert_array_equal(a, b)
        c = stratified_kfold(corpus, inv, 10, seed=10).assignment
        assert not np.array_equal(a, c)

    def test_mixed_counts_exhaustive(self):
        # exhaustive per-character count check over the produced assignment
        counts = {"x": 25, "y": 15}
        corpus, inv = self.corpus_of(counts), self.inventory_of(counts)
        folds = stratified_kfold(corpus, inv, 10, seed=4)
        assert folds.assignment.min() >= 0 and folds.assignment.max() < 10
        per_char = {"x": [], "y": []}
        for idx, s in enumerate(corpus):
            per_char[s.chars[0]].append(folds.assignment[idx])
        x_sizes = np.bincount(per_char["x"], minlength=10)
        y_sizes = np.bincount(per_char["y"], minlength=10)
        assert set(x_sizes) <= {2, 3} and x_sizes.sum() == 25
        assert set(y_sizes) <= {1, 2} and y_sizes.sum() == 15

    def test_partition_property(self):
        counts = {"x": 13, "y": 7, "z": 29}
        inv = PolyphoneInventory(
            candidates={ch: [f"{ch}1", f"{ch}2"] for ch in counts},
            sample_counts=dict(counts))
        corpus = self.corpus_of(counts)
        folds = stratified_kfold(corpus, inv, 5, seed=2)
        all_indices = np.concatenate([folds.indices(f) for f in range(5)])
        assert sorted(all_indices) == list(range(len(corpus)))

    def test_small_group_warning(self, caplog):
        counts = {"x": 3}
        with caplog.at_level("WARNING"):
            stratified_kfold(self.corpus_of(counts), self.inventory_of(counts), 10, seed=0)
        assert any("3 samples for 10 folds" in r.message for r in caplog.records)

    def test_fold_file_round_trip(self):
        counts = {"x": 9, "y": 6}
        folds = stratified_kfold(self.corpus_of(counts), self.inventory_of(counts), 3, seed=5)
        text = serialize_folds(folds)
        again = parse_folds(text.splitlines(keepends=True))
        assert again.k == folds.k
        np.testing.assert_array_equal(again.assignment, folds.assignment)


class TestG2PRoute:
    DICT = PronunciationDictionary(
        {"a": ["a1"], "b": ["b1"], "x": ["x1", "x2"], "w": ["w1", "w2"]})
    INV = PolyphoneInventory(candidates={"x": ["x1", "x2"]}, sample_counts={"x": 5})

    def test_monophonic_never_calls_predictor(self):
        calls = []

        def predictor(sentence, pos, ch):
            calls.append((pos, ch))
            return "x1"

        out = g2p_route("abba", self.DICT, self.INV, predictor)
        assert out == ["a1", "b1", "b1", "a1"]
        assert calls == []

    def test_inventory_char_calls_predictor_once_with_position(self):
        calls = []

        def predictor(sentence, pos, ch):
            calls.append((sentence, pos, ch))
            return "x2"

        out = g2p_route("abxa", self.DICT, self.INV, predictor)
        assert out == ["a1", "b1", "x2", "a1"]
        assert calls == [("abxa", 2, "x")]

    def test_gold_replay(self):
        # replaying gold labels through the route reproduces them
        gold = {(2, "x"): "x2"}

        def oracle(sentence, pos, ch):
            return gold[(pos, ch)]

        out = g2p_route("abxb", self.DICT, self.INV, oracle)
        assert out[2] == "x2"
        assert len(out) == 4

    def test_unknown_character_names_char_and_position(self):
        with pytest.raises(RoutingError, match=r"'Z' at position 1"):
            g2p_route("aZ", self.DICT, self.INV, lambda *a: "x1")

    def test_out_of_candidate_prediction_is_internal_error(self):
        with pytest.raises(InternalConsistencyError):
            g2p_route("x", self.DICT, self.INV, lambda *a: "a1")

    def test_uninventoried_polyphone_falls_back_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            out = g2p_route("wa", self.DICT, self.INV, lambda *a: "x1")
        assert out == ["w1", "a1"]
        assert any("outside the" in r.message for r in caplog.records)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_output_length_matches_input(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 12))
        sentence = "".join(rng.choice(list("abx"), size=n))
        out = g2p_route(sentence, self.DICT, self.INV, lambda s, p, c: "x1")
        assert len(out) == len(sentence)


class TestSyntheticGenerator:
    def test_marker_rule_holds_by_construction(self):
        spec = SyntheticSpec(samples_per_char=40)
        corpus = generate_synthetic(spec, seed=11)
        for s in corpus.sentences:
            pos, label = s.targets[0]
            assert expected_label(spec, s.chars, pos) == label

    def test_deterministic(self):
        spec = SyntheticSpec(samples_per_char=25)
        a = generate_synthetic(spec, seed=7)
        b = generate_synthetic(spec, seed=7)
        assert serialize_corpus(a.sentences) == serialize_corpus(b.sentences)
        assert serialize_dictionary(a.dictionary) == serialize_dictionary(b.dictionary)

    def test_exact_per_character_counts(self):
        spec = SyntheticSpec(n_polyphones=3, candidates_per_char=(2, 3, 4),
                             samples_per_char=50)
        corpus = generate_synthetic(spec, seed=1)
        counts = {}
        for s in corpus.sentences:
            ch = s.chars[s.targets[0][0]]
            counts[ch] = counts.get(ch, 0) + 1
        assert sorted(counts.values()) == [50, 50, 50]

    def test_label_frequencies_match_sampling_probs(self):
        # binomial check: frequency of label 0 within 3 sigma of its probability
        spec = SyntheticSpec(n_polyphones=1, candidates_per_char=(2,),
                             samples_per_char=2000,
                             label_probs={chr(0x5F00): (0.8, 0.2)})
        corpus = generate_synthetic(spec, seed=23)
        labels = [s.targets[0][1] for s in corpus.sentences]
        n0 = sum(1 for lb in labels if lb.endswith("1"))
        n = len(labels)
        sigma = np.sqrt(n * 0.8 * 0.2)
        assert abs(n0 - 0.8 * n) < 3 * sigma

    def test_every_character_in_dictionary(self):
        spec = SyntheticSpec(samples_per_char=20)
        corpus = generate_synthetic(spec, seed=2)
        for s in corpus.sentences:
            for ch in s.chars:
                assert ch in corpus.dictionary

    def test_inventory_from_synthetic(self):
        spec = SyntheticSpec(samples_per_char=30)
        corpus = generate_synthetic(spec, seed=5)
        inv = build_inventory(corpus.sentences, corpus.dictionary, min_count=0)
        assert len(inv.candidates) == spec.n_polyphones
        widths = sorted(len(v) for v in inv.candidates.values())
        assert widths == sorted(spec.candidates_per_char)

    def test_sentence_pairs_follow_document_order(self):
        spec = SyntheticSpec(samples_per_char=20, doc_sentences=5)
        corpus = generate_synthetic(spec, seed=9)
        pairs = corpus.sentence_pairs()
        assert len(pairs) == len(corpus.documents) * 4
        first_doc = corpus.documents[0]
        assert pairs[0] == (corpus.sentences[first_doc[0]].chars,
                            corpus.sentences[first_doc[1]].chars)

    def test_inconsistent_spec_rejected(self):
        with pytest.raises(ValueError, match="marker_window"):
            SyntheticSpec(sentence_len=(3, 5), marker_window=3)

    def test_documents_share_small_charset(self):
        spec = SyntheticSpec(samples_per_char=20, doc_charset=4)
        corpus = generate_synthetic(spec, seed=13)
        for doc in corpus.documents[:5]:
            fillers = set()
            for idx in doc:
                s = corpus.sentences[idx]
                pos = s.targets[0][0]
                for i, ch in enumerate(s.chars):
                    if 0x4E00 <= ord(ch) < 0x4E00 + spec.filler_alphabet:
                        fillers.add(ch)
            assert len(fillers) <= spec.doc_charset
