from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tagnmt.tokenizer import (
    EOW,
    RESERVED,
    BpeModel,
    Vocabulary,
    bpe_apply,
    bpe_learn,
    detokenize,
    detokenize_words,
    is_tag,
    join_subwords,
    load_merges,
    pretokenize,
    save_merges,
    word_frequencies,
)


def naive_bpe_learn(freqs, merge_count):
    """Reference learner: recount every pair from scratch after each merge."""
    words = {w: tuple(w[:-1]) + (w[-1] + EOW,) for w in freqs if w}
    merges = []
    while len(merges) < merge_count:
        counts = Counter()
        for w, syms in words.items():
            for p in zip(syms, syms[1:]):
                counts[p] += freqs[w]
        if not counts:
            break
        pair, c = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if c < 2:
            break
        merges.append(pair)
        for w, syms in words.items():
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = tuple(out)
    return merges


words_st = st.text(alphabet="abcdeé日", min_size=1, max_size=10)


class TestPretokenize:
    def test_example_sentence(self):
        words = pretokenize("Am zburat cu Air Force Two timp de opt ani.")
        assert words == ["Am", "zburat", "cu", "Air", "Force", "Two", "timp", "de", "opt", "ani", "."]

    def test_empty(self):
        assert pretokenize("") == []

    def test_punctuation_split(self):
        assert pretokenize("a,b") == ["a", ",", "b"]

    def test_numbers_stay_intact(self):
        assert pretokenize("pay 1,000.50 at 10:30") == ["pay", "1,000.50", "at", "10:30"]

    def test_detokenize_restores_standard_spacing(self):
        s = "Am zburat cu Air Force Two timp de opt ani."
        assert detokenize_words(pretokenize(s)) == s
        assert detokenize_words(["(", "a", ")", ",", "b"]) == "(a), b"


class TestBpeLearn:
    def test_first_merge_is_most_frequent_pair(self):
        # ("a","a") occurs 2 + 1 = 3 times, more than any other pair
        model = bpe_learn({"aaab": 1, "aab": 1}, 1)
        assert model.merges == (("a", "a"),)

    def test_zero_merges_is_character_level(self):
        model = bpe_learn({"hello": 5, "world": 3}, 0)
        assert model.merges == ()
        assert bpe_apply("hello", model) == ["h", "e", "l", "l", "o" + EOW]

    def test_deterministic(self):
        freqs = word_frequencies([pretokenize("the cat sat on the mat with the hat")] * 3)
        assert bpe_learn(freqs, 20).merges == bpe_learn(dict(reversed(list(freqs.items()))), 20).merges

    def test_stops_when_no_pair_repeats(self):
        model = bpe_learn({"abc": 1}, 10)
        assert model.merges == ()

    def test_empty_corpus(self):
        assert bpe_learn({}, 5).merges == ()

    def test_negative_merge_count(self):
        with pytest.raises(ValueError):
            bpe_learn({"a": 1}, -1)

    def test_lexicographic_tie_break(self):
        # ("a","b") and ("c","d</w>") both occur twice
        model = bpe_learn({"ab": 2, "cd": 2}, 1)
        assert model.merges == (("a", "b" + EOW),)

    @settings(max_examples=60, deadline=None)
    @given(st.dictionaries(words_st, st.integers(1, 5), min_size=1, max_size=15), st.integers(0, 30))
    def test_matches_naive_learner(self, freqs, merge_count):
        assert list(bpe_learn(freqs, merge_count).merges) == naive_bpe_learn(freqs, merge_count)

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(words_st, st.integers(1, 5), max_size=15), st.integers(0, 30))
    def test_model_invariants(self, freqs, merge_count):
        model = bpe_learn(freqs, merge_count)
        assert len(model.merges) <= merge_count
        assert len(set(model.merges)) == len(model.merges)


class TestBpeApply:
    def test_hand_trace(self):
        model = BpeModel((("a", "a"),), 1)
        assert bpe_apply("aaab", model) == ["aa", "a", "b" + EOW]

    def test_learned_word_is_one_token(self):
        model = bpe_learn({"lower": 10}, 10)
        assert bpe_apply("lower", model) == ["lower" + EOW]

    def test_unseen_characters_pass_through(self):
        model = bpe_learn({"abab": 4}, 5)
        assert join_subwords(bpe_apply("xyz", model)) == ["xyz"]

    def test_round_trip_on_random_words(self):
        rng = np.random.default_rng(0)
        alphabet = list("abcdefghijklmnop") + ["é", "ß", "ж", "-"]
        corpus = ["".join(rng.choice(alphabet, size=rng.integers(1, 9))) for _ in range(2000)]
        model = bpe_learn(word_frequencies([corpus]), 300)
        for _ in range(10_000):
            w = "".join(rng.choice(alphabet, size=rng.integers(1, 15)))
            pieces = model.segment(w)
            assert join_subwords(pieces) == [w]
            assert detokenize(pieces) == w

    @settings(max_examples=100, deadline=None)
    @given(st.lists(words_st, min_size=1, max_size=20), st.integers(0, 40), words_st)
    def test_lossless_for_any_corpus(self, corpus, merge_count, word):
        model = bpe_learn(word_frequencies([corpus]), merge_count)
        for w in [*corpus, word]:
            assert join_subwords(bpe_apply(w, model)) == [w]

    def test_segment_words_concatenates(self):
        model = bpe_learn({"ab": 3}, 1)
        assert model.segment_words(["ab", "a"]) == ["ab" + EOW, "a" + EOW]


class TestMergeFile:
    def test_round_trip(self, tmp_path):
        model = bpe_learn({"banana": 3, "bandana": 2}, 6)
        save_merges(model, tmp_path / "m.txt")
        text = (tmp_path / "m.txt").read_text(encoding="utf-8")
        assert text.splitlines()[0] == "#bpe-v1 merges=6"
        assert load_merges(tmp_path / "m.txt") == model

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.txt").write_text("a b\n", encoding="utf-8")
        with pytest.raises(ValueError, match="header"):
            load_merges(tmp_path / "m.txt")


class TestVocabulary:
    def test_reserved_ids_and_sorted_tags(self):
        v = Vocabulary.build([["x", "<2b>", "y"], ["<a>", "x"]], tags=["<2a>"])
        assert v.itos[:4] == list(RESERVED)
        assert v.itos[4:7] == ["<2a>", "<2b>", "<a>"]
        assert v.n_control == 7
        assert v.tag_ids == [4, 5, 6]

    def test_no_unk_on_training_data(self):
        sents = [["a", "b</w>"], ["c</w>"]]
        v = Vocabulary.build(sents)
        for s in sents:
            assert v.unk_id not in v.encode(s)
        assert v.decode(v.encode(sents[0])) == sents[0]

    def test_unknown_maps_to_unk(self):
        v = Vocabulary.build([["a"]])
        assert v.encode(["zzz"]) == [v.unk_id]

    def test_save_load_keeps_ids(self, tmp_path):
        v = Vocabulary.build([["a", "b", "a", "<2c>"]], tags=["<c>"])
        v.save(tmp_path / "vocab.tsv")
        assert Vocabulary.load(tmp_path / "vocab.tsv") == v

    def test_tags_must_follow_reserved(self):
        with pytest.raises(ValueError):
            Vocabulary([*RESERVED, "x", "<2a>"])

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary([*RESERVED, "x", "x"])

    def test_is_tag(self):
        assert is_tag("<2en>") and is_tag("<en>")
        assert not any(is_tag(t) for t in (*RESERVED, "en", "<2EN>", "</w>"))
