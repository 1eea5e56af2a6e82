import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasprobe.corpus import (CONTINUATION, SPECIAL_TOKENS, UNK_ID, Document,
                              SyntheticCorpusSpec, TokenizerModel, build_vocab,
                              chunk, generate_synthetic, load_split_manifest,
                              normalize, save_split_manifest, split,
                              split_sentences, tokenize, tokenize_document,
                              words_of)
from conftest import make_spec
from oracles import greedy_split_oracle


def docs_from_texts(*texts):
    return [Document(f"d{i}", t) for i, t in enumerate(texts)]


class TestBuildVocab:
    def test_repeated_sentence_keeps_all_words(self):
        docs = docs_from_texts(" ".join(["de kat zit op de mat."] * 10))
        tok = build_vocab(docs, max_vocab=200, min_freq=3)
        for word in ("de", "kat", "zit", "op", "mat"):
            assert word in tok.vocab

    def test_below_threshold_word_excluded(self):
        base = " ".join(["de kat zit op de mat."] * 10)
        docs = docs_from_texts(base + " qqq zat. qqq ging.")
        tok = build_vocab(docs, max_vocab=200, min_freq=3)
        assert "qqq" not in tok.vocab
        # still representable through pieces or [UNK]
        ids = tok.encode_word("qqq")
        assert ids == [UNK_ID] or tok.decode_word(ids) == "qqq"

    def test_selection_matches_frequency_oracle(self):
        docs = generate_synthetic(make_spec(num_sentences=10_000, num_documents=20))
        max_vocab, min_freq = 500, 3
        tok = build_vocab(docs, max_vocab=max_vocab, min_freq=min_freq)

        # oracle: independent counting pass + the documented selection rule
        word_counts = Counter()
        for d in docs:
            word_counts.update(words_of(d.text))
        char_counts = Counter()
        for w, c in word_counts.items():
            for ch in w:
                char_counts[ch] += c
        chars = sorted((c for c, n in char_counts.items() if n >= min_freq),
                       key=lambda c: (-char_counts[c], c))[:1000]
        expected = list(SPECIAL_TOKENS)
        for ch in chars:
            expected.extend([ch, CONTINUATION + ch])
        budget = max_vocab - len(expected)
        seen = set(expected)
        words = sorted((w for w, n in word_counts.items()
                        if n >= min_freq and w not in seen),
                       key=lambda w: (-word_counts[w], w))
        expected.extend(words[:budget])

        assert tok.id_to_token == expected
        assert tok.vocab_size <= max_vocab
        # the synthetic corpus has fewer than 500-5 frequent units only if
        # vocabulary is exhausted; either way every retained non-special unit
        # meets the frequency threshold
        for t in tok.id_to_token[5:]:
            base = t[len(CONTINUATION):] if t.startswith(CONTINUATION) else t
            count = char_counts[base] if len(base) == 1 else word_counts[base]
            assert count >= min_freq

    def test_vocab_invariants(self):
        docs = generate_synthetic(make_spec(num_sentences=2000))
        tok = build_vocab(docs, max_vocab=300, min_freq=3, charset_limit=50)
        assert tok.vocab_size <= 300
        assert [tok.id_to_token[i] for i in range(5)] == list(SPECIAL_TOKENS)
        distinct_chars = {t for t in tok.id_to_token[5:] if len(t) == 1}
        assert len(distinct_chars) <= 50

    def test_charset_overflow_drops_rare_chars(self):
        text = " ".join(f"woord{c} {c * 5}" for c in "abcdefghij") * 5
        tok = build_vocab(docs_from_texts(text), max_vocab=100, min_freq=2,
                          charset_limit=5)
        distinct = {t for t in tok.id_to_token[5:] if len(t) == 1}
        assert len(distinct) <= 5

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_deterministic(self):
        docs = generate_synthetic(make_spec(num_sentences=1500))
        t1 = build_vocab(docs, max_vocab=400, min_freq=2)
        t2 = build_vocab(docs, max_vocab=400, min_freq=2)
        assert t1.id_to_token == t2.id_to_token


class TestTokenize:
    def test_empty_text(self):
        docs = docs_from_texts("een twee drie. " * 5)
        tok = build_vocab(docs, max_vocab=100, min_freq=2)
        out = tokenize(tok, "")
        assert out.token_ids == () and out.word_spans == ()

    def test_in_vocab_word_single_piece(self):
        docs = docs_from_texts("een twee drie. " * 5)
        tok = build_vocab(docs, max_vocab=100, min_freq=2)
        out = tokenize(tok, "twee")
        assert len(out.token_ids) == 1
        assert out.word_spans == ((0, 1),)
        assert tok.id_to_token[out.token_ids[0]] == "twee"

    def test_greedy_longest_match_against_hand_oracle(self):
        # hand-built vocabulary: greedy should take "speel" then "##goed",
        # not the single characters
        tokens = list(SPECIAL_TOKENS) + [
            "speel", "##goed",
            "s", "##s", "p", "##p", "e", "##e", "l", "##l",
            "g", "##g", "o", "##o", "d", "##d",
        ]
        tok = TokenizerModel(tokens, max_vocab=50, min_freq=1)
        ids = tok.encode_word("speelgoed")
        assert [tok.id_to_token[i] for i in ids] == ["speel", "##goed"]
        assert tok.decode_word(ids) == "speelgoed"
        # a word needing character fallback after the longest prefix
        ids2 = tok.encode_word("speels")
        assert [tok.id_to_token[i] for i in ids2] == ["speel", "##s"]

    def test_alignment_total_and_contiguous(self):
        docs = generate_synthetic(make_spec(num_sentences=500))
        tok = build_vocab(docs, max_vocab=500, min_freq=2)
        out = tokenize(tok, docs[0].text)
        assert len(out.word_spans) == len(out.words)
        cursor = 0
        for start, end in out.word_spans:
            assert start == cursor and end > start
            cursor = end
        assert cursor == len(out.token_ids)

    def test_round_trip_on_corpus_words(self):
        docs = generate_synthetic(make_spec(num_sentences=800))
        tok = build_vocab(docs, max_vocab=1000, min_freq=2)
        vocab_words = set()
        for d in docs:
            vocab_words.update(words_of(d.text))
        for word in sorted(vocab_words):
            ids = tok.encode_word(word)
            assert ids == [UNK_ID] or tok.decode_word(ids) == word, word

    def test_unknown_material_maps_to_unk(self):
        docs = docs_from_texts("alleen letters hier. " * 5)
        tok = build_vocab(docs, max_vocab=100, min_freq=3)
        out = tokenize(tok, "特殊")
        assert set(out.token_ids) == {UNK_ID}


class TestSentencesAndNormalization:
    def test_split_on_punct_whitespace_capital(self):
        text = "Dit is een zin. Hier komt nog een. en deze hoort erbij? Ja."
        sents = split_sentences(text)
        assert sents == ["Dit is een zin.", "Hier komt nog een. en deze hoort erbij?", "Ja."]

    def test_normalize_nfc_and_lowercase(self):
        composed = "café"
        decomposed = "café"
        assert normalize(decomposed) == composed
        assert normalize("Café") == composed


class TestChunk:
    def make_doc(self, n):
        docs = docs_from_texts("woord " * 600)
        tok = build_vocab(docs, max_vocab=50, min_freq=1)
        td = tokenize_document(tok, docs[0])
        assert len(td.token_ids) >= n
        from biasprobe.corpus import TokenizedDocument
        return TokenizedDocument("x", td.token_ids[:n], td.words[:n],
                                 td.word_spans[:n])

    def test_short_document_single_chunk(self):
        out = chunk(self.make_doc(100), max_len=512, stride=384)
        assert len(out) == 1 and len(out[0]) == 100 and out[0].start_offset == 0

    def test_hand_enumerated_offsets(self):
        # window arithmetic: step = 512 - 384 = 128
        out = chunk(self.make_doc(600), max_len=512, stride=384)
        assert [c.start_offset for c in out] == [0, 128]
        assert [len(c) for c in out] == [512, 472]

    def test_exact_fit_single_chunk(self):
        out = chunk(self.make_doc(512), max_len=512, stride=384)
        assert len(out) == 1 and len(out[0]) == 512

    def test_bad_stride_errors(self):
        doc = self.make_doc(10)
        with pytest.raises(ValueError):
            chunk(doc, max_len=512, stride=512)
        with pytest.raises(ValueError):
            chunk(doc, max_len=512, stride=-1)

    @pytest.mark.parametrize("n,max_len,stride", [
        (1000, 512, 384), (999, 100, 60), (57, 16, 8), (1, 8, 4), (129, 64, 32),
    ])
    def test_overlap_and_reconstruction(self, n, max_len, stride):
        rng = np.random.default_rng(n)
        from biasprobe.corpus import TokenizedDocument
        ids = tuple(int(x) for x in rng.integers(5, 60, size=n))
        doc = TokenizedDocument("x", ids, ("w",) * n, tuple((i, i + 1) for i in range(n)))
        out = chunk(doc, max_len=max_len, stride=stride)
        for a, b in zip(out, out[1:]):
            assert a.token_ids[-stride:] == b.token_ids[:stride]
        rebuilt = list(out[0].token_ids)
        for c in out[1:]:
            rebuilt.extend(c.token_ids[stride:])
        assert tuple(rebuilt) == ids
        assert all(len(c) <= max_len for c in out)


class TestSplit:
    def chunks_for_docs(self, sizes: dict[str, int]):
        from biasprobe.corpus import Chunk
        return [Chunk(tuple(range(5, 5 + n)), doc_id, 0) for doc_id, n in sizes.items()]

    def test_equal_docs_exact_division(self):
        sizes = {f"d{i}": 50 for i in range(10)}
        s = split(self.chunks_for_docs(sizes), (0.8, 0.1, 0.1), seed=3)
        counts = Counter(s.assignment.values())
        assert counts == {"train": 8, "validation": 1, "test": 1}
        assert not s.tolerance_exceeded

    def test_degenerate_unreachable_proportions_warn(self):
        sizes = {"big": 98, "a": 1, "b": 1}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            s = split(self.chunks_for_docs(sizes), (0.8, 0.1, 0.1), seed=0)
        assert s.tolerance_exceeded
        assert any("deviate" in str(w.message) for w in caught)
        # the big document went somewhere whole
        assert len({s.assignment["big"]}) == 1

    def test_random_docs_match_greedy_oracle_and_tolerance(self):
        rng = np.random.default_rng(99)
        sizes = {f"d{i:03d}": int(rng.integers(10, 200)) for i in range(100)}
        chunks = self.chunks_for_docs(sizes)
        s = split(chunks, (0.8, 0.1, 0.1), seed=7)

        # reproduce the documented order: shuffle under the seed, stable sort by size
        doc_ids = [c.doc_id for c in chunks]
        order = [doc_ids[i] for i in np.random.default_rng(7).permutation(len(doc_ids))]
        order.sort(key=lambda d: -sizes[d])
        expected = greedy_split_oracle(sizes, (0.8, 0.1, 0.1), order)
        assert s.assignment == expected

        shares = s.token_shares()
        for share, target in zip(shares, (0.8, 0.1, 0.1)):
            assert abs(share - target) <= 0.02

    def test_doc_disjoint(self, tiny_corpus):
        s = tiny_corpus["split"]
        train_docs = {c.doc_id for c in s.train}
        val_docs = {c.doc_id for c in s.validation}
        test_docs = {c.doc_id for c in s.test}
        assert not (train_docs & val_docs)
        assert not (train_docs & test_docs)
        assert not (val_docs & test_docs)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(5)
        sizes = {f"d{i}": int(rng.integers(5, 50)) for i in range(30)}
        chunks = self.chunks_for_docs(sizes)
        s1 = split(chunks, (0.8, 0.1, 0.1), seed=42)
        s2 = split(chunks, (0.8, 0.1, 0.1), seed=42)
        assert s1.assignment == s2.assignment

    def test_bad_proportions(self):
        chunks = self.chunks_for_docs({"a": 10})
        with pytest.raises(ValueError):
            split(chunks, (0.5, 0.2, 0.2))

    def test_manifest_round_trip(self, tmp_path):
        sizes = {f"d{i}": 10 for i in range(6)}
        s = split(self.chunks_for_docs(sizes), (0.8, 0.1, 0.1), seed=1)
        path = tmp_path / "manifest.csv"
        save_split_manifest(s, path)
        assert load_split_manifest(path) == s.assignment


class TestGenerateSynthetic:
    def test_degenerate_probability_all_male(self):
        spec = make_spec(professions=(("lasser", 1.0),), num_sentences=2000)
        docs = generate_synthetic(spec)
        male = set(spec.male_words)
        female = set(spec.female_words)
        seen = 0
        for d in docs:
            for sent in split_sentences(d.text):
                ws = set(words_of(sent))
                if "lasser" in ws or "lasserster" in ws:
                    seen += 1
                    assert ws & male, sent
                    assert not (ws & female), sent
        assert seen > 100

    def test_half_probability_binomial_interval(self):
        spec = make_spec(professions=(("lasser", 0.5),), num_sentences=10_000,
                         num_documents=20)
        docs = generate_synthetic(spec)
        male = set(spec.male_words)
        total = with_male = 0
        for d in docs:
            for sent in split_sentences(d.text):
                ws = set(words_of(sent))
                if "lasser" in ws or "lasserster" in ws:
                    total += 1
                    with_male += bool(ws & male)
        assert total > 3000
        fraction = with_male / total
        assert 0.47 <= fraction <= 0.53  # 3 sigma at this sample size

    def test_deterministic_byte_identical(self):
        spec = make_spec(num_sentences=500)
        d1 = generate_synthetic(spec)
        d2 = generate_synthetic(spec)
        assert [(d.id, d.text) for d in d1] == [(d.id, d.text) for d in d2]

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            make_spec(professions=(("lasser", 1.5),))

    def test_suffix_only_in_female_context(self):
        spec = make_spec(professions=(("lasser", 0.5),), num_sentences=4000,
                         suffix_probability=1.0)
        docs = generate_synthetic(spec)
        female = set(spec.female_words)
        suffixed = 0
        for d in docs:
            for sent in split_sentences(d.text):
                ws = set(words_of(sent))
                if "lasserster" in ws:
                    suffixed += 1
                    assert ws & female, sent
        assert suffixed > 200


class TestTokenizerPersistence:
    def test_save_load_round_trip(self, tmp_path):
        docs = generate_synthetic(make_spec(num_sentences=400))
        tok = build_vocab(docs, max_vocab=300, min_freq=2)
        path = tmp_path / "vocab.txt"
        tok.save(path)
        loaded = TokenizerModel.load(path, max_vocab=300, min_freq=2)
        assert loaded.id_to_token == tok.id_to_token
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[:5] == list(SPECIAL_TOKENS)

    def test_load_rejects_bad_specials(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("[PAD]\n[UNK]\nfoo\n[SEP]\n[MASK]\n", encoding="utf-8")
        with pytest.raises(ValueError):
            TokenizerModel.load(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=5, max_value=30), min_size=1, max_size=400),
       st.integers(min_value=2, max_value=20))
def test_chunk_overlap_property(ids, max_len):
    from biasprobe.corpus import TokenizedDocument
    stride = max_len // 2
    n = len(ids)
    doc = TokenizedDocument("h", tuple(ids), ("w",) * n,
                            tuple((i, i + 1) for i in range(n)))
    out = chunk(doc, max_len=max_len, stride=stride)
    for a, b in zip(out, out[1:]):
        assert a.token_ids[-stride:] == b.token_ids[:stride]
    rebuilt = list(out[0].token_ids)
    for c in out[1:]:
        rebuilt.extend(c.token_ids[stride:])
    assert rebuilt == ids
