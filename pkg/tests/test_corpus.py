import numpy as np
import pytest

from fedmem.corpus import (
    CorpusConfig,
    build_vocabulary,
    fit_zipf_exponent,
    generate_corpus,
    ingest_corpus,
    read_lines,
    write_corpus,
    zipf_probabilities,
)
from fedmem.errors import InputError
from fedmem.vocab import EOS, NUM_SPECIAL, OOV, Vocabulary


class TestGenerate:
    def test_seeded(self):
        cfg = CorpusConfig(num_sentences=300, vocab_size=60)
        a = generate_corpus(cfg, np.random.default_rng(4))
        b = generate_corpus(cfg, np.random.default_rng(4))
        assert a == b
        assert a != generate_corpus(cfg, np.random.default_rng(5))

    def test_token_range_and_lengths(self):
        cfg = CorpusConfig(num_sentences=500, vocab_size=40, min_length=2, max_length=6)
        for s in generate_corpus(cfg, np.random.default_rng(0)):
            assert 2 <= len(s) <= 6
            assert all(NUM_SPECIAL <= t < 40 for t in s)

    @pytest.mark.parametrize("exponent", [1.0, 1.2])
    def test_zipf_fit(self, exponent):
        cfg = CorpusConfig(num_sentences=125_000, vocab_size=1000, zipf_exponent=exponent)
        sentences = generate_corpus(cfg, np.random.default_rng(1))
        assert sum(map(len, sentences)) >= 1_000_000
        assert fit_zipf_exponent(sentences, top=100) == pytest.approx(exponent, rel=0.05)

    def test_order_two_structure(self):
        # with Markov weight 1 a two-word context has at most `successors` next words
        cfg = CorpusConfig(num_sentences=3000, vocab_size=200, markov_weight=1.0, successors=3)
        nexts = {}
        for s in generate_corpus(cfg, np.random.default_rng(2)):
            for i in range(2, len(s)):
                nexts.setdefault((s[i - 2], s[i - 1]), set()).add(s[i])
        assert max(len(v) for v in nexts.values()) <= 3

    def test_zipf_probabilities(self):
        p = zipf_probabilities(4, 1.0)
        np.testing.assert_allclose(p, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))

    def test_bad_config(self):
        with pytest.raises(InputError):
            CorpusConfig(vocab_size=4)
        with pytest.raises(InputError):
            CorpusConfig(markov_weight=1.5)


class TestIngest:
    def test_three_lines(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("the cat sat\n\nthe dog ran far\n  a cat  \n", encoding="utf-8")
        lines = read_lines(path)
        assert len(lines) == 3
        vocab = build_vocabulary(lines, 5)
        assert vocab.words[NUM_SPECIAL:] == ("the", "cat")
        assert ingest_corpus(path, vocab) == [[3, 4, OOV], [3, OOV, OOV, OOV], [OOV, 4]]

    def test_roundtrip(self, tmp_path):
        vocab = Vocabulary.synthetic(30)
        sents = generate_corpus(CorpusConfig(num_sentences=50, vocab_size=30),
                                np.random.default_rng(0))
        write_corpus(sents, vocab, tmp_path / "c.txt")
        assert ingest_corpus(tmp_path / "c.txt", vocab) == sents
        assert EOS not in {t for s in sents for t in s}

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(InputError):
            read_lines(tmp_path / "nope.txt")
        (tmp_path / "e.txt").write_text("\n \n")
        with pytest.raises(InputError):
            read_lines(tmp_path / "e.txt")
