import dataclasses

import pytest

from pronoun_ft.corpus import (
    GENDER_PRONOUN,
    PLURAL_PRONOUN,
    SRC_PRONOUN,
    TGT_DET_PL,
    ParallelCorpus,
    SyntheticConfig,
    Vocab,
    build_vocab,
    cross_sentence_fraction,
    generate_synthetic,
    read_annotations,
    read_parallel,
    read_prefix,
    write_parallel,
)
from pronoun_ft.model import UNK

SMALL = SyntheticConfig(num_docs=40, sents_per_doc=20)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def test_same_seed_byte_identical(tmp_path):
    a = write_parallel(generate_synthetic(SMALL), tmp_path / "a")
    b = write_parallel(generate_synthetic(SMALL), tmp_path / "b")
    for key in a:
        assert open(a[key], "rb").read() == open(b[key], "rb").read()


def test_different_seed_differs(small):
    other = generate_synthetic(dataclasses.replace(SMALL, seed=2))
    assert other.pairs != small.pairs


def test_default_cross_sentence_fraction():
    corpus = generate_synthetic(SyntheticConfig())
    assert abs(cross_sentence_fraction(corpus) - 0.5) <= 0.05


def sentence_level_resolver(tgt, pos, gender_of):
    """Pronoun from the most recent noun earlier in the same target sentence."""
    for k in range(pos - 1, -1, -1):
        g = gender_of.get(tgt[k])
        if g is not None:
            # the noun phrase starts with its determiner: "the"/"these" [adj] noun
            det = tgt[k - 1] if tgt[k - 1] in ("the", "these") else tgt[k - 2]
            return PLURAL_PRONOUN if det == TGT_DET_PL else GENDER_PRONOUN[g]
    return None


def test_intra_sentential_only_is_fully_resolvable():
    corpus = generate_synthetic(dataclasses.replace(SMALL, cross_sentence_pronoun_ratio=0.0))
    gender_of = corpus.lexicon.noun_gender
    assert corpus.annotations
    for a in corpus.annotations:
        assert a.antecedent_line == a.line
        tgt = corpus.pairs[a.line][1]
        assert sentence_level_resolver(tgt, a.position, gender_of) == a.pronoun


def test_annotations_recoverable_from_antecedent_chain(small):
    gender_of = small.lexicon.noun_gender
    for a in small.annotations:
        assert small.pairs[a.line][1][a.position] == a.pronoun
        if a.antecedent_line == a.line:
            expect = sentence_level_resolver(small.pairs[a.line][1], a.position, gender_of)
        else:
            assert a.antecedent_line == a.line - 1
            prev = small.pairs[a.antecedent_line][1]
            expect = sentence_level_resolver(prev, len(prev), gender_of)
        assert expect == a.pronoun


def test_cross_pronouns_never_open_a_document(small):
    starts = set(small.doc_starts)
    for a in small.annotations:
        if a.antecedent_line != a.line:
            assert a.line not in starts


def test_dictionary_consistency(small):
    dictionary = small.lexicon.dictionary
    for s, t in small.pairs:
        mapped = sorted(dictionary[w] for w in s if w != SRC_PRONOUN)
        rest = sorted(w for w in t if w not in GENDER_PRONOUN.values() and w != PLURAL_PRONOUN)
        assert mapped == rest


def test_single_source_pronoun_token(small):
    targets = {t[a.position] for a in small.annotations for t in [small.pairs[a.line][1]]}
    assert targets <= {"he", "she", "it", "they"}
    for s, _ in small.pairs:
        assert s.count(SRC_PRONOUN) <= 1


def test_degenerate_config():
    with pytest.raises(ValueError):
        generate_synthetic(dataclasses.replace(SMALL, content_vocab=0))
    with pytest.raises(ValueError):
        generate_synthetic(dataclasses.replace(SMALL, noun_genders=(0, 0, 0)))


class TestContext:
    corpus = ParallelCorpus([(["a"], ["A"]), (["b"], ["B"]), (["c"], ["C"]), (["d"], ["D"])], [0, 2])

    def test_previous_sentence(self):
        assert self.corpus.context(1) == ["a"]
        assert self.corpus.context(3) == ["c"]

    def test_never_crosses_boundary(self):
        assert self.corpus.context(0) == []
        assert self.corpus.context(2) == []

    def test_doc_ids(self):
        assert self.corpus.doc_ids().tolist() == [0, 0, 1, 1]

    def test_random_context_is_another_sentence(self):
        rnd = self.corpus.with_random_context(3)
        for i in range(4):
            ctx = rnd.context(i)
            assert ctx != self.corpus.pairs[i][0]
            assert ctx in [p[0] for p in self.corpus.pairs]
        assert rnd.with_random_context(3).prev_src == self.corpus.with_random_context(3).prev_src

    def test_concatenated_keeps_contexts(self):
        both = self.corpus.concatenated(self.corpus)
        assert len(both) == 8
        assert both.doc_starts == [0, 2, 4, 6]
        assert both.context(5) == ["a"]

    def test_bad_boundaries(self):
        with pytest.raises(ValueError):
            ParallelCorpus([(["a"], ["A"])], [1])


class TestVocab:
    def test_ordering_rule(self):
        corpus = ParallelCorpus([(["a", "a", "b"], ["x"]), (["a"], ["y"])])
        vocab = build_vocab(corpus, "source")
        assert vocab.stoi["a"] == 5 and vocab.stoi["b"] == 6
        assert vocab.itos[:5] == ["<pad>", "<s>", "</s>", "<sep>", "<unk>"]

    def test_lexicographic_tie_break(self):
        corpus = ParallelCorpus([(["b", "a"], ["c"])])
        assert build_vocab(corpus, "source").itos[5:] == ["a", "b"]

    def test_roundtrip_and_unk(self, small):
        vocab = build_vocab(small, "target")
        s = small.pairs[0][1]
        assert vocab.decode(vocab.encode(s)) == s
        assert vocab.encode(["never-seen"]) == [UNK]

    def test_covers_side(self, small):
        vocab = build_vocab(small, "source")
        assert all(w in vocab.stoi for s, _ in small.pairs for w in s)

    def test_empty(self):
        with pytest.raises(ValueError):
            build_vocab(ParallelCorpus([]), "source")

    def test_save_load(self, tmp_path, small):
        vocab = build_vocab(small, "joint")
        vocab.save(tmp_path / "v.txt")
        assert Vocab.load(tmp_path / "v.txt").itos == vocab.itos


class TestIO:
    def test_roundtrip(self, tmp_path, small):
        paths = write_parallel(small, tmp_path / "c")
        back = read_prefix(tmp_path / "c")
        assert back.pairs == small.pairs
        assert back.doc_starts == small.doc_starts
        assert read_annotations(paths["prn"]) == small.annotations

    def test_line_count_mismatch(self, tmp_path):
        (tmp_path / "x.src").write_text("a\nb\nc\n")
        (tmp_path / "x.tgt").write_text("a\nb\n")
        with pytest.raises(ValueError, match="3 lines.*2"):
            read_parallel(tmp_path / "x.src", tmp_path / "x.tgt")

    def test_missing_boundary_file(self, tmp_path):
        (tmp_path / "x.src").write_text("a\nb\n")
        (tmp_path / "x.tgt").write_text("A\nB\n")
        corpus = read_parallel(tmp_path / "x.src", tmp_path / "x.tgt", tmp_path / "x.docs")
        assert corpus.doc_starts == [0]
        assert corpus.context(1) == ["a"]

    def test_malformed_boundary(self, tmp_path):
        (tmp_path / "x.src").write_text("a\nb\n")
        (tmp_path / "x.tgt").write_text("A\nB\n")
        (tmp_path / "x.docs").write_text("0\nfoo\n")
        with pytest.raises(ValueError, match="x.docs:2"):
            read_parallel(tmp_path / "x.src", tmp_path / "x.tgt", tmp_path / "x.docs")
