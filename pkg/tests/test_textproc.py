import pytest

from retrieval.errors import EmptyVocabularyError
from retrieval.textproc import UNK, Vocabulary, build_vocab, encode_bow, tokenize


def test_tokenize_lowercases_and_splits_on_punctuation():
    assert tokenize("A man, playing GUITAR!").tokens == ("a", "man", "playing", "guitar")
    assert tokenize("take-off at 9am").tokens == ("take", "off", "at", "9am")


def test_tokenize_empty_text():
    assert tokenize("  ,;  ").length == 0


def test_bow_vocab_drops_rare_words_and_stopwords():
    corpus = [tokenize("the dog runs"), tokenize("the dog sleeps"), tokenize("a cat runs")]
    vocab = build_vocab(corpus, min_count=2)
    assert vocab.words() == ["dog", "runs"]
    assert "the" not in vocab
    assert not vocab.for_sequential


def test_sequential_vocab_keeps_stopwords_and_prepends_unk():
    corpus = [tokenize("the dog runs"), tokenize("the dog sleeps")]
    vocab = build_vocab(corpus, min_count=2, for_sequential=True)
    assert vocab.word(0) == UNK
    assert vocab.words()[1:] == ["dog", "the"]
    assert vocab.encode_ids(tokenize("the zebra")) == [vocab.index("the"), 0]


def test_empty_vocab_is_an_error():
    with pytest.raises(EmptyVocabularyError):
        build_vocab([tokenize("one two")], min_count=5)


def test_encode_bow_counts_in_vocab_tokens():
    vocab = build_vocab([tokenize("dog dog cat")], min_count=1)
    assert vocab.words() == ["dog", "cat"]
    bow = encode_bow(tokenize("dog cat dog bird"), vocab)
    assert bow.to_dense().tolist() == [2.0, 1.0]
    assert bow.total() == 3


def test_encode_bow_all_oov_is_zero():
    vocab = build_vocab([tokenize("dog cat")], min_count=1)
    assert encode_bow(tokenize("zebra"), vocab).to_dense().tolist() == [0.0, 0.0]


def test_vocabulary_file_keeps_indices(tmp_path):
    vocab = build_vocab([tokenize("the dog runs"), tokenize("the dog")], min_count=1, for_sequential=True)
    vocab.save(tmp_path / "vocab.txt")
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded.word2idx == vocab.word2idx
    assert loaded.for_sequential
