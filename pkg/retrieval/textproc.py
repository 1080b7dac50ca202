"""
Text processing: tokenization, vocabularies and bag-of-words vectors.
"""

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyVocabularyError, FormatError

UNK = "<unk>"
DEFAULT_MIN_COUNT = 5
STOPWORDS_PATH = Path(__file__).resolve().parent / "resources" / "stopwords.txt"

_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class TokenSeq:
    """Ordered lowercase tokens of one sentence"""

    tokens: Tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def reversed(self) -> "TokenSeq":
        return TokenSeq(self.tokens[::-1])

    def joined(self) -> str:
        return " ".join(self.tokens)


def tokenize(text: str) -> TokenSeq:
    """Lowercase and split on any non-alphanumeric character"""
    return TokenSeq(tuple(t for t in _SPLIT.split(text.lower()) if t))


@dataclass(frozen=True)
class Sentence:
    """A caption or query with its id; the id keys precomputed encodings"""

    sentence_id: str
    text: str
    tokens: TokenSeq

    @classmethod
    def from_text(cls, sentence_id: str, text: str) -> "Sentence":
        return cls(sentence_id, text, tokenize(text))


def load_stopwords(path: Optional[Path] = None) -> FrozenSet[str]:
    path = Path(path) if path else STOPWORDS_PATH
    with open(path, "r", encoding="utf-8") as f:
        return frozenset(line.strip() for line in f if line.strip())


@dataclass(frozen=True)
class SparseBow:
    """(index, count) pairs of a BoW vector; densified at projection time"""

    indices: Tuple[int, ...]
    counts: Tuple[int, ...]
    size: int

    def to_dense(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros(self.size, dtype=dtype)
        if self.indices:
            out[list(self.indices)] = self.counts
        return out

    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class Vocabulary:
    word2idx: Dict[str, int]
    word2count: Dict[str, int]
    includes_stopwords: bool = False
    special_tokens: Tuple[str, ...] = ()
    _idx2word: List[str] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        words = [None] * len(self.word2idx)
        for word, idx in self.word2idx.items():
            if idx < 0 or idx >= len(words) or words[idx] is not None:
                raise FormatError(f"Vocabulary indices are not 0..{len(words) - 1} without gaps")
            words[idx] = word
        object.__setattr__(self, "_idx2word", words)

    @property
    def size(self) -> int:
        return len(self.word2idx)

    @property
    def for_sequential(self) -> bool:
        return UNK in self.special_tokens

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self.word2idx

    def index(self, word: str) -> Optional[int]:
        return self.word2idx.get(word)

    def word(self, idx: int) -> str:
        return self._idx2word[idx]

    def words(self) -> List[str]:
        return list(self._idx2word)

    def encode_ids(self, s: TokenSeq) -> List[int]:
        """Token indices for sequential encoders; OOV maps to <unk>"""
        unk = self.word2idx[UNK]
        return [self.word2idx.get(tok, unk) for tok in s]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"{self.size}\n")
            for idx, word in enumerate(self._idx2word):
                f.write(f"{word}\t{idx}\t{self.word2count.get(word, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines:
            raise FormatError(f"{path}: empty vocabulary file")
        try:
            m = int(lines[0])
        except ValueError:
            raise FormatError(f"{path}: header must be the vocabulary size, got {lines[0]!r}")
        word2idx, word2count = {}, {}
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected word<TAB>index<TAB>count")
            word, idx, count = parts[0], int(parts[1]), int(parts[2])
            word2idx[word] = idx
            word2count[word] = count
        if len(word2idx) != m:
            raise FormatError(f"{path}: header declares {m} words, found {len(word2idx)}")
        specials = tuple(w for w in sorted(word2idx, key=word2idx.get)
                         if w.startswith("<") and w.endswith(">") and word2count[w] == 0)
        return cls(word2idx, word2count, includes_stopwords=UNK in specials, special_tokens=specials)


def build_vocab(corpus: Iterable[TokenSeq], min_count: int = DEFAULT_MIN_COUNT,
                for_sequential: bool = False,
                stopwords: Optional[FrozenSet[str]] = None) -> Vocabulary:
    """
    Words with frequency >= min_count, most frequent first.
    The BoW vocabulary drops stopwords; the sequential one keeps them and
    prepends <unk>.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    if stopwords is None:
        stopwords = load_stopwords()

    counts = Counter()
    for s in corpus:
        counts.update(s.tokens)

    kept = [(w, c) for w, c in counts.items()
            if c >= min_count and (for_sequential or w not in stopwords)]
    if not kept:
        raise EmptyVocabularyError(
            f"No token reaches min_count={min_count}; the corpus is unusable for this vocabulary")
    kept.sort(key=lambda wc: (-wc[1], wc[0]))

    specials: Tuple[str, ...] = (UNK,) if for_sequential else ()
    word2idx = {tok: i for i, tok in enumerate(specials)}
    word2count = {tok: 0 for tok in specials}
    for word, count in kept:
        word2idx[word] = len(word2idx)
        word2count[word] = count
    return Vocabulary(word2idx, word2count, includes_stopwords=for_sequential, special_tokens=specials)


def encode_bow(s: Sequence[str], vocab: Vocabulary) -> SparseBow:
    """c(s, j) for every vocabulary word j; OOV tokens contribute nothing"""
    counts = Counter(idx for idx in (vocab.index(tok) for tok in s) if idx is not None)
    indices = tuple(sorted(counts))
    return SparseBow(indices, tuple(counts[i] for i in indices), vocab.size)
