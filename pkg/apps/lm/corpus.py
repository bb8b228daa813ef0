"""
Text ingestion, vocabulary construction and sentence-stream assembly.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from django.db import models

from .exceptions import EmptyCorpusError, VocabularyError

logger = logging.getLogger(__name__)

UNK = "<unk>"
EOS = "</s>"
PAD = "<pad>"

# Fixed order of the special symbols at the head of every vocabulary file.
SPECIALS = (UNK, EOS, PAD)
UNK_ID, EOS_ID, PAD_ID = range(len(SPECIALS))


class BoundaryMode(models.TextChoices):
    SENTENCE_INDEPENDENT = "independent", "Sentence independent"
    STRADDLING = "straddle", "Straddling"


@dataclass(frozen=True)
class Vocabulary:
    """
    Closed word <-> id map with the unknown, end-of-sentence and padding symbols.
    """

    id_to_word: Tuple[str, ...]
    word_to_id: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {word: index for index, word in enumerate(self.id_to_word)}
        if len(mapping) != len(self.id_to_word):
            raise VocabularyError("Vocabulary contains duplicate words")
        if tuple(self.id_to_word[: len(SPECIALS)]) != SPECIALS:
            raise VocabularyError(f"Vocabulary must start with {', '.join(SPECIALS)}")
        object.__setattr__(self, "word_to_id", mapping)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        """Create a vocabulary from content words; specials are prepended."""
        return cls(SPECIALS + tuple(word for word in words if word not in SPECIALS))

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    @property
    def unk_id(self) -> int:
        return self.word_to_id[UNK]

    @property
    def eos_id(self) -> int:
        return self.word_to_id[EOS]

    @property
    def pad_id(self) -> int:
        return self.word_to_id[PAD]

    @property
    def predictable_ids(self) -> List[int]:
        """Every id that may appear as a prediction target (all but padding)."""
        return [index for index in range(self.size) if index != self.pad_id]

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def save(self, path) -> None:
        """Write one word per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as handle:
            for word in self.id_to_word:
                handle.write(f"{word}\n")
        logger.info(f"Wrote vocabulary of size {self.size} to {path}")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as handle:
            words = [line.strip() for line in handle if line.strip()]
        if not words:
            raise VocabularyError(f"Vocabulary file {path} is empty")
        return cls(tuple(words))


@dataclass(frozen=True)
class Sentence:
    """Token ids terminated by the end-of-sentence id."""

    ids: Tuple[int, ...]
    oov_count: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass
class CorpusStream:
    """Ordered sentences plus the boundary mode used to form n-gram contexts."""

    sentences: List[Sentence]
    boundary_mode: str = BoundaryMode.SENTENCE_INDEPENDENT

    @property
    def token_count(self) -> int:
        return sum(len(sentence) for sentence in self.sentences)

    @property
    def oov_count(self) -> int:
        return sum(sentence.oov_count for sentence in self.sentences)

    def tokens(self) -> List[int]:
        """All token ids of the stream in order (sentences concatenated)."""
        return [token for sentence in self.sentences for token in sentence.ids]

    def with_mode(self, boundary_mode: str) -> "CorpusStream":
        return CorpusStream(self.sentences, BoundaryMode(boundary_mode))


def _tokenize(line: str) -> List[str]:
    return line.split()


def build_vocabulary(
    training_text: Iterable[str],
    max_size: Optional[int] = None,
    fixed_word_list: Optional[Sequence[str]] = None,
) -> Vocabulary:
    """
    Build a vocabulary from line-per-sentence training text.

    Args:
        training_text: Iterable of sentence lines
        max_size: Number of most frequent content words to keep (None keeps all)
        fixed_word_list: Explicit word list; overrides frequency selection

    Returns:
        Vocabulary with the specials first

    Raises:
        EmptyCorpusError: If the text contains no tokens
        VocabularyError: If the fixed word list contains duplicates
    """
    counts = Counter()
    for line in training_text:
        counts.update(_tokenize(line))

    if not counts:
        raise EmptyCorpusError("Training text is empty")

    if fixed_word_list is not None:
        duplicates = sorted(word for word, count in Counter(fixed_word_list).items() if count > 1)
        if duplicates:
            raise VocabularyError(f"Fixed word list contains duplicates: {', '.join(duplicates)}")
        vocab = Vocabulary.from_words(fixed_word_list)
        logger.info(f"Built vocabulary from fixed word list: V={vocab.size}")
        return vocab

    if max_size is not None and max_size < 1:
        raise VocabularyError("max_size must be a positive integer")

    for special in SPECIALS:
        counts.pop(special, None)

    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    if max_size is not None:
        ranked = ranked[:max_size]

    vocab = Vocabulary.from_words(word for word, _ in ranked)
    logger.info(
        f"Built vocabulary: V={vocab.size} from {len(counts)} distinct words "
        f"({sum(counts.values())} tokens)"
    )
    return vocab


def encode_sentence(line: str, vocab: Vocabulary) -> Sentence:
    """
    Map each whitespace token to its id, or to <unk>, and append </s>.

    Special surface forms in the text are not content words: a literal <unk>
    (common in pre-mapped corpora), </s> or <pad> is counted as out-of-vocabulary.
    """
    ids = []
    oov_count = 0
    for word in _tokenize(line):
        index = vocab.word_to_id.get(word)
        if index is None or word in SPECIALS:
            index = vocab.unk_id
            oov_count += 1
        ids.append(index)
    ids.append(vocab.eos_id)
    return Sentence(tuple(ids), oov_count)


def decode_sentence(sentence: Sentence, vocab: Vocabulary) -> str:
    """Surface form of a sentence without its terminating </s>."""
    return " ".join(vocab.id_to_word[index] for index in sentence.ids[:-1])


def corpus_from_lines(
    lines: Iterable[str],
    vocab: Vocabulary,
    boundary_mode: str = BoundaryMode.SENTENCE_INDEPENDENT,
) -> CorpusStream:
    sentences = [encode_sentence(line.rstrip("\n"), vocab) for line in lines]
    return CorpusStream(sentences, BoundaryMode(boundary_mode))


def load_corpus(
    path,
    vocab: Vocabulary,
    boundary_mode: str = BoundaryMode.SENTENCE_INDEPENDENT,
) -> CorpusStream:
    """
    Read a UTF-8 corpus with one sentence per line.

    Several paths may be given as a list; they are concatenated in order.
    """
    paths = path if isinstance(path, (list, tuple)) else [path]
    lines: List[str] = []
    for item in paths:
        with open(Path(item), encoding="utf-8") as handle:
            lines.extend(handle)

    corpus = corpus_from_lines(lines, vocab, boundary_mode)
    logger.info(
        f"Loaded corpus {', '.join(str(item) for item in paths)}: "
        f"{len(corpus.sentences)} sentences, T={corpus.token_count}, "
        f"OOV={corpus.oov_count}"
    )
    return corpus


def read_lines(path) -> List[str]:
    with open(Path(path), encoding="utf-8") as handle:
        return handle.readlines()


def oov_rate(corpus: CorpusStream, vocab: Optional[Vocabulary] = None) -> float:
    """
    Fraction of tokens (including </s>) that required <unk> mapping.

    Raises:
        EmptyCorpusError: If the corpus has no tokens
    """
    total = corpus.token_count
    if total == 0:
        raise EmptyCorpusError("Cannot compute OOV rate of an empty corpus")
    if vocab is not None:
        limit = vocab.size
        if any(token >= limit for sentence in corpus.sentences for token in sentence.ids):
            raise VocabularyError("Corpus was not encoded against the given vocabulary")
    return corpus.oov_count / total
