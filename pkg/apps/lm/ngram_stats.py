"""
Sliding-window n-gram extraction, sufficient statistics and training targets.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

from django.db import models

from .corpus import PAD_ID, BoundaryMode, CorpusStream
from .exceptions import ContextNotFoundError, EmptyCorpusError, StatsValidationError

logger = logging.getLogger(__name__)

NGram = Tuple[int, ...]


class NGramWindow(NamedTuple):
    """Context h of exactly n-1 ids and the predicted word."""

    context: NGram
    target: int

    @property
    def order(self) -> int:
        return len(self.context) + 1

    def suffix(self, order: int) -> NGram:
        """The order-m n-gram ending at the target (context suffix plus target)."""
        keep = order - 1
        context = self.context[len(self.context) - keep :] if keep else ()
        return context + (self.target,)


class TargetRegime(models.TextChoices):
    ONE_HOT = "onehot", "One-hot"
    MULTINOMIAL = "multinomial", "Multinomial"
    WEIGHTED_MULTINOMIAL = "weighted", "Context-weighted multinomial"


@dataclass(frozen=True)
class TargetRecord:
    """
    One training example.

    For one-hot records the payload holds a single (word, 1.0) pair.
    """

    context: NGram
    regime: str
    payload: Tuple[Tuple[int, float], ...]
    weight: float = 1.0

    @property
    def word_ids(self) -> Tuple[int, ...]:
        return tuple(word for word, _ in self.payload)

    @property
    def probabilities(self) -> Tuple[float, ...]:
        return tuple(prob for _, prob in self.payload)


def iter_windows(
    corpus: CorpusStream, n: int, pad_id: int, initial_history: Optional[Sequence[int]] = None
) -> Iterator[NGramWindow]:
    """
    Yield one window per token of the corpus.

    initial_history seeds a straddling stream with the tokens preceding it
    (used when a corpus is counted in shards).
    """
    if n < 1:
        raise StatsValidationError("n-gram order must be at least 1")

    width = n - 1
    straddle = BoundaryMode(corpus.boundary_mode) == BoundaryMode.STRADDLING
    history: List[int] = [pad_id] * width
    if straddle and initial_history and width:
        history = (history + list(initial_history))[-width:]

    for sentence in corpus.sentences:
        if not straddle:
            history = [pad_id] * width
        for token in sentence.ids:
            context = tuple(history[len(history) - width :]) if width else ()
            yield NGramWindow(context, token)
            if width:
                history.append(token)
                if len(history) > width:
                    del history[0]


def extract_windows(corpus: CorpusStream, n: int, pad_id: int = PAD_ID) -> List[NGramWindow]:
    """
    Extract the order-n windows of a corpus.

    Sentence-independent corpora pad every sentence start; straddling corpora
    pad only before the first token of the stream.
    """
    return list(iter_windows(corpus, n, pad_id))


@dataclass
class ContextStats:
    """
    Exact n-gram counts at all orders 1..n.

    joint[m][h][w] is count(h, w) for contexts h of length m-1; context[m][h]
    is count(h). Lower orders are derived from the suffixes of order-n windows.
    """

    order: int
    joint: Dict[int, Dict[NGram, Counter]] = field(default_factory=dict)
    context: Dict[int, Counter] = field(default_factory=dict)

    def __post_init__(self):
        for m in range(1, self.order + 1):
            self.joint.setdefault(m, defaultdict(Counter))
            self.context.setdefault(m, Counter())

    @property
    def total_windows(self) -> int:
        return sum(self.context[self.order].values()) if self.order else 0

    def add(self, window: NGramWindow, count: int = 1) -> None:
        for m in range(1, self.order + 1):
            gram = window.suffix(m)
            history, word = gram[:-1], gram[-1]
            self.joint[m][history][word] += count
            self.context[m][history] += count

    def add_ngram(self, gram: NGram, count: int) -> None:
        """Add a single order-len(gram) count, leaving other orders untouched."""
        m = len(gram)
        if m < 1 or m > self.order:
            raise StatsValidationError(f"n-gram of order {m} does not fit stats of order {self.order}")
        self.joint[m][gram[:-1]][gram[-1]] += count
        self.context[m][gram[:-1]] += count

    def count(self, history: NGram, word: Optional[int] = None) -> int:
        m = len(history) + 1
        if m > self.order:
            return 0
        if word is None:
            return self.context[m].get(history, 0)
        successors = self.joint[m].get(history)
        return successors.get(word, 0) if successors else 0

    def ngram_count(self, gram: NGram) -> int:
        return self.count(gram[:-1], gram[-1])

    def successors(self, history: NGram) -> Counter:
        """Successor counts count(h, .) for a context h."""
        m = len(history) + 1
        if m > self.order:
            return Counter()
        return self.joint[m].get(history, Counter())

    def relative_frequency(self, history: NGram) -> Dict[int, float]:
        """f(w|h) = count(h, w) / count(h)."""
        total = self.count(history)
        if total == 0:
            raise ContextNotFoundError(f"Context {history} not found in statistics")
        return {word: count / total for word, count in sorted(self.successors(history).items())}

    def contexts(self, order: Optional[int] = None) -> List[NGram]:
        m = self.order if order is None else order
        return sorted(history for history, total in self.context[m].items() if total > 0)

    def ngrams(self, order: int) -> Iterator[Tuple[NGram, int]]:
        for history, successors in self.joint[order].items():
            for word, count in successors.items():
                if count > 0:
                    yield history + (word,), count

    def counts_of_counts(self, order: int, limit: int) -> Dict[int, int]:
        """N_r for r = 1..limit at the given order."""
        histogram = Counter(count for _, count in self.ngrams(order) if count <= limit)
        return {r: histogram.get(r, 0) for r in range(1, limit + 1)}

    def merge(self, other: "ContextStats") -> "ContextStats":
        """Sum two statistics of the same order into a new object."""
        if other.order != self.order:
            raise StatsValidationError(
                f"Cannot merge stats of order {self.order} with order {other.order}"
            )
        merged = ContextStats(self.order)
        for source in (self, other):
            for m in range(1, self.order + 1):
                for history, successors in source.joint[m].items():
                    merged.joint[m][history].update(successors)
                merged.context[m].update(source.context[m])
        return merged

    def __add__(self, other: "ContextStats") -> "ContextStats":
        return self.merge(other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ContextStats) or other.order != self.order:
            return False
        return all(
            dict(self.ngrams(m)) == dict(other.ngrams(m)) for m in range(1, self.order + 1)
        )

    def to_records(self) -> List[Tuple[int, List[int], int]]:
        """(order, ids, count) triples sorted by order then id tuple."""
        return [
            (m, list(gram), count)
            for m in range(1, self.order + 1)
            for gram, count in sorted(self.ngrams(m))
        ]

    @classmethod
    def from_records(cls, order: int, records: Iterable[Sequence]) -> "ContextStats":
        stats = cls(order)
        for _, gram, count in records:
            stats.add_ngram(tuple(gram), int(count))
        return stats

    def save(self, path) -> None:
        """
        Write `order TAB ids TAB count` records sorted by order then id tuple.
        """
        with open(path, "w", encoding="utf-8") as handle:
            for m, gram, count in self.to_records():
                handle.write(f"{m}\t{' '.join(str(index) for index in gram)}\t{count}\n")
        logger.info(f"Wrote order-{self.order} counts ({self.total_windows} windows) to {path}")

    @classmethod
    def load(cls, path) -> "ContextStats":
        records: List[Tuple[NGram, int]] = []
        order = 0
        with open(path, encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise StatsValidationError(f"line {line_number}: expected 3 tab-separated fields")
                try:
                    m = int(parts[0])
                    gram = tuple(int(index) for index in parts[1].split())
                    count = int(parts[2])
                except ValueError as exc:
                    raise StatsValidationError(f"line {line_number}: {exc}") from exc
                if len(gram) != m:
                    raise StatsValidationError(f"line {line_number}: order {m} with {len(gram)} ids")
                order = max(order, m)
                records.append((gram, count))

        stats = cls(order)
        for gram, count in records:
            stats.add_ngram(gram, count)
        return stats


def accumulate(windows: Iterable[NGramWindow], order: Optional[int] = None) -> ContextStats:
    """
    Count all windows at every order 1..n.

    Raises:
        StatsValidationError: If windows of different orders are mixed
    """
    stats: Optional[ContextStats] = ContextStats(order) if order is not None else None
    for window in windows:
        if stats is None:
            stats = ContextStats(window.order)
        elif window.order != stats.order:
            raise StatsValidationError(
                f"Mixed window orders: {window.order} and {stats.order}"
            )
        stats.add(window)
    return stats if stats is not None else ContextStats(1)


def build_targets(
    stats: ContextStats, windows: Sequence[NGramWindow], regime: str
) -> List[TargetRecord]:
    """
    Build training records for one of the three target regimes.

    one_hot yields one record per window; the multinomial regimes yield one
    record per distinct context, in first-occurrence order, carrying f(.|h).

    Raises:
        ContextNotFoundError: If a window context is absent from stats
    """
    regime = TargetRegime(regime)

    if regime == TargetRegime.ONE_HOT:
        records = []
        for window in windows:
            if stats.count(window.context) == 0:
                raise ContextNotFoundError(f"Context {window.context} not found in statistics")
            records.append(TargetRecord(window.context, regime, ((window.target, 1.0),), 1.0))
        return records

    records = []
    seen = set()
    for window in windows:
        if window.context in seen:
            continue
        seen.add(window.context)
        frequencies = stats.relative_frequency(window.context)
        weight = (
            float(stats.count(window.context))
            if regime == TargetRegime.WEIGHTED_MULTINOMIAL
            else 1.0
        )
        records.append(TargetRecord(window.context, regime, tuple(frequencies.items()), weight))

    logger.info(f"Built {len(records)} {regime.label} records from {len(windows)} windows")
    return records


def hit_ratio(
    train_stats: ContextStats, test_windows: Sequence[NGramWindow], include_padded: bool, pad_id: int = PAD_ID
) -> Dict[int, float]:
    """
    Percentage of test m-grams observed verbatim in training, for each order m.

    Raises:
        EmptyCorpusError: If there are no test windows
    """
    if not test_windows:
        raise EmptyCorpusError("Hit ratio needs at least one test window")

    max_order = min(train_stats.order, test_windows[0].order)
    ratios: Dict[int, float] = {}
    for m in range(1, max_order + 1):
        hits = 0
        total = 0
        for window in test_windows:
            gram = window.suffix(m)
            if not include_padded and pad_id in gram:
                continue
            total += 1
            if train_stats.ngram_count(gram) > 0:
                hits += 1
        ratios[m] = 100.0 * hits / total if total else 0.0
    return ratios
