"""
Katz and interpolated Kneser-Ney back-off estimation, lookup and ARPA persistence.

Probabilities are held as natural logs and written as log10 in ARPA files.
"""
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from .corpus import Vocabulary
from .exceptions import ArpaParseError, DiscountError, StatsValidationError, VocabularyError
from .ngram_stats import ContextStats, NGram

logger = logging.getLogger(__name__)

LN10 = math.log(10.0)

# ARPA convention for n-grams that are only ever used as contexts.
CONTEXT_ONLY_LOG10 = -99.0

# Mass reserved for unseen successors when a Katz context would leave none.
KATZ_LEFTOVER_FLOOR = 1e-6

ARPA_PRECISION = 6

Entry = Tuple[float, Optional[float]]


class Smoothing(models.TextChoices):
    KATZ = "katz", "Katz"
    KNESER_NEY = "kneser_ney_interpolated", "Interpolated Kneser-Ney"


def _lookup(levels: List[Dict[NGram, Entry]], history: NGram, word: int) -> float:
    """Back-off recursion over natural-log entries."""
    backoff = 0.0
    while True:
        entry = levels[len(history)].get(history + (word,))
        if entry is not None:
            return backoff + entry[0]
        if not history:
            raise VocabularyError(f"Word id {word} is not covered by the unigram level")
        context = levels[len(history) - 1].get(history)
        if context is not None and context[1] is not None:
            backoff += context[1]
        history = history[1:]


@dataclass
class ArpaModel:
    """
    Back-off model: per level m a map m-gram -> (ln probability, ln back-off weight).
    """

    order: int
    vocab: Vocabulary
    smoothing: str
    levels: List[Dict[NGram, Entry]] = field(default_factory=list)

    def __post_init__(self):
        while len(self.levels) < self.order:
            self.levels.append({})

    def _truncate(self, history: Sequence[int]) -> NGram:
        keep = self.order - 1
        if keep == 0:
            return ()
        history = tuple(history)
        return history[len(history) - keep :] if len(history) > keep else history

    def log_prob(self, history: Sequence[int], word: int) -> float:
        return _lookup(self.levels, self._truncate(history), word)

    def prob(self, history: Sequence[int], word: int) -> float:
        return math.exp(self.log_prob(history, word))

    def log_probs(self, contexts: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Natural-log probabilities for a batch of (context, target) pairs."""
        return np.array(
            [self.log_prob(tuple(context), int(target)) for context, target in zip(contexts, targets)],
            dtype=np.float64,
        )

    @property
    def ngram_counts(self) -> List[int]:
        return [len(level) for level in self.levels]

    @property
    def descriptor(self) -> str:
        return f"{Smoothing(self.smoothing).label} back-off, order {self.order}"

    def save(self, path) -> None:
        """Write the model in ARPA text layout."""
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"# smoothing={Smoothing(self.smoothing).value}\n\n")
            handle.write("\\data\\\n")
            for m, count in enumerate(self.ngram_counts, start=1):
                handle.write(f"ngram {m}={count}\n")
            for m, level in enumerate(self.levels, start=1):
                handle.write(f"\n\\{m}-grams:\n")
                for gram in sorted(level):
                    log_prob, log_bow = level[gram]
                    words = " ".join(self.vocab.id_to_word[index] for index in gram)
                    line = f"{log_prob / LN10:.{ARPA_PRECISION}f}\t{words}"
                    if log_bow is not None and m < self.order:
                        line += f"\t{log_bow / LN10:.{ARPA_PRECISION}f}"
                    handle.write(line + "\n")
            handle.write("\n\\end\\\n")
        logger.info(f"Wrote ARPA model ({self.descriptor}) to {path}: {self.ngram_counts}")

    @classmethod
    def load(cls, path, vocab: Optional[Vocabulary] = None) -> "ArpaModel":
        with open(path, encoding="utf-8") as handle:
            return parse_arpa(handle.readlines(), vocab)


def parse_arpa(lines: Sequence[str], vocab: Optional[Vocabulary] = None) -> ArpaModel:
    """
    Parse ARPA text.

    Without a vocabulary, the unigram section (written in id order) defines one.

    Raises:
        ArpaParseError: On malformed headers, entries or count mismatches
    """
    smoothing = Smoothing.KATZ
    declared: Dict[int, int] = {}
    raw_levels: Dict[int, List[Tuple[float, Tuple[str, ...], Optional[float]]]] = defaultdict(list)
    header_lines: Dict[int, int] = {}
    section = "preamble"
    current = 0

    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if section == "preamble":
            if line.startswith("#") and "smoothing=" in line:
                value = line.split("smoothing=", 1)[1].strip()
                if value not in Smoothing.values:
                    raise ArpaParseError(f"unknown smoothing tag '{value}'", line_number)
                smoothing = Smoothing(value)
            elif line == "\\data\\":
                section = "data"
            continue

        if not line:
            continue

        if line == "\\end\\":
            section = "end"
            break

        if line.startswith("\\"):
            if not (line.endswith("-grams:") and line[1:-7].isdigit()):
                raise ArpaParseError(f"malformed section header '{line}'", line_number)
            current = int(line[1:-7])
            if current not in declared:
                raise ArpaParseError(f"section {current}-grams not declared in \\data\\", line_number)
            if current in header_lines:
                raise ArpaParseError(f"duplicate section {current}-grams", line_number)
            header_lines[current] = line_number
            section = "grams"
            continue

        if section == "data":
            if not line.startswith("ngram ") or "=" not in line:
                raise ArpaParseError(f"malformed count line '{line}'", line_number)
            key, value = line[len("ngram ") :].split("=", 1)
            try:
                declared[int(key)] = int(value)
            except ValueError as exc:
                raise ArpaParseError(f"malformed count line '{line}'", line_number) from exc
            continue

        fields = line.split()
        if len(fields) not in (current + 1, current + 2):
            raise ArpaParseError(f"expected {current} words in {current}-gram entry", line_number)
        try:
            log_prob = float(fields[0])
            log_bow = float(fields[current + 1]) if len(fields) == current + 2 else None
        except ValueError as exc:
            raise ArpaParseError(f"malformed number in '{line}'", line_number) from exc
        raw_levels[current].append((log_prob, tuple(fields[1 : current + 1]), log_bow))

    if section != "end":
        raise ArpaParseError("missing \\end\\ marker", len(lines))
    if not declared:
        raise ArpaParseError("missing \\data\\ section", len(lines))

    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise ArpaParseError("\\data\\ levels are not contiguous", len(lines))
    for m in range(1, order + 1):
        found = len(raw_levels.get(m, []))
        if found != declared[m]:
            raise ArpaParseError(
                f"ngram {m}={declared[m]} declared but {found} entries found",
                header_lines.get(m, len(lines)),
            )

    if vocab is None:
        try:
            vocab = Vocabulary(tuple(words[0] for _, words, _ in raw_levels[1]))
        except VocabularyError as exc:
            raise ArpaParseError(f"cannot derive vocabulary: {exc.detail}", header_lines.get(1)) from exc

    levels: List[Dict[NGram, Entry]] = [dict() for _ in range(order)]
    for m in range(1, order + 1):
        for log_prob, words, log_bow in raw_levels[m]:
            try:
                gram = tuple(vocab.word_to_id[word] for word in words)
            except KeyError as exc:
                raise ArpaParseError(f"word {exc.args[0]} not in vocabulary", header_lines[m]) from exc
            levels[m - 1][gram] = (
                log_prob * LN10,
                log_bow * LN10 if log_bow is not None else None,
            )

    return ArpaModel(order, vocab, smoothing, levels)


def _check_order(stats: ContextStats, order: int) -> None:
    if order < 1:
        raise StatsValidationError("Back-off order must be at least 1")
    if stats.order < order:
        raise StatsValidationError(f"Statistics of order {stats.order} cannot train order {order}")


def _uniform_model(vocab: Vocabulary, smoothing: str) -> ArpaModel:
    predictable = vocab.predictable_ids
    log_uniform = -math.log(len(predictable))
    level = {(word,): (log_uniform, None) for word in predictable}
    level[(vocab.pad_id,)] = (CONTEXT_ONLY_LOG10 * LN10, None)
    logger.warning("No training windows; writing a uniform unigram model")
    return ArpaModel(1, vocab, smoothing, [level])


def _attach_backoff(
    levels: List[Dict[NGram, Entry]], history: NGram, log_bow: float, pad_id: int
) -> None:
    """Store ln back-off weight on the context n-gram, inserting it when absent."""
    level = levels[len(history) - 1]
    entry = level.get(history)
    if entry is None:
        if history[-1] == pad_id:
            log_prob = CONTEXT_ONLY_LOG10 * LN10
        else:
            log_prob = _lookup(levels, history[:-1], history[-1])
        entry = (log_prob, None)
    level[history] = (entry[0], log_bow)


def katz_discounts(stats: ContextStats, m: int, gt_max: int) -> Dict[int, float]:
    """
    Katz discount ratios d_r for r = 1..gt_max at order m.

    Counts whose counts-of-counts are degenerate are left undiscounted.
    """
    coc = stats.counts_of_counts(m, gt_max + 1)
    n1 = coc[1]
    common = (gt_max + 1) * coc[gt_max + 1] / n1 if n1 else 0.0
    discounts: Dict[int, float] = {}
    degenerate = []
    for r in range(1, gt_max + 1):
        if n1 == 0 or common >= 1.0 or coc[r] == 0 or coc[r + 1] == 0:
            discounts[r] = 1.0
            degenerate.append(r)
            continue
        turing = (r + 1) * coc[r + 1] / (r * coc[r])
        ratio = (turing - common) / (1.0 - common)
        if not 0.0 < ratio <= 1.0:
            ratio = 1.0
            degenerate.append(r)
        discounts[r] = ratio
    if degenerate:
        logger.warning(
            f"Katz order {m}: degenerate counts-of-counts {coc}; "
            f"no discounting for counts {degenerate}"
        )
    return discounts


def estimate_katz(
    stats: ContextStats, vocab: Vocabulary, order: int, gt_max: int = 5
) -> ArpaModel:
    """
    Katz back-off with Good-Turing discounting of counts 1..gt_max.

    Args:
        stats: Training statistics of order >= order
        vocab: Vocabulary; the unigram level covers every predictable word
        order: Model order n
        gt_max: Counts above this threshold are trusted

    Returns:
        ArpaModel tagged katz
    """
    _check_order(stats, order)
    if stats.total_windows == 0:
        return _uniform_model(vocab, Smoothing.KATZ)

    predictable = vocab.predictable_ids
    levels: List[Dict[NGram, Entry]] = [dict() for _ in range(order)]

    discounts = katz_discounts(stats, 1, gt_max)
    total = stats.count(())
    seen = stats.successors(())
    probs = {
        word: discounts.get(count, 1.0) * count / total for word, count in seen.items() if count > 0
    }
    unseen = [word for word in predictable if word not in probs]
    leftover = 1.0 - sum(probs.values())
    if unseen:
        if leftover < KATZ_LEFTOVER_FLOOR:
            scale = (1.0 - KATZ_LEFTOVER_FLOOR) / sum(probs.values())
            probs = {word: prob * scale for word, prob in probs.items()}
            leftover = KATZ_LEFTOVER_FLOOR
        for word in unseen:
            probs[word] = leftover / len(unseen)
    else:
        norm = sum(probs.values())
        probs = {word: prob / norm for word, prob in probs.items()}
    for word, prob in probs.items():
        levels[0][(word,)] = (math.log(prob), None)
    levels[0][(vocab.pad_id,)] = (CONTEXT_ONLY_LOG10 * LN10, None)

    for m in range(2, order + 1):
        discounts = katz_discounts(stats, m, gt_max)
        for history in sorted(stats.joint[m]):
            successors = {word: count for word, count in stats.joint[m][history].items() if count > 0}
            context_total = sum(successors.values())
            if context_total == 0:
                continue
            probs = {
                word: discounts.get(count, 1.0) * count / context_total
                for word, count in successors.items()
            }
            seen_mass = sum(probs.values())

            if len(successors) >= len(predictable):
                probs = {word: prob / seen_mass for word, prob in probs.items()}
                log_bow = 0.0
            else:
                if 1.0 - seen_mass < KATZ_LEFTOVER_FLOOR:
                    scale = (1.0 - KATZ_LEFTOVER_FLOOR) / seen_mass
                    probs = {word: prob * scale for word, prob in probs.items()}
                    seen_mass = 1.0 - KATZ_LEFTOVER_FLOOR
                lower_mass = sum(math.exp(_lookup(levels, history[1:], word)) for word in successors)
                log_bow = math.log(1.0 - seen_mass) - math.log(max(1.0 - lower_mass, 1e-300))

            for word, prob in probs.items():
                levels[m - 1][history + (word,)] = (math.log(prob), None)
            _attach_backoff(levels, history, log_bow, vocab.pad_id)

    model = ArpaModel(order, vocab, Smoothing.KATZ, levels)
    logger.info(f"Estimated Katz model of order {order}: {model.ngram_counts}")
    return model


def _continuation_counts(stats: ContextStats, order: int) -> Dict[int, Dict[NGram, Counter]]:
    """
    Modified counts per level: raw counts at the top, left-continuation counts below.
    """
    adjusted: Dict[int, Dict[NGram, Counter]] = {
        order: {
            history: Counter({word: count for word, count in successors.items() if count > 0})
            for history, successors in stats.joint[order].items()
        }
    }
    for m in range(order - 1, 0, -1):
        level: Dict[NGram, Counter] = defaultdict(Counter)
        for gram, _ in stats.ngrams(m + 1):
            suffix = gram[1:]
            level[suffix[:-1]][suffix[-1]] += 1
        adjusted[m] = dict(level)
    return adjusted


def kneser_ney_discount(counts: Dict[NGram, Counter], m: int) -> float:
    """
    D = n1 / (n1 + 2 n2) from the counts-of-counts of one level.

    Raises:
        DiscountError: If the level has no singletons
    """
    histogram = Counter(count for successors in counts.values() for count in successors.values())
    n1, n2 = histogram.get(1, 0), histogram.get(2, 0)
    if n1 + 2 * n2 == 0 or n1 == 0:
        raise DiscountError(
            f"Kneser-Ney order {m}: counts-of-counts n1={n1}, n2={n2} give no usable "
            "discount; use a smaller order or more data"
        )
    return n1 / (n1 + 2 * n2)


def estimate_kn(stats: ContextStats, vocab: Vocabulary, order: int) -> ArpaModel:
    """
    Interpolated Kneser-Ney with one absolute discount per level.

    The interpolation is folded into ARPA form: stored n-grams hold the full
    interpolated probability and each context carries gamma(h) as its back-off.
    """
    _check_order(stats, order)
    if stats.total_windows == 0:
        return _uniform_model(vocab, Smoothing.KNESER_NEY)

    predictable = vocab.predictable_ids
    adjusted = _continuation_counts(stats, order)
    discounts = {m: kneser_ney_discount(adjusted[m], m) for m in range(1, order + 1)}
    logger.info(f"Kneser-Ney discounts: {discounts}")

    levels: List[Dict[NGram, Entry]] = [dict() for _ in range(order)]

    unigrams = adjusted[1].get((), Counter())
    total = sum(unigrams.values())
    discount = discounts[1]
    gamma = discount * len(unigrams) / total
    for word in predictable:
        prob = max(unigrams.get(word, 0) - discount, 0.0) / total + gamma / len(predictable)
        levels[0][(word,)] = (math.log(prob), None)
    levels[0][(vocab.pad_id,)] = (CONTEXT_ONLY_LOG10 * LN10, None)

    for m in range(2, order + 1):
        discount = discounts[m]
        for history in sorted(adjusted[m]):
            successors = adjusted[m][history]
            context_total = sum(successors.values())
            if context_total == 0:
                continue
            gamma = discount * len(successors) / context_total
            for word, count in successors.items():
                lower = math.exp(_lookup(levels, history[1:], word))
                prob = max(count - discount, 0.0) / context_total + gamma * lower
                levels[m - 1][history + (word,)] = (math.log(prob), None)
            _attach_backoff(levels, history, math.log(gamma), vocab.pad_id)

    model = ArpaModel(order, vocab, Smoothing.KNESER_NEY, levels)
    logger.info(f"Estimated Kneser-Ney model of order {order}: {model.ngram_counts}")
    return model


def backoff_prob(model: ArpaModel, history: Sequence[int], word: int) -> float:
    """P(w|h) by the standard back-off recursion; strictly positive over the vocabulary."""
    return model.prob(history, word)
