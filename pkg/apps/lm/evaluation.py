"""
Perplexity and cross-entropy for every model kind, and report assembly.

A model is anything exposing `order` and `log_probs(contexts, targets)`
returning natural-log probabilities; recurrent models are evaluated through
their own single-stream pass.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from django.db import models

from .corpus import CorpusStream
from .exceptions import EmptyCorpusError, ZeroProbabilityError
from .ngram_stats import ContextStats, NGramWindow, TargetRecord, extract_windows

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)


class Weighting(models.TextChoices):
    COUNT = "count", "Weighted by context count"
    UNIFORM = "uniform", "Every context weighted equally"


@dataclass
class EvalReport:
    perplexity: float
    cross_entropy: float
    token_count: int
    oov_rate: float
    boundary_mode: str
    descriptor: str
    hit_ratios: Optional[Dict[int, float]] = None

    @property
    def bits(self) -> float:
        return self.cross_entropy / LN2

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["bits"] = self.bits
        if self.hit_ratios is not None:
            data["hit_ratios"] = {str(order): ratio for order, ratio in sorted(self.hit_ratios.items())}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        data = {key: value for key, value in data.items() if key != "bits"}
        if data.get("hit_ratios") is not None:
            data["hit_ratios"] = {int(order): ratio for order, ratio in data["hit_ratios"].items()}
        return cls(**data)

    def to_table(self) -> str:
        rows = [
            ("model", self.descriptor),
            ("perplexity", f"{self.perplexity:.4f}"),
            ("cross-entropy (nats)", f"{self.cross_entropy:.6f}"),
            ("bits/token", f"{self.bits:.6f}"),
            ("tokens", str(self.token_count)),
            ("OOV rate", f"{100.0 * self.oov_rate:.2f}%"),
            ("boundary mode", self.boundary_mode),
        ]
        for order, ratio in sorted((self.hit_ratios or {}).items()):
            rows.append((f"hit ratio {order}-gram", f"{ratio:.2f}%"))
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_json() + "\n")


class UniformModel:
    """P(w|h) = 1/V for every context."""

    def __init__(self, vocab_size: int, order: int = 1):
        self.vocab_size = vocab_size
        self.order = order

    @property
    def descriptor(self) -> str:
        return f"Uniform over {self.vocab_size} words"

    def log_probs(self, contexts: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return np.full(len(targets), -math.log(self.vocab_size), dtype=np.float64)


def _checked(log_probs: np.ndarray) -> np.ndarray:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    bad = ~np.isfinite(log_probs) | (log_probs > 1e-12)
    if np.any(bad):
        position = int(np.argmax(bad))
        raise ZeroProbabilityError(
            f"Model assigned probability {math.exp(min(log_probs[position], 700.0)):.3g}",
            position,
        )
    return log_probs


def report_from_log_probs(
    log_probs: Sequence[float],
    corpus: CorpusStream,
    descriptor: str,
    hit_ratios: Optional[Dict[int, float]] = None,
) -> EvalReport:
    """
    Assemble a report from one natural-log probability per corpus token.

    Raises:
        ZeroProbabilityError: Naming the first token with non-positive probability
    """
    log_probs = _checked(log_probs)
    count = len(log_probs)
    if count == 0:
        raise EmptyCorpusError("Cannot evaluate an empty corpus")
    entropy = -math.fsum(log_probs) / count
    report = EvalReport(
        perplexity=math.exp(entropy),
        cross_entropy=entropy,
        token_count=count,
        oov_rate=corpus.oov_count / corpus.token_count,
        boundary_mode=str(corpus.boundary_mode),
        descriptor=descriptor,
        hit_ratios=hit_ratios,
    )
    logger.info(f"{descriptor}: PPL {report.perplexity:.3f} over {count} tokens")
    return report


def _window_arrays(windows: Sequence[NGramWindow], order: int):
    contexts = np.array([window.context for window in windows], dtype=np.int64).reshape(len(windows), order - 1)
    targets = np.array([window.target for window in windows], dtype=np.int64)
    return contexts, targets


def perplexity(model, corpus: CorpusStream, hit_ratios: Optional[Dict[int, float]] = None) -> EvalReport:
    """
    PPL = exp(-1/N sum ln P(w_k | h_k)) with N counting </s> and <unk> targets.

    Contexts follow the corpus boundary mode.
    """
    if corpus.token_count == 0:
        raise EmptyCorpusError("Cannot evaluate an empty corpus")
    if hasattr(model, "token_log_probs"):
        from .recurrent import evaluate_recurrent

        report = evaluate_recurrent(model, corpus)
        report.hit_ratios = hit_ratios
        return report

    windows = extract_windows(corpus, model.order)
    contexts, targets = _window_arrays(windows, model.order)
    log_probs = model.log_probs(contexts, targets)
    return report_from_log_probs(log_probs, corpus, getattr(model, "descriptor", type(model).__name__), hit_ratios)


def _weighted_entropy(model, order: int, items: Iterable, weighting: str) -> float:
    """
    items yield (context, [(word, mass)], context_weight); returns nats per unit weight.
    """
    contexts: List[tuple] = []
    targets: List[int] = []
    masses: List[float] = []
    totals = 0.0
    for context, payload, weight in items:
        scale = weight if weighting == Weighting.COUNT else 1.0
        totals += scale
        for word, mass in payload:
            contexts.append(context)
            targets.append(word)
            masses.append(scale * mass)
    if totals == 0:
        raise EmptyCorpusError("No contexts to evaluate")
    context_array = np.array(contexts, dtype=np.int64).reshape(len(contexts), order - 1)
    log_probs = _checked(model.log_probs(context_array, np.array(targets, dtype=np.int64)))
    return -math.fsum(mass * log_prob for mass, log_prob in zip(masses, log_probs)) / totals


def cross_entropy(
    model,
    data: Union[CorpusStream, ContextStats, Sequence[NGramWindow], Sequence[TargetRecord]],
    weighting: str = Weighting.COUNT,
) -> float:
    """
    Cross-entropy in nats per token.

    Args:
        model: Any model with `order` and `log_probs`
        data: A corpus or raw windows (one-hot path), ContextStats of the
            model's order (multinomial path, sum_h count(h) sum_w f(w|h)),
            or TargetRecords of any regime
        weighting: count weights contexts by count(h) (or record weight);
            uniform gives every context the same weight

    Raises:
        ZeroProbabilityError: If the model assigns a non-positive probability
    """
    weighting = Weighting(weighting)
    order = model.order

    if isinstance(data, CorpusStream):
        if data.token_count == 0:
            raise EmptyCorpusError("Cannot evaluate an empty corpus")
        data = extract_windows(data, order)

    if isinstance(data, ContextStats):
        def from_stats():
            for context in data.contexts(order):
                total = data.count(context)
                payload = [(word, count / total) for word, count in sorted(data.successors(context).items())]
                yield context, payload, float(total)

        return _weighted_entropy(model, order, from_stats(), weighting)

    data = list(data)
    if not data:
        raise EmptyCorpusError("No windows or records to evaluate")
    if isinstance(data[0], TargetRecord):
        return _weighted_entropy(
            model, order, ((record.context, record.payload, record.weight) for record in data), weighting
        )

    contexts, targets = _window_arrays(data, order)
    log_probs = _checked(model.log_probs(contexts, targets))
    return -math.fsum(log_probs) / len(log_probs)
