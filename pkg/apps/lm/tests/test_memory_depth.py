"""
Long-dependency behavior: higher-order neural n-grams exploit distant context, back-off models do not.
"""
import numpy as np
import pytest

from apps.lm.backoff import estimate_kn
from apps.lm.corpus import Vocabulary, corpus_from_lines
from apps.lm.evaluation import perplexity
from apps.lm.neural_ngram import NGramModelConfig, train
from apps.lm.ngram_stats import TargetRegime, accumulate, build_targets, extract_windows
from apps.lm.nn_core import OptimizerConfig, OptimizerKind

pytestmark = pytest.mark.slow

SOURCES = [f"s{index}" for index in range(40)]
FILLERS = [f"f{index}" for index in range(6)]
DISTANCE = 7

# Occurs once, after a single context, so every Kneser-Ney level has singletons.
RARE_LINE = "s0 r"


def copy_lines(count, seed):
    """Sentences whose last word repeats the first one, DISTANCE positions later."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(count):
        source = SOURCES[rng.integers(len(SOURCES))]
        middle = [FILLERS[index] for index in rng.integers(len(FILLERS), size=DISTANCE - 1)]
        lines.append(" ".join([source, *middle, source]))
    return lines


@pytest.fixture(scope="module")
def copy_task():
    vocab = Vocabulary.from_words(SOURCES + FILLERS + ["r"])
    train_corpus = corpus_from_lines(copy_lines(2000, seed=1) + [RARE_LINE], vocab)
    dev_corpus = corpus_from_lines(copy_lines(300, seed=2), vocab)
    return vocab, train_corpus, dev_corpus


def lstm_dev_ppl(copy_task, order):
    vocab, train_corpus, dev_corpus = copy_task
    windows = extract_windows(train_corpus, order)
    records = build_targets(accumulate(windows), windows, TargetRegime.ONE_HOT)
    config = NGramModelConfig(
        family="lstm",
        order=order,
        dim_embed=32,
        dim_state=48,
        epochs=15,
        batch_size=32,
        optimizer=OptimizerConfig(OptimizerKind.ADAGRAD, 0.2),
        seed=3,
    )
    return train(config, vocab, records, dev_corpus).best_dev_ppl


def kn_dev_ppl(copy_task, order):
    vocab, train_corpus, dev_corpus = copy_task
    model = estimate_kn(accumulate(extract_windows(train_corpus, order)), vocab, order)
    return perplexity(model, dev_corpus).perplexity


def test_lstm_nine_gram_beats_trigram(copy_task):
    """Test that a 9-gram LSTM reaches the copy source a 3-gram cannot see."""
    trigram = lstm_dev_ppl(copy_task, 3)
    nine_gram = lstm_dev_ppl(copy_task, 9)

    assert nine_gram <= 0.8 * trigram


def test_kneser_ney_saturates(copy_task):
    """Test that back-off smoothing barely gains: the long contexts never repeat."""
    trigram = kn_dev_ppl(copy_task, 3)
    nine_gram = kn_dev_ppl(copy_task, 9)

    assert nine_gram > 0.95 * trigram
