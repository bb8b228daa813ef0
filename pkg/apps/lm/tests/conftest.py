"""
Pytest fixtures for language modeling tests.
"""
import numpy as np
import pytest
from django.core.cache import cache
from faker import Faker

from apps.lm.corpus import Vocabulary, corpus_from_lines

fake = Faker()

CONTENT_WORDS = ["a", "b", "c"]

# Every word has a single-predecessor continuation at each level up to order 5,
# so Kneser-Ney discounts are defined for it.
TINY_LINES = ["a b c", "a c", "a b b c"]


@pytest.fixture(autouse=True)
def clear_cache():
    cache.clear()
    yield
    cache.clear()


@pytest.fixture
def tiny_vocab():
    """Specials plus a, b, c (V=6)."""
    return Vocabulary.from_words(CONTENT_WORDS)


@pytest.fixture
def tiny_corpus(tiny_vocab):
    return corpus_from_lines(TINY_LINES, tiny_vocab)


@pytest.fixture
def random_lines():
    """Generate reproducible random sentences over a small word list."""

    def _generate(count=50, words=None, seed=0, max_length=8):
        Faker.seed(seed)
        words = words or ["the", "cat", "dog", "sat", "ran", "on", "mat", "log"]
        return [
            " ".join(fake.random_elements(elements=words, length=fake.random_int(1, max_length)))
            for _ in range(count)
        ]

    return _generate


@pytest.fixture
def write_lines(tmp_path):
    """Write lines to a file under tmp_path and return its path."""

    def _write(name, lines):
        path = tmp_path / name
        path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)


@pytest.fixture
def experiment_run():
    """Create a pending experiment run."""
    from .factories import ExperimentRunFactory

    return ExperimentRunFactory()


@pytest.fixture
def completed_experiment_run():
    """Create a completed training run with three epochs logged."""
    from apps.lm.models import ExperimentRun

    from .factories import EpochRecordFactory, ExperimentRunFactory

    run = ExperimentRunFactory(
        command="train-nn",
        status=ExperimentRun.Status.COMPLETED,
        total_epochs=3,
        epochs_completed=3,
    )
    for epoch, dev_ppl in enumerate([12.0, 9.5, 10.25], start=1):
        EpochRecordFactory(run=run, epoch=epoch, dev_ppl=dev_ppl)
    return run
