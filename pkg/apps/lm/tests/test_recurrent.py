"""
Tests for the recurrent LSTM baseline and segmented BPTT.
"""
import numpy as np
import pytest

from apps.lm.corpus import EOS_ID, BoundaryMode, Vocabulary, corpus_from_lines
from apps.lm.evaluation import perplexity
from apps.lm.exceptions import ConfigValidationError, EmptyCorpusError, ShapeError
from apps.lm.nn_core import OptimizerConfig, OptimizerKind, numerical_gradient, relative_error
from apps.lm.recurrent import (
    RecurrentConfig,
    RecurrentNetwork,
    StatePolicy,
    evaluate_recurrent,
    plan_segments,
    shifted_inputs,
    train_recurrent,
)

from .helpers import GRADIENT_FLOOR, GRADIENT_TOLERANCE, store_gradient_errors

pytestmark = pytest.mark.unit

VOCAB_SIZE = 7


def small_config(**overrides):
    values = dict(dim_embed=3, dim_state=4, init_stddev=0.5, segment_length=3, batch_size=2, seed=5)
    values.update(overrides)
    return RecurrentConfig(**values)


def corpus_of(token_count, vocab):
    """Each empty line contributes a lone </s>."""
    return corpus_from_lines([""] * token_count, vocab, BoundaryMode.STRADDLING)


class TestSegmentPlan:
    """Tests for plan_segments."""

    def test_exact_fit(self, tiny_vocab):
        plan = plan_segments(corpus_of(100, tiny_vocab), segment_length=10, batch_size=2)

        assert plan.stream_length == 50
        assert plan.num_segments == 5
        assert plan.dropped == 0

    def test_drops_remainder(self, tiny_vocab):
        """Test that 101 tokens in 2 streams drop the last token."""
        plan = plan_segments(corpus_of(101, tiny_vocab), segment_length=10, batch_size=2)

        assert plan.dropped == 1
        assert plan.num_segments == 5

    def test_short_final_segment(self, tiny_vocab):
        plan = plan_segments(corpus_of(22, tiny_vocab), segment_length=4, batch_size=2)

        lengths = [inputs.shape[1] for inputs, _ in plan.segments()]

        assert lengths == [4, 4, 3]

    def test_inputs_are_previous_tokens(self, tiny_corpus):
        """Test that each input is the token before its target, starting from </s>."""
        plan = plan_segments(tiny_corpus, segment_length=5, batch_size=2)
        tokens = np.array(tiny_corpus.tokens())

        assert plan.inputs[0, 0] == EOS_ID
        np.testing.assert_array_equal(plan.targets.reshape(-1), tokens)
        np.testing.assert_array_equal(plan.inputs.reshape(-1)[1:], tokens[:-1])

    def test_shifted_inputs(self):
        np.testing.assert_array_equal(shifted_inputs(np.array([4, 5, 1])), [EOS_ID, 4, 5])

    def test_too_few_tokens(self, tiny_vocab):
        with pytest.raises(EmptyCorpusError):
            plan_segments(corpus_of(3, tiny_vocab), segment_length=2, batch_size=4)

    @pytest.mark.parametrize("segment_length, batch_size", [(0, 2), (2, 0)])
    def test_invalid_sizes(self, tiny_corpus, segment_length, batch_size):
        with pytest.raises(ConfigValidationError):
            plan_segments(tiny_corpus, segment_length, batch_size)


class TestBPTT:
    """Tests for the truncated training step."""

    @pytest.fixture
    def segments(self, rng):
        inputs = rng.integers(0, VOCAB_SIZE, size=(2, 6))
        targets = rng.integers(0, VOCAB_SIZE, size=(2, 6))
        return inputs, targets

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("layers", [1, 2])
    def test_gradient_from_zero_state(self, segments, seed, layers):
        inputs, targets = segments
        model = RecurrentNetwork(small_config(layers=layers, seed=seed), VOCAB_SIZE)
        states = model.initial_states(2)

        def loss(backward):
            if backward:
                return model.bptt_train_step(inputs, targets, states).loss
            return model.segment_loss(inputs, targets, states)

        errors = store_gradient_errors(loss, model.store)

        assert max(errors.values()) < GRADIENT_TOLERANCE, errors

    @pytest.mark.parametrize("seed", range(5))
    def test_truncation_holds_carried_state_constant(self, segments, seed):
        """
        Test that the second segment's gradient treats the carried state as a constant.
        """
        inputs, targets = segments
        model = RecurrentNetwork(small_config(layers=2, dim_proj=2, seed=seed), VOCAB_SIZE)
        first = model.bptt_train_step(inputs[:, :3], targets[:, :3], model.initial_states(2))
        carried = first.states
        model.store.zero_grad()

        model.bptt_train_step(inputs[:, 3:], targets[:, 3:], carried)
        analytic = {name: model.store.grad(name).copy() for name in model.store.names}

        for name in model.store.names:
            numeric = numerical_gradient(
                lambda: model.segment_loss(inputs[:, 3:], targets[:, 3:], carried), model.store[name]
            )
            assert relative_error(analytic[name], numeric, GRADIENT_FLOOR) < GRADIENT_TOLERANCE, name

    def test_carried_state_matches_unsegmented_forward(self, segments):
        """Test that two carried segments reproduce the loss of one long segment."""
        inputs, targets = segments
        model = RecurrentNetwork(small_config(), VOCAB_SIZE)
        states = model.initial_states(2)

        first = model.bptt_train_step(inputs[:, :3], targets[:, :3], states)
        second = model.segment_loss(inputs[:, 3:], targets[:, 3:], first.states)

        whole = model.segment_loss(inputs, targets, states)
        assert (first.loss + second) / 2 == pytest.approx(whole, rel=1e-12)

    def test_returned_states_are_copies(self, segments):
        inputs, targets = segments
        model = RecurrentNetwork(small_config(), VOCAB_SIZE)

        result = model.bptt_train_step(inputs, targets, model.initial_states(2))
        snapshot = [(cell.copy(), hidden.copy()) for cell, hidden in result.states]
        model.bptt_train_step(inputs, targets, result.states)

        for (cell, hidden), (saved_cell, saved_hidden) in zip(result.states, snapshot):
            np.testing.assert_array_equal(cell, saved_cell)
            np.testing.assert_array_equal(hidden, saved_hidden)

    def test_state_shape_mismatch(self, segments):
        inputs, targets = segments
        model = RecurrentNetwork(small_config(), VOCAB_SIZE)

        with pytest.raises(ShapeError):
            model.bptt_train_step(inputs, targets, model.initial_states(3))


class TestEvaluation:
    """Tests for single-stream evaluation."""

    @pytest.fixture
    def model(self, tiny_vocab):
        return RecurrentNetwork(small_config(), tiny_vocab.size)

    @pytest.mark.parametrize("chunk_length", [1, 2, 5, 100])
    def test_chunking_does_not_change_scores(self, model, tiny_corpus, chunk_length):
        tokens = np.array(tiny_corpus.tokens())

        expected = model.token_log_probs(tokens, chunk_length=len(tokens))

        np.testing.assert_allclose(model.token_log_probs(tokens, chunk_length=chunk_length), expected, rtol=1e-9)

    def test_reset_makes_sentences_independent(self, model, tiny_vocab):
        """Test that with resets a sentence scores the same wherever it appears."""
        alone = corpus_from_lines(["a c"], tiny_vocab)
        after = corpus_from_lines(["b b c", "a c"], tiny_vocab)

        alone_scores = model.token_log_probs(np.array(alone.tokens()), StatePolicy.RESET_AT_SENTENCE_START)
        after_scores = model.token_log_probs(np.array(after.tokens()), StatePolicy.RESET_AT_SENTENCE_START)
        carried_scores = model.token_log_probs(np.array(after.tokens()), StatePolicy.CARRY_FOREVER)

        np.testing.assert_allclose(after_scores[-3:], alone_scores, rtol=1e-12)
        assert not np.allclose(carried_scores[-3:], alone_scores)

    @pytest.mark.parametrize("line", ["a", "a b c"])
    def test_single_sentence_ignores_policy(self, model, tiny_vocab, line):
        """Test that a lone sentence starts from the zero state under either policy."""
        tokens = np.array(corpus_from_lines([line], tiny_vocab).tokens())

        carried = model.token_log_probs(tokens, StatePolicy.CARRY_FOREVER)
        reset = model.token_log_probs(tokens, StatePolicy.RESET_AT_SENTENCE_START)

        np.testing.assert_allclose(carried, reset, rtol=1e-12)

    def test_report(self, model, tiny_corpus):
        report = evaluate_recurrent(model, tiny_corpus)

        assert report.token_count == tiny_corpus.token_count
        assert report.perplexity == pytest.approx(np.exp(report.cross_entropy))
        assert StatePolicy.CARRY_FOREVER.value in report.descriptor

    def test_perplexity_dispatches_to_stream(self, model, tiny_corpus):
        assert perplexity(model, tiny_corpus).perplexity == evaluate_recurrent(model, tiny_corpus).perplexity

    def test_empty_corpus(self, model, tiny_vocab):
        with pytest.raises(EmptyCorpusError):
            evaluate_recurrent(model, corpus_from_lines([], tiny_vocab))

    def test_save_and_load(self, model, tiny_corpus, tmp_path):
        path = tmp_path / "recurrent.ngf"
        model.save(path)

        loaded = RecurrentNetwork.load(path)

        assert loaded.config == model.config
        assert evaluate_recurrent(loaded, tiny_corpus).perplexity == evaluate_recurrent(model, tiny_corpus).perplexity


@pytest.mark.slow
class TestTraining:
    def test_learns_repetitive_text(self, tmp_path):
        """Test that a few epochs on a periodic stream beat the uniform perplexity."""
        vocab = Vocabulary.from_words(["x", "y", "z"])
        corpus = corpus_from_lines(["x y z"] * 30, vocab, BoundaryMode.STRADDLING)
        config = small_config(
            dim_state=8,
            segment_length=8,
            batch_size=4,
            epochs=6,
            optimizer=OptimizerConfig(OptimizerKind.ADAGRAD, 0.3),
        )

        result = train_recurrent(config, vocab, corpus, corpus, log_path=tmp_path / "log.jsonl")

        assert result.best_dev_ppl < vocab.size
        assert result.best_dev_ppl == min(record.dev_ppl for record in result.history)
        assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 6

    def test_deterministic_given_seed(self, tiny_vocab, tiny_corpus):
        config = small_config(epochs=2, keep_prob=0.7)

        first = train_recurrent(config, tiny_vocab, tiny_corpus, tiny_corpus).model.store
        second = train_recurrent(config, tiny_vocab, tiny_corpus, tiny_corpus).model.store

        for name in first.names:
            np.testing.assert_array_equal(first[name], second[name])

    def test_empty_dev_corpus(self, tiny_vocab, tiny_corpus):
        with pytest.raises(EmptyCorpusError):
            train_recurrent(small_config(), tiny_vocab, tiny_corpus, corpus_from_lines([], tiny_vocab))


def coin_lines(count, seed):
    """Sentences `x w z` whose middle word is a fair coin between a and b."""
    rng = np.random.default_rng(seed)
    return [f"x {'a' if flip else 'b'} z" for flip in rng.integers(2, size=count)]


@pytest.mark.slow
class TestStatePolicies:
    """Tests for how the carried state and the segment length affect trained models."""

    def test_carry_no_worse_on_repeated_sentences(self):
        vocab = Vocabulary.from_words(["x", "y", "z"])
        corpus = corpus_from_lines(["x y z"] * 60, vocab, BoundaryMode.STRADDLING)
        config = small_config(
            dim_state=8,
            segment_length=8,
            batch_size=4,
            epochs=8,
            optimizer=OptimizerConfig(OptimizerKind.ADAGRAD, 0.3),
        )
        model = train_recurrent(config, vocab, corpus, corpus).model

        carried = evaluate_recurrent(model, corpus, StatePolicy.CARRY_FOREVER)
        reset = evaluate_recurrent(model, corpus, StatePolicy.RESET_AT_SENTENCE_START)

        assert carried.perplexity <= 1.05 * reset.perplexity

    def test_segment_length_barely_matters(self):
        """Test that cutting BPTT segments from 35 to 4 tokens moves dev perplexity by under 10%."""
        vocab = Vocabulary.from_words(["x", "a", "b", "z"])
        train_corpus = corpus_from_lines(coin_lines(300, seed=1), vocab, BoundaryMode.STRADDLING)
        dev_corpus = corpus_from_lines(coin_lines(100, seed=2), vocab, BoundaryMode.STRADDLING)
        ppl = {}
        for segment_length in (35, 4):
            config = small_config(
                dim_embed=6,
                dim_state=8,
                segment_length=segment_length,
                batch_size=4,
                epochs=30,
                optimizer=OptimizerConfig(OptimizerKind.ADAGRAD, 0.3),
            )
            ppl[segment_length] = train_recurrent(config, vocab, train_corpus, dev_corpus).best_dev_ppl

        assert abs(ppl[4] - ppl[35]) < 0.1 * ppl[35]
