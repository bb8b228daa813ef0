"""
Tests for the pipeline service and experiment-run tracking.
"""
import json

import pytest
from django.core.cache import cache

from apps.lm.backoff import ArpaModel, estimate_kn
from apps.lm.corpus import BoundaryMode, Vocabulary, corpus_from_lines
from apps.lm.evaluation import perplexity
from apps.lm.exceptions import ConfigValidationError, RunNotFoundError, StatsValidationError
from apps.lm.models import ExperimentRun
from apps.lm.neural_ngram import EpochLog, NGramNetwork
from apps.lm.ngram_stats import ContextStats, accumulate, extract_windows
from apps.lm.recurrent import RecurrentNetwork
from apps.lm.serializers import validate_run_config
from apps.lm.services import ExperimentService, PipelineService, training_log_path

from .conftest import TINY_LINES


@pytest.fixture
def workspace(tmp_path, write_lines):
    """Training, dev and test text plus a built vocabulary."""
    paths = {
        "train": write_lines("train.txt", TINY_LINES),
        "dev": write_lines("dev.txt", ["a b c", "a c"]),
        "test": write_lines("test.txt", ["a b c", "b c", "a z"]),
        "vocab": tmp_path / "vocab.txt",
    }
    PipelineService.build_vocab(run_config("vocab", train=[str(paths["train"])], output=str(paths["vocab"])))
    return {name: str(path) for name, path in paths.items()}


def run_config(command, **fields):
    return validate_run_config(dict(fields, command=command))


class TestPipelineCounting:
    """Tests for vocabulary and count commands."""

    def test_build_vocab(self, workspace):
        vocab = Vocabulary.load(workspace["vocab"])

        assert vocab.size == 6
        assert "z" not in vocab

    def test_count(self, workspace, tmp_path):
        output = str(tmp_path / "counts.tsv")

        result = PipelineService.count(
            run_config("counts", train=[workspace["train"]], vocab=workspace["vocab"], output=output, order=3)
        )

        assert result["windows"] == 12
        assert result["order"] == 3
        assert ContextStats.load(output).total_windows == 12

    @pytest.mark.parametrize("mode", BoundaryMode.values)
    def test_sharded_counts_match(self, random_lines, mode):
        """Test that counting in shards gives exactly the single-pass counts."""
        lines = random_lines(40, seed=17)
        vocab = Vocabulary.from_words({word for line in lines for word in line.split()})
        corpus = corpus_from_lines(lines, vocab, mode)

        sharded = PipelineService.count_corpus(corpus, 4, workers=3)

        assert sharded == accumulate(extract_windows(corpus, 4), 4)


class TestPipelineBackoff:
    """Tests for back-off training and evaluation."""

    @pytest.fixture
    def arpa_path(self, workspace, tmp_path):
        output = str(tmp_path / "kn.arpa")
        PipelineService.train_backoff(
            run_config(
                "train-backoff",
                train=[workspace["train"]],
                vocab=workspace["vocab"],
                output=output,
                order=3,
                smoothing="kn",
            )
        )
        return output

    def test_train_backoff_from_text(self, arpa_path, workspace):
        """Test that the written model matches in-process estimation."""
        vocab = Vocabulary.load(workspace["vocab"])
        corpus = corpus_from_lines(TINY_LINES, vocab)
        model = ArpaModel.load(arpa_path, vocab)
        expected = estimate_kn(accumulate(extract_windows(corpus, 3)), vocab, 3)

        assert model.smoothing == "kneser_ney_interpolated"
        assert perplexity(model, corpus).perplexity == pytest.approx(perplexity(expected, corpus).perplexity, rel=1e-5)

    def test_train_katz_from_counts(self, workspace, tmp_path):
        counts = str(tmp_path / "counts.tsv")
        PipelineService.count(
            run_config("counts", train=[workspace["train"]], vocab=workspace["vocab"], output=counts, order=2)
        )

        result = PipelineService.train_backoff(
            run_config(
                "train-backoff",
                counts=counts,
                vocab=workspace["vocab"],
                output=str(tmp_path / "katz.arpa"),
                order=2,
                smoothing="katz",
            )
        )

        assert result["smoothing"] == "katz"
        assert len(result["ngram_counts"]) == 2

    def test_counts_of_lower_order(self, workspace, tmp_path):
        counts = str(tmp_path / "counts.tsv")
        PipelineService.count(
            run_config("counts", train=[workspace["train"]], vocab=workspace["vocab"], output=counts, order=2)
        )

        with pytest.raises(StatsValidationError):
            PipelineService.train_backoff(
                run_config("train-backoff", counts=counts, vocab=workspace["vocab"], output="x.arpa", order=3)
            )

    def test_evaluate_without_vocab(self, arpa_path, workspace):
        """Test that an ARPA file supplies its own vocabulary."""
        report = PipelineService.evaluate(run_config("eval", model=arpa_path, test=workspace["test"]))

        assert report.token_count == 10
        assert report.oov_rate == pytest.approx(0.1)

    def test_evaluate_with_hit_ratios(self, arpa_path, workspace, tmp_path):
        counts = str(tmp_path / "counts.tsv")
        PipelineService.count(
            run_config("counts", train=[workspace["train"]], vocab=workspace["vocab"], output=counts, order=3)
        )
        report_path = tmp_path / "report.json"

        report = PipelineService.evaluate(
            run_config(
                "eval",
                model=arpa_path,
                test=workspace["test"],
                vocab=workspace["vocab"],
                counts=counts,
                report=str(report_path),
            )
        )

        assert set(report.hit_ratios) == {1, 2, 3}
        assert json.loads(report_path.read_text())["hit_ratios"]["1"] == report.hit_ratios[1]

    def test_hit_ratio_command(self, workspace):
        result = PipelineService.hit_ratio(
            run_config(
                "hit-ratio", train=[workspace["train"]], test=workspace["dev"], vocab=workspace["vocab"], order=3
            )
        )

        assert result["hit_ratios"] == {"1": 100.0, "2": 100.0, "3": 100.0}


@pytest.mark.slow
class TestPipelineNeural:
    """Tests for neural training commands."""

    @pytest.fixture
    def neural_fields(self, workspace):
        return dict(
            train=[workspace["train"]],
            dev=workspace["dev"],
            vocab=workspace["vocab"],
            dim_embed=4,
            dim_state=5,
            epochs=2,
        )

    def test_train_nn(self, neural_fields, workspace, tmp_path):
        output = str(tmp_path / "ff.ngf")
        epochs = []

        result = PipelineService.train_nn(
            run_config("train-nn", output=output, order=3, family="ff", **neural_fields), on_epoch=epochs.append
        )

        assert isinstance(PipelineService.load_model(output, None), NGramNetwork)
        assert len(training_log_path(output).read_text().splitlines()) == 2
        assert [entry.epoch for entry in epochs] == [1, 2]
        assert result["best_dev_ppl"] == min(entry.dev_ppl for entry in epochs)

        report = PipelineService.evaluate(
            run_config("eval", model=output, test=workspace["test"], vocab=workspace["vocab"])
        )
        assert report.token_count == 10

    def test_neural_eval_requires_vocab(self, neural_fields, workspace, tmp_path):
        output = str(tmp_path / "lstm.ngf")
        PipelineService.train_nn(run_config("train-nn", output=output, order=3, **neural_fields))

        with pytest.raises(ConfigValidationError) as exc_info:
            PipelineService.evaluate(run_config("eval", model=output, test=workspace["test"]))

        assert "vocab" in exc_info.value.errors

    def test_train_recurrent(self, neural_fields, workspace, tmp_path):
        output = str(tmp_path / "recurrent.ngf")

        PipelineService.train_recurrent(
            run_config("train-recurrent", output=output, batch=2, segment_length=3, **neural_fields)
        )

        assert isinstance(PipelineService.load_model(output, None), RecurrentNetwork)
        carried = PipelineService.evaluate(
            run_config("eval", model=output, test=workspace["test"], vocab=workspace["vocab"])
        )
        reset = PipelineService.evaluate(
            run_config("eval", model=output, test=workspace["test"], vocab=workspace["vocab"], reset_at_bos=True)
        )
        assert "carry_forever" in carried.descriptor
        assert "reset_at_sentence_start" in reset.descriptor

    def test_vocabulary_size_mismatch(self, neural_fields, workspace, tmp_path):
        output = str(tmp_path / "ff.ngf")
        PipelineService.train_nn(run_config("train-nn", output=output, order=2, family="ff", **neural_fields))
        other_vocab = tmp_path / "other.txt"
        Vocabulary.from_words(["a", "b"]).save(other_vocab)

        with pytest.raises(ConfigValidationError, match="vocabulary"):
            PipelineService.evaluate(
                run_config("eval", model=output, test=workspace["test"], vocab=str(other_vocab))
            )


@pytest.mark.django_db
class TestExperimentService:
    """Tests for ExperimentService."""

    def test_create_run(self):
        run = ExperimentService.create_run("task-1", "train-nn", {"output": "m.ngf", "epochs": 4}, total_epochs=4)

        assert run.status == ExperimentRun.Status.PENDING
        assert run.output_path == "m.ngf"
        assert run.total_epochs == 4

    def test_get_run_by_task_id_caching(self, experiment_run):
        """Test that run retrieval populates the cache."""
        first = ExperimentService.get_run_by_task_id(experiment_run.task_id)

        assert first.id == experiment_run.id
        assert cache.get(f"{ExperimentService.CACHE_KEY_PREFIX}:{experiment_run.task_id}") is not None

    def test_get_run_not_found(self):
        with pytest.raises(ExperimentRun.DoesNotExist):
            ExperimentService.get_run_by_task_id("missing")

    def test_update_run_status(self, experiment_run):
        processing = ExperimentService.update_run_status(experiment_run.task_id, ExperimentRun.Status.PROCESSING)
        assert processing.started_at is not None

        completed = ExperimentService.update_run_status(
            experiment_run.task_id, ExperimentRun.Status.COMPLETED, result={"best_dev_ppl": 7.5, "best_epoch": 2}
        )

        assert completed.completed_at is not None
        assert completed.best_dev_ppl == 7.5
        assert completed.best_epoch == 2

    def test_update_invalidates_cache(self, experiment_run):
        ExperimentService.get_run_by_task_id(experiment_run.task_id)

        ExperimentService.update_run_status(experiment_run.task_id, ExperimentRun.Status.FAILED, error_message="boom")

        assert cache.get(f"{ExperimentService.CACHE_KEY_PREFIX}:{experiment_run.task_id}") is None
        assert ExperimentService.get_run_by_task_id(experiment_run.task_id).error_message == "boom"

    def test_record_epoch_tracks_best(self):
        ExperimentService.create_run("task-2", "train-nn", {}, total_epochs=3)

        for epoch, dev_ppl in enumerate([20.0, 14.0, 15.0], start=1):
            ExperimentService.record_epoch("task-2", EpochLog(epoch, 3.0, dev_ppl, 0.1))

        run = ExperimentRun.objects.get(task_id="task-2")
        assert run.epochs_completed == 3
        assert run.best_epoch == 2
        assert run.best_dev_ppl == 14.0
        assert run.progress_percentage == 100

    def test_record_epoch_is_idempotent(self):
        ExperimentService.create_run("task-3", "train-nn", {}, total_epochs=2)

        ExperimentService.record_epoch("task-3", EpochLog(1, 3.0, 20.0, 0.1))
        ExperimentService.record_epoch("task-3", EpochLog(1, 2.5, 18.0, 0.1))

        assert ExperimentRun.objects.get(task_id="task-3").epochs.get().dev_ppl == 18.0

    def test_get_run_status(self, completed_experiment_run):
        status = ExperimentService.get_run_status(completed_experiment_run.task_id)

        assert status["command"] == "train-nn"
        assert len(status["epochs"]) == 3

    def test_get_run_status_not_found(self):
        with pytest.raises(RunNotFoundError):
            ExperimentService.get_run_status("missing")

    def test_get_statistics(self, completed_experiment_run, experiment_run):
        stats = ExperimentService.get_statistics()

        assert stats["total_runs"] == 2
        assert stats["by_status"] == {"COMPLETED": 1, "PENDING": 1}
        assert stats["best_dev_ppl"] == 9.5
        assert ExperimentService.get_statistics("train-nn")["total_runs"] == 1
