"""
Unit tests for Celery tasks.
"""
from unittest.mock import patch

import pytest
from celery.exceptions import Retry

from apps.lm.models import ExperimentRun
from apps.lm.ngram_stats import ContextStats
from apps.lm.serializers import validate_run_config
from apps.lm.tasks import count_ngram_shard, execute_run

from .conftest import TINY_LINES

pytestmark = pytest.mark.django_db


@pytest.fixture
def backoff_run(tmp_path, write_lines):
    """Validated train-backoff run over the tiny corpus, vocabulary included."""
    train = write_lines("train.txt", TINY_LINES)
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("<unk>\n</s>\n<pad>\na\nb\nc\n", encoding="utf-8")
    return validate_run_config(
        {
            "command": "train-backoff",
            "train": [str(train)],
            "vocab": str(vocab),
            "output": str(tmp_path / "model.arpa"),
            "order": 3,
        }
    )


class TestExecuteRunTask:
    """Tests for execute_run Celery task."""

    def test_execute_run_success(self, backoff_run):
        """Test that the run is created, executed and completed."""
        task_id = "test-task-123"

        result = execute_run.apply(args=[backoff_run], task_id=task_id).result

        assert result["success"] is True
        assert result["task_id"] == task_id
        assert result["status"] == "COMPLETED"
        assert result["result"]["smoothing"] == "kneser_ney_interpolated"

        run = ExperimentRun.objects.get(task_id=task_id)
        assert run.status == ExperimentRun.Status.COMPLETED
        assert run.started_at is not None
        assert run.completed_at is not None
        assert run.result["ngram_counts"] == result["result"]["ngram_counts"]

    def test_execute_run_uses_existing_run(self, backoff_run, experiment_run):
        execute_run.apply(args=[backoff_run], task_id=experiment_run.task_id)

        assert ExperimentRun.objects.count() == 1
        experiment_run.refresh_from_db()
        assert experiment_run.status == ExperimentRun.Status.COMPLETED

    def test_missing_input_is_final(self, backoff_run, tmp_path):
        """Test that a missing file fails the run without retrying."""
        backoff_run["train"] = [str(tmp_path / "missing.txt")]

        with patch("apps.lm.tasks.execute_run.retry") as mock_retry:
            result = execute_run.apply(args=[backoff_run], task_id="test-task-456").result

        assert not mock_retry.called
        assert result["success"] is False
        assert "missing.txt" in result["error"]

    def test_language_model_error_not_retried(self, backoff_run, tmp_path):
        """Test that a malformed vocabulary fails the run without retrying."""
        (tmp_path / "vocab.txt").write_text("a\nb\n", encoding="utf-8")

        with patch("apps.lm.tasks.execute_run.retry") as mock_retry:
            result = execute_run.apply(args=[backoff_run], task_id="test-task-789").result

        assert not mock_retry.called
        assert result["success"] is False
        assert result["status"] == "FAILED"
        run = ExperimentRun.objects.get(task_id="test-task-789")
        assert run.status == ExperimentRun.Status.FAILED
        assert run.error_message

    @patch("apps.lm.tasks.PipelineService.run_command")
    def test_unexpected_error_is_retried(self, mock_run_command, backoff_run):
        """Test that failures outside the toolkit are retried."""
        mock_run_command.side_effect = RuntimeError("worker lost")

        with patch("apps.lm.tasks.execute_run.retry", side_effect=Retry("retry")) as mock_retry:
            with pytest.raises(Retry):
                execute_run.apply(args=[backoff_run], task_id="test-task-retry")

        assert mock_retry.call_count == 1
        run = ExperimentRun.objects.get(task_id="test-task-retry")
        assert run.error_message == "worker lost"

    @patch("apps.lm.tasks.PipelineService.run_command")
    def test_epochs_are_recorded(self, mock_run_command, backoff_run):
        """Test that the epoch callback stores training-log entries."""
        from apps.lm.neural_ngram import EpochLog

        def fake_training(run, on_epoch=None):
            for epoch, dev_ppl in enumerate([30.0, 20.0], start=1):
                on_epoch(EpochLog(epoch, 3.0, dev_ppl, 0.1))
            return {"best_epoch": 2, "best_dev_ppl": 20.0}

        mock_run_command.side_effect = fake_training

        execute_run.apply(args=[dict(backoff_run, command="train-nn", epochs=2)], task_id="test-task-epochs")

        run = ExperimentRun.objects.get(task_id="test-task-epochs")
        assert run.total_epochs == 2
        assert run.epochs.count() == 2
        assert run.best_epoch == 2
        assert run.progress_percentage == 100


class TestCountShardTask:
    def test_counts_shard(self):
        records = count_ngram_shard.apply(args=[[[3, 4, 1], [5, 1]], 2, "independent", []]).result

        stats = ContextStats.from_records(2, records)
        assert stats.total_windows == 5
        assert stats.count((3,), 4) == 1

    def test_straddling_shard_uses_preceding_tokens(self):
        records = count_ngram_shard.apply(args=[[[5, 1]], 3, "straddle", [3, 4]]).result

        stats = ContextStats.from_records(3, records)
        assert stats.count((3, 4), 5) == 1
