"""
Celery tasks for tracked experiment runs and sharded n-gram counting.
"""
import logging
from typing import List

from celery import shared_task

from .corpus import PAD_ID, CorpusStream, Sentence
from .exceptions import LanguageModelError
from .models import ExperimentRun
from .ngram_stats import accumulate, iter_windows
from .services import ExperimentService, PipelineService

logger = logging.getLogger(__name__)

# Errors that end a run without retrying.
FINAL_ERRORS = (LanguageModelError, FileNotFoundError)


@shared_task(
    bind=True,
    name="apps.lm.tasks.execute_run",
    max_retries=3,
    default_retry_delay=60,
)
def execute_run(self, run: dict) -> dict:
    """
    Execute one validated CLI command as a tracked experiment run.

    Training commands record every epoch as it finishes. Toolkit errors and
    missing files are final; anything else is retried.

    Args:
        run: Validated run configuration

    Returns:
        Dictionary with the run status and the command summary
    """
    task_id = self.request.id
    command = run["command"]
    logger.info(f"Starting run {task_id}: '{command}'")

    try:
        try:
            ExperimentService.get_run_by_task_id(task_id)
        except ExperimentRun.DoesNotExist:
            total_epochs = run.get("epochs", 0) if command.startswith("train-") and command != "train-backoff" else 0
            ExperimentService.create_run(task_id, command, run, total_epochs)

        ExperimentService.update_run_status(task_id, ExperimentRun.Status.PROCESSING)

        def on_epoch(entry):
            ExperimentService.record_epoch(task_id, entry)

        result = PipelineService.run_command(run, on_epoch=on_epoch)

        ExperimentService.update_run_status(task_id, ExperimentRun.Status.COMPLETED, result=result)
        logger.info(f"Run {task_id} completed successfully")
        return {"task_id": task_id, "status": "COMPLETED", "result": result, "success": True}

    except Exception as exc:
        logger.error(f"Run {task_id} failed with error: {str(exc)}", exc_info=True)

        try:
            ExperimentService.update_run_status(
                task_id, ExperimentRun.Status.FAILED, error_message=str(exc)
            )
        except Exception as update_exc:
            logger.error(f"Failed to update run status: {str(update_exc)}")

        if not isinstance(exc, FINAL_ERRORS) and self.request.retries < self.max_retries:
            logger.info(f"Retrying run {task_id} (attempt {self.request.retries + 1}/{self.max_retries})")
            raise self.retry(exc=exc) from exc

        return {"task_id": task_id, "status": "FAILED", "error": str(exc), "success": False}


@shared_task(name="apps.lm.tasks.count_ngram_shard")
def count_ngram_shard(
    sentences: List[List[int]], order: int, boundary_mode: str, preceding: List[int]
) -> list:
    """
    Count the windows of one contiguous shard of encoded sentences.

    Args:
        sentences: Token ids of each sentence, </s> included
        order: n-gram order
        boundary_mode: independent or straddle
        preceding: Up to n-1 tokens before the shard (straddling streams only)

    Returns:
        Count records (order, ids, count) for merging
    """
    corpus = CorpusStream([Sentence(tuple(ids)) for ids in sentences], boundary_mode)
    stats = accumulate(iter_windows(corpus, order, PAD_ID, initial_history=preceding), order)
    logger.debug(f"Counted shard of {len(sentences)} sentences: {stats.total_windows} windows")
    return stats.to_records()
