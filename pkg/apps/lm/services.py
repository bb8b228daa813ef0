"""
Service layer: the pipeline behind each CLI command and experiment-run tracking.
Separates business logic from the management command and Celery tasks.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

from django.core.cache import cache
from django.db import transaction
from django.db.models import Avg, Count, Min
from django.utils import timezone

from .backoff import ArpaModel, Smoothing, estimate_katz, estimate_kn
from .corpus import PAD_ID, CorpusStream, Vocabulary, build_vocabulary, load_corpus, read_lines
from .evaluation import EvalReport, perplexity
from .exceptions import ConfigValidationError, RunNotFoundError, StatsValidationError
from .models import EpochRecord, ExperimentRun
from .neural_ngram import EpochLog, NGramNetwork, train
from .ngram_stats import ContextStats, accumulate, build_targets, extract_windows, hit_ratio, iter_windows
from .nn_core import CHECKPOINT_MAGIC, sidecar_path
from .recurrent import RecurrentNetwork, StatePolicy, evaluate_recurrent, train_recurrent
from .serializers import ExperimentRunStatusSerializer, neural_config, recurrent_config

logger = logging.getLogger(__name__)

EpochCallback = Optional[Callable[[EpochLog], None]]


def training_log_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".log.jsonl")


class PipelineService:
    """
    Implements the CLI commands over validated run configurations.
    """

    @staticmethod
    def build_vocab(run: Dict) -> Dict:
        lines: List[str] = []
        for path in run["train"]:
            lines.extend(read_lines(path))
        word_list = None
        if run.get("word_list"):
            word_list = [line.strip() for line in read_lines(run["word_list"]) if line.strip()]
        vocab = build_vocabulary(lines, max_size=run.get("max_size"), fixed_word_list=word_list)
        vocab.save(run["output"])
        return {"vocab": run["output"], "vocab_size": vocab.size}

    @staticmethod
    def count_corpus(corpus: CorpusStream, order: int, workers: int = 1) -> ContextStats:
        """
        Count all windows of a corpus, optionally in contiguous shards.

        Shards run as Celery tasks and are merged in shard order; a straddling
        shard receives the tokens preceding it so its first windows match the
        unsharded stream.
        """
        if workers <= 1 or len(corpus.sentences) < 2:
            return accumulate(iter_windows(corpus, order, PAD_ID), order)

        from celery import group

        from .tasks import count_ngram_shard

        sentences = corpus.sentences
        shard_size = -(-len(sentences) // workers)
        signatures = []
        preceding: List[int] = []
        for start in range(0, len(sentences), shard_size):
            shard = sentences[start : start + shard_size]
            signatures.append(
                count_ngram_shard.s(
                    [list(sentence.ids) for sentence in shard],
                    order,
                    str(corpus.boundary_mode),
                    preceding[-(order - 1) :] if order > 1 else [],
                )
            )
            preceding = preceding + [token for sentence in shard for token in sentence.ids]
            preceding = preceding[-(order - 1) :] if order > 1 else []

        result = group(signatures).apply_async()
        stats = ContextStats(order)
        for shard_result in result.results:
            stats = stats.merge(ContextStats.from_records(order, shard_result.get(disable_sync_subtasks=False)))
        logger.info(f"Merged {len(signatures)} count shards: {stats.total_windows} windows")
        return stats

    @staticmethod
    def count(run: Dict) -> Dict:
        vocab = Vocabulary.load(run["vocab"])
        corpus = load_corpus(run["train"], vocab, run["boundary"])
        stats = PipelineService.count_corpus(corpus, run["order"], run["workers"])
        stats.save(run["output"])
        return {
            "counts": run["output"],
            "order": stats.order,
            "windows": stats.total_windows,
            "ngrams": {m: sum(1 for _ in stats.ngrams(m)) for m in range(1, stats.order + 1)},
        }

    @staticmethod
    def _training_stats(run: Dict, vocab: Vocabulary) -> ContextStats:
        if run.get("counts"):
            return ContextStats.load(run["counts"])
        corpus = load_corpus(run["train"], vocab, run["boundary"])
        return PipelineService.count_corpus(corpus, run["order"], run["workers"])

    @staticmethod
    def train_backoff(run: Dict) -> Dict:
        vocab = Vocabulary.load(run["vocab"])
        stats = PipelineService._training_stats(run, vocab)
        if stats.order < run["order"]:
            raise StatsValidationError(
                f"Counts of order {stats.order} cannot train an order-{run['order']} model"
            )
        if run["smoothing"] == Smoothing.KATZ:
            model = estimate_katz(stats, vocab, run["order"], run["gt_max"])
        else:
            model = estimate_kn(stats, vocab, run["order"])
        model.save(run["output"])
        return {"model": run["output"], "smoothing": model.smoothing, "ngram_counts": model.ngram_counts}

    @staticmethod
    def train_nn(run: Dict, on_epoch: EpochCallback = None) -> Dict:
        config = neural_config(run)
        vocab = Vocabulary.load(run["vocab"])
        train_corpus = load_corpus(run["train"], vocab, config.boundary_mode)
        dev_corpus = load_corpus(run["dev"], vocab, config.boundary_mode)

        windows = extract_windows(train_corpus, config.order)
        stats = accumulate(windows, config.order)
        records = build_targets(stats, windows, config.regime)

        log_path = training_log_path(run["output"])
        result = train(config, vocab, records, dev_corpus, log_path=log_path, on_epoch=on_epoch)
        result.model.save(run["output"], {"epoch": result.best_epoch, "dev_ppl": result.best_dev_ppl})
        return {
            "model": run["output"],
            "log": str(log_path),
            "best_epoch": result.best_epoch,
            "best_dev_ppl": result.best_dev_ppl,
        }

    @staticmethod
    def train_recurrent(run: Dict, on_epoch: EpochCallback = None) -> Dict:
        config = recurrent_config(run)
        vocab = Vocabulary.load(run["vocab"])
        train_corpus = load_corpus(run["train"], vocab)
        dev_corpus = load_corpus(run["dev"], vocab)

        log_path = training_log_path(run["output"])
        result = train_recurrent(config, vocab, train_corpus, dev_corpus, log_path=log_path, on_epoch=on_epoch)
        result.model.save(run["output"], {"epoch": result.best_epoch, "dev_ppl": result.best_dev_ppl})
        return {
            "model": run["output"],
            "log": str(log_path),
            "best_epoch": result.best_epoch,
            "best_dev_ppl": result.best_dev_ppl,
        }

    @staticmethod
    def load_model(path, vocab: Optional[Vocabulary]):
        """Open an ARPA file or a checkpoint, deciding by the file's leading bytes."""
        with open(path, "rb") as handle:
            magic = handle.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            return ArpaModel.load(path, vocab)
        if not sidecar_path(path).exists():
            raise ConfigValidationError(f"Checkpoint {path} has no metadata sidecar")
        kind = json.loads(sidecar_path(path).read_text(encoding="utf-8")).get("kind")
        if kind == "recurrent":
            return RecurrentNetwork.load(path)
        return NGramNetwork.load(path)

    @staticmethod
    def evaluate(run: Dict) -> EvalReport:
        vocab = Vocabulary.load(run["vocab"]) if run.get("vocab") else None
        model = PipelineService.load_model(run["model"], vocab)
        if vocab is None:
            if not isinstance(model, ArpaModel):
                raise ConfigValidationError(
                    "A vocabulary is required to evaluate a neural model",
                    {"vocab": ["This field is required for neural checkpoints."]},
                )
            vocab = model.vocab
        if model_vocab_size(model) != vocab.size:
            raise ConfigValidationError(
                f"Model covers {model_vocab_size(model)} words but the vocabulary has {vocab.size}"
            )

        corpus = load_corpus(run["test"], vocab, run["boundary"])

        if isinstance(model, RecurrentNetwork):
            policy = None
            if run["reset_at_bos"] is not None:
                policy = StatePolicy.RESET_AT_SENTENCE_START if run["reset_at_bos"] else StatePolicy.CARRY_FOREVER
            report = evaluate_recurrent(model, corpus, policy)
        else:
            ratios = None
            if run.get("counts"):
                stats = ContextStats.load(run["counts"])
                ratios = hit_ratio(stats, extract_windows(corpus, min(stats.order, model.order)), run["padded"])
            report = perplexity(model, corpus, ratios)

        if run.get("report"):
            report.save(run["report"])
        return report

    @staticmethod
    def hit_ratio(run: Dict) -> Dict:
        vocab = Vocabulary.load(run["vocab"])
        stats = PipelineService._training_stats(run, vocab)
        order = min(run["order"], stats.order)
        test = load_corpus(run["test"], vocab, run["boundary"])
        ratios = hit_ratio(stats, extract_windows(test, order), run["padded"])
        result = {
            "order": order,
            "include_padded": run["padded"],
            "hit_ratios": {str(m): ratio for m, ratio in ratios.items()},
        }
        if run.get("report"):
            with open(run["report"], "w", encoding="utf-8") as handle:
                json.dump(result, handle, sort_keys=True)
                handle.write("\n")
        return result

    @staticmethod
    def run_command(run: Dict, on_epoch: EpochCallback = None) -> Dict:
        """
        Execute one validated command and return its JSON-serializable summary.
        """
        command = run["command"]
        logger.info(f"Running command '{command}'")
        if command == "vocab":
            return PipelineService.build_vocab(run)
        if command == "counts":
            return PipelineService.count(run)
        if command == "train-backoff":
            return PipelineService.train_backoff(run)
        if command == "train-nn":
            return PipelineService.train_nn(run, on_epoch)
        if command == "train-recurrent":
            return PipelineService.train_recurrent(run, on_epoch)
        if command == "eval":
            return PipelineService.evaluate(run).to_dict()
        if command == "hit-ratio":
            return PipelineService.hit_ratio(run)
        if command == "status":
            return ExperimentService.get_run_status(run["task_id"])
        raise ConfigValidationError(f"Unknown command '{command}'", {"command": ["Unknown command."]})


def model_vocab_size(model) -> int:
    if isinstance(model, ArpaModel):
        return model.vocab.size
    return model.vocab_size


class ExperimentService:
    """
    Handles persistence of experiment runs and their epoch logs.
    """

    CACHE_KEY_PREFIX = "experiment_run"
    CACHE_TIMEOUT = 3600  # 1 hour

    @staticmethod
    def _cache_key(task_id: str) -> str:
        return f"{ExperimentService.CACHE_KEY_PREFIX}:{task_id}"

    @staticmethod
    def create_run(task_id: str, command: str, config: Dict, total_epochs: int = 0) -> ExperimentRun:
        """
        Create a new experiment run.

        Args:
            task_id: Unique task identifier from Celery
            command: CLI command the run executes
            config: Validated run configuration
            total_epochs: Number of training epochs (0 for non-training commands)

        Returns:
            Created ExperimentRun instance
        """
        run = ExperimentRun.objects.create(
            task_id=task_id,
            command=command,
            config=config,
            output_path=config.get("output") or config.get("report") or "",
            total_epochs=total_epochs,
            status=ExperimentRun.Status.PENDING,
        )
        logger.info(f"Created experiment run {task_id} for '{command}'")
        return run

    @staticmethod
    def get_run_by_task_id(task_id: str) -> ExperimentRun:
        """
        Retrieve a run by task ID with caching.

        Raises:
            ExperimentRun.DoesNotExist: If the run is not found
        """
        cache_key = ExperimentService._cache_key(task_id)

        cached_run = cache.get(cache_key)
        if cached_run:
            return cached_run

        run = ExperimentRun.objects.get(task_id=task_id)
        cache.set(cache_key, run, ExperimentService.CACHE_TIMEOUT)
        return run

    @staticmethod
    def update_run_status(
        task_id: str,
        status: str,
        result: Dict = None,
        error_message: str = None,
    ) -> ExperimentRun:
        """
        Update run status, stamping start and completion times.

        Args:
            task_id: Task identifier
            status: New status
            result: Command summary on completion
            error_message: Error message if failed

        Returns:
            Updated ExperimentRun instance
        """
        run = ExperimentRun.objects.get(task_id=task_id)
        run.status = status

        if status == ExperimentRun.Status.PROCESSING and not run.started_at:
            run.started_at = timezone.now()

        if status in [ExperimentRun.Status.COMPLETED, ExperimentRun.Status.FAILED]:
            run.completed_at = timezone.now()

        if result is not None:
            run.result = result
            if result.get("best_dev_ppl") is not None:
                run.best_dev_ppl = result["best_dev_ppl"]
                run.best_epoch = result.get("best_epoch")

        if error_message:
            run.error_message = error_message

        run.save()
        cache.delete(ExperimentService._cache_key(task_id))

        logger.info(f"Updated run {task_id}: status={status}")
        return run

    @staticmethod
    @transaction.atomic
    def record_epoch(task_id: str, entry: EpochLog) -> EpochRecord:
        """
        Store one training-log entry and refresh the run's progress and best epoch.
        """
        run = ExperimentRun.objects.select_for_update().get(task_id=task_id)
        record, _ = EpochRecord.objects.update_or_create(
            run=run,
            epoch=entry.epoch,
            defaults={"train_xent": entry.train_xent, "dev_ppl": entry.dev_ppl, "lr": entry.lr},
        )
        run.epochs_completed = max(run.epochs_completed, entry.epoch)
        if run.best_dev_ppl is None or entry.dev_ppl < run.best_dev_ppl:
            run.best_dev_ppl = entry.dev_ppl
            run.best_epoch = entry.epoch
        run.save()
        cache.delete(ExperimentService._cache_key(task_id))

        logger.debug(f"Run {task_id}: recorded epoch {entry.epoch} (dev PPL {entry.dev_ppl:.3f})")
        return record

    @staticmethod
    def get_run_status(task_id: str) -> Dict:
        """
        Serialized run status for the `status` command.

        Raises:
            RunNotFoundError: If no run has this task ID
        """
        try:
            run = ExperimentService.get_run_by_task_id(task_id)
        except ExperimentRun.DoesNotExist as exc:
            raise RunNotFoundError(f"No experiment run with task id {task_id}") from exc
        return dict(ExperimentRunStatusSerializer(run).data)

    @staticmethod
    def get_statistics(command: str = None) -> Dict:
        """
        Aggregate statistics over runs, optionally for one command.
        """
        runs = ExperimentRun.objects.all()
        if command:
            runs = runs.filter(command=command)

        by_status = {
            row["status"]: row["total"] for row in runs.values("status").annotate(total=Count("id"))
        }
        epochs = EpochRecord.objects.filter(run__in=runs).aggregate(
            average_dev_ppl=Avg("dev_ppl"), best_dev_ppl=Min("dev_ppl")
        )
        return {
            "total_runs": runs.count(),
            "by_status": by_status,
            "average_dev_ppl": epochs["average_dev_ppl"],
            "best_dev_ppl": epochs["best_dev_ppl"],
        }
