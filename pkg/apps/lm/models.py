"""
Database models tracking experiment runs and their per-epoch training log.
"""
from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """
    One CLI command executed as a tracked (possibly background) run.
    """

    class Status(models.TextChoices):
        PENDING = "PENDING", "Pending"
        PROCESSING = "PROCESSING", "Processing"
        COMPLETED = "COMPLETED", "Completed"
        FAILED = "FAILED", "Failed"

    task_id = models.CharField(max_length=255, unique=True, db_index=True)
    command = models.CharField(max_length=32)
    status = models.CharField(
        max_length=20, choices=Status.choices, default=Status.PENDING, db_index=True
    )
    config = models.JSONField(default=dict)
    output_path = models.CharField(max_length=1024, blank=True)
    total_epochs = models.IntegerField(default=0)
    epochs_completed = models.IntegerField(default=0)
    best_dev_ppl = models.FloatField(null=True, blank=True)
    best_epoch = models.IntegerField(null=True, blank=True)
    result = models.JSONField(null=True, blank=True)
    error_message = models.TextField(blank=True, null=True)

    created_at = models.DateTimeField(default=timezone.now, db_index=True)
    started_at = models.DateTimeField(null=True, blank=True)
    completed_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = "lm_experiment_runs"
        ordering = ["-created_at"]
        indexes = [
            models.Index(fields=["task_id", "status"], name="lm_experime_task_id_3c1f0a_idx"),
            models.Index(fields=["command", "created_at"], name="lm_experime_command_8d2e47_idx"),
        ]

    def __str__(self):
        return f"Run {self.task_id} ({self.command}) - {self.status}"

    @property
    def progress_percentage(self):
        """Share of configured epochs finished; commands without epochs jump to 100 on completion."""
        if self.total_epochs == 0:
            return 100 if self.status == self.Status.COMPLETED else 0
        return int((self.epochs_completed / self.total_epochs) * 100)

    @property
    def duration(self):
        """Run duration in seconds."""
        if not self.started_at:
            return None
        end_time = self.completed_at or timezone.now()
        return (end_time - self.started_at).total_seconds()


class EpochRecord(models.Model):
    """
    One line of a training log: {epoch, train_xent, dev_ppl, lr}.
    """

    run = models.ForeignKey(
        ExperimentRun, on_delete=models.CASCADE, related_name="epochs", db_index=True
    )
    epoch = models.IntegerField()
    train_xent = models.FloatField()
    dev_ppl = models.FloatField()
    lr = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        db_table = "lm_epoch_records"
        ordering = ["run", "epoch"]
        unique_together = [["run", "epoch"]]

    def __str__(self):
        return f"Run {self.run.task_id} epoch {self.epoch}: dev PPL {self.dev_ppl:.3f}"

    def as_log_entry(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_xent": self.train_xent,
            "dev_ppl": self.dev_ppl,
            "lr": self.lr,
        }
