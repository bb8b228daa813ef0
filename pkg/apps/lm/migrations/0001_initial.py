# Generated by Django 4.2.7 on 2026-10-18 09:12

from django.db import migrations, models
import django.db.models.deletion
import django.utils.timezone


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True, primary_key=True, serialize=False, verbose_name="ID"
                    ),
                ),
                ("task_id", models.CharField(db_index=True, max_length=255, unique=True)),
                ("command", models.CharField(max_length=32)),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("PENDING", "Pending"),
                            ("PROCESSING", "Processing"),
                            ("COMPLETED", "Completed"),
                            ("FAILED", "Failed"),
                        ],
                        db_index=True,
                        default="PENDING",
                        max_length=20,
                    ),
                ),
                ("config", models.JSONField(default=dict)),
                ("output_path", models.CharField(blank=True, max_length=1024)),
                ("total_epochs", models.IntegerField(default=0)),
                ("epochs_completed", models.IntegerField(default=0)),
                ("best_dev_ppl", models.FloatField(blank=True, null=True)),
                ("best_epoch", models.IntegerField(blank=True, null=True)),
                ("result", models.JSONField(blank=True, null=True)),
                ("error_message", models.TextField(blank=True, null=True)),
                (
                    "created_at",
                    models.DateTimeField(db_index=True, default=django.utils.timezone.now),
                ),
                ("started_at", models.DateTimeField(blank=True, null=True)),
                ("completed_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "db_table": "lm_experiment_runs",
                "ordering": ["-created_at"],
            },
        ),
        migrations.CreateModel(
            name="EpochRecord",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True, primary_key=True, serialize=False, verbose_name="ID"
                    ),
                ),
                ("epoch", models.IntegerField()),
                ("train_xent", models.FloatField()),
                ("dev_ppl", models.FloatField()),
                ("lr", models.FloatField()),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="epochs",
                        to="lm.experimentrun",
                    ),
                ),
            ],
            options={
                "db_table": "lm_epoch_records",
                "ordering": ["run", "epoch"],
                "unique_together": {("run", "epoch")},
            },
        ),
        migrations.AddIndex(
            model_name="experimentrun",
            index=models.Index(fields=["task_id", "status"], name="lm_experime_task_id_3c1f0a_idx"),
        ),
        migrations.AddIndex(
            model_name="experimentrun",
            index=models.Index(fields=["command", "created_at"], name="lm_experime_command_8d2e47_idx"),
        ),
    ]
