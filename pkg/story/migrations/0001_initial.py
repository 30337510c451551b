# Generated by Django 5.2.6 on 2026-10-17 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="PipelineRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("updated_at", models.DateTimeField(auto_now=True)),
                (
                    "command",
                    models.CharField(
                        choices=[
                            ("gen_data", "Generate corpus"),
                            ("pretrain", "Pretrain encoders and base denoiser"),
                            ("train_adapter", "Train adapter and fusion"),
                            ("generate", "Generate stories"),
                            ("evaluate", "Evaluate stories"),
                            ("ablate", "Ablation study"),
                        ],
                        db_index=True,
                        max_length=32,
                    ),
                ),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("running", "Running"),
                            ("succeeded", "Succeeded"),
                            ("failed", "Failed"),
                        ],
                        db_index=True,
                        default="running",
                        max_length=16,
                    ),
                ),
                ("out_dir", models.CharField(help_text="Run output directory", max_length=1024)),
                ("config", models.JSONField(blank=True, default=dict, help_text="Fully resolved pipeline config")),
                ("corpus_hash", models.CharField(blank=True, max_length=64, null=True)),
                ("checkpoint_hash", models.CharField(blank=True, max_length=64, null=True)),
                ("exit_code", models.IntegerField(blank=True, null=True)),
                ("error", models.TextField(blank=True, null=True)),
                ("summary", models.JSONField(blank=True, default=dict)),
            ],
            options={
                "verbose_name": "Pipeline Run",
                "verbose_name_plural": "Pipeline Runs",
                "db_table": "pipeline_runs",
                "ordering": ["-created_at"],
                "indexes": [
                    models.Index(fields=["command", "status"], name="pipeline_runs_cmd_status_idx"),
                    models.Index(fields=["corpus_hash"], name="pipeline_runs_corpus_idx"),
                ],
            },
        ),
    ]
