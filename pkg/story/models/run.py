from django.core.exceptions import ValidationError
from django.db import models

from .base import BaseModel
from story.utils.validators import validate_sha256


class PipelineRun(BaseModel):
    """One invocation of a pipeline management command."""

    COMMAND_CHOICES = [
        ('gen_data', 'Generate corpus'),
        ('pretrain', 'Pretrain encoders and base denoiser'),
        ('train_adapter', 'Train adapter and fusion'),
        ('generate', 'Generate stories'),
        ('evaluate', 'Evaluate stories'),
        ('ablate', 'Ablation study'),
    ]

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('succeeded', 'Succeeded'),
        ('failed', 'Failed'),
    ]

    command = models.CharField(max_length=32, choices=COMMAND_CHOICES, db_index=True)
    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default='running', db_index=True)
    out_dir = models.CharField(max_length=1024, help_text="Run output directory")
    config = models.JSONField(default=dict, blank=True, help_text="Fully resolved pipeline config")
    corpus_hash = models.CharField(max_length=64, blank=True, null=True)
    checkpoint_hash = models.CharField(max_length=64, blank=True, null=True)
    exit_code = models.IntegerField(blank=True, null=True)
    error = models.TextField(blank=True, null=True)
    summary = models.JSONField(default=dict, blank=True)

    class Meta:
        db_table = 'pipeline_runs'
        ordering = ['-created_at']
        verbose_name = 'Pipeline Run'
        verbose_name_plural = 'Pipeline Runs'
        indexes = [
            models.Index(fields=['command', 'status'], name='pipeline_runs_cmd_status_idx'),
            models.Index(fields=['corpus_hash'], name='pipeline_runs_corpus_idx'),
        ]

    def __str__(self):
        return f"{self.command} -> {self.out_dir} ({self.status})"

    def clean(self):
        super().clean()
        errors = {}

        for field in ('corpus_hash', 'checkpoint_hash'):
            value = getattr(self, field)
            if value:
                try:
                    validate_sha256(value)
                except ValidationError as e:
                    errors[field] = e.message

        if self.status == 'succeeded' and self.exit_code not in (None, 0):
            errors['exit_code'] = "A succeeded run must have exit code 0"

        if errors:
            raise ValidationError(errors)

    def save(self, *args, **kwargs):
        # Validate unless explicitly skipped
        if not kwargs.pop('skip_validation', False):
            self.full_clean()

        super().save(*args, **kwargs)

    def finish(self, exit_code: int = 0, error: str = None, **summary):
        self.exit_code = exit_code
        self.status = 'succeeded' if exit_code == 0 else 'failed'
        self.error = error
        self.summary.update(summary)
        self.save()
