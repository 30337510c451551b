"""
Shared plumbing for the pipeline management commands.

Every command resolves its config, prepares a self-describing run
directory (``config.json`` + ``run.json``), records itself in the run
registry and turns pipeline errors into the documented exit codes.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from django.utils import timezone
from pydantic import ValidationError

from story.exceptions import ConfigError, VistaError
from story.models import PipelineRun
from story.persistence.checkpoint import file_hash
from story.persistence.run_files import write_json
from story.pipeline import load_models
from story.schemas.config import PipelineConfig, load_config, read_config_file

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
RUN_NAME = "run.json"


def prepare_out_dir(out: Optional[str], command: str, force: bool = False) -> Path:
    """Create the run directory; an existing non-empty one needs ``force``."""
    if out:
        path = Path(out)
    else:
        path = Path(settings.VISTA_RUNS_ROOT) / f"{command}-{timezone.now().strftime('%Y%m%d-%H%M%S')}"
    if path.exists():
        if not path.is_dir():
            raise ConfigError(f"Output path {path} exists and is not a directory")
        if any(path.iterdir()) and not force:
            raise ConfigError(f"Output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def worker_count(requested: Optional[int]) -> int:
    """Requested thread count, capped by VISTA_THREADS."""
    cap = max(1, settings.VISTA_THREADS)
    if requested is None:
        return cap
    if requested < 1:
        raise ConfigError(f"--threads must be at least 1, got {requested}")
    return min(requested, cap)


class PipelineCommand(BaseCommand):
    """
    Base class for pipeline commands.

    Subclasses set ``command_name``, add their own flags in
    ``add_command_arguments`` and do the work in ``execute_pipeline``, which
    returns a summary dict stored in ``run.json`` and the run registry.
    """

    command_name = ""
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", help="key=value config file; flags override its values")
        parser.add_argument("--out", help="Output directory (default: VISTA_RUNS_ROOT/<command>-<timestamp>)")
        parser.add_argument("--force", action="store_true", help="Write into an existing non-empty directory")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options) -> Dict[str, Any]:
        return {}

    def resolve_config(self, options) -> PipelineConfig:
        return load_config(options.get("config"), self.config_overrides(options))

    def execute_pipeline(self, config: PipelineConfig, out_dir: Path, options) -> Dict[str, Any]:
        raise NotImplementedError

    def handle(self, *args, **options):
        self.corpus_hash: Optional[str] = None
        self.checkpoint_hash: Optional[str] = None
        out_dir = None
        run = None
        started = timezone.now()
        try:
            config = self.resolve_config(options)
            out_dir = prepare_out_dir(options.get("out"), self.command_name, options.get("force", False))
            write_json(out_dir / CONFIG_NAME, config.resolved())
            run = self._start_run(out_dir, config)
            summary = self.execute_pipeline(config, out_dir, options) or {}
        except VistaError as e:
            self._finish(run, out_dir, started, e.exit_code, str(e), {})
            logger.error(f"{self.command_name} failed: {e}")
            raise CommandError(str(e), returncode=e.exit_code)
        except ValidationError as e:
            self._finish(run, out_dir, started, ConfigError.exit_code, str(e), {})
            raise CommandError(f"Invalid configuration: {e}", returncode=ConfigError.exit_code)

        self._finish(run, out_dir, started, 0, None, summary)
        self.stdout.write(self.style.SUCCESS(f"{self.command_name} finished, outputs in {out_dir}"))

    def _start_run(self, out_dir: Path, config: PipelineConfig) -> Optional[PipelineRun]:
        try:
            return PipelineRun.objects.create(command=self.command_name, out_dir=str(out_dir), config=config.resolved())
        except DatabaseError as e:
            logger.warning(f"Run registry unavailable, continuing without it: {e}")
            return None

    def _finish(self, run, out_dir, started, exit_code: int, error: Optional[str], summary: Dict[str, Any]):
        if out_dir is not None:
            write_json(
                out_dir / RUN_NAME,
                {
                    "command": self.command_name,
                    "started_at": started.isoformat(),
                    "finished_at": timezone.now().isoformat(),
                    "exit_code": exit_code,
                    "error": error,
                    "corpus_hash": self.corpus_hash,
                    "checkpoint_hash": self.checkpoint_hash,
                    "summary": summary,
                },
            )
        if run is None:
            return
        run.corpus_hash = self.corpus_hash
        run.checkpoint_hash = self.checkpoint_hash
        try:
            run.finish(exit_code=exit_code, error=error, **summary)
        except DatabaseError as e:
            logger.warning(f"Could not update run record {run.pk}: {e}")


class CheckpointCommand(PipelineCommand):
    """A command whose models and config come from a checkpoint; flags and --config override the stored config."""

    checkpoint_option = "ckpt"

    def resolve_config(self, options) -> PipelineConfig:
        overrides = read_config_file(options["config"]) if options.get("config") else {}
        overrides.update({k: v for k, v in self.config_overrides(options).items() if v is not None})
        path = options[self.checkpoint_option]
        self.models = load_models(path, overrides)
        self.checkpoint_hash = file_hash(path)
        return self.models.config
