from pathlib import Path

from story.data.corpus import corpus_hash, load_corpus, read_manifest
from story.engine.story import Story
from story.evaluation.metrics import evaluate_stories
from story.exceptions import ConfigError, DataFormatError
from story.management.base import CheckpointCommand, worker_count
from story.management.commands.generate import FRAMES_DIR
from story.persistence.run_files import write_json


def generated_dir(path) -> Path:
    """Accept either a corpus-format directory or a generate run directory holding one."""
    path = Path(path)
    if (path / FRAMES_DIR).is_dir():
        return path / FRAMES_DIR
    return path


def stories_from_records(records):
    return [
        Story(prompts=record.captions, images=record.images, scene_graphs=record.graphs, story_id=record.story_id)
        for record in records
    ]


class Command(CheckpointCommand):
    help = "Score generated stories: QA faithfulness, text/image similarity and Frechet distance"
    command_name = "evaluate"

    def add_command_arguments(self, parser):
        parser.add_argument("--generated", required=True, help="Generated frames (generate run or corpus directory)")
        parser.add_argument("--corpus", help="Reference corpus with the ground-truth frames")
        parser.add_argument("--report", help="Report path (default: <out>/report.json)")
        parser.add_argument("--ckpt", help="Checkpoint whose encoder scores the frames (default: the one that generated them)")
        parser.add_argument("--threads", type=int)

    def resolve_config(self, options):
        options["generated"] = generated_dir(options["generated"])
        manifest = read_manifest(options["generated"])
        if not options["ckpt"]:
            options["ckpt"] = manifest.get("checkpoint")
        if not options["ckpt"]:
            raise ConfigError(f"{options['generated']} does not name its checkpoint; pass --ckpt")
        config = super().resolve_config(options)
        recorded = manifest.get("checkpoint_hash")
        if recorded and recorded != self.checkpoint_hash:
            raise DataFormatError(f"Checkpoint {options['ckpt']} does not match the one that generated the frames")
        return config

    def execute_pipeline(self, config, out_dir, options):
        stories = stories_from_records(load_corpus(options["generated"]))
        references = None
        if options["corpus"]:
            references = load_corpus(options["corpus"])
            self.corpus_hash = corpus_hash(options["corpus"])
        try:
            report = evaluate_stories(
                self.models.encoder,
                stories,
                references=references,
                threads=worker_count(options["threads"]),
                config=config.resolved(),
                corpus_hash=self.corpus_hash,
            )
        except ValueError as e:
            raise DataFormatError(f"Cannot evaluate {options['generated']}: {e}")
        report_path = write_json(options["report"] or out_dir / "report.json", report)
        self.stdout.write(
            f"tifa={report.tifa_analog:.4f} clip_t={report.clip_t_analog:.4f} "
            f"clip_i={report.clip_i_analog} fid={report.fid} frames={report.frames} report={report_path}"
        )
        return {
            "tifa_analog": report.tifa_analog,
            "clip_t_analog": report.clip_t_analog,
            "clip_i_analog": report.clip_i_analog,
            "fid": report.fid,
            "frames": report.frames,
            "questions": report.questions,
        }
