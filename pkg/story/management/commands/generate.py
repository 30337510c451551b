from pathlib import Path

from story.data.captions import parse_caption
from story.data.corpus import corpus_hash, load_corpus, save_corpus
from story.engine.story import Story
from story.exceptions import ConfigError
from story.management.base import CheckpointCommand, worker_count
from story.persistence.preview import save_preview
from story.persistence.run_files import JsonLinesWriter
from story.pipeline import story_generator
from story.schemas.config import Conditioning, HistoryMode
from story.schemas.story_file import load_story_file, reference_image

FRAMES_DIR = "frames"


def stories_from_file(path):
    """Stories of a story file; each gets its real first frame and parsed scene graphs."""
    story_file = load_story_file(path)
    base_dir = Path(path).parent
    return [
        Story(
            prompts=list(entry.prompts),
            images=[reference_image(entry, base_dir)],
            scene_graphs=[parse_caption(prompt) for prompt in entry.prompts],
            story_id=entry.story_id,
        )
        for entry in story_file.stories
    ]


def stories_from_corpus(corpus, limit=None, frames=None):
    """Continuation setups for the first ``limit`` corpus stories plus their full reference frames."""
    records = corpus[:limit] if limit else corpus
    stories = [Story.from_record(record, frames) for record in records]
    references = [record.images[:len(story.prompts)] for record, story in zip(records, stories)]
    return stories, references


class Command(CheckpointCommand):
    help = "Continue stories from their first real frame with a trained checkpoint"
    command_name = "generate"

    def add_command_arguments(self, parser):
        parser.add_argument("--ckpt", required=True, help="Checkpoint written by train_adapter (or pretrain with --base-only)")
        parser.add_argument("--story-file", help="JSON story file with prompts and first-frame references")
        parser.add_argument("--corpus", help="Continue the stories of this corpus instead of a story file")
        parser.add_argument("--limit", type=int, help="Number of corpus stories to continue")
        parser.add_argument("--frames", type=int, help="Frames per corpus story (default: all)")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--lambda", dest="lam", type=float)
        parser.add_argument("--conditioning", choices=[c.value for c in Conditioning])
        parser.add_argument("--history-mode", choices=[m.value for m in HistoryMode])
        parser.add_argument("--sampler-steps", type=int)
        parser.add_argument("--guidance-scale", type=float)
        parser.add_argument("--base-only", action="store_true", help="Sample with the frozen base alone")
        parser.add_argument("--threads", type=int)
        parser.add_argument("--no-preview", action="store_true", help="Skip the PPM preview grid")

    def config_overrides(self, options):
        return {
            "seed": options["seed"],
            "lambda": options["lam"],
            "conditioning": options["conditioning"],
            "history_mode": options["history_mode"],
            "sampler_steps": options["sampler_steps"],
            "guidance_scale": options["guidance_scale"],
        }

    def load_stories(self, options):
        if bool(options["story_file"]) == bool(options["corpus"]):
            raise ConfigError("Give exactly one of --story-file or --corpus")
        if options["story_file"]:
            stories = stories_from_file(options["story_file"])
            return stories, [None] * len(stories)
        if options["limit"] is not None and options["limit"] < 1:
            raise ConfigError(f"--limit must be at least 1, got {options['limit']}")
        if options["frames"] is not None and options["frames"] < 2:
            raise ConfigError(f"--frames must be at least 2, got {options['frames']}")
        self.corpus_hash = corpus_hash(options["corpus"])
        return stories_from_corpus(load_corpus(options["corpus"]), options["limit"], options["frames"])

    def execute_pipeline(self, config, out_dir, options):
        stories, references = self.load_stories(options)
        generator = story_generator(self.models, base_only=options["base_only"])
        results = generator.continue_stories(stories, threads=worker_count(options["threads"]))

        with JsonLinesWriter(out_dir / "salience.jsonl") as log:
            for story in results:
                log.write_all(story.salience)
        frames_hash = save_corpus(
            [story.to_record() for story in results],
            out_dir / FRAMES_DIR,
            extra={
                "kind": "generated",
                "checkpoint": str(Path(options["ckpt"]).resolve()),
                "checkpoint_hash": self.checkpoint_hash,
                "source_corpus_hash": self.corpus_hash,
                "lambda": generator.lam,
                "conditioning": generator.conditioning.value,
                "history_mode": generator.history_mode.value,
                "base_only": options["base_only"],
                "seed": generator.sampler.seed,
            },
        )
        if not options["no_preview"]:
            save_preview(out_dir / "preview.ppm", [story.images for story in results], references)

        generated = sum(len(story.images) - 1 for story in results)
        self.stdout.write(f"stories={len(results)} generated frames={generated} salience records={log.count}")
        return {
            "stories": len(results),
            "generated_frames": generated,
            "salience_records": log.count,
            "frames_hash": frames_hash,
            "lambda": generator.lam,
            "base_only": options["base_only"],
        }
