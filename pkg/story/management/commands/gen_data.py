from story.data.corpus import generate_corpus, save_corpus
from story.exceptions import ConfigError
from story.management.base import PipelineCommand, worker_count


class Command(PipelineCommand):
    help = "Generate a synthetic shape-story corpus (scene graphs, captions and rendered frames)"
    command_name = "gen_data"

    def add_command_arguments(self, parser):
        parser.add_argument("--seed", type=int)
        parser.add_argument("--stories", type=int)
        parser.add_argument("--frames", type=int)
        parser.add_argument("--first-id", type=int, default=0, help="Story id of the first story (held-out splits)")
        parser.add_argument("--caption-noise", action="store_true", default=None, help="Use synonym paraphrases")
        parser.add_argument("--threads", type=int)

    def config_overrides(self, options):
        return {
            "seed": options["seed"],
            "stories": options["stories"],
            "frames": options["frames"],
            "caption_noise": options["caption_noise"],
        }

    def execute_pipeline(self, config, out_dir, options):
        if options["first_id"] < 0:
            raise ConfigError(f"--first-id must be non-negative, got {options['first_id']}")
        corpus = generate_corpus(
            seed=config.seed,
            stories=config.stories,
            frames=config.frames,
            first_id=options["first_id"],
            caption_noise=config.caption_noise,
            threads=worker_count(options["threads"]),
        )
        self.corpus_hash = save_corpus(corpus, out_dir)
        tuples = sum(len(record.frames) - 1 for record in corpus)
        self.stdout.write(
            f"stories={len(corpus)} frames={config.frames} tuples={tuples} corpus_hash={self.corpus_hash}"
        )
        return {"stories": len(corpus), "frames": config.frames, "tuples": tuples, "first_id": options["first_id"]}
