import logging

from story.data.corpus import corpus_hash, load_corpus
from story.denoiser.unet import freeze_base
from story.diffusion.training import train_base
from story.encoders.pretrain import contrastive_pretrain, retrieval_accuracy
from story.exceptions import DataFormatError
from story.management.base import PipelineCommand
from story.numerics.rng import RngStream, Stream
from story.persistence.run_files import JsonLinesWriter
from story.pipeline import build_models

logger = logging.getLogger(__name__)

RETRIEVAL_PAIRS = 64


def frame_pairs(corpus):
    return [(frame.caption, frame.image) for record in corpus for frame in record.frames]


def retrieval_pairs(pairs, limit: int = RETRIEVAL_PAIRS):
    """Up to ``limit`` pairs with distinct captions, in corpus order."""
    seen, kept = set(), []
    for caption, image in pairs:
        if caption not in seen:
            seen.add(caption)
            kept.append((caption, image))
        if len(kept) == limit:
            break
    return kept


class Command(PipelineCommand):
    help = "Stage 0 and 1: contrastive encoder pretraining, then base denoiser training"
    command_name = "pretrain"

    def add_command_arguments(self, parser):
        parser.add_argument("--corpus", required=True, help="Training corpus directory")
        parser.add_argument("--test-corpus", help="Held-out corpus for the retrieval check")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--encoder-steps", type=int)
        parser.add_argument("--base-steps", type=int)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--lr", type=float)

    def config_overrides(self, options):
        return {
            "seed": options["seed"],
            "encoder_steps": options["encoder_steps"],
            "base_steps": options["base_steps"],
            "batch_size": options["batch_size"],
            "lr": options["lr"],
        }

    def execute_pipeline(self, config, out_dir, options):
        corpus = load_corpus(options["corpus"])
        if not corpus:
            raise DataFormatError(f"Corpus {options['corpus']} holds no stories")
        self.corpus_hash = corpus_hash(options["corpus"])
        pairs = frame_pairs(corpus)
        held_out = frame_pairs(load_corpus(options["test_corpus"])) if options["test_corpus"] else pairs

        models = build_models(config)
        models.vocab.save(out_dir / "vocab.txt")
        checkpoints = out_dir / "checkpoints"

        def save_periodic(step: int):
            checkpoints.mkdir(exist_ok=True)
            models.save(checkpoints / f"base-{step:06d}.ckpt", stage="base", step=step, corpus_hash=self.corpus_hash)

        with JsonLinesWriter(out_dir / "loss_curve.jsonl") as curve:
            _, encoder_curve = contrastive_pretrain(
                models.encoder,
                pairs,
                config.encoder_steps,
                RngStream(config.seed, Stream.BATCH).child(0),
                batch_size=config.batch_size,
                lr=config.encoder_lr,
                on_step=curve.write,
            )
            held_out_pairs = retrieval_pairs(held_out)
            accuracy = retrieval_accuracy(models.encoder, held_out_pairs) if len(held_out_pairs) >= 2 else None
            logger.info(f"Top-1 caption->image retrieval on {len(held_out_pairs)} held-out pairs: {accuracy}")
            base_curve = train_base(
                models.unet, models.encoder, pairs, config, on_point=curve.write, on_checkpoint=save_periodic
            )

        base_parameters = freeze_base(models.unet)
        self.checkpoint_hash = models.save(out_dir / "base.ckpt", stage="base", corpus_hash=self.corpus_hash)
        self.stdout.write(
            f"encoder retrieval@1={accuracy} base parameters={base_parameters} checkpoint={self.checkpoint_hash}"
        )
        return {
            "encoder_final_loss": encoder_curve[-1].loss if encoder_curve else None,
            "base_initial_loss": base_curve[0].loss if base_curve else None,
            "base_final_loss": base_curve[-1].loss if base_curve else None,
            "retrieval_accuracy": accuracy,
            "retrieval_pairs": len(held_out_pairs),
            "base_parameters": base_parameters,
        }
