from story.data.corpus import corpus_hash, extract_four_tuples, load_corpus
from story.denoiser.adapter import trainable_ratio
from story.diffusion.training import train_adapter
from story.exceptions import DataFormatError, FrozenViolationError
from story.management.base import CheckpointCommand
from story.persistence.checkpoint import weights_hash
from story.persistence.run_files import JsonLinesWriter
from story.pipeline import build_adapter, build_fusion


class Command(CheckpointCommand):
    help = "Stage 2: train the history adapter and fusion model against the frozen base denoiser"
    command_name = "train_adapter"
    checkpoint_option = "base"

    def add_command_arguments(self, parser):
        parser.add_argument("--corpus", required=True, help="Training corpus directory")
        parser.add_argument("--base", required=True, help="Base checkpoint written by pretrain")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--adapter-steps", type=int)
        parser.add_argument("--lambda", dest="lam", type=float)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--lr", type=float)

    def config_overrides(self, options):
        return {
            "seed": options["seed"],
            "adapter_steps": options["adapter_steps"],
            "lambda": options["lam"],
            "batch_size": options["batch_size"],
            "lr": options["lr"],
        }

    def execute_pipeline(self, config, out_dir, options):
        models = self.models
        base_checkpoint_hash = self.checkpoint_hash
        if models.adapter is None:
            models.adapter = build_adapter(config, models.unet)
            models.fusion = build_fusion(config)
        corpus = load_corpus(options["corpus"])
        tuples = extract_four_tuples(corpus)
        if not tuples:
            raise DataFormatError(f"Corpus {options['corpus']} yields no four-tuples")
        self.corpus_hash = corpus_hash(options["corpus"])

        base_hash = weights_hash(models.unet)
        trainable = models.adapter.num_parameters() + models.fusion.num_parameters()
        base_count = models.unet.num_parameters()
        ratio = trainable_ratio(models.adapter, models.fusion, models.unet)
        self.stdout.write(f"trainable parameters={trainable} frozen base parameters={base_count} ratio={ratio:.4f}")

        checkpoints = out_dir / "checkpoints"

        def save_periodic(step: int):
            checkpoints.mkdir(exist_ok=True)
            models.save(
                checkpoints / f"adapter-{step:06d}.ckpt",
                stage="adapter",
                step=step,
                base_hash=base_hash,
                corpus_hash=self.corpus_hash,
            )

        with JsonLinesWriter(out_dir / "loss_curve.jsonl") as curve:
            points = train_adapter(
                models.unet,
                models.adapter,
                models.fusion,
                models.encoder,
                tuples,
                config,
                on_point=curve.write,
                on_checkpoint=save_periodic,
            )

        if weights_hash(models.unet) != base_hash:
            raise FrozenViolationError("unet")
        self.checkpoint_hash = models.save(
            out_dir / "vista.ckpt", stage="adapter", base_hash=base_hash, corpus_hash=self.corpus_hash
        )
        initial = points[0].loss if points else None
        final = points[-1].loss if points else None
        self.stdout.write(f"adapter loss {initial} -> {final}, base weights unchanged ({base_hash[:12]})")
        return {
            "base_checkpoint_hash": base_checkpoint_hash,
            "base_weights_hash": base_hash,
            "trainable_parameters": trainable,
            "base_parameters": base_count,
            "trainable_ratio": ratio,
            "initial_loss": initial,
            "final_loss": final,
        }
