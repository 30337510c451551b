import logging
from typing import List, Tuple

from story.data.corpus import corpus_hash, load_corpus
from story.engine.salience import salience_relevance
from story.evaluation.metrics import evaluate_stories, paired_sign_test
from story.exceptions import ConfigError
from story.management.base import CheckpointCommand, worker_count
from story.management.commands.generate import stories_from_corpus
from story.persistence.run_files import write_json
from story.pipeline import story_generator
from story.schemas.config import Conditioning, HistoryMode
from story.schemas.reports import AblationReport, AblationVariant

logger = logging.getLogger(__name__)

Variant = Tuple[Conditioning, HistoryMode, float]


def parse_list(raw: str, cast, flag: str) -> list:
    try:
        return [cast(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag}: {e}")


def variant_name(variant: Variant) -> str:
    conditioning, history_mode, lam = variant
    return f"{conditioning.value}/{history_mode.value}/lambda={lam:g}"


def plan_variants(baseline: Variant, modes, history_modes, lambdas) -> List[Variant]:
    """Baseline first, then one-factor-at-a-time departures from it."""
    conditioning, history_mode, lam = baseline
    variants = [baseline]
    variants += [(mode, history_mode, lam) for mode in modes]
    variants += [(conditioning, mode, lam) for mode in history_modes]
    variants += [(conditioning, history_mode, value) for value in lambdas]
    unique = []
    for variant in variants:
        if variant not in unique:
            unique.append(variant)
    return unique


def per_story(report, metric: str):
    return {entry.story_id: getattr(entry, metric) for entry in report.per_story}


class Command(CheckpointCommand):
    help = "Compare conditioning modes, history modes and lambda values on held-out stories"
    command_name = "ablate"

    def add_command_arguments(self, parser):
        parser.add_argument("--ckpt", required=True, help="Checkpoint written by train_adapter")
        parser.add_argument("--corpus", required=True, help="Held-out corpus to continue")
        parser.add_argument("--limit", type=int, default=50, help="Number of held-out stories")
        parser.add_argument("--frames", type=int, help="Frames per story (default: all)")
        parser.add_argument("--modes", default=",".join(c.value for c in Conditioning))
        parser.add_argument("--history-modes", default=",".join(m.value for m in HistoryMode))
        parser.add_argument("--lambdas", default="0,0.25,0.5,1.0")
        parser.add_argument("--relevance-cases", type=int, default=100)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--sampler-steps", type=int)
        parser.add_argument("--guidance-scale", type=float)
        parser.add_argument("--threads", type=int)

    def config_overrides(self, options):
        return {
            "seed": options["seed"],
            "sampler_steps": options["sampler_steps"],
            "guidance_scale": options["guidance_scale"],
        }

    def execute_pipeline(self, config, out_dir, options):
        if self.models.fusion is None:
            raise ConfigError(f"{options['ckpt']} has no adapter or fusion weights to ablate")
        if options["limit"] < 1:
            raise ConfigError(f"--limit must be at least 1, got {options['limit']}")
        modes = parse_list(options["modes"], Conditioning, "--modes")
        history_modes = parse_list(options["history_modes"], HistoryMode, "--history-modes")
        lambdas = parse_list(options["lambdas"], float, "--lambdas")
        if any(value < 0 for value in lambdas):
            raise ConfigError("--lambdas must be non-negative")

        records = load_corpus(options["corpus"])[:options["limit"]]
        self.corpus_hash = corpus_hash(options["corpus"])
        stories, _ = stories_from_corpus(records, frames=options["frames"])
        threads = worker_count(options["threads"])

        baseline = (config.conditioning, config.history_mode, config.lambda_)
        variants = []
        for conditioning, history_mode, lam in plan_variants(baseline, modes, history_modes, lambdas):
            name = variant_name((conditioning, history_mode, lam))
            logger.info(f"Ablation variant {name} on {len(stories)} stories")
            generator = story_generator(self.models, lam=lam, conditioning=conditioning, history_mode=history_mode)
            results = generator.continue_stories(stories, threads=threads)
            report = evaluate_stories(
                self.models.encoder,
                results,
                references=records,
                threads=threads,
                config=config.resolved(),
                corpus_hash=self.corpus_hash,
            )
            variants.append(
                AblationVariant(
                    name=name,
                    conditioning=conditioning.value,
                    history_mode=history_mode.value,
                    lam=lam,
                    report=report,
                )
            )

        base = variants[0]
        comparisons = {}
        for variant in variants[1:]:
            tests = []
            for metric in ("clip_i_analog", "tifa_analog"):
                treated, control = per_story(base.report, metric), per_story(variant.report, metric)
                ids = sorted(set(treated) & set(control))
                tests.append(paired_sign_test([treated[i] for i in ids], [control[i] for i in ids], metric))
            comparisons[variant.name] = tests

        relevance = None
        if options["relevance_cases"] > 0:
            relevance = salience_relevance(
                self.models.encoder,
                self.models.fusion,
                cases=options["relevance_cases"],
                seed=config.seed,
                conditioning=config.conditioning,
            )

        result = AblationReport(
            baseline=base.name,
            variants=variants,
            comparisons=comparisons,
            salience_relevance=relevance,
            config=config.resolved(),
        )
        write_json(out_dir / "ablation.json", result)
        for name, tests in comparisons.items():
            summary = ", ".join(f"{t.metric} {t.mean_difference:+.4f} (p={t.p_value:.3g})" for t in tests)
            self.stdout.write(f"{base.name} vs {name}: {summary}")
        if relevance is not None:
            self.stdout.write(f"salient pair relevance={relevance:.3f}")
        return {
            "baseline": base.name,
            "variants": len(variants),
            "stories": len(stories),
            "salience_relevance": relevance,
        }
