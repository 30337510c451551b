import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from story.data.corpus import MANIFEST_NAME, corpus_hash, load_corpus
from story.exceptions import ConfigError, NumericError
from story.management.base import prepare_out_dir, worker_count
from story.management.commands.ablate import parse_list, plan_variants, variant_name
from story.management.commands.evaluate import generated_dir
from story.management.commands.generate import stories_from_corpus
from story.management.commands.pretrain import retrieval_pairs
from story.models import PipelineRun
from story.persistence.run_files import read_json
from story.schemas.config import Conditioning, HistoryMode

from .helpers import TINY_FILE, tiny_corpus


def run(name, *args, **options):
    out = StringIO()
    call_command(name, *args, stdout=out, **options)
    return out.getvalue()


class OutputDirectoryTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_existing_directory_needs_force(self):
        target = self.dir / "run"
        target.mkdir()
        (target / "stale.txt").write_text("x")
        with self.assertRaises(ConfigError):
            prepare_out_dir(str(target), "gen_data")
        self.assertEqual(prepare_out_dir(str(target), "gen_data", force=True), target)

    def test_empty_directory_is_reused(self):
        target = self.dir / "empty"
        target.mkdir()
        self.assertEqual(prepare_out_dir(str(target), "gen_data"), target)

    def test_file_in_the_way(self):
        target = self.dir / "file"
        target.write_text("x")
        with self.assertRaises(ConfigError):
            prepare_out_dir(str(target), "gen_data", force=True)

    def test_default_lives_under_the_runs_root(self):
        with override_settings(VISTA_RUNS_ROOT=self.dir):
            path = prepare_out_dir(None, "evaluate")
        self.assertEqual(path.parent, self.dir)
        self.assertTrue(path.name.startswith("evaluate-"))

    @override_settings(VISTA_THREADS=3)
    def test_worker_count(self):
        self.assertEqual(worker_count(None), 3)
        self.assertEqual(worker_count(2), 2)
        self.assertEqual(worker_count(16), 3)
        with self.assertRaises(ConfigError):
            worker_count(0)


class CommandHelperTests(SimpleTestCase):
    def test_variant_plan_varies_one_factor(self):
        baseline = (Conditioning.FULL, HistoryMode.SALIENT, 0.5)
        variants = plan_variants(
            baseline, [Conditioning.FULL, Conditioning.TEXT_ONLY], [HistoryMode.ALL_MEAN], [0.0, 0.5]
        )
        self.assertEqual(variants[0], baseline)
        self.assertEqual(
            variants[1:],
            [
                (Conditioning.TEXT_ONLY, HistoryMode.SALIENT, 0.5),
                (Conditioning.FULL, HistoryMode.ALL_MEAN, 0.5),
                (Conditioning.FULL, HistoryMode.SALIENT, 0.0),
            ],
        )
        self.assertEqual(variant_name(variants[3]), "full/salient/lambda=0")

    def test_parse_list(self):
        self.assertEqual(parse_list("0, 0.5,,1", float, "--lambdas"), [0.0, 0.5, 1.0])
        with self.assertRaises(ConfigError):
            parse_list("full,everything", Conditioning, "--modes")

    def test_retrieval_pairs_are_distinct(self):
        pairs = [("a", 1), ("b", 2), ("a", 3), ("c", 4)]
        self.assertEqual(retrieval_pairs(pairs), [("a", 1), ("b", 2), ("c", 4)])
        self.assertEqual(retrieval_pairs(pairs, limit=2), [("a", 1), ("b", 2)])

    def test_corpus_stories_keep_only_the_first_frame(self):
        corpus = tiny_corpus(stories=3, frames=4)
        stories, references = stories_from_corpus(corpus, limit=2, frames=3)
        self.assertEqual(len(stories), 2)
        self.assertEqual([len(s.prompts) for s in stories], [3, 3])
        self.assertEqual([len(s.images) for s in stories], [1, 1])
        self.assertEqual([len(r) for r in references], [3, 3])

    def test_generated_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            self.assertEqual(generated_dir(root), root)
            (root / "frames").mkdir()
            self.assertEqual(generated_dir(root), root / "frames")


class PipelineCommandTests(TestCase):
    """Runs the tiny pipeline once and checks every stage's outputs."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.config = cls.tmp / "tiny.cfg"
        cls.config.write_text(TINY_FILE)
        cls.corpus = cls.tmp / "corpus"
        cls.pretrain = cls.tmp / "pretrain"
        cls.adapter = cls.tmp / "adapter"
        cls.gen_output = run("gen_data", config=str(cls.config), out=str(cls.corpus))
        cls.pretrain_output = run("pretrain", config=str(cls.config), corpus=str(cls.corpus), out=str(cls.pretrain))
        cls.adapter_output = run(
            "train_adapter", corpus=str(cls.corpus), base=str(cls.pretrain / "base.ckpt"), out=str(cls.adapter)
        )
        cls.base_ckpt = cls.pretrain / "base.ckpt"
        cls.vista_ckpt = cls.adapter / "vista.ckpt"

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def out(self, name: str) -> Path:
        return self.tmp / self._testMethodName / name

    def assertExitCode(self, code: int, name: str, **options):
        with self.assertRaises(CommandError) as ctx:
            run(name, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception

    def test_gen_data_outputs(self):
        manifest = json.loads((self.corpus / MANIFEST_NAME).read_text())
        self.assertEqual((manifest["stories"], manifest["frames"], manifest["tuples"]), (2, 3, 4))
        self.assertIn(f"corpus_hash={corpus_hash(self.corpus)}", self.gen_output)
        run_file = read_json(self.corpus / "run.json")
        self.assertEqual(run_file["exit_code"], 0)
        self.assertEqual(run_file["corpus_hash"], manifest["corpus_hash"])
        self.assertEqual(read_json(self.corpus / "config.json")["common_dim"], 8)

    def test_gen_data_is_reproducible(self):
        again = self.out("again")
        run("gen_data", config=str(self.config), out=str(again))
        self.assertEqual(corpus_hash(again), corpus_hash(self.corpus))
        held_out = self.out("held_out")
        run("gen_data", config=str(self.config), out=str(held_out), first_id=100, stories=1)
        self.assertEqual([r.story_id for r in load_corpus(held_out)], [100])

    def test_gen_data_refuses_a_used_directory(self):
        self.assertExitCode(2, "gen_data", config=str(self.config), out=str(self.corpus))
        self.assertExitCode(2, "gen_data", config=str(self.config), out=str(self.out("neg")), first_id=-1)

    def test_pretrain_outputs(self):
        self.assertTrue((self.pretrain / "vocab.txt").is_file())
        points = [json.loads(line) for line in (self.pretrain / "loss_curve.jsonl").read_text().splitlines()]
        self.assertEqual([p["step"] for p in points if p["stage"] == "base"], [0, 1])
        self.assertTrue(all(p["stage"] in ("encoders", "base") for p in points))
        self.assertEqual(
            sorted(p.name for p in (self.pretrain / "checkpoints").iterdir()), ["base-000001.ckpt", "base-000002.ckpt"]
        )
        self.assertEqual(read_json(self.pretrain / "run.json")["exit_code"], 0)

    def test_adapter_outputs(self):
        summary = read_json(self.adapter / "run.json")["summary"]
        self.assertLess(summary["trainable_ratio"], 1.0)
        self.assertEqual(summary["base_parameters"], read_json(self.pretrain / "run.json")["summary"]["base_parameters"])
        self.assertIn("base weights unchanged", self.adapter_output)
        self.assertEqual(
            sorted(p.name for p in (self.adapter / "checkpoints").iterdir()),
            ["adapter-000001.ckpt", "adapter-000002.ckpt"],
        )

    def test_runs_are_registered(self):
        runs = {run.command: run for run in PipelineRun.objects.all()}
        self.assertEqual(runs["train_adapter"].status, "succeeded")
        self.assertEqual(runs["train_adapter"].corpus_hash, corpus_hash(self.corpus))
        self.assertEqual(runs["pretrain"].exit_code, 0)

    def test_generate_evaluate_round(self):
        out = self.out("generate")
        output = run("generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(out))
        self.assertIn("generated frames=4", output)
        records = [json.loads(line) for line in (out / "salience.jsonl").read_text().splitlines()]
        self.assertEqual([(r["story_id"], r["frame"]) for r in records], [(0, 1), (0, 2), (1, 1), (1, 2)])
        self.assertTrue((out / "preview.ppm").read_bytes().startswith(b"P6"))
        frames = load_corpus(out / "frames")
        reference = load_corpus(self.corpus)
        self.assertEqual(frames[0].frames[0], reference[0].frames[0])
        self.assertEqual(frames[0].captions, reference[0].captions)

        report_dir = self.out("evaluate")
        run("evaluate", generated=str(out), corpus=str(self.corpus), out=str(report_dir))
        report = read_json(report_dir / "report.json")
        self.assertEqual(report["frames"], 4)
        self.assertGreaterEqual(report["tifa_analog"], 0.0)
        self.assertIsNotNone(report["fid"])
        self.assertEqual(report["corpus_hash"], corpus_hash(self.corpus))

    def test_zero_lambda_matches_base_only(self):
        zero, base = self.out("zero"), self.out("base")
        run("generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(zero), lam=0.0, no_preview=True)
        run("generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(base), base_only=True, no_preview=True)
        self.assertEqual(corpus_hash(zero / "frames"), corpus_hash(base / "frames"))
        self.assertFalse((zero / "preview.ppm").exists())

    def test_base_checkpoint_generates_only_base_only(self):
        self.assertExitCode(2, "generate", ckpt=str(self.base_ckpt), corpus=str(self.corpus), out=str(self.out("a")))
        run("generate", ckpt=str(self.base_ckpt), corpus=str(self.corpus), out=str(self.out("b")), base_only=True, limit=1)
        self.assertEqual(len(load_corpus(self.out("b") / "frames")), 1)

    def test_generate_from_a_story_file(self):
        reference = load_corpus(self.corpus)[1]
        story_file = self.out("input") / "stories.json"
        story_file.parent.mkdir(parents=True)
        story_file.write_text(json.dumps({
            "stories": [{
                "story_id": 5,
                "prompts": reference.captions[:2],
                "reference_corpus": str(self.corpus),
                "reference_story": 1,
            }]
        }))
        out = self.out("generated")
        run("generate", ckpt=str(self.vista_ckpt), story_file=str(story_file), out=str(out))
        frames = load_corpus(out / "frames")
        self.assertEqual([(r.story_id, len(r.frames)) for r in frames], [(5, 2)])
        np.testing.assert_array_equal(frames[0].frames[0].image, reference.frames[0].image)

    def test_generate_needs_exactly_one_source(self):
        self.assertExitCode(2, "generate", ckpt=str(self.vista_ckpt), out=str(self.out("none")))
        self.assertExitCode(
            2, "generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), story_file="x.json",
            out=str(self.out("both")),
        )

    def test_evaluating_ground_truth_is_perfect(self):
        out = self.out("truth")
        run("evaluate", generated=str(self.corpus), corpus=str(self.corpus), ckpt=str(self.vista_ckpt), out=str(out))
        report = read_json(out / "report.json")
        self.assertEqual(report["tifa_analog"], 1.0)
        self.assertAlmostEqual(report["clip_i_analog"], 1.0, places=5)
        self.assertAlmostEqual(report["fid"], 0.0, places=4)

    def test_evaluate_checks_its_checkpoint(self):
        self.assertExitCode(2, "evaluate", generated=str(self.corpus), out=str(self.out("no_ckpt")))
        generated = self.out("generated")
        run("generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(generated), limit=1, no_preview=True)
        self.assertExitCode(
            3, "evaluate", generated=str(generated), ckpt=str(self.base_ckpt), out=str(self.out("mismatch"))
        )
        self.assertExitCode(3, "evaluate", generated=str(self.out("absent")), out=str(self.out("absent_report")))

    def test_ablate(self):
        out = self.out("ablate")
        output = run(
            "ablate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(out), limit=1,
            modes="full,prompt_only", history_modes="salient", lambdas="0", relevance_cases=2,
        )
        report = read_json(out / "ablation.json")
        self.assertEqual(report["baseline"], "full/salient/lambda=0.5")
        self.assertEqual(
            [v["name"] for v in report["variants"]],
            ["full/salient/lambda=0.5", "prompt_only/salient/lambda=0.5", "full/salient/lambda=0"],
        )
        self.assertEqual(set(report["comparisons"]), {"prompt_only/salient/lambda=0.5", "full/salient/lambda=0"})
        self.assertEqual([t["metric"] for t in report["comparisons"]["full/salient/lambda=0"]], ["clip_i_analog", "tifa_analog"])
        self.assertTrue(0.0 <= report["salience_relevance"] <= 1.0)
        self.assertIn("salient pair relevance", output)

    def test_ablate_rejects_bad_options(self):
        common = {"ckpt": str(self.vista_ckpt), "corpus": str(self.corpus), "relevance_cases": 0}
        self.assertExitCode(2, "ablate", out=str(self.out("lambdas")), lambdas="-1", **common)
        self.assertExitCode(2, "ablate", out=str(self.out("modes")), modes="loud", **common)
        self.assertExitCode(2, "ablate", out=str(self.out("base")), **{**common, "ckpt": str(self.base_ckpt)})

    def test_missing_inputs_are_data_errors(self):
        self.assertExitCode(3, "pretrain", corpus=str(self.out("absent")), out=str(self.out("pretrain")))
        self.assertExitCode(
            3, "train_adapter", corpus=str(self.corpus), base=str(self.out("absent.ckpt")), out=str(self.out("adapter"))
        )

    def test_unknown_config_key(self):
        bad = self.tmp / "bad.cfg"
        bad.write_text("seed=1\nmystery=2\n")
        self.assertExitCode(2, "gen_data", config=str(bad), out=str(self.out("bad")))

    def test_moving_base_weights_is_refused(self):
        def nudge_base(unet, *args, **kwargs):
            param = unet.parameters()[0]
            param.assign(param.data + 1.0)
            return []

        with mock.patch("story.management.commands.train_adapter.train_adapter", side_effect=nudge_base):
            error = self.assertExitCode(
                5, "train_adapter", corpus=str(self.corpus), base=str(self.base_ckpt), out=str(self.out("frozen"))
            )
        self.assertIn("unet", str(error))
        self.assertEqual(read_json(self.out("frozen") / "run.json")["exit_code"], 5)

    def test_numeric_failures_exit_with_4(self):
        failure = NumericError("Non-finite values produced by matmul", site="mid.attn", step=1)
        with mock.patch("story.engine.story.StoryGenerator.continue_stories", side_effect=failure):
            error = self.assertExitCode(
                4, "generate", ckpt=str(self.vista_ckpt), corpus=str(self.corpus), out=str(self.out("nan"))
            )
        self.assertIn("site=mid.attn", str(error))
        failed = PipelineRun.objects.get(command="generate", status="failed")
        self.assertEqual(failed.exit_code, 4)
