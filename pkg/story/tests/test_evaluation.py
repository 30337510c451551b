import numpy as np
from django.test import SimpleTestCase

from story.data.render import render_scene
from story.data.scene import ObjectSpec, SceneGraph
from story.engine.story import Story
from story.evaluation.metrics import (
    clip_i_analog,
    clip_t_analog,
    evaluate_stories,
    fid,
    fid_details,
    paired_sign_test,
    score_frame,
    tifa_analog_score,
)
from story.evaluation.oracle import OracleAnswerer, answer_question_oracle
from story.evaluation.questions import QAItem, generate_questions

from .helpers import tiny_corpus, tiny_models

HERO = ObjectSpec(shape="triangle", color="blue", size="large")
FRIEND = ObjectSpec(shape="star", color="yellow", size="small")


class QuestionTests(SimpleTestCase):
    def test_question_counts(self):
        alone = SceneGraph(protagonist=HERO, background="gray", position="top left", verb="jumps")
        with_friend = SceneGraph(
            protagonist=HERO, background="gray", companion=FRIEND, companion_position="bottom right"
        )
        self.assertEqual(len(generate_questions(alone)), 7)
        self.assertEqual(len(generate_questions(with_friend)), 8)
        self.assertEqual(len(generate_questions(SceneGraph(background="navy"))), 2)

    def test_questions_are_deterministic(self):
        graph = SceneGraph(protagonist=HERO, background="white", verb="moves-left")
        self.assertEqual(generate_questions(graph), generate_questions(graph))

    def test_multiple_choice_has_four_distinct_options(self):
        graph = SceneGraph(protagonist=HERO, background="white")
        for item in generate_questions(graph):
            if item.kind == "multiple-choice":
                self.assertEqual(len(item.choices), 4)
                self.assertIn(item.choices[item.answer], (graph.background, "triangle", "blue", "center", "sits"))

    def test_answer_must_index_a_choice(self):
        with self.assertRaises(ValueError):
            QAItem(question="?", kind="yes-no", choices=["yes", "no"], answer=2, source_fact="absent")


class OracleTests(SimpleTestCase):
    def test_oracle_reads_rendered_frames_perfectly(self):
        for record in tiny_corpus(stories=6, frames=4, seed=3):
            for frame in record.frames:
                score = score_frame(frame.image, frame.graph)
                self.assertEqual(score.correct, score.total, frame.caption)

    def test_every_verb_and_corner(self):
        for verb in ("sits", "jumps", "moves-left", "moves-right"):
            for position in ("top left", "bottom right", "center"):
                graph = SceneGraph(protagonist=HERO, background="teal", position=position, verb=verb)
                score = score_frame(render_scene(graph), graph, answerer=OracleAnswerer())
                self.assertEqual(score.accuracy, 1.0, f"{verb} at {position}")

    def test_color_question_binds_to_the_protagonist(self):
        twin = ObjectSpec(shape="triangle", color="yellow", size="large")
        graph = SceneGraph(
            protagonist=HERO, background="white", position="top left", companion=twin, companion_position="bottom right"
        )
        item = QAItem(
            question="What color is the triangle in the top left?",
            kind="multiple-choice",
            choices=["red", "yellow", "blue", "green"],
            answer=2,
            source_fact="color",
            shape="triangle",
            position="top left",
        )
        self.assertEqual(answer_question_oracle(render_scene(graph), item), 2)
        swapped = SceneGraph(
            protagonist=twin, background="white", position="top left", companion=HERO, companion_position="bottom right"
        )
        self.assertEqual(answer_question_oracle(render_scene(swapped), item), 1)
        generated = [q for q in generate_questions(graph) if q.source_fact == "color"]
        self.assertEqual(len(generated), 1)
        self.assertEqual(generated[0].choices[generated[0].answer], "blue")

    def test_blank_image_fails_object_questions(self):
        graph = SceneGraph(protagonist=HERO, background="gray")
        gray = np.full((32, 32, 3), 0.5, dtype=np.float32)
        self.assertLess(score_frame(gray, graph).accuracy, 1.0)
        presence = generate_questions(graph)[0]
        self.assertEqual(answer_question_oracle(gray, presence), 1)

    def test_tifa_is_a_mean_over_frames(self):
        graph = SceneGraph(protagonist=HERO, background="gray")
        gray = np.full((32, 32, 3), 0.5, dtype=np.float32)
        images = [render_scene(graph), gray]
        expected = (1.0 + score_frame(gray, graph).accuracy) / 2
        self.assertAlmostEqual(tifa_analog_score(images, [graph, graph]), expected)
        self.assertAlmostEqual(tifa_analog_score(images, [graph, graph], threads=2), expected)
        with self.assertRaises(ValueError):
            tifa_analog_score(images, [graph])


def random_features():
    return np.random.default_rng(0).normal(size=(40, 4))


def sign_grid(center, spread):
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    return np.asarray(center, dtype=np.float64) + signs * np.asarray(spread, dtype=np.float64)


class FrechetDistanceTests(SimpleTestCase):
    def test_identical_sets(self):
        features = random_features()
        self.assertAlmostEqual(fid(features, features), 0.0, places=6)

    def test_diagonal_closed_form(self):
        a = sign_grid((0.0, 0.0), (1.0, 2.0))
        b = sign_grid((1.0, 1.0), (3.0, 0.5))
        # mean gap 2, plus (4/3) * ((1-3)^2 + (2-0.5)^2)
        self.assertAlmostEqual(fid(a, b), 2.0 + 4.0 / 3.0 * 6.25, places=8)
        self.assertAlmostEqual(fid(b, a), fid(a, b), places=8)

    def test_singular_covariance_is_regularized(self):
        a = np.column_stack([np.arange(5.0), np.zeros(5)])
        with self.assertLogs("story.evaluation.metrics", "WARNING"):
            result = fid_details(a, a + 1.0)
        self.assertTrue(result.regularized)
        self.assertAlmostEqual(result.value, 2.0, places=5)

    def test_bad_shapes(self):
        with self.assertRaises(ValueError):
            fid(np.zeros((1, 3)), np.zeros((4, 3)))
        with self.assertRaises(ValueError):
            fid(np.ones((4, 3)) * np.arange(4)[:, None], np.ones((4, 2)) * np.arange(4)[:, None])


class SignTestTests(SimpleTestCase):
    def test_wins_losses_and_ties(self):
        result = paired_sign_test([1, 1, 1, 1, 1, 0], [0, 0, 0, 0, 0, 0], "tifa_analog")
        self.assertEqual((result.wins, result.losses, result.ties), (5, 0, 1))
        self.assertAlmostEqual(result.p_value, 0.5 ** 5)
        self.assertAlmostEqual(result.mean_difference, 5 / 6)

    def test_all_ties(self):
        result = paired_sign_test([0.5, 0.5], [0.5, 0.5], "clip_i_analog")
        self.assertEqual(result.p_value, 1.0)
        self.assertEqual(result.ties, 2)

    def test_unpaired_samples(self):
        with self.assertRaises(ValueError):
            paired_sign_test([1.0], [1.0, 2.0], "fid")


class EvaluateStoriesTests(SimpleTestCase):
    def setUp(self):
        self.encoder = tiny_models(with_adapter=False).encoder
        self.records = tiny_corpus(stories=2, frames=3)

    def test_ground_truth_scores_perfectly(self):
        stories = [
            Story(prompts=r.captions, images=r.images, scene_graphs=r.graphs, story_id=r.story_id) for r in self.records
        ]
        report = evaluate_stories(self.encoder, stories, references=self.records, corpus_hash="abc")
        self.assertEqual(report.tifa_analog, 1.0)
        self.assertEqual(report.frames, 4)
        self.assertAlmostEqual(report.clip_i_analog, 1.0, places=5)
        self.assertAlmostEqual(report.fid, 0.0, places=4)
        self.assertEqual([s.story_id for s in report.per_story], [0, 1])
        self.assertEqual(report.corpus_hash, "abc")
        self.assertGreater(report.questions, 0)

    def test_without_references(self):
        stories = [Story(prompts=r.captions, images=r.images, story_id=r.story_id) for r in self.records]
        report = evaluate_stories(self.encoder, stories)
        self.assertIsNone(report.clip_i_analog)
        self.assertIsNone(report.fid)
        self.assertEqual(report.tifa_analog, 1.0)

    def test_similarity_helpers(self):
        frame = self.records[0].frames[1]
        self.assertAlmostEqual(clip_i_analog(self.encoder, frame.image, frame.image), 1.0, places=5)
        self.assertLessEqual(abs(clip_t_analog(self.encoder, frame.image, frame.caption)), 1.0 + 1e-6)

    def test_nothing_to_score(self):
        with self.assertRaises(ValueError):
            evaluate_stories(self.encoder, [])
        single = Story(prompts=self.records[0].captions, images=self.records[0].images[:1])
        with self.assertRaises(ValueError):
            evaluate_stories(self.encoder, [single])
