"""
Story metrics: QA faithfulness, embedding similarities and Frechet distance.

The CLIP-style scores and the Frechet distance all use the frozen dual
encoder's pooled embeddings.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from story.data.captions import parse_caption
from story.data.corpus import StoryRecord
from story.data.scene import SceneGraph
from story.encoders.model import DualEncoder, pooled_embedding
from story.encoders.vocab import tokenize_batch
from story.engine.story import Story
from story.evaluation.oracle import Answerer, ImageReading, OracleAnswerer, answer_with_reading
from story.evaluation.questions import QuestionSource, TemplateQuestionSource
from story.numerics.tensor import no_grad
from story.schemas.reports import MetricReport, SignTestResult, StoryMetrics

logger = logging.getLogger(__name__)

FID_EPS = 1e-6
CONDITION_LIMIT = 1e10


@dataclass
class FrameScore:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def score_frame(
    image: np.ndarray,
    graph: SceneGraph,
    source: Optional[QuestionSource] = None,
    answerer: Optional[Answerer] = None,
) -> FrameScore:
    items = (source or TemplateQuestionSource()).questions(graph)
    if answerer is None:
        reading = ImageReading(image)
        answers = [answer_with_reading(reading, item) for item in items]
    else:
        answers = [answerer.answer(image, item) for item in items]
    correct = sum(int(a == item.answer) for a, item in zip(answers, items))
    return FrameScore(correct=correct, total=len(items))


def tifa_frame_scores(
    images: Sequence[np.ndarray],
    graphs: Sequence[SceneGraph],
    source: Optional[QuestionSource] = None,
    answerer: Optional[Answerer] = None,
    threads: int = 1,
) -> List[FrameScore]:
    if len(images) != len(graphs):
        raise ValueError(f"{len(images)} images but {len(graphs)} scene graphs")
    if not images:
        raise ValueError("No frames to score")

    def run(pair):
        return score_frame(pair[0], pair[1], source, answerer)

    pairs = list(zip(images, graphs))
    if threads <= 1:
        return [run(pair) for pair in pairs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, pairs))


def tifa_analog_score(
    images: Sequence[np.ndarray],
    graphs: Sequence[SceneGraph],
    source: Optional[QuestionSource] = None,
    answerer: Optional[Answerer] = None,
    threads: int = 1,
) -> float:
    """Mean over frames of the fraction of questions answered correctly."""
    scores = tifa_frame_scores(images, graphs, source, answerer, threads)
    return float(np.mean([s.accuracy for s in scores]))


def image_features(encoder: DualEncoder, images: Sequence[np.ndarray]) -> np.ndarray:
    with no_grad():
        return pooled_embedding(encoder.encode_image(np.stack(images))).data.astype(np.float64)


def text_features(encoder: DualEncoder, captions: Sequence[str]) -> np.ndarray:
    with no_grad():
        tokens = tokenize_batch(captions, encoder.vocab, encoder.max_len)
        return pooled_embedding(encoder.encode_text(tokens)).data.astype(np.float64)


def clip_t_analog(encoder: DualEncoder, image: np.ndarray, caption: str) -> float:
    return float(image_features(encoder, [image])[0] @ text_features(encoder, [caption])[0])


def clip_i_analog(encoder: DualEncoder, image: np.ndarray, reference: np.ndarray) -> float:
    features = image_features(encoder, [image, reference])
    return float(features[0] @ features[1])


@dataclass
class FidResult:
    value: float
    regularized: bool


def _statistics(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"Frechet distance needs an (N>=2, d) feature matrix, got {features.shape}")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _ill_conditioned(cov: np.ndarray) -> bool:
    values = linalg.eigvalsh(cov)
    return values.min() <= values.max() / CONDITION_LIMIT


def fid_details(features_a: np.ndarray, features_b: np.ndarray) -> FidResult:
    mu_a, cov_a = _statistics(features_a)
    mu_b, cov_b = _statistics(features_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"Feature widths differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    regularized = _ill_conditioned(cov_a) or _ill_conditioned(cov_b)
    if regularized:
        logger.warning(f"Ill-conditioned covariance in Frechet distance, adding {FID_EPS} * I")
        offset = FID_EPS * np.eye(cov_a.shape[0])
        cov_a, cov_b = cov_a + offset, cov_b + offset
    # tr sqrt(A B) == tr sqrt(A^1/2 B A^1/2), and the latter is symmetric PSD
    root_a = _psd_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    values = linalg.eigvalsh((product + product.T) * 0.5)
    trace_sqrt = float(np.sqrt(np.clip(values, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return FidResult(value=value, regularized=regularized)


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    return fid_details(features_a, features_b).value


def paired_sign_test(treatment: Sequence[float], control: Sequence[float], metric: str) -> SignTestResult:
    """One-sided sign test that ``treatment`` beats ``control`` on paired samples."""
    treatment, control = np.asarray(treatment, dtype=np.float64), np.asarray(control, dtype=np.float64)
    if treatment.shape != control.shape:
        raise ValueError("Sign test needs paired samples of equal length")
    diff = treatment - control
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    trials = wins + losses
    p_value = float(stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue) if trials else 1.0
    return SignTestResult(
        metric=metric,
        wins=wins,
        losses=losses,
        ties=int(diff.size - trials),
        mean_difference=float(diff.mean()) if diff.size else 0.0,
        p_value=p_value,
    )


def _graphs(story: Story) -> List[SceneGraph]:
    if story.scene_graphs is not None:
        return list(story.scene_graphs)
    return [parse_caption(prompt) for prompt in story.prompts]


def evaluate_stories(
    encoder: DualEncoder,
    stories: Sequence[Story],
    references: Optional[Sequence[StoryRecord]] = None,
    threads: int = 1,
    config: Optional[dict] = None,
    corpus_hash: Optional[str] = None,
) -> MetricReport:
    """
    Score the generated frames (index >= 1) of every story.

    ``references`` are the ground-truth stories with matching ids; with them
    the report includes image-image similarity and the Frechet distance.
    """
    if not stories:
        raise ValueError("No stories to evaluate")
    by_id = {record.story_id: record for record in references or ()}
    per_story = []
    all_tifa, all_clip_t, all_clip_i = [], [], []
    generated, truth = [], []
    questions = 0
    for story in stories:
        graphs = _graphs(story)
        frames = list(range(1, len(story.images)))
        if not frames:
            continue
        images = [story.images[k] for k in frames]
        scores = tifa_frame_scores(images, [graphs[k] for k in frames], threads=threads)
        tifa = [s.accuracy for s in scores]
        questions += sum(s.total for s in scores)
        feats = image_features(encoder, images)
        clip_t = (feats * text_features(encoder, [story.prompts[k] for k in frames])).sum(axis=-1)
        clip_i = None
        record = by_id.get(story.story_id)
        if record is not None:
            reference_images = [record.frames[k].image for k in frames]
            clip_i = (feats * image_features(encoder, reference_images)).sum(axis=-1)
            all_clip_i.extend(clip_i.tolist())
            generated.append(feats)
            truth.append(image_features(encoder, reference_images))
        all_tifa.extend(tifa)
        all_clip_t.extend(clip_t.tolist())
        per_story.append(
            StoryMetrics(
                story_id=story.story_id,
                frames=len(frames),
                tifa_analog=float(np.mean(tifa)),
                clip_t_analog=float(np.mean(clip_t)),
                clip_i_analog=float(np.mean(clip_i)) if clip_i is not None else None,
            )
        )
    if not all_tifa:
        raise ValueError("Stories contain no generated frames")
    fid_result = None
    if generated and sum(len(g) for g in generated) >= 2:
        fid_result = fid_details(np.concatenate(generated), np.concatenate(truth))
    report = MetricReport(
        tifa_analog=float(np.mean(all_tifa)),
        clip_t_analog=float(np.mean(all_clip_t)),
        clip_i_analog=float(np.mean(all_clip_i)) if all_clip_i else None,
        fid=max(fid_result.value, 0.0) if fid_result else None,
        fid_regularized=fid_result.regularized if fid_result else False,
        frames=len(all_tifa),
        questions=questions,
        per_story=per_story,
        config=config or {},
        corpus_hash=corpus_hash,
    )
    logger.info(
        f"Evaluated {report.frames} frames: tifa {report.tifa_analog:.3f}, clip-t {report.clip_t_analog:.3f}, "
        f"clip-i {report.clip_i_analog}, fid {report.fid}"
    )
    return report
