"""
Auto-regressive story continuation.

Frame 0 is the real reference. Every later frame is sampled from its prompt
and one fusion feature computed over the frames before it, generated ones
included, so frames within a story are strictly sequential while separate
stories can run on separate threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from story.data.captions import parse_caption
from story.data.corpus import StoryFrame, StoryRecord
from story.data.scene import SceneGraph
from story.denoiser.adapter import Denoiser
from story.diffusion.sampling import SamplerConfig, sample, to_unit_range
from story.diffusion.schedule import NoiseSchedule
from story.encoders.model import DualEncoder
from story.encoders.vocab import tokenize
from story.engine.salience import select_salient_history
from story.exceptions import SequencingError
from story.fusion.context import embed_history_pair
from story.fusion.model import FusionModel, mean_fusion
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import no_grad
from story.schemas.config import Conditioning, HistoryMode, PipelineConfig
from story.schemas.reports import SalienceRecord

logger = logging.getLogger(__name__)


@dataclass
class Story:
    """Prompts for every frame; images[0] is real, later images are generated."""

    prompts: List[str]
    images: List[np.ndarray]
    scene_graphs: Optional[List[SceneGraph]] = None
    story_id: int = 0
    salience: List[SalienceRecord] = field(default_factory=list)

    @classmethod
    def from_record(cls, record: StoryRecord, frames: Optional[int] = None) -> "Story":
        """Continuation setup for a corpus story: all prompts, only the first image."""
        chosen = record.frames[:frames] if frames else record.frames
        return cls(
            prompts=[f.caption for f in chosen],
            images=[chosen[0].image],
            scene_graphs=[f.graph for f in chosen],
            story_id=record.story_id,
        )

    @property
    def complete(self) -> bool:
        return len(self.images) == len(self.prompts)

    def to_record(self) -> StoryRecord:
        """Corpus record of the materialized frames; prompts without graphs are parsed back into one."""
        graphs = self.scene_graphs or [parse_caption(prompt) for prompt in self.prompts]
        frames = [
            StoryFrame(graph=graphs[k], caption=self.prompts[k], image=image) for k, image in enumerate(self.images)
        ]
        return StoryRecord(story_id=self.story_id, frames=frames)


class StoryGenerator:
    def __init__(
        self,
        encoder: DualEncoder,
        fusion_model: FusionModel,
        denoiser: Denoiser,
        config: PipelineConfig,
        lam: Optional[float] = None,
        conditioning: Optional[Conditioning] = None,
        history_mode: Optional[HistoryMode] = None,
        sampler: Optional[SamplerConfig] = None,
    ):
        self.encoder = encoder
        self.fusion_model = fusion_model
        self.denoiser = denoiser
        self.config = config
        self.lam = config.lambda_ if lam is None else lam
        self.conditioning = Conditioning(conditioning or config.conditioning)
        self.history_mode = HistoryMode(history_mode or config.history_mode)
        self.sampler = sampler or SamplerConfig(
            steps=config.sampler_steps, guidance_scale=config.guidance_scale, eta=config.eta, seed=config.seed
        )
        self.schedule = NoiseSchedule(config.timesteps, config.beta_start, config.beta_end)

    def generate_next_frame(self, story: Story, k: int) -> Tuple[np.ndarray, SalienceRecord]:
        """Sample frame ``k`` from prompts[k] and the history frames 0..k-1."""
        if k < 1 or len(story.images) < k:
            raise SequencingError(
                f"Story {story.story_id}: frame {k} needs frames 0..{k - 1}, only {len(story.images)} exist"
            )
        if k >= len(story.prompts):
            raise SequencingError(f"Story {story.story_id} has no prompt for frame {k}")
        with no_grad():
            current = self.encoder.encode_text(tokenize(story.prompts[k], self.encoder.vocab, self.encoder.max_len))
            histories = [
                embed_history_pair(self.encoder, story.prompts[i], story.images[i], self.conditioning, pair_index=i)
                for i in range(k)
            ]
            feature, report = select_salient_history(current, histories, self.fusion_model)
            if self.history_mode == HistoryMode.ALL_MEAN:
                feature = mean_fusion(report.candidates)
            lam = self.lam
            if self.conditioning == Conditioning.PROMPT_ONLY:
                feature, lam = None, 0.0
            rng = RngStream(self.sampler.seed, Stream.SAMPLER).child(story.story_id).child(k)
            x = sample(
                self.denoiser, current, feature, lam, self.sampler, self.schedule,
                image_size=self.config.image_size, rng=rng,
            )
        record = SalienceRecord(
            story_id=story.story_id,
            frame=k,
            chosen_index=report.chosen_index,
            scores=[float(s) for s in report.scores],
            logit_summaries=report.logit_summaries,
            seed=self.sampler.seed,
            lam=lam,
            history_mode=self.history_mode.value,
            conditioning=self.conditioning.value,
            sampler=self.sampler.model_dump(),
        )
        return to_unit_range(x), record

    def continue_story(self, story: Story, on_record: Optional[Callable[[SalienceRecord], None]] = None) -> Story:
        """Generate every missing frame in order; returns a new, complete Story."""
        if len(story.prompts) < 2:
            raise SequencingError(f"Story {story.story_id} has fewer than 2 prompts, nothing to generate")
        if not story.images:
            raise SequencingError(f"Story {story.story_id} is missing its first (reference) frame")
        result = Story(
            prompts=list(story.prompts),
            images=[story.images[0]],
            scene_graphs=story.scene_graphs,
            story_id=story.story_id,
        )
        for k in range(1, len(result.prompts)):
            image, record = self.generate_next_frame(result, k)
            result.images.append(image)
            result.salience.append(record)
            if on_record:
                on_record(record)
            logger.info(f"Story {story.story_id} frame {k}: history {record.chosen_index} scores {record.scores}")
        return result

    def continue_stories(self, stories: Sequence[Story], threads: int = 1) -> List[Story]:
        if threads <= 1:
            return [self.continue_story(s) for s in stories]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(self.continue_story, stories))
