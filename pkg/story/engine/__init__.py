from story.engine.salience import SalienceReport, salience_scores, select_salient_history
from story.engine.story import Story, StoryGenerator

__all__ = ["SalienceReport", "Story", "StoryGenerator", "salience_scores", "select_salient_history"]
