"""
Template questions over scene graphs.

Each frame gets a protagonist presence question (yes), a presence question
for a color that is not in the frame (no), multiple-choice questions on
background, shape, color, position and action, and a companion presence
question when there is a companion. Multiple-choice options are the answer plus
three distractors from the same attribute space, shuffled by a stream keyed on
the graph.
"""

import hashlib
from typing import List, Optional, Protocol, Sequence

from pydantic import BaseModel, ConfigDict, model_validator

from story.data.scene import BACKGROUND_COLORS, OBJECT_COLORS, POSITIONS, SHAPES, VERBS, SceneGraph
from story.numerics.rng import RngStream, Stream

YES_NO = ("yes", "no")
MC_OPTIONS = 4


class QAItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    question: str
    kind: str
    choices: List[str]
    answer: int
    source_fact: str
    # object color the question is about; None for background questions
    color: Optional[str] = None
    shape: Optional[str] = None
    position: Optional[str] = None

    @model_validator(mode="after")
    def validate_answer(self):
        if self.kind not in ("yes-no", "multiple-choice"):
            raise ValueError(f"Unknown question kind '{self.kind}'")
        if not 0 <= self.answer < len(self.choices):
            raise ValueError(f"Answer index {self.answer} outside {len(self.choices)} choices")
        if len(set(self.choices)) != len(self.choices):
            raise ValueError("Choices must be distinct")
        return self


class QuestionSource(Protocol):
    def questions(self, graph: SceneGraph) -> List[QAItem]:
        ...


def _graph_stream(graph: SceneGraph, topic: str) -> RngStream:
    digest = hashlib.sha256(f"{graph.canonical()}|{topic}".encode("utf-8")).digest()
    return RngStream(int.from_bytes(digest[:8], "little"), Stream.EVAL)


def _multiple_choice(graph: SceneGraph, topic: str, question: str, answer: str, space: Sequence[str], **extra) -> QAItem:
    rng = _graph_stream(graph, topic)
    options = [answer]
    while len(options) < min(MC_OPTIONS, len(space)):
        options.append(rng.choice(space, exclude=options))
    order = rng.permutation(len(options))
    choices = [options[i] for i in order]
    return QAItem(
        question=question,
        kind="multiple-choice",
        choices=choices,
        answer=choices.index(answer),
        source_fact=topic,
        **extra,
    )


def _yes_no(question: str, truth: bool, topic: str, **extra) -> QAItem:
    return QAItem(question=question, kind="yes-no", choices=list(YES_NO), answer=0 if truth else 1, source_fact=topic, **extra)


def verb_phrase(verb: str) -> str:
    return verb.replace("-", " ")


def generate_questions(graph: SceneGraph) -> List[QAItem]:
    items = []
    protagonist = graph.protagonist
    used = {obj.color for obj in (protagonist, graph.companion) if obj is not None}
    absent = next(color for color in OBJECT_COLORS if color not in used)

    if protagonist is not None:
        name = f"{protagonist.color} {protagonist.shape}"
        items.append(_yes_no(f"Is there a {name}?", True, "protagonist", color=protagonist.color, shape=protagonist.shape))
    items.append(_yes_no(f"Is there a {absent} object?", False, "absent", color=absent))
    items.append(
        _multiple_choice(graph, "background", "What color is the background?", graph.background, tuple(BACKGROUND_COLORS))
    )
    if protagonist is not None:
        items.append(
            _multiple_choice(
                graph, "shape", f"What shape is the {protagonist.color} object?", protagonist.shape, SHAPES,
                color=protagonist.color,
            )
        )
        items.append(
            _multiple_choice(
                graph, "color", f"What color is the {protagonist.shape} in the {graph.position}?", protagonist.color,
                tuple(OBJECT_COLORS), shape=protagonist.shape, position=graph.position,
            )
        )
        items.append(
            _multiple_choice(
                graph, "position", f"Where is the {name}?", graph.position, POSITIONS,
                color=protagonist.color, shape=protagonist.shape,
            )
        )
        items.append(
            _multiple_choice(
                graph, "verb", f"What is the {name} doing?", verb_phrase(graph.verb),
                tuple(verb_phrase(v) for v in VERBS), color=protagonist.color, shape=protagonist.shape,
            )
        )
    if graph.companion is not None:
        companion = graph.companion
        items.append(
            _yes_no(
                f"Is there a {companion.color} {companion.shape}?", True, "companion",
                color=companion.color, shape=companion.shape,
            )
        )
    return items


class TemplateQuestionSource:
    def questions(self, graph: SceneGraph) -> List[QAItem]:
        return generate_questions(graph)
