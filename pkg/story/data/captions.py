"""
Template captions and their inverse parser.

    the {size} {color} {shape} {verb}[ at the {position}] on the {bg} background
        [, with a {size} {color} {shape}[ at the {position}]]

The center cell is the unmarked position, so the minimal caption reads
"the small red circle sits on the white background". With ``paraphrase`` a few
words are swapped for synonyms; the parser accepts both forms.
"""

import logging
from typing import List, Optional

from story.data.scene import (
    BACKGROUND_COLORS,
    CENTER,
    OBJECT_COLORS,
    POSITIONS,
    SHAPES,
    SIZES,
    ObjectSpec,
    SceneGraph,
)
from story.exceptions import DataFormatError

logger = logging.getLogger(__name__)

VERB_WORDS = {
    "sits": ("sits",),
    "moves-left": ("moves", "left"),
    "moves-right": ("moves", "right"),
    "jumps": ("jumps",),
}

SYNONYMS = {
    "small": "little",
    "large": "big",
    "sits": "rests",
    "jumps": "hops",
    "circle": "ball",
    "square": "box",
}
CANONICAL = {synonym: word for word, synonym in SYNONYMS.items()}

EMPTY_SUBJECT = "nothing"


def grammar_words() -> List[str]:
    """Every word the caption grammar (including paraphrases) can emit."""
    words = {"the", "at", "on", "background", "with", "a", ",", EMPTY_SUBJECT}
    words.update(SIZES)
    words.update(OBJECT_COLORS)
    words.update(BACKGROUND_COLORS)
    words.update(SHAPES)
    for parts in VERB_WORDS.values():
        words.update(parts)
    for position in POSITIONS:
        words.update(position.split())
    words.update(SYNONYMS.values())
    return sorted(words)


def split_words(caption: str) -> List[str]:
    return caption.replace(",", " ,").split()


def join_words(words: List[str]) -> str:
    return " ".join(words).replace(" ,", ",")


def _object_words(spec: ObjectSpec) -> List[str]:
    return [spec.size, spec.color, spec.shape]


def caption_from_graph(graph: SceneGraph, paraphrase_rng=None) -> str:
    if graph.protagonist is None:
        words = [EMPTY_SUBJECT, "on", "the", graph.background, "background"]
        return join_words(words)

    words = ["the", *_object_words(graph.protagonist), *VERB_WORDS[graph.verb]]
    if graph.position != CENTER:
        words += ["at", "the", *graph.position.split()]
    words += ["on", "the", graph.background, "background"]
    if graph.companion is not None:
        words += [",", "with", "a", *_object_words(graph.companion)]
        if graph.companion_position != CENTER:
            words += ["at", "the", *graph.companion_position.split()]

    if paraphrase_rng is not None:
        words = [
            SYNONYMS[word] if word in SYNONYMS and paraphrase_rng.random() < 0.5 else word
            for word in words
        ]
    return join_words(words)


class _Cursor:
    def __init__(self, caption: str):
        self.caption = caption
        self.words = [CANONICAL.get(word, word) for word in split_words(caption)]
        self.index = 0

    def peek(self) -> Optional[str]:
        return self.words[self.index] if self.index < len(self.words) else None

    def take(self, allowed=None) -> str:
        word = self.peek()
        if word is None or (allowed is not None and word not in allowed):
            raise DataFormatError(f"Cannot parse caption '{self.caption}': unexpected '{word}' at word {self.index}")
        self.index += 1
        return word

    def expect(self, *words: str):
        for word in words:
            self.take((word,))


def _parse_object(cursor: _Cursor) -> ObjectSpec:
    size = cursor.take(SIZES)
    color = cursor.take(OBJECT_COLORS)
    shape = cursor.take(SHAPES)
    return ObjectSpec(shape=shape, color=color, size=size)


def _parse_position(cursor: _Cursor) -> str:
    if cursor.peek() != "at":
        return CENTER
    cursor.expect("at", "the")
    first = cursor.take()
    second = cursor.take()
    position = f"{first} {second}"
    if position not in POSITIONS:
        raise DataFormatError(f"Cannot parse caption '{cursor.caption}': unknown position '{position}'")
    return position


def parse_caption(caption: str) -> SceneGraph:
    """Recover the scene graph a caption was generated from."""
    cursor = _Cursor(caption)
    if cursor.peek() == EMPTY_SUBJECT:
        cursor.take()
        cursor.expect("on", "the")
        background = cursor.take(BACKGROUND_COLORS)
        cursor.expect("background")
        return SceneGraph(background=background)

    cursor.expect("the")
    protagonist = _parse_object(cursor)
    verb = None
    for name, parts in VERB_WORDS.items():
        if tuple(cursor.words[cursor.index:cursor.index + len(parts)]) == parts:
            verb = name
            cursor.index += len(parts)
            break
    if verb is None:
        raise DataFormatError(f"Cannot parse caption '{caption}': missing verb")
    position = _parse_position(cursor)
    cursor.expect("on", "the")
    background = cursor.take(BACKGROUND_COLORS)
    cursor.expect("background")

    companion = None
    companion_position = None
    if cursor.peek() == ",":
        cursor.expect(",", "with", "a")
        companion = _parse_object(cursor)
        companion_position = _parse_position(cursor)
    if cursor.peek() is not None:
        raise DataFormatError(f"Cannot parse caption '{caption}': trailing words")

    return SceneGraph(
        protagonist=protagonist,
        background=background,
        position=position,
        verb=verb,
        companion=companion,
        companion_position=companion_position,
    )
