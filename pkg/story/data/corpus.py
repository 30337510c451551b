"""
Shape-story corpus: generation, four-tuple extraction and on-disk format.

A corpus directory holds ``manifest.json`` (version, counts, grammar hash and
a story index) and ``stories.bin``, a sequence of length-prefixed records:

    u64 record length
    u32 story id, u32 frame count
    per frame: u32 len + graph (canonical JSON), u32 len + caption (UTF-8),
               u32 len + image (32x32x3 little-endian float32)

All integers are little-endian. Loading re-checks every length and reports
the byte offset of the first inconsistency.
"""

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError as SchemaValidationError

from story.data.captions import caption_from_graph, grammar_words
from story.data.render import IMAGE_SIZE, render_scene
from story.data.scene import SceneGraph, sample_frame, sample_protagonist
from story.exceptions import DataFormatError
from story.numerics.rng import RngStream, Stream

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
STORIES_NAME = "stories.bin"
IMAGE_DTYPE = np.dtype("<f4")
IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)


@dataclass
class StoryFrame:
    graph: SceneGraph
    caption: str
    image: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, StoryFrame)
            and self.graph == other.graph
            and self.caption == other.caption
            and self.image.tobytes() == other.image.tobytes()
        )


@dataclass
class StoryRecord:
    story_id: int
    frames: List[StoryFrame] = field(default_factory=list)

    @property
    def captions(self) -> List[str]:
        return [frame.caption for frame in self.frames]

    @property
    def images(self) -> List[np.ndarray]:
        return [frame.image for frame in self.frames]

    @property
    def graphs(self) -> List[SceneGraph]:
        return [frame.graph for frame in self.frames]


@dataclass
class FourTuple:
    """Two consecutive (prompt, image) pairs of one story."""

    story_id: int
    k: int
    prev_caption: str
    prev_image: np.ndarray
    caption: str
    image: np.ndarray


def grammar_hash() -> str:
    return hashlib.sha256("\n".join(grammar_words()).encode("utf-8")).hexdigest()


def generate_story(rng: RngStream, length: int, story_id: int = 0, caption_noise: bool = False) -> StoryRecord:
    """Sample one protagonist and ``length`` frames around it."""
    if length < 2:
        raise ValueError(f"A story needs at least 2 frames, got {length}")
    protagonist = sample_protagonist(rng)
    record = StoryRecord(story_id=story_id)
    for _ in range(length):
        graph = sample_frame(rng, protagonist)
        caption = caption_from_graph(graph, paraphrase_rng=rng if caption_noise else None)
        record.frames.append(StoryFrame(graph=graph, caption=caption, image=render_scene(graph)))
    return record


def generate_corpus(
    seed: int,
    stories: int,
    frames: int,
    first_id: int = 0,
    caption_noise: bool = False,
    threads: int = 1,
) -> List[StoryRecord]:
    """Stories ``first_id .. first_id + stories - 1``, each on its own data stream."""
    root = RngStream(seed, Stream.DATA)

    def build(story_id: int) -> StoryRecord:
        return generate_story(root.child(story_id), frames, story_id=story_id, caption_noise=caption_noise)

    ids = range(first_id, first_id + stories)
    if threads <= 1:
        corpus = [build(story_id) for story_id in ids]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            corpus = list(pool.map(build, ids))
    logger.info(f"Generated {len(corpus)} stories x {frames} frames (seed={seed}, first_id={first_id})")
    return corpus


def extract_four_tuples(corpus: List[StoryRecord]) -> List[FourTuple]:
    tuples = []
    for record in corpus:
        if len(record.frames) < 2:
            raise ValueError(f"Story {record.story_id} has fewer than 2 frames")
        for k in range(len(record.frames) - 1):
            prev, cur = record.frames[k], record.frames[k + 1]
            tuples.append(
                FourTuple(
                    story_id=record.story_id,
                    k=k,
                    prev_caption=prev.caption,
                    prev_image=prev.image,
                    caption=cur.caption,
                    image=cur.image,
                )
            )
    return tuples


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def _pack_bytes(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _encode_story(record: StoryRecord) -> bytes:
    parts = [struct.pack("<II", record.story_id, len(record.frames))]
    for frame in record.frames:
        image = np.ascontiguousarray(frame.image, dtype=IMAGE_DTYPE)
        if image.shape != IMAGE_SHAPE:
            raise DataFormatError(f"Story {record.story_id} has an image of shape {image.shape}")
        parts.append(_pack_bytes(frame.graph.canonical().encode("utf-8")))
        parts.append(_pack_bytes(frame.caption.encode("utf-8")))
        parts.append(_pack_bytes(image.tobytes()))
    return b"".join(parts)


def save_corpus(corpus: List[StoryRecord], path, extra: Optional[dict] = None) -> str:
    """Write ``corpus`` under ``path`` and return the corpus hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    blob = bytearray()
    for record in corpus:
        body = _encode_story(record)
        index.append({"story_id": record.story_id, "offset": len(blob), "frames": len(record.frames)})
        blob += struct.pack("<Q", len(body)) + body
    (path / STORIES_NAME).write_bytes(bytes(blob))
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    manifest = {
        "version": FORMAT_VERSION,
        "stories": len(corpus),
        "frames": len(corpus[0].frames) if corpus else 0,
        "tuples": sum(len(record.frames) - 1 for record in corpus),
        "image_shape": list(IMAGE_SHAPE),
        "dtype": IMAGE_DTYPE.str,
        "grammar_hash": grammar_hash(),
        "corpus_hash": digest,
        "index": index,
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved {len(corpus)} stories to {path} (hash {digest[:12]})")
    return digest


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise DataFormatError(f"Truncated corpus while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))

    def read_prefixed(self, what: str) -> bytes:
        (size,) = self.unpack("<I", what)
        return self.read(size, what)

    def read_text(self, what: str) -> str:
        start = self.offset
        payload = self.read_prefixed(what)
        try:
            return payload.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataFormatError(f"Corrupt {what}: not UTF-8", offset=start + 4 + e.start)


def read_manifest(path) -> dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataFormatError(f"No corpus manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Corrupt manifest {manifest_path}: {e.msg}", offset=e.pos)
    if manifest.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"Unsupported corpus version {manifest.get('version')} (expected {FORMAT_VERSION})")
    return manifest


def load_corpus(path) -> List[StoryRecord]:
    path = Path(path)
    read_manifest(path)
    reader = _Reader((path / STORIES_NAME).read_bytes())
    corpus = []
    while reader.offset < len(reader.data):
        start = reader.offset
        (length,) = reader.unpack("<Q", "record length")
        body_start = reader.offset
        story_id, n_frames = reader.unpack("<II", "story header")
        record = StoryRecord(story_id=story_id)
        for _ in range(n_frames):
            graph_offset = reader.offset
            graph_text = reader.read_text("scene graph")
            try:
                graph = SceneGraph.from_canonical(graph_text)
            except SchemaValidationError:
                raise DataFormatError("Corrupt scene graph", offset=graph_offset)
            caption = reader.read_text("caption")
            raw = reader.read_prefixed("image")
            if len(raw) != IMAGE_DTYPE.itemsize * int(np.prod(IMAGE_SHAPE)):
                raise DataFormatError("Image payload has the wrong size", offset=reader.offset - len(raw))
            image = np.frombuffer(raw, dtype=IMAGE_DTYPE).reshape(IMAGE_SHAPE).astype(np.float32)
            record.frames.append(StoryFrame(graph=graph, caption=caption, image=image))
        if reader.offset - body_start != length:
            raise DataFormatError("Record length does not match its contents", offset=start)
        corpus.append(record)
    return corpus


def corpus_hash(path) -> str:
    return hashlib.sha256((Path(path) / STORIES_NAME).read_bytes()).hexdigest()
