"""
Procedural toy scenes with deterministic captions, and GSCC corpus files.

Captions name only what is in a scene (kinds and counts); where things are is
left to the transmitted latent channels.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from app.config import PLACEMENT_RETRIES, SceneBounds
from app.errors import CorruptStreamError, GenerationError, InvalidArgumentError, MissingArtifactError
from app.utils.containers import ByteReader, ByteWriter, check_magic
from app.utils.prng import PrngState, randint, uniform

logger = logging.getLogger(__name__)

KINDS = ("circle", "square", "triangle")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
PLURALS = {kind: kind + "s" for kind in KINDS}
EMPTY_CAPTION = "an empty scene"
CAPTION_DETAILS = ("counts", "kinds")

# Closed caption vocabulary, fixed order (token ids are positions)
VOCABULARY: Tuple[str, ...] = (
    COUNT_WORDS + KINDS + tuple(PLURALS[k] for k in KINDS) + ("and", "an", "empty", "scene")
)

CORPUS_MAGIC = b"GSCC"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    size: float  # radius or half-side, pixels
    intensity: float

    def bbox(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.size, self.cy - self.size, self.cx + self.size, self.cy + self.size)


@dataclass(frozen=True)
class SceneSpec:
    shapes: Tuple[Shape, ...] = ()

    def counts(self) -> dict:
        return {kind: sum(1 for s in self.shapes if s.kind == kind) for kind in KINDS}


@dataclass
class CorpusRecord:
    scene: SceneSpec
    image: np.ndarray
    caption: str

    def __eq__(self, other):
        if not isinstance(other, CorpusRecord):
            return NotImplemented
        return (
            self.scene == other.scene
            and self.caption == other.caption
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


def validate_scene(spec: SceneSpec, width: int, height: int) -> None:
    for shape in spec.shapes:
        if shape.kind not in KINDS:
            raise InvalidArgumentError(f"unknown shape kind {shape.kind!r}")
        if shape.size < 3:
            raise InvalidArgumentError(f"shape size {shape.size} below 3 px")
        if not 0.3 <= shape.intensity <= 1.0:
            raise InvalidArgumentError(f"intensity {shape.intensity} outside [0.3, 1.0]")
        x0, y0, x1, y1 = shape.bbox()
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise InvalidArgumentError(f"{shape.kind} at ({shape.cx}, {shape.cy}) leaves the {width}x{height} canvas")
    for kind, count in spec.counts().items():
        if count > 4:
            raise InvalidArgumentError(f"{count} {PLURALS[kind]} exceed the grammar limit of four")


def _separated(a: Shape, b: Shape, gap: float = 1.0) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox()
    bx0, by0, bx1, by1 = b.bbox()
    return ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0


def sample_scene(prng: PrngState, bounds: SceneBounds) -> SceneSpec:
    """
    Draw a count per kind uniformly from [0, max_shapes], then size, position
    and intensity per shape. Without overlap, placement retries up to 100 times
    per shape before giving up.
    """
    shapes: List[Shape] = []
    for kind in KINDS:
        count = randint(prng, 0, bounds.max_shapes)
        for _ in range(count):
            size = randint(prng, bounds.min_size, bounds.max_size)
            intensity = 0.3 + 0.7 * float(uniform(prng, 1)[0])
            for _attempt in range(PLACEMENT_RETRIES):
                cx = randint(prng, size, bounds.width - size)
                cy = randint(prng, size, bounds.height - size)
                candidate = Shape(kind, float(cx), float(cy), float(size), intensity)
                if bounds.allow_overlap or all(_separated(candidate, s) for s in shapes):
                    shapes.append(candidate)
                    break
            else:
                raise GenerationError(
                    f"could not place a {kind} of size {size} after {PLACEMENT_RETRIES} attempts"
                )
    return SceneSpec(tuple(shapes))


def _coverage(shape: Shape, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    dx = px - shape.cx
    dy = py - shape.cy
    s = shape.size
    if shape.kind == "circle":
        return dx * dx + dy * dy <= s * s
    if shape.kind == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upright triangle: apex (cx, cy - s), base from (cx - s, cy + s) to (cx + s, cy + s)
    within_base = dy <= s
    # each slanted edge: |dx| <= (dy + s) / 2
    within_sides = 2.0 * np.abs(dx) <= dy + s
    return within_base & within_sides


def render_scene(spec: SceneSpec, width: int, height: int) -> np.ndarray:
    """Rasterize by pixel-center coverage on a black canvas; later shapes overwrite earlier"""
    validate_scene(spec, width, height)
    py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    image = np.zeros((height, width), dtype=np.float64)
    for shape in spec.shapes:
        image[_coverage(shape, px, py)] = shape.intensity
    return image


def caption_of(spec: SceneSpec, detail: str = "counts") -> str:
    """
    Canonical caption: "<count-word> <kind(s)>" clauses joined by "and" in
    circle < square < triangle order. detail="kinds" drops the counts.
    """
    if detail not in CAPTION_DETAILS:
        raise InvalidArgumentError(f"caption detail must be one of {CAPTION_DETAILS}, got {detail!r}")
    clauses = []
    for kind, count in spec.counts().items():
        if count == 0:
            continue
        if detail == "kinds":
            clauses.append(PLURALS[kind])
        else:
            clauses.append(f"{COUNT_WORDS[count]} {kind if count == 1 else PLURALS[kind]}")
    return " and ".join(clauses) if clauses else EMPTY_CAPTION


def tokenize(caption: str) -> List[str]:
    return caption.split()


def make_record(spec: SceneSpec, width: int, height: int) -> CorpusRecord:
    return CorpusRecord(spec, render_scene(spec, width, height), caption_of(spec))


def generate_corpus(count: int, bounds: SceneBounds, seed: int) -> List[CorpusRecord]:
    """Records with per-record seeds split from the corpus seed"""
    root = PrngState(seed)
    records = [
        make_record(sample_scene(root.split(i), bounds), bounds.width, bounds.height)
        for i in range(count)
    ]
    logger.info(f"[CORPUS] generated {count} scenes (seed={seed}, overlap={bounds.allow_overlap})")
    return records


def serialize_corpus(records: Sequence[CorpusRecord]) -> bytes:
    w = ByteWriter()
    w.raw(CORPUS_MAGIC)
    w.pack("B", CORPUS_VERSION)
    w.pack("I", len(records))
    for rec in records:
        height, width = rec.image.shape[:2]
        channels = 1 if rec.image.ndim == 2 else rec.image.shape[2]
        w.pack("HHB", width, height, channels)
        w.pack("H", len(rec.scene.shapes))
        for s in rec.scene.shapes:
            w.pack("Bdddd", KINDS.index(s.kind), s.cx, s.cy, s.size, s.intensity)
        caption = rec.caption.encode("utf-8")
        w.pack("H", len(caption))
        w.raw(caption)
        w.floats(rec.image)
    return w.getvalue()


def deserialize_corpus(data: bytes, what: str = "corpus") -> List[CorpusRecord]:
    r = ByteReader(data, what)
    check_magic(r, CORPUS_MAGIC, CORPUS_VERSION)
    records = []
    for _ in range(r.u32()):
        width, height, channels = r.unpack("HHB")
        shapes = []
        for _ in range(r.u16()):
            kind, cx, cy, size, intensity = r.unpack("Bdddd")
            if kind >= len(KINDS):
                raise CorruptStreamError(f"{what}: unknown shape kind tag {kind}")
            shapes.append(Shape(KINDS[kind], cx, cy, size, intensity))
        try:
            caption = r.raw(r.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStreamError(f"{what}: malformed caption") from exc
        pixels = r.floats(width * height * channels)
        shape = (height, width) if channels == 1 else (height, width, channels)
        records.append(CorpusRecord(SceneSpec(tuple(shapes)), pixels.reshape(shape), caption))
    if r.remaining():
        raise CorruptStreamError(f"{what}: {r.remaining()} trailing bytes")
    return records


def write_corpus(records: Sequence[CorpusRecord], path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(serialize_corpus(records))
    logger.info(f"[CORPUS] wrote {len(records)} records to {p}")
    return p


def read_corpus(path: Union[str, Path]) -> List[CorpusRecord]:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"corpus not found: {p}")
    return deserialize_corpus(p.read_bytes(), what=str(p))
