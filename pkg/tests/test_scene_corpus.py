"""
Tests for procedural scenes, captions and corpus files
"""
import numpy as np
import pytest

from app.config import SceneBounds
from app.errors import (
    BadMagicError, GenerationError, InvalidArgumentError, MissingArtifactError, TruncatedStreamError,
)
from app.services.scene_corpus import (
    EMPTY_CAPTION, KINDS, VOCABULARY, SceneSpec, Shape, caption_of, deserialize_corpus,
    generate_corpus, read_corpus, render_scene, sample_scene, serialize_corpus, tokenize, write_corpus,
)
from app.utils.prng import PrngState


def _coverage_oracle(shape: Shape, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for r in range(height):
        for c in range(width):
            dx = c + 0.5 - shape.cx
            dy = r + 0.5 - shape.cy
            s = shape.size
            if shape.kind == "circle":
                inside = dx * dx + dy * dy <= s * s
            elif shape.kind == "square":
                inside = abs(dx) <= s and abs(dy) <= s
            else:
                inside = dy <= s and 2 * abs(dx) <= dy + s
            mask[r, c] = inside
    return mask


def test_empty_scene_renders_black():
    """No shapes, all-zero image, empty caption"""
    assert np.array_equal(render_scene(SceneSpec(), 32, 32), np.zeros((32, 32)))
    assert caption_of(SceneSpec()) == EMPTY_CAPTION


def test_square_rasterization():
    """A 6x6 square covers exactly 36 pixels at the oracle coordinates"""
    square = Shape("square", 16.0, 16.0, 3.0, 1.0)
    image = render_scene(SceneSpec((square,)), 32, 32)
    assert int((image == 1.0).sum()) == 36
    assert np.array_equal(image == 1.0, _coverage_oracle(square, 32, 32))
    assert np.array_equal(image[13:19, 13:19], np.ones((6, 6)))


@pytest.mark.parametrize("kind", ["circle", "triangle"])
def test_shape_rasterization_matches_oracle(kind):
    """Circle and triangle coverage follow the pixel-center test"""
    shape = Shape(kind, 10.0, 12.0, 4.0, 0.7)
    image = render_scene(SceneSpec((shape,)), 32, 32)
    assert np.array_equal(image > 0, _coverage_oracle(shape, 32, 32))


def test_later_shapes_overwrite():
    """Overlapping shapes take the later intensity"""
    a = Shape("square", 10.0, 10.0, 4.0, 0.4)
    b = Shape("circle", 10.0, 10.0, 3.0, 0.9)
    image = render_scene(SceneSpec((a, b)), 32, 32)
    assert image[10, 10] == 0.9
    assert image[6, 6] == 0.4


def test_out_of_canvas_rejected():
    """Shapes must fit inside the canvas"""
    with pytest.raises(InvalidArgumentError):
        render_scene(SceneSpec((Shape("circle", 1.0, 16.0, 3.0, 1.0),)), 32, 32)


def test_captions():
    """Grammar: counts as words, kinds in fixed order, joined by 'and'"""
    two_circles_one_square = SceneSpec((
        Shape("square", 20.0, 20.0, 3.0, 1.0),
        Shape("circle", 5.0, 5.0, 3.0, 1.0),
        Shape("circle", 10.0, 25.0, 3.0, 1.0),
    ))
    assert caption_of(two_circles_one_square) == "two circles and one square"
    assert caption_of(SceneSpec((Shape("triangle", 8.0, 8.0, 3.0, 0.5),))) == "one triangle"
    assert caption_of(two_circles_one_square, "kinds") == "circles and squares"
    with pytest.raises(InvalidArgumentError):
        caption_of(SceneSpec(), "positions")


def test_caption_ignores_positions():
    """Scenes differing only in placement share a caption"""
    a = SceneSpec((Shape("circle", 8.0, 8.0, 3.0, 1.0),))
    b = SceneSpec((Shape("circle", 20.0, 22.0, 4.0, 0.5),))
    assert caption_of(a) == caption_of(b)


def test_vocabulary_closed():
    """Every generated caption tokenizes into the closed vocabulary"""
    assert len(VOCABULARY) <= 32
    for record in generate_corpus(50, SceneBounds(max_shapes=4), seed=3):
        assert set(tokenize(record.caption)) <= set(VOCABULARY)


def test_sample_scene_deterministic_and_bounded():
    """Same seed, same scene; max_shapes=0 gives an empty scene"""
    bounds = SceneBounds()
    assert sample_scene(PrngState(4), bounds) == sample_scene(PrngState(4), bounds)
    assert sample_scene(PrngState(4), SceneBounds(max_shapes=0)).shapes == ()
    spec = sample_scene(PrngState(5), bounds)
    for shape in spec.shapes:
        assert 0.3 <= shape.intensity <= 1.0
        assert 3 <= shape.size <= 4


def test_kind_frequencies():
    """Kinds appear with roughly equal frequency"""
    totals = dict.fromkeys(KINDS, 0)
    root = PrngState(77)
    for i in range(10_000):
        for kind, count in sample_scene(root.split(i), SceneBounds()).counts().items():
            totals[kind] += count
    grand = sum(totals.values())
    for kind in KINDS:
        assert 0.25 <= totals[kind] / grand <= 0.42


def test_unsatisfiable_placement():
    """Crowded non-overlapping scenes fail with a generation error"""
    bounds = SceneBounds(width=8, height=8, max_shapes=4, min_size=3, max_size=4, allow_overlap=False)
    with pytest.raises(GenerationError):
        for seed in range(50):
            sample_scene(PrngState(seed), bounds)


def test_corpus_round_trip(tmp_path):
    """100 records survive write/read on every field"""
    records = generate_corpus(100, SceneBounds(), seed=1)
    path = write_corpus(records, tmp_path / "c.gscc")
    assert read_corpus(path) == records
    for rec in records:
        assert np.array_equal(rec.image, render_scene(rec.scene, 32, 32))
        assert rec.caption == caption_of(rec.scene)


def test_empty_corpus_round_trip():
    """An empty corpus is a valid file"""
    assert deserialize_corpus(serialize_corpus([])) == []


def test_corpus_corruption(tmp_path):
    """Truncation, bad magic and missing files are reported"""
    data = serialize_corpus(generate_corpus(3, SceneBounds(), seed=2))
    with pytest.raises(TruncatedStreamError):
        deserialize_corpus(data[:-1])
    with pytest.raises(BadMagicError):
        deserialize_corpus(b"XXXX" + data[4:])
    with pytest.raises(MissingArtifactError):
        read_corpus(tmp_path / "absent.gscc")
