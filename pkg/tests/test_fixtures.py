import numpy as np
import pytest

from videotok.errors import ValidationError
from videotok.fixtures import (
    BACKGROUND_LEVEL, COLORS, VOCABULARY, SceneObject, caption_for, cosine_mask_probability, embed_text,
    make_clip, make_corpus, mask_video, rasterize,
)


def test_vocabulary_unique():
    assert len(VOCABULARY) == len(set(VOCABULARY)) == 64


def test_single_square_clip():
    obj = SceneObject(id=1, shape="square", color="red", size=2, y=7.0, x=7.0)
    clip = make_clip([obj], (4, 16, 16), seed=0)
    assert clip.video.shape == (3, 4, 16, 16) and clip.video.dtype == np.float32
    m = clip.masks[1]
    assert m.sum() == 4 * 25
    assert np.allclose(clip.video[0][m], COLORS["red"][0])
    assert clip.caption == ["red", "square", "static"]
    assert clip.semantic_units == ["red"] and clip.unit_objects == {"red": 1}


def test_empty_scene_is_background():
    clip = make_clip([], (4, 16, 16), seed=1)
    assert clip.caption == ["background"]
    assert abs(clip.video.mean() - BACKGROUND_LEVEL) < 0.01


def test_motion_shifts_mask():
    obj = SceneObject(id=1, shape="square", color="blue", size=2, y=7.0, x=3.0, vx=1.0)
    m = rasterize(obj, (4, 16, 16))
    cols = [np.nonzero(m[t].any(0))[0].min() for t in range(4)]
    assert cols == [1, 2, 3, 4]
    assert caption_for([obj])[-1] == "right"


def test_invalid_scenes():
    with pytest.raises(ValidationError):
        make_clip([SceneObject(1, "square", "red", 2, 7.0, 7.0), SceneObject(1, "circle", "blue", 2, 3.0, 3.0)],
                  (4, 16, 16), seed=0)
    with pytest.raises(ValidationError):
        make_clip([SceneObject(1, "square", "red", 3, 1.0, 7.0)], (4, 16, 16), seed=0)
    with pytest.raises(ValidationError):
        make_clip([], (4, 15, 16), seed=0)


def test_corpus_deterministic():
    a = make_corpus(4, (4, 16, 16), seed=3)
    b = make_corpus(4, (4, 16, 16), seed=3)
    assert all(np.array_equal(x.video, y.video) and x.caption == y.caption for x, y in zip(a, b))


def test_masking_budget_and_ratio():
    video = np.ones((3, 10, 32, 32), np.float32)
    out, spec = mask_video(video, 0.3, seed=0, spatial_budget=0.5)
    frames = spec.masked_frames
    assert len(frames) == 3
    untouched = [t for t in range(10) if t not in frames]
    assert np.all(out[:, untouched] == 1)
    p = cosine_mask_probability(32, 32, 0.5)
    assert abs(p.mean() - 0.5) < 1e-6 and p.max() <= 1
    assert p[16, 16] > p[0, 0]


def test_embed_text():
    e = embed_text(["red", "square", "static"])
    assert abs(np.linalg.norm(e.vector) - 1) < 1e-6
    assert e.word_vectors.shape == (3, 32)
    assert np.array_equal(e.vector, embed_text(["red", "square", "static"]).vector)
    with pytest.raises(ValidationError):
        embed_text(["purple"])
    with pytest.raises(ValidationError):
        embed_text([])
