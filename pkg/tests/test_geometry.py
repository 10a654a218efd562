import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnidistill.errors import ContextError, DegenerateScaleError, SchemaError
from omnidistill.geometry import (
    Heatmap,
    Transform,
    TransformSet,
    apply_box,
    apply_image,
    apply_point,
    apply_points,
    box_area,
    build_transforms,
    clip_box,
    flip_heatmap,
    invert,
    resize_bilinear,
    scaled_size,
)

from oracles import ref_bilinear


def test_hflip_point():
    assert apply_point(Transform.hflip(64), (10, 20)) == (54, 20)


def test_scale_one_point():
    assert apply_point(Transform.scale(1.0), (10, 20)) == (10, 20)


def test_composite_point():
    t = Transform.compose(Transform.scale(2), Transform.hflip(128))
    assert apply_point(t, (10, 20)) == (108, 40)
    # apply-then-apply oracle
    step = apply_point(Transform.hflip(128), apply_point(Transform.scale(2), (10, 20)))
    assert apply_point(t, (10, 20)) == step


def test_hflip_needs_width():
    with pytest.raises(ContextError):
        apply_point(Transform.hflip(), (1, 1))


def test_invalid_transforms():
    with pytest.raises(ValueError):
        Transform.scale(0)
    with pytest.raises(ValueError):
        Transform.compose()


def test_invert_cases():
    f = Transform.hflip(64)
    assert invert(f) == f
    assert invert(Transform.scale(2)) == Transform.scale(0.5)
    a, b = Transform.scale(2), Transform.hflip(128)
    assert invert(Transform.compose(a, b)) == Transform.compose(invert(b), invert(a))


def test_apply_box_cases():
    assert apply_box(Transform.scale(2), (10, 10, 20, 20)) == (20, 20, 40, 40)
    assert apply_box(Transform.hflip(64), (10, 10, 20, 20)) == (44, 10, 54, 20)


def test_box_area_and_clip():
    assert box_area((0, 0, 3, 4)) == 12
    assert clip_box((-5, 2, 70, 80), 64, 48) == (0, 2, 64, 48)


def _random_transform(rng):
    w = int(rng.integers(8, 200))
    kind = rng.integers(0, 4)
    if kind == 0:
        return Transform.identity()
    if kind == 1:
        return Transform.hflip(w)
    if kind == 2:
        return Transform.scale(rng.uniform(0.25, 4))
    parts = [Transform.scale(rng.uniform(0.25, 4)) if rng.random() < 0.5 else Transform.hflip(w)
             for _ in range(rng.integers(1, 4))]
    return Transform.compose(*parts)


def test_box_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = _random_transform(rng)
        x1, y1 = rng.uniform(0, 100, 2)
        b = (x1, y1, x1 + rng.uniform(0, 50), y1 + rng.uniform(0, 50))
        back = apply_box(invert(t), apply_box(t, b))
        np.testing.assert_allclose(back, b, rtol=1e-9, atol=1e-9)


def test_apply_points_matches_apply_point():
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = _random_transform(rng)
        pts = rng.uniform(-10, 100, (5, 2))
        ref = np.array([apply_point(t, p) for p in pts])
        np.testing.assert_array_equal(apply_points(t, pts), ref)


def test_area_under_flip_and_scale():
    b = (3.25, 1.5, 17.75, 9.0)
    assert box_area(apply_box(Transform.hflip(40), b)) == box_area(b)
    assert box_area(apply_box(Transform.scale(1.7), b)) == pytest.approx(1.7 ** 2 * box_area(b), rel=1e-9)


def test_checkerboard_bilinear_hand_values():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    expected = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.0, 0.75, 0.25, 0.0],
    ])
    np.testing.assert_allclose(apply_image(Transform.scale(2), board), expected, atol=1e-15)


def test_bilinear_matches_pixel_loop():
    rng = np.random.default_rng(2)
    for factor in (0.5, 0.75, 1.3, 2.0, 0.37):
        img = rng.random((9, 13))
        np.testing.assert_allclose(resize_bilinear(img, factor), ref_bilinear(img, factor), atol=1e-12)


def test_scaled_size_rounds_half_up():
    assert scaled_size(5, 3, 0.5) == (3, 2)
    with pytest.raises(DegenerateScaleError):
        resize_bilinear(np.ones((2, 2)), 0.1)


def test_image_flip_involution_and_scale_one():
    img = np.random.default_rng(3).random((7, 11))
    f = Transform.hflip(11)
    np.testing.assert_array_equal(apply_image(f, apply_image(f, img)), img)
    np.testing.assert_array_equal(apply_image(Transform.scale(1.0), img), img)


def test_image_flip_checks_context_width():
    with pytest.raises(ContextError):
        apply_image(Transform.hflip(12), np.zeros((4, 11)))


def _onehot(k, h, w, cells):
    ch = np.zeros((k, h, w))
    for c, (i, j) in enumerate(cells):
        ch[c, i, j] = 1.0
    return ch


def test_flip_heatmap_pairs():
    h = Heatmap(_onehot(2, 4, 6, [(1, 2), (3, 0)]), (0, 0, 6, 4))
    f = flip_heatmap(h, [(0, 1)])
    assert f.channels[1, 1, 6 - 1 - 2] == 1.0
    assert f.channels[0, 3, 5] == 1.0


def test_flip_heatmap_symmetric_unchanged_and_involution():
    sym = np.array([[[1, 2, 1], [3, 4, 3]]], dtype=float)
    h = Heatmap(sym / sym.sum(), (0, 0, 3, 2))
    np.testing.assert_array_equal(flip_heatmap(h, ()).channels, h.channels)
    rnd = Heatmap(np.random.default_rng(4).random((4, 5, 5)), (0, 0, 5, 5))
    twice = flip_heatmap(flip_heatmap(rnd, [(0, 3), (1, 2)]), [(0, 3), (1, 2)])
    np.testing.assert_array_equal(twice.channels, rnd.channels)
    np.testing.assert_allclose(flip_heatmap(rnd, [(0, 3)]).channels.sum(axis=(1, 2))[[3, 0]],
                               rnd.channels.sum(axis=(1, 2))[[0, 3]], rtol=0, atol=1e-12)


def test_flip_pairs_validation():
    h = Heatmap(np.ones((2, 2, 2)) / 4, (0, 0, 2, 2))
    with pytest.raises(SchemaError):
        flip_heatmap(h, [(0, 2)])
    with pytest.raises(SchemaError):
        flip_heatmap(h, [(0, 1), (1, 0)])


def test_build_transforms_eighteen():
    ts = TransformSet(tuple(range(400, 1201, 100)), True).for_image(1333, 800)
    assert len(build_transforms(ts)) == 18 == len(ts)


def test_build_transforms_single_identity_equivalent():
    (t,) = build_transforms(TransformSet((64,), False, (64, 96)))
    assert t == Transform.scale(1.0)


def test_build_transforms_enumeration():
    got = build_transforms(TransformSet((32, 64), True, (64, 64)))
    expected = [
        Transform.scale(0.5),
        Transform.compose(Transform.scale(0.5), Transform.hflip(32, 32)),
        Transform.scale(1.0),
        Transform.compose(Transform.scale(1.0), Transform.hflip(64, 64)),
    ]
    assert got == expected
    assert [t.is_mirrored for t in got] == [False, True, False, True]


def test_build_transforms_needs_context():
    with pytest.raises(ContextError):
        build_transforms(TransformSet((32, 64)))


def test_transform_set_validation():
    with pytest.raises(ValueError):
        TransformSet((64, 32))
    with pytest.raises(ValueError):
        TransformSet(())


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-500, 500), y=st.floats(-500, 500),
    s=st.floats(0.05, 20), w=st.integers(1, 4000),
)
def test_point_round_trip_property(x, y, s, w):
    t = Transform.compose(Transform.scale(s), Transform.hflip(w))
    bx, by = apply_point(invert(t), apply_point(t, (x, y)))
    scale = max(1.0, abs(x), abs(y), w / s)
    assert abs(bx - x) <= 1e-9 * scale and abs(by - y) <= 1e-9 * scale
