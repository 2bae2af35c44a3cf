import math

import numpy as np
import pytest

from annotkit import masks
from annotkit.errors import (
    CanvasMismatchError,
    CorruptMaskError,
    EmptyMaskError,
    InvalidCanvasError,
    OutOfBoundsError,
)
from annotkit.masks import Canvas, Mask, Point


def brute_iou(a: Mask, b: Mask) -> float:
    ba, bb = a.bitmap(), b.bitmap()
    inter = 0
    union = 0
    for row in range(a.canvas.height):
        for col in range(a.canvas.width):
            pa, pb = bool(ba[row, col]), bool(bb[row, col])
            inter += pa and pb
            union += pa or pb
    return inter / union if union else 0.0


def brute_moments(mask: Mask):
    coords = [
        (col, row)
        for row in range(mask.canvas.height)
        for col in range(mask.canvas.width)
        if mask.bitmap()[row, col]
    ]
    n = len(coords)
    cx = sum(c[0] for c in coords) / n
    cy = sum(c[1] for c in coords) / n
    vxx = sum((c[0] - cx) ** 2 for c in coords) / n
    vyy = sum((c[1] - cy) ** 2 for c in coords) / n
    vxy = sum((c[0] - cx) * (c[1] - cy) for c in coords) / n
    return cx, cy, vxx, vxy, vyy


def random_mask(rng, canvas, p=0.5) -> Mask:
    return Mask.from_bitmap(rng.random((canvas.height, canvas.width)) < p, canvas)


class TestCodec:
    def test_empty_mask(self):
        m = masks.encode(np.zeros((2, 2), bool))
        assert m.runs == (4,)

    def test_full_mask(self):
        m = masks.encode(np.ones((2, 2), bool))
        assert m.runs == (0, 4)

    def test_three_by_one_pattern(self):
        m = masks.encode(np.array([[False, True, True]]))
        assert m.runs == (1, 2)
        assert masks.decode(m).tolist() == [[False, True, True]]

    def test_decode_trivial(self):
        canvas = Canvas(2, 2)
        assert not masks.decode(Mask(canvas, (4,))).any()
        assert masks.decode(Mask(canvas, (0, 4))).all()

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            h = int(rng.integers(1, 65))
            w = int(rng.integers(1, 65))
            bitmap = rng.random((h, w)) < rng.random()
            m = masks.encode(bitmap)
            assert np.array_equal(masks.decode(m), bitmap)
            assert Mask.from_rle_text(m.to_rle_text()) == m

    def test_zero_canvas_rejected(self):
        with pytest.raises(InvalidCanvasError):
            Canvas(0, 3)
        with pytest.raises(InvalidCanvasError):
            masks.encode(np.zeros((0, 4), bool))

    def test_bad_runs_rejected(self):
        canvas = Canvas(2, 2)
        with pytest.raises(CorruptMaskError):
            Mask(canvas, (3,))  # does not sum to 4
        with pytest.raises(CorruptMaskError):
            Mask(canvas, (1, 0, 3))  # interior zero
        with pytest.raises(CorruptMaskError):
            Mask(canvas, (-1, 5))

    def test_leading_zero_only(self):
        canvas = Canvas(2, 2)
        Mask(canvas, (0, 4))  # leading zero is fine
        with pytest.raises(CorruptMaskError):
            Mask(canvas, (4, 0))

    def test_rle_text_form(self):
        m = Mask(Canvas(4, 4), (2, 3, 11))
        assert m.to_rle_text() == "4x4:2,3,11"
        assert Mask.from_rle_text("4x4:2,3,11") == m

    def test_rle_text_malformed(self):
        for text in ["4x4", "4x4:1,2", "x4:16", "4x4:a,b", "0x4:0"]:
            with pytest.raises(CorruptMaskError):
                Mask.from_rle_text(text)


class TestIoU:
    def test_identical(self):
        m = Mask(Canvas(3, 3), (0, 9))
        assert masks.iou(m, m) == 1.0

    def test_disjoint(self):
        canvas = Canvas(4, 1)
        a = masks.encode(np.array([[1, 1, 0, 0]], bool), canvas)
        b = masks.encode(np.array([[0, 0, 1, 1]], bool), canvas)
        assert masks.iou(a, b) == 0.0

    def test_half_overlap(self):
        canvas = Canvas(4, 4)
        left = masks.encode(np.tile([True, True, False, False], (4, 1)), canvas)
        top = masks.encode(np.array([[True] * 4] * 2 + [[False] * 4] * 2), canvas)
        assert masks.iou(left, top) == pytest.approx(4 / 12)

    def test_both_empty_is_zero(self):
        canvas = Canvas(3, 3)
        assert masks.iou(Mask.empty(canvas), Mask.empty(canvas)) == 0.0

    def test_canvas_mismatch(self):
        with pytest.raises(CanvasMismatchError):
            masks.iou(Mask.empty(Canvas(2, 2)), Mask.empty(Canvas(3, 3)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        canvas = Canvas(32, 32)
        for _ in range(200):
            a = random_mask(rng, canvas, float(rng.random()))
            b = random_mask(rng, canvas, float(rng.random()))
            assert masks.iou(a, b) == brute_iou(a, b)
            assert masks.iou(a, b) == masks.iou(b, a)


class TestContains:
    def test_full_and_empty(self):
        canvas = Canvas(3, 2)
        assert masks.contains(Mask.full(canvas), Point(1.7, 0.2))
        assert not masks.contains(Mask.empty(canvas), Point(1.7, 0.2))

    def test_pattern(self):
        m = Mask(Canvas(3, 1), (1, 2))
        assert not masks.contains(m, Point(0, 0))
        assert masks.contains(m, Point(1, 0))
        assert masks.contains(m, Point(2.9, 0.9))  # truncates to (2, 0)

    def test_out_of_bounds(self):
        m = Mask.full(Canvas(3, 3))
        for p in [Point(-0.1, 0), Point(3.0, 0), Point(0, 3.0), Point(0, -1)]:
            with pytest.raises(OutOfBoundsError):
                masks.contains(m, p)


class TestMoments:
    def test_single_pixel(self):
        bitmap = np.zeros((5, 5), bool)
        bitmap[3, 2] = True
        m = masks.moments(masks.encode(bitmap))
        assert (m.center.x, m.center.y) == (2, 3)
        assert np.allclose(m.covariance, 0.25 * np.eye(2))
        assert m.area == 1

    def test_full_3x3(self):
        m = masks.moments(masks.encode(np.ones((3, 3), bool)))
        assert (m.center.x, m.center.y) == (1, 1)
        assert np.allclose(m.covariance, np.diag([2 / 3 + 0.25, 2 / 3 + 0.25]))
        assert m.area == 9

    def test_horizontal_strip(self):
        m = masks.moments(masks.encode(np.ones((1, 5), bool)))
        assert m.center.x == 2
        assert m.covariance[0, 0] == pytest.approx(2 + 0.25)
        assert m.covariance[1, 1] == pytest.approx(0.25)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            masks.moments(Mask.empty(Canvas(2, 2)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        canvas = Canvas(24, 24)
        for _ in range(200):
            m = random_mask(rng, canvas, 0.3)
            if m.is_empty:
                continue
            got = masks.moments(m)
            cx, cy, vxx, vxy, vyy = brute_moments(m)
            assert got.center.x == pytest.approx(cx, abs=1e-9)
            assert got.center.y == pytest.approx(cy, abs=1e-9)
            assert got.covariance[0, 0] - 0.25 == pytest.approx(vxx, abs=1e-9)
            assert got.covariance[0, 1] == pytest.approx(vxy, abs=1e-9)
            assert got.covariance[1, 1] - 0.25 == pytest.approx(vyy, abs=1e-9)


class TestMahalanobis:
    def test_zero_at_center(self):
        m = masks.SpatialMoments(Point(2.0, 3.0), np.eye(2), 4)
        assert masks.mahalanobis(Point(2.0, 3.0), m) == 0.0

    def test_isotropic_equals_scaled_euclidean(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sigma2 = float(rng.uniform(0.25, 9.0))
            center = Point(float(rng.uniform(0, 10)), float(rng.uniform(0, 10)))
            p = Point(float(rng.uniform(0, 10)), float(rng.uniform(0, 10)))
            m = masks.SpatialMoments(center, sigma2 * np.eye(2), 10)
            euclid = math.hypot(p.x - center.x, p.y - center.y)
            assert masks.mahalanobis(p, m) == pytest.approx(euclid / math.sqrt(sigma2), abs=1e-9)

    def test_diagonal_case(self):
        m = masks.SpatialMoments(Point(0.0, 0.0), np.diag([4.0, 1.0]), 10)
        assert masks.mahalanobis(Point(2.0, 1.0), m) == pytest.approx(math.sqrt(2), abs=1e-9)


class TestRasterize:
    def test_single_full_mask(self):
        canvas = Canvas(3, 3)
        out = masks.rasterize([(Mask.full(canvas), 7)], canvas)
        assert (out == 7).all()

    def test_identical_masks_front_wins(self):
        canvas = Canvas(3, 3)
        out = masks.rasterize([(Mask.full(canvas), 1), (Mask.full(canvas), 2)], canvas)
        assert (out == 1).all()

    def test_overlapping_halves(self):
        canvas = Canvas(4, 4)
        left = masks.encode(np.tile([True, True, False, False], (4, 1)), canvas)
        out = masks.rasterize([(left, 5), (Mask.full(canvas), 9)], canvas)
        assert (out[:, :2] == 5).all()
        assert (out[:, 2:] == 9).all()

    def test_uncovered_is_unlabeled(self):
        canvas = Canvas(2, 2)
        out = masks.rasterize([], canvas)
        assert (out == masks.UNLABELED).all()

    def test_canvas_mismatch(self):
        with pytest.raises(CanvasMismatchError):
            masks.rasterize([(Mask.full(Canvas(2, 2)), 0)], Canvas(3, 3))

    def test_front_most_ownership_random_stacks(self):
        rng = np.random.default_rng(4)
        canvas = Canvas(16, 16)
        for _ in range(50):
            stack = [(random_mask(rng, canvas, 0.4), sid) for sid in range(int(rng.integers(1, 6)))]
            out = masks.rasterize(stack, canvas)
            for row in range(canvas.height):
                for col in range(canvas.width):
                    expected = masks.UNLABELED
                    for mask, sid in stack:
                        if mask.bitmap()[row, col]:
                            expected = sid
                            break
                    assert out[row, col] == expected
