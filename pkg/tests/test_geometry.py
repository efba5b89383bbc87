import numpy as np
import pytest

from boxquery.geometry import (
    Box,
    dist_agg,
    dist_agg_many,
    dist_box,
    dist_box_many,
    dist_inside,
    dist_outside,
    dist_outside_many,
    grad_dist_box,
    intersect,
    project,
)


def box(center, offset):
    return Box(np.asarray(center, dtype=float), np.asarray(offset, dtype=float))


def random_box(rng, d=5, scale=2.0):
    return Box(rng.uniform(-scale, scale, d), rng.uniform(0, scale, d))


class TestBoxInvariants:
    def test_negative_offset_rejected(self):
        with pytest.raises(ValueError):
            box([0.0, 0.0], [1.0, -0.1])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            box([0.0, 0.0], [1.0])

    def test_corners(self):
        b = box([1.0, -1.0], [0.5, 2.0])
        assert np.allclose(b.upper, [1.5, 1.0])
        assert np.allclose(b.lower, [0.5, -3.0])


class TestProject:
    def test_componentwise_sums(self):
        p = box([1.0, 1.0], [0.0, 0.0])
        r = box([2.0, -1.0], [0.5, 0.5])
        out = project(p, r)
        assert np.allclose(out.center, [3.0, 0.0])
        assert np.allclose(out.offset, [0.5, 0.5])

    def test_zero_relation_is_identity(self):
        p = box([1.0, 2.0], [0.3, 0.4])
        out = project(p, box([0.0, 0.0], [0.0, 0.0]))
        assert np.allclose(out.center, p.center)
        assert np.allclose(out.offset, p.offset)

    def test_offset_never_shrinks(self, rng):
        for _ in range(200):
            p = random_box(rng)
            r = random_box(rng)
            out = project(p, r)
            assert np.all(out.offset >= p.offset)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            project(box([0.0], [0.0]), box([0.0, 0.0], [0.0, 0.0]))


class TestIntersect:
    def test_singleton_with_shrink(self):
        b = box([1.0, 2.0], [0.4, 0.8])
        out = intersect([b], [np.ones(2)], np.full(2, 0.5))
        assert np.allclose(out.center, b.center)
        assert np.allclose(out.offset, [0.2, 0.4])

    def test_two_boxes_hand_arithmetic(self):
        b1 = box([0.0, 0.0], [1.0, 1.0])
        b2 = box([2.0, 2.0], [3.0, 3.0])
        weights = [np.full(2, 0.5), np.full(2, 0.5)]
        out = intersect([b1, b2], weights, np.full(2, 0.5))
        assert np.allclose(out.center, [1.0, 1.0])
        assert np.allclose(out.offset, [0.5, 0.5])

    def test_output_strictly_smaller_than_min(self, rng):
        for _ in range(100):
            boxes = [random_box(rng) for _ in range(3)]
            weights = rng.uniform(0.1, 1.0, (3, 5))
            weights /= weights.sum(axis=0)
            shrink = rng.uniform(0.05, 0.95, 5)
            out = intersect(boxes, list(weights), shrink)
            min_offset = np.min(np.stack([b.offset for b in boxes]), axis=0)
            assert np.all(out.offset <= min_offset)
            assert np.all(out.offset[min_offset > 0] < min_offset[min_offset > 0])

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            intersect([], [], np.ones(2))


class TestDistances:
    unit = staticmethod(lambda: box([0.0, 0.0], [1.0, 1.0]))

    def test_outside_zero_inside(self):
        assert dist_outside(np.array([0.5, 0.5]), self.unit()) == 0.0

    def test_outside_one_dim(self):
        assert dist_outside(np.array([2.0, 0.0]), self.unit()) == 1.0

    def test_outside_two_dims(self):
        assert dist_outside(np.array([2.0, 3.0]), self.unit()) == 3.0

    def test_inside_values(self):
        assert dist_inside(np.array([0.5, 0.5]), self.unit()) == 1.0
        assert dist_inside(np.array([2.0, 0.0]), self.unit()) == 1.0
        assert dist_inside(np.array([0.0, 0.0]), self.unit()) == 0.0

    def test_dist_box_values(self):
        b = self.unit()
        assert dist_box(np.array([0.5, 0.5]), b, 0.2) == pytest.approx(0.2)
        assert dist_box(np.array([2.0, 0.0]), b, 0.2) == pytest.approx(1.2)

    def test_alpha_one_is_l1_to_center(self, rng):
        for _ in range(10_000):
            b = random_box(rng)
            v = rng.uniform(-4, 4, 5)
            expected = float(np.sum(np.abs(b.center - v)))
            assert abs(dist_box(v, b, 1.0) - expected) < 1e-12

    def test_outside_zero_iff_contained(self, rng):
        for _ in range(2000):
            b = random_box(rng)
            v = rng.uniform(-4, 4, 5)
            assert (dist_outside(v, b) == 0.0) == b.contains(v)

    def test_zero_only_at_center(self, rng):
        for _ in range(200):
            b = random_box(rng)
            assert dist_box(b.center.copy(), b, 0.3) == 0.0
            v = b.center + rng.uniform(0.01, 1.0, 5)
            assert dist_box(v, b, 0.3) > 0.0

    def test_translation_equivariance(self, rng):
        for _ in range(200):
            b = random_box(rng)
            v = rng.uniform(-4, 4, 5)
            shift = rng.uniform(-3, 3, 5)
            shifted = Box(b.center + shift, b.offset)
            assert dist_outside(v, b) == pytest.approx(dist_outside(v + shift, shifted))
            assert dist_inside(v, b) == pytest.approx(dist_inside(v + shift, shifted))
            assert dist_box(v, b, 0.2) == pytest.approx(dist_box(v + shift, shifted, 0.2))

    def test_membership_bound(self, rng):
        # anywhere inside the box, dist_box is at most alpha * |offset|_1
        for _ in range(500):
            b = random_box(rng)
            u = rng.uniform(-1, 1, 5)
            v = b.center + u * b.offset
            assert dist_box(v, b, 0.2) <= 0.2 * np.sum(b.offset) + 1e-12


class TestDistAgg:
    def test_min_of_distances(self):
        b1 = box([0.0, 0.0], [1.0, 1.0])
        b2 = box([5.0, 5.0], [1.0, 1.0])
        v = np.array([0.2, 0.1])
        assert dist_agg(v, [b1, b2], 0.2) == dist_box(v, b1, 0.2)

    def test_singleton_unchanged(self, rng):
        b = random_box(rng)
        v = rng.uniform(-3, 3, 5)
        assert dist_agg(v, [b], 0.2) == dist_box(v, b, 0.2)

    def test_monotone_in_box_count(self, rng):
        for _ in range(100):
            boxes = [random_box(rng) for _ in range(4)]
            v = rng.uniform(-3, 3, 5)
            prev = np.inf
            for i in range(1, 5):
                cur = dist_agg(v, boxes[:i], 0.2)
                assert cur <= prev + 1e-15
                prev = cur

    def test_containment_bound(self, rng):
        for _ in range(100):
            boxes = [random_box(rng) for _ in range(3)]
            i = int(rng.integers(3))
            u = rng.uniform(-1, 1, 5)
            v = boxes[i].center + u * boxes[i].offset
            assert dist_agg(v, boxes, 0.2) <= 0.2 * dist_inside(v, boxes[i]) + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dist_agg(np.zeros(2), [], 0.2)


class TestVectorizedForms:
    def test_match_scalar_forms(self, rng):
        boxes = [random_box(rng) for _ in range(3)]
        vs = rng.uniform(-4, 4, (50, 5))
        agg = dist_agg_many(vs, boxes, 0.2)
        out = dist_outside_many(vs, boxes[0])
        per_box = dist_box_many(vs, boxes[0], 0.2)
        for i in range(50):
            assert agg[i] == pytest.approx(dist_agg(vs[i], boxes, 0.2))
            assert out[i] == pytest.approx(dist_outside(vs[i], boxes[0]))
            assert per_box[i] == pytest.approx(dist_box(vs[i], boxes[0], 0.2))


class TestGradDistBox:
    def test_outside_above_partial(self):
        b = box([0.0, 0.0], [1.0, 1.0])
        v = np.array([2.0, 0.0])
        dv, dc, do = grad_dist_box(v, b, 0.2)
        assert dv[0] == 1.0  # outside term active, clamp saturated
        assert dv[1] == 0.0

    def test_inside_center_partial(self):
        b = box([0.0, 0.0], [1.0, 1.0])
        v = np.array([0.5, -0.25])
        _, dc, _ = grad_dist_box(v, b, 0.2)
        assert np.allclose(dc, [0.2 * np.sign(-0.5), 0.2 * np.sign(0.25)])

    def test_matches_finite_differences(self, rng):
        eps = 1e-6
        alpha = 0.2
        checked = 0
        for _ in range(300):
            b = random_box(rng)
            v = rng.uniform(-4, 4, 5)
            # skip kink neighborhoods: any coordinate near a face or the center
            margin = 1e-3
            near_kink = (
                np.any(np.abs(v - b.upper) < margin)
                or np.any(np.abs(v - b.lower) < margin)
                or np.any(np.abs(v - b.center) < margin)
                or np.any(b.offset < margin)
            )
            if near_kink:
                continue
            dv, dc, do = grad_dist_box(v, b, alpha)
            for vec, grad, make in (
                (v, dv, lambda x: dist_box(x, b, alpha)),
                (b.center, dc, lambda x: dist_box(v, Box(x, b.offset), alpha)),
                (b.offset, do, lambda x: dist_box(v, Box(b.center, x), alpha)),
            ):
                for j in range(5):
                    plus = vec.copy()
                    plus[j] += eps
                    minus = vec.copy()
                    minus[j] -= eps
                    fd = (make(plus) - make(minus)) / (2 * eps)
                    assert abs(fd - grad[j]) <= 1e-5 * max(1.0, abs(fd), abs(grad[j]))
            checked += 1
        assert checked > 150
