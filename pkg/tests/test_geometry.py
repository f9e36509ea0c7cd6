import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcop.errors import DegenerateError
from fcop.geometry import (
    CameraIntrinsics,
    Correspondence,
    CorrespondenceSet,
    DegeneracyTolerances,
    ImagePoint,
    OK,
    REJECT_DEPTH,
    REJECT_SEPARATION,
    backproject,
    backproject_points,
    check_degeneracy,
    pair_constraint_row,
    solve_triplet,
    solve_triplets,
)

from conftest import forward_project, make_list, random_rot


def C(u, v, d, p):
    return Correspondence(ImagePoint(u, v), d, p)


class TestTypes:
    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            C(0, 0, 0.0, (0, 0, 0))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            C(np.nan, 0, 1.0, (0, 0, 0))

    def test_set_roundtrip(self, exact_object):
        cs = exact_object["set"]
        back = CorrespondenceSet.from_correspondences(cs.to_list())
        np.testing.assert_array_equal(back.x, cs.x)
        np.testing.assert_array_equal(back.p, cs.p)
        assert isinstance(cs[3], Correspondence)
        assert len(cs[:10]) == 10

    def test_set_is_read_only(self, exact_object):
        with pytest.raises(ValueError):
            exact_object["set"].d[0] = 1.0

    def test_intrinsics_matrix(self):
        K = CameraIntrinsics(600.0, 640, 480)
        np.testing.assert_array_equal(K.K, np.diag([600.0, 600.0, 1.0]))
        assert K.principal_point == (320.0, 240.0)
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0)


class TestPairRow:
    def test_identical_points_give_zero_row(self):
        c = C(10, -4, 2.0, (0.1, 0.2, 0.3))
        assert pair_constraint_row(c, c) == (0.0, 0.0, 0.0)

    def test_hand_evaluated(self):
        ci = C(0, 0, 1, (0, 0, 0))
        cj = C(100, 0, 2, (1, 0, 0))
        assert pair_constraint_row(ci, cj) == (1.0, -40000.0, 1.0)

    def test_equal_depths_zero_rhs(self):
        assert pair_constraint_row(C(1, 2, 3.0, (0, 0, 1)), C(-5, 7, 3.0, (1, 0, 0)))[2] == 0.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=10, max_size=10), st.floats(0.1, 10), st.floats(0.1, 10))
    def test_symmetric(self, v, di, dj):
        ci = C(v[0], v[1], di, v[2:5])
        cj = C(v[5], v[6], dj, v[7:10])
        assert pair_constraint_row(ci, cj) == pair_constraint_row(cj, ci)

    def test_row_holds_on_exact_data(self, exact_object):
        o = exact_object
        cs = o["set"]
        for i, j in [(0, 1), (5, 17), (40, 99)]:
            a1, a2, b = pair_constraint_row(cs[i], cs[j])
            assert a1 * o["s"] ** 2 + a2 / o["f"] ** 2 == pytest.approx(b, rel=1e-9, abs=1e-12)


class TestSolveTriplet:
    def test_recovers_focal_and_scale(self, rng):
        p = rng.uniform(-1, 1, (3, 3))
        cs = make_list(600.0, 0.5, random_rot(rng), np.array([0.2, 0.1, 4.0]), p)
        sol = solve_triplet(*cs)
        assert sol.f == pytest.approx(600.0, rel=1e-6)
        assert sol.s == pytest.approx(0.5, rel=1e-6)
        assert sol.residual < 1e-9

    def test_many_random_exact_triplets(self, rng):
        for _ in range(200):
            f, s = rng.uniform(300, 1500), rng.uniform(0.2, 1.0)
            t = np.array([0, 0, 4.0]) + rng.uniform(-1, 1, 3)
            cs = make_list(f, s, random_rot(rng), t, rng.uniform(-1, 1, (3, 3)))
            sol = solve_triplet(*cs)
            assert sol.f == pytest.approx(f, rel=1e-6)
            assert sol.s == pytest.approx(s, rel=1e-6)

    def test_equal_depths_degenerate(self):
        cs = [C(10, 0, 2.0, (0, 0, 0)), C(-30, 5, 2.0, (1, 0, 0)), C(0, 40, 2.0, (0, 1, 0))]
        with pytest.raises(DegenerateError, match="depths"):
            solve_triplet(*cs)

    def test_coincident_weighted_points_degenerate(self):
        # d1 x1 == d2 x2
        cs = [C(100, 50, 1.0, (0, 0, 0)), C(50, 25, 2.0, (1, 0, 0)), C(0, 40, 3.0, (0, 1, 0))]
        with pytest.raises(DegenerateError, match="coincide"):
            solve_triplet(*cs)

    def test_negative_solution_rejected(self):
        # identical canonical points force s^2 <= 0
        cs = [C(10, 0, 1.0, (0, 0, 0)), C(-30, 5, 2.0, (0, 0, 0)), C(0, 40, 3.0, (0, 0, 0))]
        with pytest.raises(DegenerateError):
            solve_triplet(*cs)

    def test_uses_third_pair(self, rng):
        # with a duplicated (j,k) row the system has two distinct equations and any perturbation
        # is fitted exactly; three distinct pairs leave a residual
        p = rng.uniform(-1, 1, (3, 3))
        x, d = forward_project(700.0, 0.5, random_rot(rng), np.array([0, 0, 4.0]), p)
        a = solve_triplets(CorrespondenceSet(x, d, p), [[0, 1, 2]])
        p2 = p.copy()
        p2[2] += 0.05 * (p[1] - p[0])
        b = solve_triplets(CorrespondenceSet(x, d, p2), [[0, 1, 2]])
        assert a.residual[0] < 1e-9
        assert b.residual[0] > 1e-9


class TestDegeneracy:
    def test_distinct_depths(self):
        cs = [C(10, 0, 1.0, (0, 0, 0)), C(-30, 5, 2.0, (1, 0, 0)), C(0, 40, 3.0, (0, 1, 0))]
        rep = check_degeneracy(*cs)
        assert rep.has_distinct_depths
        assert not rep.is_degenerate()

    def test_depth_gap_below_tolerance(self):
        cs = [C(10, 0, 1.0, (0, 0, 0)), C(-30, 5, 1.0 + 1e-12, (1, 0, 0)), C(0, 40, 3.0, (0, 1, 0))]
        assert not check_degeneracy(*cs, DegeneracyTolerances(depth_gap=1e-9)).has_distinct_depths

    def test_collinear_separation_zero(self):
        cs = [C(100, 50, 1.0, (0, 0, 0)), C(50, 25, 2.0, (1, 0, 0)), C(0, 40, 3.0, (0, 1, 0))]
        assert check_degeneracy(*cs).min_pair_separation == 0.0

    def test_batch_flags_match_scalar(self):
        x = [[10, 0], [-30, 5], [0, 40], [100, 50], [50, 25], [7, 7]]
        d = [1.0, 1.0, 3.0, 1.0, 2.0, 5.0]
        p = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1]]
        b = solve_triplets(CorrespondenceSet(x, d, p), [[0, 1, 2], [3, 4, 2]])
        assert b.status.tolist() == [REJECT_DEPTH, REJECT_SEPARATION]


class TestSolveTripletsBatch:
    def test_matches_truth(self, exact_object, rng):
        idx = np.array([rng.choice(100, 3, replace=False) for _ in range(300)])
        b = solve_triplets(exact_object["set"], idx)
        assert (b.status == OK).all()
        np.testing.assert_allclose(b.f, 800.0, rtol=1e-6)
        np.testing.assert_allclose(b.s, 0.6, rtol=1e-6)

    def test_out_of_range(self, exact_object):
        with pytest.raises(ValueError):
            solve_triplets(exact_object["set"], [[0, 1, 100]])


class TestBackproject:
    @pytest.mark.parametrize(
        "x, d, expected",
        [((0, 0), 4.0, (0, 0, 4)), ((600, 0), 2.0, (2, 0, 2)), ((300, -150), 2.0, (1, -0.5, 2))],
    )
    def test_values(self, x, d, expected):
        np.testing.assert_allclose(backproject(ImagePoint(*x), d, CameraIntrinsics(600.0)), expected)

    def test_vectorized_agrees(self, exact_object):
        cs = exact_object["set"]
        K = CameraIntrinsics(800.0)
        ref = np.array([backproject(ImagePoint(*xi), di, K) for xi, di in zip(cs.x, cs.d)])
        np.testing.assert_allclose(backproject_points(cs.x, cs.d, 800.0), ref)

    def test_inverts_projection(self, exact_object):
        o = exact_object
        X = o["s"] * o["p"] @ o["R"].T + o["t"]
        np.testing.assert_allclose(backproject_points(o["set"].x, o["set"].d, o["f"]), X, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounded_noise_gives_bounded_focal_error(seed):
    """Halving the perturbation of an exact triplet does not increase the focal error (linear regime)."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, (3, 3))
    x, d = forward_project(900.0, 0.7, random_rot(rng), np.array([0, 0, 4.0]) + rng.uniform(-1, 1, 3), p)
    dd, dp = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, (3, 3))
    errs = []
    for scale in (1e-6, 5e-7):
        b = solve_triplets(CorrespondenceSet(x, d + scale * dd, p + scale * dp), [[0, 1, 2]])
        if not b.valid[0]:
            return
        errs.append(abs(b.f[0] - 900.0))
    assert errs[1] <= errs[0] * 1.05 + 1e-9
