import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadrepair.geometry import (
    ArityError,
    CommandSequence,
    EdgeKind,
    InfeasibleSolid,
    InvalidReason,
    MalformedRecord,
    SketchEdge,
    discretize_profile,
    kernel_check,
    monte_carlo_volume,
    parse_sequence,
    points_in_polygon,
    polygon_area,
    sample_point_cloud,
    self_intersects,
    serialize_sequence,
    write_point_cloud_csv,
)

from conftest import command_sequences, random_simple_polygon


def line(x, y):
    return SketchEdge(EdgeKind.LINE, (float(x), float(y)))


def arc(x, y, bulge):
    return SketchEdge(EdgeKind.ARC, (float(x), float(y)), float(bulge))


def square(depth=0.5):
    return CommandSequence((line(0, 0), line(1, 0), line(1, 1), line(0, 1)), depth)


def bowtie():
    return CommandSequence((line(0, 0), line(1, 1), line(1, 0), line(0, 1)), 0.5)


# ---------------------------------------------------------------- parsing


def test_parse_square_record():
    record = (
        '{"edges":[{"kind":"line","x":0.0,"y":0.0,"bulge":0.0},'
        '{"kind":"line","x":1.0,"y":0.0,"bulge":0.0},'
        '{"kind":"line","x":1.0,"y":1.0,"bulge":0.0},'
        '{"kind":"line","x":0.0,"y":1.0,"bulge":0.0}],"depth":0.5}'
    )
    seq = parse_sequence(record)
    assert seq == square()


def test_parse_empty_sequence_is_structurally_fine():
    seq = parse_sequence('{"edges":[],"depth":1.0}')
    assert seq.edges == ()
    assert seq.depth == 1.0
    assert not kernel_check(seq).valid


def test_parse_six_edges_is_arity_error():
    edges = ",".join('{"kind":"line","x":%d,"y":0.0,"bulge":0.0}' % i for i in range(6))
    with pytest.raises(ArityError):
        parse_sequence('{"edges":[%s],"depth":0.5}' % edges)


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[1,2,3]",
        '{"edges":[],"depth":0.5,"extra":1}',
        '{"edges":[{"kind":"circle","x":0,"y":0,"bulge":0}],"depth":0.5}',
        '{"edges":[{"kind":"line","x":"a","y":0,"bulge":0}],"depth":0.5}',
        '{"edges":[{"kind":"line","x":0,"y":0,"bulge":0.5}],"depth":0.5}',
        '{"edges":[{"kind":"line","x":0,"y":0,"bulge":0,"junk":1}],"depth":0.5}',
        '{"edges":[{"kind":"line","x":1e999,"y":0,"bulge":0}],"depth":0.5}',
        '{"edges":[]}',
        '{"depth":0.5}',
        '{"edges":[{"kind":"line","x":0,"y":0,"bulge":0}],"depth":true}',
    ],
)
def test_parse_malformed_records(text):
    with pytest.raises(MalformedRecord):
        parse_sequence(text)


def test_serialize_carries_bulge():
    seq = CommandSequence((line(0, 0), arc(0.5, 0.5, 0.3), line(0, 0.5)), 0.25)
    assert '"bulge":0.3' in serialize_sequence(seq)


@given(command_sequences())
@settings(max_examples=300)
def test_parse_serialize_roundtrip(seq):
    assert parse_sequence(serialize_sequence(seq)) == seq


def test_sequence_type_enforces_arity():
    with pytest.raises(ArityError):
        CommandSequence(tuple(line(i, 0) for i in range(6)), 0.5)


def test_line_edge_rejects_bulge():
    with pytest.raises(ValueError):
        SketchEdge(EdgeKind.LINE, (0.0, 0.0), 0.5)


# ---------------------------------------------------------------- discretization


def test_square_discretizes_to_four_vertices():
    poly = discretize_profile(square(), 16)
    assert poly.shape == (4, 2)
    np.testing.assert_array_equal(poly, [[0, 0], [1, 0], [1, 1], [0, 1]])


def test_semicircle_midpoint_sagitta():
    # bulge 1 = semicircle: the single intermediate point sits at chord/2
    # from the chord midpoint (sagitta = bulge * chord / 2).
    seq = CommandSequence((line(0, 0), arc(1, 0, 1.0)), 0.5)
    poly = discretize_profile(seq, 2)
    assert poly.shape == (3, 2)
    mid = poly[1]
    chord_mid = np.array([0.5, 0.0])
    assert math.isclose(np.linalg.norm(mid - chord_mid), 0.5, rel_tol=1e-12)


def test_zero_bulge_arc_equals_line():
    arcs = CommandSequence((line(0, 0), SketchEdge(EdgeKind.ARC, (1.0, 0.0), 0.0), line(1, 1)), 0.5)
    lines = CommandSequence((line(0, 0), line(1, 0), line(1, 1)), 0.5)
    np.testing.assert_array_equal(discretize_profile(arcs, 16), discretize_profile(lines, 16))


def test_arc_points_lie_on_circle():
    seq = CommandSequence((line(0, 0), arc(1, 0, 0.5)), 0.5)
    poly = discretize_profile(seq, 16)
    arc_pts = poly[1:]
    # center for bulge 0.5 over the unit chord: (0.5, 0.375), radius 0.625
    center = np.array([0.5, 0.375])
    radii = np.linalg.norm(arc_pts - center, axis=1)
    np.testing.assert_allclose(radii, 0.625, atol=1e-12)


def test_arc_segments_count():
    seq = CommandSequence((line(0, 0), arc(1, 0, 0.4)), 0.5)
    for segments in (1, 2, 5, 16):
        assert discretize_profile(seq, segments).shape == (1 + segments, 2)


# ---------------------------------------------------------------- area


def shoelace_oracle(poly):
    total = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return total / 2.0


def test_unit_square_area():
    assert polygon_area([[0, 0], [1, 0], [1, 1], [0, 1]]) == 1.0


def test_right_triangle_area():
    assert polygon_area([[0, 0], [1, 0], [0, 1]]) == 0.5


def test_clockwise_square_area_negative():
    assert polygon_area([[0, 0], [0, 1], [1, 1], [1, 0]]) == -1.0


def test_area_matches_oracle_and_negates_on_reversal():
    rng = np.random.default_rng(11)
    for _ in range(200):
        poly = rng.uniform(-1, 1, size=(int(rng.integers(3, 12)), 2))
        area = polygon_area(poly)
        assert abs(area - shoelace_oracle(poly)) < 1e-12
        assert abs(polygon_area(poly[::-1]) + area) < 1e-12


# ---------------------------------------------------------------- self-intersection


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_seg(a, b, p):
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def _segments_cross(a, b, c, d):
    d1, d2 = _orient(a, b, c), _orient(a, b, d)
    d3, d4 = _orient(c, d, a), _orient(c, d, b)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and _on_seg(a, b, c):
        return True
    if d2 == 0 and _on_seg(a, b, d):
        return True
    if d3 == 0 and _on_seg(c, d, a):
        return True
    if d4 == 0 and _on_seg(c, d, b):
        return True
    return False


def self_intersects_oracle(poly):
    n = len(poly)
    edges = [(tuple(poly[i]), tuple(poly[(i + 1) % n])) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return True
    return False


def test_convex_square_not_self_intersecting():
    assert not self_intersects([[0, 0], [1, 0], [1, 1], [0, 1]])


def test_bowtie_self_intersects():
    assert self_intersects([[0, 0], [1, 1], [1, 0], [0, 1]])


def test_vertex_touching_counts_as_intersection():
    # non-adjacent edges meeting at a shared point
    poly = [[0, 0], [2, 0], [2, 2], [1, 0], [0, 2]]
    assert self_intersects(poly)


def test_star_polygons_are_simple():
    rng = np.random.default_rng(5)
    for _ in range(50):
        poly = random_simple_polygon(rng, int(rng.integers(3, 20)))
        assert not self_intersects(poly)


def test_self_intersects_matches_oracle_random():
    rng = np.random.default_rng(17)
    agree = 0
    for _ in range(1500):
        n = int(rng.integers(3, 33))
        poly = rng.uniform(-1, 1, size=(n, 2))
        assert self_intersects(poly) == self_intersects_oracle(poly)
        agree += 1
    assert agree == 1500


@given(st.integers(0, 2**32 - 1), st.integers(3, 32))
@settings(max_examples=150, deadline=None)
def test_self_intersects_matches_oracle_property(seed, n):
    poly = np.random.default_rng(seed).uniform(-1, 1, size=(n, 2))
    assert self_intersects(poly) == self_intersects_oracle(poly)


# ---------------------------------------------------------------- kernel


def test_square_is_valid():
    report = kernel_check(square())
    assert report.valid
    assert report.reasons == ()


def test_negative_depth():
    report = kernel_check(square(depth=-0.1))
    assert not report.valid
    assert report.reasons == (InvalidReason.DEPTH_NON_POSITIVE,)


def test_depth_too_large():
    assert kernel_check(square(depth=1.5)).reasons == (InvalidReason.DEPTH_TOO_LARGE,)
    assert kernel_check(square(depth=1.0)).valid  # boundary included


def test_bowtie_reports_self_intersection():
    report = kernel_check(bowtie())
    assert not report.valid
    assert InvalidReason.SELF_INTERSECTION in report.reasons


def test_too_few_vertices():
    seq = CommandSequence((line(0, 0), line(1, 0)), 0.5)
    assert InvalidReason.TOO_FEW_VERTICES in kernel_check(seq).reasons


def test_out_of_bounds():
    seq = CommandSequence((line(0, 0), line(1.5, 0), line(1, 1)), 0.5)
    assert InvalidReason.OUT_OF_BOUNDS in kernel_check(seq).reasons


def test_bulge_out_of_range():
    seq = CommandSequence((line(0, 0), arc(1, 0, 1.25), line(1, 1)), 0.5)
    assert InvalidReason.BULGE_OUT_OF_RANGE in kernel_check(seq).reasons
    ok = CommandSequence((line(0, 0), arc(1, 0, 1.0), line(1, 1)), 0.5)
    assert InvalidReason.BULGE_OUT_OF_RANGE not in kernel_check(ok).reasons


def test_degenerate_adjacent_vertices():
    seq = CommandSequence((line(0, 0), line(0, 5e-4), line(1, 1)), 0.5)
    report = kernel_check(seq)
    assert InvalidReason.DEGENERATE_ADJACENT_VERTICES in report.reasons
    # polygon checks are skipped for degenerate input
    assert InvalidReason.SELF_INTERSECTION not in report.reasons


def test_near_zero_area():
    seq = CommandSequence((line(0, 0), line(1, 0), line(0.5, 1e-4)), 0.5)
    assert InvalidReason.NEAR_ZERO_AREA in kernel_check(seq).reasons


def test_multiple_reasons_reported_sorted():
    seq = CommandSequence((line(0, 0), line(1.5, 0)), -1.0)
    report = kernel_check(seq)
    assert report.reasons == (
        InvalidReason.TOO_FEW_VERTICES,
        InvalidReason.OUT_OF_BOUNDS,
        InvalidReason.DEPTH_NON_POSITIVE,
    )


@given(command_sequences(coord=st.floats(-3, 3, allow_nan=False), bulge=st.floats(-3, 3, allow_nan=False), depth=st.floats(-2, 2, allow_nan=False)))
@settings(max_examples=300, deadline=None)
def test_kernel_total_deterministic_valid_iff_no_reasons(seq):
    first = kernel_check(seq)
    second = kernel_check(seq)
    assert first == second
    assert first.valid == (len(first.reasons) == 0)


# ---------------------------------------------------------------- point sampling


def test_cloud_inside_unit_box():
    seq = square(depth=1.0)
    cloud = sample_point_cloud(seq, 1000, seed=3)
    assert cloud.count == 1000
    assert cloud.points.shape == (1000, 3)
    assert (cloud.points >= 0).all() and (cloud.points <= 1).all()


def test_cloud_deterministic():
    seq = square()
    a = sample_point_cloud(seq, 256, seed=42)
    b = sample_point_cloud(seq, 256, seed=42)
    np.testing.assert_array_equal(a.points, b.points)
    c = sample_point_cloud(seq, 256, seed=43)
    assert not np.array_equal(a.points, c.points)


def test_cloud_rejects_infeasible():
    with pytest.raises(InfeasibleSolid):
        sample_point_cloud(square(depth=-1.0), 10, seed=0)


def test_triangle_cloud_statistics():
    depth = 0.8
    seq = CommandSequence((line(0, 0), line(1, 0), line(0, 1)), depth)
    n = 100_000
    cloud = sample_point_cloud(seq, n, seed=7)
    xy = cloud.points[:, :2]
    assert ((xy[:, 0] + xy[:, 1]) < 1.0 + 1e-12).mean() > 0.9999
    mean_z = cloud.points[:, 2].mean()
    se = depth / math.sqrt(12.0 * n)
    assert abs(mean_z - depth / 2.0) < 3.0 * se


def test_monte_carlo_volume_triangle():
    seq = CommandSequence((line(0, 0), line(1, 0), line(0, 1)), 0.6)
    estimate = monte_carlo_volume(seq, 200_000, seed=5)
    expected = 0.5 * 0.6
    assert abs(estimate - expected) / expected < 0.02


def test_points_in_polygon_even_odd():
    poly = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    pts = np.array([[0.5, 0.5], [1.5, 0.5], [-0.1, 0.2], [0.25, 0.99]])
    np.testing.assert_array_equal(points_in_polygon(pts, poly), [True, False, False, True])


def test_point_cloud_csv(tmp_path):
    cloud = sample_point_cloud(square(), 8, seed=1)
    path = tmp_path / "cloud.csv"
    write_point_cloud_csv(cloud, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,z"
    assert len(lines) == 9
    first = [float(v) for v in lines[1].split(",")]
    np.testing.assert_allclose(first, cloud.points[0])
