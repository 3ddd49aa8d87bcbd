import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcgvt import tensorgrad as tg
from gcgvt.geoembed import (ConfigurationError, GeoCategory, GeoFormatError, GeoLayerSet,
                            GeoPolygon, PatchGrid, aggregate, clip_polygon_to_rect, embed_geo,
                            load_geo_layers, ring_area)

from .oracles import points_in_polygon, random_star_polygon, raster_aggregate

UNIT = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def single_category(polys, extent=(8.0, 8.0), variables=("a",)):
    cat = GeoCategory("cat", list(variables), [GeoPolygon(r, v) for r, v in polys])
    return GeoLayerSet([cat], extent)


# --- clipping and area ----------------------------------------------------------

def test_triangle_inside_rect_is_unchanged():
    tri = [(1.0, 1.0), (3.0, 1.0), (2.0, 2.5)]
    assert clip_polygon_to_rect(tri, (0, 0, 4, 4)) == tri


def test_polygon_equal_to_rect_returns_its_corners():
    rect = (0.0, 0.0, 2.0, 3.0)
    ring = [(0.0, 0.0), (2.0, 0.0), (2.0, 3.0), (0.0, 3.0)]
    assert sorted(clip_polygon_to_rect(ring, rect)) == sorted(ring)


def test_half_overlap_square():
    clipped = clip_polygon_to_rect(UNIT, (0.5, 0.0, 1.5, 1.0))
    assert ring_area(clipped) == pytest.approx(0.5, abs=1e-15)
    # shoelace of the analytic answer
    assert ring_area([(0.5, 0), (1, 0), (1, 1), (0.5, 1)]) == 0.5
    # Monte-Carlo point-in-polygon oracle, 10^6 samples over the clip window
    rng = np.random.default_rng(0)
    pts = rng.uniform([0.5, 0.0], [1.5, 1.0], size=(1_000_000, 2))
    mc_area = points_in_polygon(pts, UNIT).mean() * 1.0
    assert abs(mc_area - ring_area(clipped)) < 1e-2


def test_disjoint_clip_is_empty():
    assert clip_polygon_to_rect(UNIT, (2, 2, 3, 3)) == []


def test_clip_rejects_degenerate_inputs():
    with pytest.raises(GeoFormatError):
        clip_polygon_to_rect([(0, 0), (1, 1)], (0, 0, 1, 1))
    with pytest.raises(ValueError):
        clip_polygon_to_rect(UNIT, (0, 0, 0, 1))


def test_ring_area_examples():
    assert ring_area(UNIT) == 1.0
    assert ring_area(UNIT[::-1]) == 1.0
    assert ring_area([(0, 0), (4, 0), (0, 3)]) == 6.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_clip_area_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    ring = random_star_polygon(rng, center=(2, 2), radius=(0.5, 2.5), n=7)
    rect = (1.0, 0.5, 3.5, 2.5)
    pts = rng.uniform(rect[:2], rect[2:], size=(40_000, 2))
    mc = points_in_polygon(pts, ring).mean() * 2.5 * 2.0
    assert abs(ring_area(clip_polygon_to_rect(ring, rect)) - mc) < 0.1


# --- ingest validation ------------------------------------------------------------

def test_polygon_ingest_rules():
    with pytest.raises(GeoFormatError, match="3 vertices"):
        GeoPolygon([(0, 0), (1, 1)], {})
    with pytest.raises(GeoFormatError, match="self-intersecting"):
        GeoPolygon([(0, 0), (1, 1), (1, 0), (0, 1)], {})
    with pytest.raises(GeoFormatError, match="outside"):
        GeoPolygon(UNIT, {"a": 101.0})
    with pytest.raises(GeoFormatError, match="missing variables"):
        GeoCategory("c", ["a", "b"], [GeoPolygon(UNIT, {"a": 1.0})])


def test_load_reports_json_position(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"image_extent": [8, 8],\n "categories": [}')
    with pytest.raises(GeoFormatError, match="line 2"):
        load_geo_layers(bad)
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"image_extent": [8, 8], "categories": [{"name": "c"}]}))
    with pytest.raises(GeoFormatError, match=r"categories\[0\].*missing field"):
        load_geo_layers(missing)


def test_layers_round_trip_dict():
    layers = single_category([(UNIT, {"a": 12.5})], extent=(1.0, 1.0))
    again = GeoLayerSet.from_dict(json.loads(json.dumps(layers.to_dict())))
    assert again == layers


# --- aggregation -------------------------------------------------------------------

def test_full_cover_single_segment():
    layers = single_category([([(0, 0), (8, 0), (8, 8), (0, 8)], {"a": 42.0})])
    m = aggregate(layers, PatchGrid.for_extent((8, 8), 4))
    npt.assert_array_equal(m.values[0], np.full((4, 1), 42.0))
    npt.assert_array_equal(m.coverage, np.ones(4))


def test_equal_area_segments_average():
    layers = single_category([([(0, 0), (4, 0), (4, 8), (0, 8)], {"a": 10.0}),
                              ([(4, 0), (8, 0), (8, 8), (4, 8)], {"a": 30.0})])
    m = aggregate(layers, PatchGrid.for_extent((8, 8), 8))
    assert m.values[0][0, 0] == 20.0


def test_zero_coverage_patch_is_zero(caplog):
    layers = single_category([([(0, 0), (4, 0), (4, 4), (0, 4)], {"a": 55.0})])
    m = aggregate(layers, PatchGrid.for_extent((8, 8), 4))
    npt.assert_array_equal(m.values[0][:, 0], [55.0, 0, 0, 0])
    npt.assert_array_equal(m.coverage, [1, 0, 0, 0])
    assert "coverage" in caplog.text


def random_layers(rng, n_polys=3, extent=16.0, n_vars=2):
    polys = []
    for _ in range(n_polys):
        c = rng.uniform(0, extent, 2)
        ring = random_star_polygon(rng, center=c, radius=(1.0, extent / 2), n=int(rng.integers(4, 9)))
        polys.append((ring, {f"v{j}": float(rng.uniform(0, 100)) for j in range(n_vars)}))
    return single_category(polys, (extent, extent), [f"v{j}" for j in range(n_vars)])


@pytest.mark.parametrize("seed", range(20))
def test_aggregate_matches_rasterisation(seed):
    rng = np.random.default_rng(seed)
    layers = random_layers(rng)
    grid = PatchGrid.for_extent((16, 16), 4)
    ours = aggregate(layers, grid)
    ref, ref_cov = raster_aggregate(layers, grid, 512)
    # averages over slivers thinner than one sample are not resolvable by the raster
    seen = ref_cov > 1e-2
    assert np.max(np.abs(ours.values[0][seen] - ref[0][seen])) < 0.05
    assert np.max(np.abs(ours.coverage - ref_cov)) < 0.01


def test_order_and_scale_invariance_exact():
    rng = np.random.default_rng(42)
    layers = random_layers(rng, n_polys=5)
    grid = PatchGrid.for_extent((16, 16), 4)
    base = aggregate(layers, grid)

    cat = layers.categories[0]
    shuffled = GeoLayerSet([GeoCategory(cat.name, cat.variables, cat.polygons[::-1])], layers.image_extent)
    assert all(np.array_equal(a, b) for a, b in zip(aggregate(shuffled, grid).values, base.values))

    scaled_polys = [GeoPolygon([(2 * x, 2 * y) for x, y in p.ring], p.values) for p in cat.polygons]
    scaled = GeoLayerSet([GeoCategory(cat.name, cat.variables, scaled_polys)], (32.0, 32.0))
    got = aggregate(scaled, PatchGrid.for_extent((32, 32), 8))
    assert all(np.array_equal(a, b) for a, b in zip(got.values, base.values))


def test_aggregate_is_convex_combination():
    rng = np.random.default_rng(5)
    layers = random_layers(rng, n_polys=4, n_vars=1)
    m = aggregate(layers, PatchGrid.for_extent((16, 16), 4))
    vals = [p.values["v0"] for p in layers.categories[0].polygons]
    covered = m.coverage > 0
    assert (m.values[0][covered, 0] >= min(vals) - 1e-9).all()
    assert (m.values[0][covered, 0] <= max(vals) + 1e-9).all()
    assert ((m.coverage >= 0) & (m.coverage <= 1)).all()


def test_segment_areas_of_fully_covered_patch_sum_to_patch_area():
    # partition of an 8x8 square into three polygons
    parts = [[(0, 0), (5, 0), (3, 8), (0, 8)], [(5, 0), (8, 0), (8, 3)], [(5, 0), (8, 3), (8, 8), (3, 8)]]
    rect = (2.0, 2.0, 6.0, 6.0)
    total = sum(ring_area(clip_polygon_to_rect(p, rect)) for p in parts)
    assert total == pytest.approx(16.0, rel=1e-6)


def test_csv_export_layout():
    layers = GeoLayerSet([
        GeoCategory("inc", ["x", "y"], [GeoPolygon([(0, 0), (8, 0), (8, 8), (0, 8)], {"x": 1.0, "y": 2.5})]),
        GeoCategory("edu", ["z"], [GeoPolygon([(0, 0), (4, 0), (4, 8), (0, 8)], {"z": 3.0})]),
    ], (8.0, 8.0))
    text = aggregate(layers, PatchGrid.for_extent((8, 8), 4)).to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "patch_row,patch_col,coverage,inc.x,inc.y,edu.z"
    assert lines[1] == "0,0,1.000000,1.000000,2.500000,3.000000"
    assert lines[2] == "0,1,1.000000,1.000000,2.500000,0.000000"
    assert len(lines) == 5


# --- projection ----------------------------------------------------------------------

def _blocks(rng, n_patches=6, sizes=(3, 2, 4)):
    return [tg.Tensor(rng.uniform(0, 1, (n_patches, k))) for k in sizes]


def test_zero_projection_gives_zero_embedding():
    rng = np.random.default_rng(0)
    blocks = _blocks(rng)
    w = [tg.Tensor(np.zeros((b.shape[1], 4))) for b in blocks]
    bias = [tg.Tensor(np.zeros(4)) for _ in blocks]
    npt.assert_array_equal(embed_geo(blocks, w, bias, 12).data, np.zeros((6, 12)))


def test_identity_projection_reproduces_values():
    x = np.random.default_rng(1).uniform(0, 100, (5, 4))
    out = embed_geo([tg.Tensor(x)], [tg.Tensor(np.eye(4))], [tg.Tensor(np.zeros(4))], 4)
    npt.assert_array_equal(out.data, x)


def test_category_permutation_permutes_output_blocks():
    rng = np.random.default_rng(2)
    blocks = _blocks(rng)
    w = [tg.Tensor(rng.normal(size=(b.shape[1], 4))) for b in blocks]
    bias = [tg.Tensor(rng.normal(size=4)) for _ in blocks]
    base = embed_geo(blocks, w, bias).data
    perm = [2, 0, 1]
    permuted = embed_geo([blocks[i] for i in perm], [w[i] for i in perm], [bias[i] for i in perm]).data
    for new_pos, old in enumerate(perm):
        npt.assert_array_equal(permuted[:, 4 * new_pos:4 * new_pos + 4], base[:, 4 * old:4 * old + 4])


def test_zeroing_one_category_changes_only_its_slice():
    rng = np.random.default_rng(3)
    blocks = _blocks(rng)
    w = [tg.Tensor(rng.normal(size=(b.shape[1], 4))) for b in blocks]
    bias = [tg.Tensor(rng.normal(size=4)) for _ in blocks]
    base = embed_geo(blocks, w, bias).data
    blocks[1] = tg.Tensor(np.zeros_like(blocks[1].data))
    out = embed_geo(blocks, w, bias).data
    npt.assert_array_equal(out[:, :4], base[:, :4])
    npt.assert_array_equal(out[:, 8:], base[:, 8:])
    assert not np.array_equal(out[:, 4:8], base[:, 4:8])


def test_embed_dimension_mismatch():
    rng = np.random.default_rng(4)
    blocks = _blocks(rng)
    w = [tg.Tensor(np.zeros((b.shape[1], 4))) for b in blocks]
    bias = [tg.Tensor(np.zeros(4)) for _ in blocks]
    with pytest.raises(ConfigurationError):
        embed_geo(blocks, w, bias, d_model=16)
    with pytest.raises(ConfigurationError):
        embed_geo(blocks, w[::-1], bias, d_model=12)
